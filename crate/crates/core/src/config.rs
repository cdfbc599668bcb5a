//! Scenario files: TOML with one section per concern and `[[node]]`,
//! `[[channel]]`, `[[wired_link]]` and `[[flow]]` tables.
//!
//! Loading validates everything and reports all problems at once, each
//! with the table and line it came from.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::radio::{ChannelMask, PhyProfile, RadioConfig, Standard};
use crate::sip::ProxyMode;
use crate::stack::NodeId;
use crate::voip::{validate_spurts, TalkSpurt};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub duration_s: f64,
    pub seed: u64,
    /// PHY used by `run`; `compare` runs both.
    pub phy: Standard,
    #[serde(default)]
    pub radio: RadioSection,
    #[serde(default)]
    pub mac: MacSection,
    #[serde(default, skip_serializing_if = "PhyOverrides::is_empty")]
    pub phy_overrides: PhyOverrides,
    #[serde(default)]
    pub signaling: SignalingSection,
    #[serde(default)]
    pub jitter: JitterSection,
    #[serde(default)]
    pub mobility: MobilitySection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default, rename = "channel")]
    pub channels: Vec<ChannelSpec>,
    #[serde(default, rename = "node")]
    pub nodes: Vec<NodeSpec>,
    #[serde(default, rename = "wired_link", skip_serializing_if = "Vec::is_empty")]
    pub wired_links: Vec<WiredLinkSpec>,
    #[serde(default, rename = "flow")]
    pub flows: Vec<FlowSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RadioSection {
    pub tx_power_dbm: f64,
    pub antenna_gain_db: f64,
    pub noise_floor_dbm: f64,
    pub antenna_height_m: f64,
}

impl Default for RadioSection {
    fn default() -> Self {
        let r = RadioConfig::default();
        Self {
            tx_power_dbm: r.tx_power_dbm,
            antenna_gain_db: r.antenna_gain_db,
            noise_floor_dbm: r.noise_floor_dbm,
            antenna_height_m: 1.5,
        }
    }
}

impl RadioSection {
    pub fn radio_config(&self) -> RadioConfig {
        RadioConfig {
            tx_power_dbm: self.tx_power_dbm,
            antenna_gain_db: self.antenna_gain_db,
            noise_floor_dbm: self.noise_floor_dbm,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacSection {
    pub retry_limit: u32,
    pub queue_capacity: usize,
}

impl Default for MacSection {
    fn default() -> Self {
        Self {
            retry_limit: crate::mac::DEFAULT_RETRY_LIMIT,
            queue_capacity: crate::stack::DEFAULT_QUEUE_CAPACITY,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhyOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sifs_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preamble_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cw_min: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cw_max: Option<u32>,
}

impl PhyOverrides {
    pub fn is_empty(&self) -> bool {
        *self == PhyOverrides::default()
    }

    pub fn apply(&self, mut phy: PhyProfile) -> PhyProfile {
        if let Some(v) = self.slot_us {
            phy.slot = SimTime(v);
        }
        if let Some(v) = self.sifs_us {
            phy.sifs = SimTime(v);
        }
        if let Some(v) = self.preamble_us {
            phy.preamble = SimTime(v);
        }
        if let Some(v) = self.cw_min {
            phy.cw_min = v;
        }
        if let Some(v) = self.cw_max {
            phy.cw_max = v;
        }
        phy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyModeSpec {
    Proxy,
    Redirect,
}

impl From<ProxyModeSpec> for ProxyMode {
    fn from(m: ProxyModeSpec) -> Self {
        match m {
            ProxyModeSpec::Proxy => ProxyMode::Proxy,
            ProxyModeSpec::Redirect => ProxyMode::Redirect,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalingSection {
    pub proxy: NodeId,
    pub mode: ProxyModeSpec,
    pub retransmit_ms: u64,
    pub max_attempts: u32,
    pub request_bytes: u32,
    pub response_bytes: u32,
    /// When every user agent sends its REGISTER.
    pub register_at_s: f64,
    pub ring_delay_s: f64,
}

impl Default for SignalingSection {
    fn default() -> Self {
        Self {
            proxy: 10,
            mode: ProxyModeSpec::Proxy,
            retransmit_ms: 500,
            max_attempts: 7,
            request_bytes: 500,
            response_bytes: 300,
            register_at_s: 1.0,
            ring_delay_s: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterSection {
    pub playout_ms: u64,
    pub capacity_ms: u64,
}

impl Default for JitterSection {
    fn default() -> Self {
        Self {
            playout_ms: 60,
            capacity_ms: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySection {
    pub reevaluate_s: f64,
}

impl Default for MobilitySection {
    fn default() -> Self {
        Self { reevaluate_s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub bucket_s: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { bucket_s: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    #[default]
    Wireless,
    /// Point-to-point links listed under `[[wired_link]]`.
    Wired,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    /// Position in the node masks, 0..=3 read left to right.
    pub index: usize,
    pub frequency_ghz: f64,
    #[serde(default)]
    pub medium: Medium,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointSpec {
    pub x: f64,
    pub y: f64,
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: NodeId,
    pub x: f64,
    pub y: f64,
    pub mask: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub antenna_height_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub move_at_s: Option<f64>,
    #[serde(default, rename = "waypoint", skip_serializing_if = "Vec::is_empty")]
    pub waypoints: Vec<WaypointSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WiredLinkSpec {
    pub a: NodeId,
    pub b: NodeId,
    pub channel: usize,
    pub rate_mbps: f64,
    pub delay_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FlowSpec {
    Voip(VoipFlowSpec),
    Ftp(FtpFlowSpec),
    Cbr(CbrFlowSpec),
}

impl FlowSpec {
    pub fn id(&self) -> &str {
        match self {
            FlowSpec::Voip(f) => &f.id,
            FlowSpec::Ftp(f) => &f.id,
            FlowSpec::Cbr(f) => &f.id,
        }
    }

    pub fn endpoints(&self) -> (NodeId, NodeId) {
        match self {
            FlowSpec::Voip(f) => (f.src, f.dst),
            FlowSpec::Ftp(f) => (f.src, f.dst),
            FlowSpec::Cbr(f) => (f.src, f.dst),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            FlowSpec::Voip(_) => "voip",
            FlowSpec::Ftp(_) => "ftp",
            FlowSpec::Cbr(_) => "cbr",
        }
    }
}

/// Talk spurt as `[start, stop]` seconds after establishment.
pub type SpurtSpec = [f64; 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoipFlowSpec {
    pub id: String,
    /// Caller.
    pub src: NodeId,
    /// Callee.
    pub dst: NodeId,
    pub invite_at_s: f64,
    pub bye_at_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_delay_s: Option<f64>,
    #[serde(default)]
    pub initiator_spurts: Vec<SpurtSpec>,
    #[serde(default)]
    pub receiver_spurts: Vec<SpurtSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FtpFlowSpec {
    pub id: String,
    /// Client; receives the data.
    pub src: NodeId,
    /// Server; sends the data.
    pub dst: NodeId,
    pub start_s: f64,
    pub item_bytes: u64,
    pub chunk_bytes: u32,
    pub window: u32,
    pub rto_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbrFlowSpec {
    pub id: String,
    pub src: NodeId,
    pub dst: NodeId,
    pub start_s: f64,
    pub stop_s: f64,
    pub payload_bytes: u32,
    pub interval_ms: u64,
}

pub fn spurts(specs: &[SpurtSpec]) -> Vec<TalkSpurt> {
    specs
        .iter()
        .map(|&[a, b]| TalkSpurt::new(SimTime::from_secs_f64(a), SimTime::from_secs_f64(b)))
        .collect()
}

/// One validation problem, with where it was found.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub context: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.context, self.message),
            None => write!(f, "{}: {}", self.context, self.message),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("{} validation error(s):\n{}", .0.len(), .0.iter().map(|i| format!("  {i}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<ConfigIssue>),
    #[error("cannot serialize scenario: {0}")]
    Emit(String),
}

impl ConfigError {
    pub fn issues(&self) -> &[ConfigIssue] {
        match self {
            ConfigError::Invalid(v) => v,
            _ => &[],
        }
    }
}

/// Line (1-based) of the `n`-th occurrence of the array-table header `[[name]]`.
fn table_line(source: Option<&str>, name: &str, n: usize) -> Option<usize> {
    let header = format!("[[{name}]]");
    source?
        .lines()
        .enumerate()
        .filter(|(_, l)| l.trim() == header)
        .nth(n)
        .map(|(i, _)| i + 1)
}

impl ScenarioConfig {
    pub fn from_toml_str(source: &str) -> Result<Self, ConfigError> {
        let cfg: ScenarioConfig = toml::from_str(source).map_err(|e| {
            let msg = e.message().to_string();
            match e.span() {
                Some(span) => {
                    let line = source[..span.start].matches('\n').count() + 1;
                    ConfigError::Parse(format!("line {line}: {msg}"))
                }
                None => ConfigError::Parse(msg),
            }
        })?;
        cfg.validate_with_source(Some(source))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        toml::to_string(self).map_err(|e| ConfigError::Emit(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.validate_with_source(None)
    }

    fn validate_with_source(&self, source: Option<&str>) -> Result<(), ConfigError> {
        let mut issues = Vec::new();
        let mut push = |context: String, line: Option<usize>, message: String| {
            issues.push(ConfigIssue {
                context,
                line,
                message,
            })
        };

        if self.nodes.is_empty() {
            push("scenario".into(), None, "no nodes declared".into());
        }
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            push(
                "scenario".into(),
                None,
                format!("duration_s must be positive, got {}", self.duration_s),
            );
        }
        if !(self.metrics.bucket_s > 0.0) {
            push("metrics".into(), None, "bucket_s must be positive".into());
        }
        if !(self.mobility.reevaluate_s > 0.0) {
            push(
                "mobility".into(),
                None,
                "reevaluate_s must be positive".into(),
            );
        }
        if self.mac.queue_capacity == 0 {
            push("mac".into(), None, "queue_capacity must be positive".into());
        }
        if self.signaling.max_attempts == 0 || self.signaling.retransmit_ms == 0 {
            push(
                "signaling".into(),
                None,
                "max_attempts and retransmit_ms must be positive".into(),
            );
        }

        let mut channel_set = BTreeSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            let ctx = format!("channel {}", ch.index);
            let line = table_line(source, "channel", i);
            if ch.index >= ChannelMask::WIDTH {
                push(
                    ctx.clone(),
                    line,
                    format!("index must be below {}", ChannelMask::WIDTH),
                );
            }
            if !channel_set.insert(ch.index) {
                push(ctx.clone(), line, "duplicate channel index".into());
            }
            if !(ch.frequency_ghz > 0.0) {
                push(ctx, line, "frequency_ghz must be positive".into());
            }
        }

        let mut node_ids = HashSet::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let ctx = format!("node {}", n.id);
            let line = table_line(source, "node", i);
            if !node_ids.insert(n.id) {
                push(ctx.clone(), line, "duplicate node id".into());
            }
            match n.mask.parse::<ChannelMask>() {
                Ok(mask) => {
                    if mask.is_empty() {
                        push(ctx.clone(), line, "mask selects no channel".into());
                    }
                    for c in mask.channels() {
                        if !channel_set.contains(&c) {
                            push(
                                ctx.clone(),
                                line,
                                format!("mask {} selects undeclared channel {c}", n.mask),
                            );
                        }
                    }
                }
                Err(e) => push(ctx.clone(), line, e.to_string()),
            }
            if n.antenna_height_m.is_some_and(|h| !(h > 0.0)) {
                push(
                    ctx.clone(),
                    line,
                    "antenna_height_m must be positive".into(),
                );
            }
            for (k, w) in n.waypoints.iter().enumerate() {
                if !(w.speed > 0.0 && w.speed.is_finite()) {
                    push(
                        ctx.clone(),
                        line,
                        format!("waypoint {k}: speed must be positive"),
                    );
                }
            }
        }

        let known = |id: NodeId| node_ids.contains(&id);
        if !known(self.signaling.proxy) && !self.nodes.is_empty() {
            push(
                "signaling".into(),
                None,
                format!("proxy node {} is not declared", self.signaling.proxy),
            );
        }

        for (i, l) in self.wired_links.iter().enumerate() {
            let ctx = format!("wired_link {}-{}", l.a, l.b);
            let line = table_line(source, "wired_link", i);
            for end in [l.a, l.b] {
                if !known(end) {
                    push(ctx.clone(), line, format!("unknown node {end}"));
                }
            }
            match self.channels.iter().find(|c| c.index == l.channel) {
                Some(c) if c.medium == Medium::Wired => {}
                Some(_) => push(
                    ctx.clone(),
                    line,
                    format!("channel {} is not wired", l.channel),
                ),
                None => push(
                    ctx.clone(),
                    line,
                    format!("undeclared channel {}", l.channel),
                ),
            }
            if !(l.rate_mbps > 0.0) {
                push(ctx, line, "rate_mbps must be positive".into());
            }
        }

        let mut flow_ids = HashSet::new();
        for (i, f) in self.flows.iter().enumerate() {
            let ctx = format!("flow '{}'", f.id());
            let line = table_line(source, "flow", i);
            if !flow_ids.insert(f.id().to_string()) {
                push(ctx.clone(), line, "duplicate flow id".into());
            }
            let (src, dst) = f.endpoints();
            for end in [src, dst] {
                if !known(end) {
                    push(ctx.clone(), line, format!("unknown node {end}"));
                }
            }
            if src == dst {
                push(
                    ctx.clone(),
                    line,
                    "source and destination are the same node".into(),
                );
            }
            match f {
                FlowSpec::Voip(v) => {
                    if !(v.invite_at_s >= 0.0 && v.bye_at_s > v.invite_at_s) {
                        push(ctx.clone(), line, "need 0 <= invite_at_s < bye_at_s".into());
                    }
                    if v.ring_delay_s.is_some_and(|r| !(r >= 0.0)) {
                        push(
                            ctx.clone(),
                            line,
                            "ring_delay_s must be non-negative".into(),
                        );
                    }
                    for (side, s) in [
                        ("initiator", &v.initiator_spurts),
                        ("receiver", &v.receiver_spurts),
                    ] {
                        if s.iter().flatten().any(|x| !(*x >= 0.0)) {
                            push(
                                ctx.clone(),
                                line,
                                format!("{side} spurt offsets must be non-negative"),
                            );
                        } else if let Err(e) = validate_spurts(&spurts(s)) {
                            push(ctx.clone(), line, format!("{side} spurts: {e}"));
                        }
                    }
                }
                FlowSpec::Ftp(p) => {
                    if p.item_bytes == 0 || p.chunk_bytes == 0 || p.window == 0 || p.rto_ms == 0 {
                        push(
                            ctx.clone(),
                            line,
                            "item_bytes, chunk_bytes, window and rto_ms must be positive".into(),
                        );
                    }
                    if crate::stack::encapsulate(p.chunk_bytes.max(1), false).is_err() {
                        push(
                            ctx.clone(),
                            line,
                            format!("chunk of {} bytes exceeds the MTU", p.chunk_bytes),
                        );
                    }
                    if !(p.start_s >= 0.0) {
                        push(ctx, line, "start_s must be non-negative".into());
                    }
                }
                FlowSpec::Cbr(c) => {
                    if !(c.start_s >= 0.0 && c.stop_s > c.start_s) {
                        push(ctx.clone(), line, "need 0 <= start_s < stop_s".into());
                    }
                    if c.payload_bytes == 0 || c.interval_ms == 0 {
                        push(
                            ctx.clone(),
                            line,
                            "payload_bytes and interval_ms must be positive".into(),
                        );
                    }
                    if crate::stack::encapsulate(c.payload_bytes.max(1), false).is_err() {
                        push(
                            ctx,
                            line,
                            format!("payload of {} bytes exceeds the MTU", c.payload_bytes),
                        );
                    }
                }
            }
        }

        if issues.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(issues))
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.duration_s)
    }

    pub fn phy_profile(&self, standard: Standard) -> PhyProfile {
        self.phy_overrides.apply(PhyProfile::for_standard(standard))
    }
}

pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ScenarioConfig::from_toml_str(&source)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
name = "small"
duration_s = 10.0
seed = 1
phy = "b"

[[channel]]
index = 1
frequency_ghz = 2.401

[[node]]
id = 1
x = 0.0
y = 0.0
mask = "0100"

[[node]]
id = 10
x = 10.0
y = 0.0
mask = "0100"

[[flow]]
kind = "cbr"
id = "c"
src = 1
dst = 10
start_s = 1.0
stop_s = 2.0
payload_bytes = 512
interval_ms = 20
"#;

    #[test]
    fn small_file_loads_and_round_trips() {
        let cfg = ScenarioConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(cfg.nodes.len(), 2);
        assert_eq!(cfg.signaling, SignalingSection::default());
        let again = ScenarioConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn empty_file_reports_missing_nodes() {
        let err = ScenarioConfig::from_toml_str(
            "name = \"x\"\nduration_s = 1.0\nseed = 0\nphy = \"a\"\n",
        )
        .unwrap_err();
        assert!(
            err.issues()
                .iter()
                .any(|i| i.message == "no nodes declared"),
            "{err}"
        );
    }

    #[test]
    fn unknown_node_names_flow_and_line() {
        let src = SMALL.replace("dst = 10", "dst = 99");
        let err = ScenarioConfig::from_toml_str(&src).unwrap_err();
        let issue = err
            .issues()
            .iter()
            .find(|i| i.message.contains("99"))
            .expect("reported");
        assert_eq!(issue.context, "flow 'c'");
        assert_eq!(
            issue.line,
            Some(src.lines().position(|l| l == "[[flow]]").unwrap() + 1)
        );
    }

    #[test]
    fn collects_every_problem() {
        let src = SMALL
            .replace(
                "mask = \"0100\"\n\n[[node]]\nid = 10",
                "mask = \"0010\"\n\n[[node]]\nid = 10",
            )
            .replace("dst = 10", "dst = 98");
        let err = ScenarioConfig::from_toml_str(&src).unwrap_err();
        let msgs: Vec<_> = err.issues().iter().map(|i| i.to_string()).collect();
        assert!(
            msgs.iter().any(|m| m.contains("undeclared channel 2")),
            "{msgs:?}"
        );
        assert!(
            msgs.iter().any(|m| m.contains("unknown node 98")),
            "{msgs:?}"
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let src = SMALL.replace("seed = 1", "seed = 1\nbogus = 3");
        assert!(matches!(
            ScenarioConfig::from_toml_str(&src),
            Err(ConfigError::Parse(_))
        ));
    }
}
