//! The shipped scenario, the two-arm comparison and output emission.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use crate::config::ScenarioConfig;
use crate::engine::SimTime;
use crate::metrics::{RunReport, TimelineRow, FAMILY_KEYS};
use crate::network::{run_once, RunError, RunOptions};
use crate::radio::Standard;

pub const SHIPPED_SCENARIO_TOML: &str = include_str!("../scenarios/two_wlan.toml");

pub fn shipped_scenario() -> ScenarioConfig {
    ScenarioConfig::from_toml_str(SHIPPED_SCENARIO_TOML).expect("shipped scenario is valid")
}

/// Which arm a metric is expected to be larger on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Expectation {
    Greater(Standard),
    /// Equal within the given relative tolerance.
    Equal(f64),
}

impl Expectation {
    fn describe(&self) -> String {
        match self {
            Expectation::Greater(Standard::A) => "a > b".into(),
            Expectation::Greater(Standard::B) => "b > a".into(),
            Expectation::Equal(tol) => format!("a = b (±{:.0}%)", tol * 100.0),
        }
    }
}

/// Expected ordering of each headline metric.
pub fn expectation(metric: &str) -> Option<Expectation> {
    Some(match metric {
        "ftp_server_peak_bps" | "ftp_client_peak_bps" => Expectation::Greater(Standard::A),
        "cbr_mean_delay_ms" | "jitter_drops" | "mac_retx_ack_timeout" | "fifo_avg_wait_ms" => {
            Expectation::Greater(Standard::B)
        }
        "cbr_throughput_bps" => Expectation::Equal(0.01),
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub metric: String,
    pub first: f64,
    pub second: f64,
    /// `second / first`; `None` when `first` is zero.
    pub ratio: Option<f64>,
    pub expectation: Option<Expectation>,
    /// `None` when the arms use the same PHY and no ordering applies.
    pub holds: Option<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub first: RunReport,
    pub second: RunReport,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn from_reports(first: RunReport, second: RunReport) -> Self {
        let rows = FAMILY_KEYS
            .iter()
            .map(|&metric| {
                let a = first.scalar(metric).unwrap_or(0.0);
                let b = second.scalar(metric).unwrap_or(0.0);
                let ratio = (a != 0.0).then(|| b / a);
                let exp = expectation(metric);
                let holds = match exp {
                    _ if first.phy == second.phy => None,
                    Some(Expectation::Greater(std)) => {
                        let (big, small) = if first.phy == std { (a, b) } else { (b, a) };
                        Some(big > small)
                    }
                    Some(Expectation::Equal(tol)) => {
                        let scale = a.abs().max(b.abs());
                        Some(scale == 0.0 || (a - b).abs() <= tol * scale)
                    }
                    None => None,
                };
                ComparisonRow {
                    metric: metric.to_string(),
                    first: a,
                    second: b,
                    ratio,
                    expectation: exp,
                    holds,
                }
            })
            .collect();
        Self {
            first,
            second,
            rows,
        }
    }

    pub fn orderings_hold(&self) -> bool {
        self.rows.iter().all(|r| r.holds != Some(false))
    }

    pub fn row(&self, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    /// The same comparison with the arms swapped.
    pub fn swapped(&self) -> Self {
        Self::from_reports(self.second.clone(), self.first.clone())
    }

    /// The arm that ran with `phy`.
    pub fn arm(&self, phy: Standard) -> Option<&RunReport> {
        [&self.first, &self.second]
            .into_iter()
            .find(|r| r.phy == phy)
    }
}

/// Runs both arms on their own threads with identical scenario and seed.
pub fn run_pair(
    cfg: &ScenarioConfig,
    first: Standard,
    second: Standard,
    seed: u64,
    duration: Option<SimTime>,
) -> Result<Comparison, RunError> {
    let opts = |phy| RunOptions {
        phy,
        seed,
        duration,
    };
    let (a, b) = std::thread::scope(|s| {
        let h = s.spawn(|| run_once(cfg, opts(first)));
        let b = run_once(cfg, opts(second));
        (h.join().expect("arm thread panicked"), b)
    });
    Ok(Comparison::from_reports(a?, b?))
}

/// The 802.11a arm against the 802.11b arm.
pub fn run_comparison(cfg: &ScenarioConfig, seed: u64) -> Result<Comparison, RunError> {
    run_pair(cfg, Standard::A, Standard::B, seed, None)
}

/// Everything `emit_*` can fail with.
#[derive(Debug, thiserror::Error)]
pub enum EmitError {
    #[error("output directory {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EmitError + '_ {
    move |source| EmitError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn num(v: f64) -> String {
    // Fixed precision keeps reruns byte-identical and diffs readable.
    let s = format!("{v:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn arm_dirs(c: &Comparison) -> [String; 2] {
    if c.first.phy == c.second.phy {
        ["first".into(), "second".into()]
    } else {
        [c.first.phy, c.second.phy].map(|p| match p {
            Standard::A => "a".to_string(),
            Standard::B => "b".to_string(),
        })
    }
}

fn write_series(dir: &Path, report: &RunReport) -> Result<(), EmitError> {
    let sdir = dir.join("series");
    fs::create_dir_all(&sdir).map_err(io_err(&sdir))?;
    for s in &report.series {
        let mut w = csv::Writer::from_path(sdir.join(format!("{}.csv", s.file_stem())))?;
        w.write_record(["t_seconds", "value", "unit"])?;
        for &(t, v) in &s.points {
            w.write_record([num(t), num(v), s.unit.clone()])?;
        }
        w.flush().map_err(io_err(&sdir))?;
    }
    Ok(())
}

fn write_summary(dir: &Path, report: &RunReport) -> Result<(), EmitError> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    w.write_record(["metric", "value"])?;
    w.write_record(["scenario", report.scenario.as_str()])?;
    w.write_record(["phy".to_string(), report.phy.to_string()])?;
    w.write_record(["seed".to_string(), report.seed.to_string()])?;
    w.write_record(["duration_s".to_string(), num(report.duration_s)])?;
    for (k, v) in &report.scalars {
        w.write_record([k.clone(), num(*v)])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

pub const TIMELINE_COLUMNS: [&str; 15] = [
    "call_id",
    "initiator",
    "receiver",
    "state",
    "initiation_s",
    "establishment_s",
    "bye_s",
    "end_s",
    "rtp_start_s",
    "talk_initiator_s",
    "talk_receiver_s",
    "sent_initiator",
    "sent_receiver",
    "received_initiator",
    "received_receiver",
];

fn timeline_record(r: &TimelineRow) -> [String; 15] {
    [
        r.call_id.clone(),
        r.initiator.to_string(),
        r.receiver.to_string(),
        format!("{:?}", r.state),
        opt(r.initiation_s),
        opt(r.establishment_s),
        opt(r.bye_s),
        opt(r.end_s),
        opt(r.rtp_start_s),
        num(r.talk_initiator_s),
        num(r.talk_receiver_s),
        r.sent_initiator.to_string(),
        r.sent_receiver.to_string(),
        r.received_initiator.to_string(),
        r.received_receiver.to_string(),
    ]
}

fn write_timeline(dir: &Path, report: &RunReport) -> Result<(), EmitError> {
    let mut w = csv::Writer::from_path(dir.join("session_timeline.csv"))?;
    w.write_record(TIMELINE_COLUMNS)?;
    for r in &report.timeline {
        w.write_record(timeline_record(r))?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

fn write_run(dir: &Path, report: &RunReport) -> Result<(), EmitError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_series(dir, report)?;
    write_summary(dir, report)?;
    write_timeline(dir, report)
}

fn write_comparison_csv(dir: &Path, c: &Comparison) -> Result<(), EmitError> {
    let mut w = csv::Writer::from_path(dir.join("comparison.csv"))?;
    w.write_record(["metric", "first", "second", "ratio", "expected", "holds"])?;
    for r in &c.rows {
        w.write_record([
            r.metric.clone(),
            num(r.first),
            num(r.second),
            opt(r.ratio),
            r.expectation.map(|e| e.describe()).unwrap_or_default(),
            r.holds.map(|h| h.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(io_err(dir))?;
    Ok(())
}

/// Builds the whole output tree in a sibling temp directory, then moves it
/// into place, so a failure never leaves a half-written `out_dir`.
fn stage<F>(out_dir: &Path, fill: F) -> Result<(), EmitError>
where
    F: FnOnce(&Path) -> Result<(), EmitError>,
{
    let parent = match out_dir.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(io_err(&parent))?;
    let tmp = tempfile::Builder::new()
        .prefix(".voipsim-out-")
        .tempdir_in(&parent)
        .map_err(io_err(&parent))?;
    fill(tmp.path())?;

    let staged = tmp.keep();
    let mut backup = None;
    if out_dir.exists() {
        let b = parent.join(format!(
            ".voipsim-old-{}",
            staged.file_name().and_then(|n| n.to_str()).unwrap_or("x")
        ));
        fs::rename(out_dir, &b).map_err(io_err(out_dir))?;
        backup = Some(b);
    }
    if let Err(e) = fs::rename(&staged, out_dir) {
        if let Some(b) = &backup {
            let _ = fs::rename(b, out_dir);
        }
        let _ = fs::remove_dir_all(&staged);
        return Err(io_err(out_dir)(e));
    }
    if let Some(b) = backup {
        fs::remove_dir_all(&b).map_err(io_err(&b))?;
    }
    Ok(())
}

/// Writes one run: `series/*.csv`, `summary.csv`, `session_timeline.csv`
/// and `report.txt`.
pub fn emit_run(report: &RunReport, out_dir: &Path) -> Result<(), EmitError> {
    stage(out_dir, |dir| {
        write_run(dir, report)?;
        let p = dir.join("report.txt");
        fs::write(&p, format_run(report)).map_err(io_err(&p))
    })
}

/// Writes both arms into `a/` and `b/` plus `comparison.csv` and
/// `report.txt` at the top level.
pub fn emit_comparison(c: &Comparison, out_dir: &Path) -> Result<(), EmitError> {
    stage(out_dir, |dir| {
        let [d1, d2] = arm_dirs(c);
        write_run(&dir.join(d1), &c.first)?;
        write_run(&dir.join(d2), &c.second)?;
        write_comparison_csv(dir, c)?;
        let p = dir.join("report.txt");
        fs::write(&p, format_comparison(c)).map_err(io_err(&p))
    })
}

fn run_body(out: &mut String, r: &RunReport) {
    let _ = writeln!(
        out,
        "{} on {}, seed {}, {} s, {} events",
        r.scenario,
        r.phy,
        r.seed,
        num(r.duration_s),
        r.events_fired
    );
    let _ = writeln!(out, "\nsessions");
    for t in &r.timeline {
        let _ = writeln!(
            out,
            "  {:<10} {:>2}->{:<2} {:<10?} init {:>7} est {:>9} end {:>9} talk {}/{} s  sent {}/{}  recv {}/{}",
            t.call_id,
            t.initiator,
            t.receiver,
            t.state,
            opt(t.initiation_s),
            opt(t.establishment_s),
            opt(t.end_s),
            num(t.talk_initiator_s),
            num(t.talk_receiver_s),
            t.sent_initiator,
            t.sent_receiver,
            t.received_initiator,
            t.received_receiver,
        );
    }
    let _ = writeln!(out, "\nvoice quality");
    for v in &r.voip {
        let _ = writeln!(
            out,
            "  {:<10} loss {:.4} {:?}  late {} overflow {} dup {}  delay mean {} max {} ms",
            v.id,
            v.quality.loss_fraction,
            v.quality.verdict,
            v.jitter.dropped_late,
            v.jitter.dropped_overflow,
            v.jitter.duplicates,
            opt(v.mean_delay_ms),
            opt(v.max_delay_ms),
        );
    }
    for f in &r.ftp {
        let _ = writeln!(
            out,
            "  {:<10} server {} client {}  acked {} B  peak {}/{} bps  retx {}",
            f.id,
            f.server,
            f.client,
            f.bytes_acked,
            num(f.server_peak_bps),
            num(f.client_peak_bps),
            f.retransmissions,
        );
    }
    for c in &r.cbr {
        let _ = writeln!(
            out,
            "  {:<10} sent {} received {}  delay mean {} max {} ms  {} bps",
            c.id,
            c.sent,
            c.received,
            opt(c.mean_delay_ms),
            opt(c.max_delay_ms),
            num(c.throughput_bps),
        );
    }
    let _ = writeln!(out, "\npacket accounting");
    for c in &r.conservation {
        let k = &c.counters;
        let _ = writeln!(
            out,
            "  {:<10} sent {} delivered {} queue {} mac {} routing {} in flight {} {}",
            c.flow,
            k.sent,
            k.delivered,
            k.dropped_queue,
            k.dropped_mac,
            k.dropped_routing,
            c.in_flight,
            if c.holds() { "ok" } else { "MISMATCH" },
        );
    }
    let s = &r.sip;
    let _ = writeln!(
        out,
        "\nsignaling: {} messages, {} retransmissions, {} registrations, {} invite failures",
        s.messages_sent, s.retransmissions, s.registrations, s.invite_failures
    );
}

pub fn format_run(r: &RunReport) -> String {
    let mut out = String::new();
    run_body(&mut out, r);
    out
}

pub fn format_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{} vs {}\n", c.first.phy, c.second.phy);
    let _ = writeln!(
        out,
        "{:<22} {:>14} {:>14} {:>9}  {:<14} result",
        "metric", "first", "second", "ratio", "expected"
    );
    for r in &c.rows {
        let _ = writeln!(
            out,
            "{:<22} {:>14} {:>14} {:>9}  {:<14} {}",
            r.metric,
            num(r.first),
            num(r.second),
            r.ratio
                .map(|x| format!("{x:.3}"))
                .unwrap_or_else(|| "-".into()),
            r.expectation.map(|e| e.describe()).unwrap_or_default(),
            match r.holds {
                Some(true) => "ok",
                Some(false) => "VIOLATED",
                None => "-",
            },
        );
    }
    for arm in [&c.first, &c.second] {
        let _ = writeln!(out, "\n== {}", arm.phy);
        run_body(&mut out, arm);
    }
    out
}
