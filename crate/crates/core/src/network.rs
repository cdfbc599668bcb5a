//! One simulation run: nodes, interfaces, channels, routing and the
//! applications on top, all driven by a single engine.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::apps::{
    CbrParams, FtpMsg, FtpOutput, FtpParams, FtpTimer, FtpTransfer, ThroughputMeter,
};
use crate::config::{spurts, FlowSpec, Medium, ScenarioConfig};
use crate::engine::{Engine, EngineError, Mapped, RngStream, SimTime};
use crate::mac::{DcfCounters, MacDst, MacEvent, MacIndication, Wlan};
use crate::metrics::{
    CbrFlowReport, ConservationRow, FtpFlowReport, MetricSeries, RunReport, TimelineRow,
    VoipFlowReport,
};
use crate::mobility::{Position, Waypoint, WaypointPath};
use crate::radio::{path_loss_db, select_rate, ChannelMask, PhyProfile, RadioConfig, Standard};
use crate::sip::{CallId, SipConfig, SipLayer, SipMessage, SipOutput, SipTimer};
use crate::stack::{
    encapsulate, EnqueueOutcome, FifoQueue, FlowCounters, FlowId, NextHop, NodeId, Packet,
    QueueStats, RoutingTable,
};
use crate::voip::{classify_quality, DelayStats, G711Source, JitterBuffer, RtpFrame, FRAME_BYTES};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid scenario: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("scenario setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub phy: Standard,
    pub seed: u64,
    pub duration: Option<SimTime>,
}

#[derive(Debug, Clone)]
enum AppData {
    Sip(SipMessage),
    Rtp {
        call: usize,
        from_caller: bool,
        frame: RtpFrame,
    },
    Cbr {
        flow: usize,
    },
    Ftp {
        flow: usize,
        msg: FtpMsg,
        to_server: bool,
    },
}

#[derive(Debug, Clone)]
struct Carried {
    app: AppData,
    /// Number of links crossed so far.
    hop: u32,
}

type Pkt = Packet<Carried>;

#[derive(Debug)]
enum Ev {
    Mac { chan: usize, ev: MacEvent },
    WiredTxDone { link: usize },
    WiredArrive { link: usize },
    Sip(SipTimer),
    Register { node: NodeId },
    Invite { call: usize },
    HangUp { call: usize },
    Frame { call: usize, from_caller: bool },
    Cbr { flow: usize, k: u64 },
    FtpStart { flow: usize },
    FtpTimer { flow: usize, timer: FtpTimer },
    Mobility { node: usize },
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum IfaceKind {
    Wireless { chan: usize, sta: usize },
    Wired { link: usize },
}

struct Iface {
    kind: IfaceKind,
    queue: FifoQueue<(Pkt, NodeId)>,
}

struct NodeRt {
    id: NodeId,
    path: WaypointPath,
    height: f64,
}

struct Channel {
    wlan: Wlan<Pkt>,
    freq_hz: f64,
    /// Node index of each station.
    members: Vec<usize>,
    /// Interface index of each station.
    ifaces: Vec<usize>,
}

struct WiredDir {
    to: usize,
    rate_bps: f64,
    delay: SimTime,
    iface: usize,
    in_service: Option<Pkt>,
    in_transit: VecDeque<Pkt>,
}

struct CallRt {
    flow: usize,
    sip_id: CallId,
    caller: NodeId,
    callee: NodeId,
    bye_at: SimTime,
    from_caller: G711Source,
    from_callee: G711Source,
    /// Receives the caller's frames.
    jb_callee: JitterBuffer,
    jb_caller: JitterBuffer,
    received_at_callee: u64,
    received_at_caller: u64,
    delay: DelayStats,
    first_frame: Option<SimTime>,
    last_frame: Option<SimTime>,
    started: bool,
}

struct CbrRt {
    flow: usize,
    params: CbrParams,
    src: NodeId,
    dst: NodeId,
    sent: u64,
    received: u64,
    delay: DelayStats,
    meter: ThroughputMeter,
    delay_buckets: BTreeMap<u64, DelayStats>,
}

struct FtpRt {
    flow: usize,
    client: NodeId,
    server: NodeId,
    transfer: FtpTransfer,
}

#[derive(Default)]
struct Samples {
    retx: Vec<(f64, f64)>,
    frames_sent: Vec<(f64, f64)>,
    frames_received: Vec<(f64, f64)>,
    jitter_drops: Vec<(f64, f64)>,
    fifo_wait: Vec<(f64, f64)>,
}

/// A fully wired-up scenario ready to run.
pub struct Network {
    cfg: ScenarioConfig,
    opts: RunOptions,
    phy: PhyProfile,
    radio: RadioConfig,
    horizon: SimTime,
    bucket: SimTime,
    reevaluate: SimTime,
    nodes: Vec<NodeRt>,
    index: HashMap<NodeId, usize>,
    ifaces: Vec<Iface>,
    channels: Vec<Channel>,
    wired: Vec<WiredDir>,
    routes: RoutingTable,
    /// `(node index, next hop id)` → interface index and MAC destination.
    hop_iface: HashMap<(usize, NodeId), (usize, Option<usize>)>,
    sip: SipLayer,
    calls: Vec<CallRt>,
    cbrs: Vec<CbrRt>,
    ftps: Vec<FtpRt>,
    flow_names: Vec<String>,
    flow_counters: Vec<FlowCounters>,
    signaling_flow: FlowId,
    /// `(packet id, hop)` of frames already received by the next hop while
    /// the sender still awaits its ACK.
    progressed: HashSet<(u64, u32)>,
    next_packet_id: u64,
    samples: Samples,
    engine: Engine<Ev>,
}

fn setup<E: std::fmt::Display>(e: E) -> RunError {
    RunError::Setup(e.to_string())
}

impl Network {
    pub fn new(cfg: &ScenarioConfig, opts: RunOptions) -> Result<Self, RunError> {
        cfg.validate()?;
        let phy = cfg.phy_profile(opts.phy);
        let radio = cfg.radio.radio_config();
        let horizon = opts.duration.unwrap_or(cfg.duration());
        let bucket = SimTime::from_secs_f64(cfg.metrics.bucket_s);
        let reevaluate = SimTime::from_secs_f64(cfg.mobility.reevaluate_s);

        let mut nodes = Vec::new();
        let mut index = HashMap::new();
        for n in &cfg.nodes {
            let start = Position::new(n.x, n.y);
            let path = if n.waypoints.is_empty() {
                WaypointPath::stationary(start)
            } else {
                let wps: Vec<_> = n
                    .waypoints
                    .iter()
                    .map(|w| Waypoint {
                        position: Position::new(w.x, w.y),
                        speed: w.speed,
                    })
                    .collect();
                WaypointPath::new(
                    start,
                    SimTime::from_secs_f64(n.move_at_s.unwrap_or(0.0)),
                    &wps,
                )
                .map_err(setup)?
            };
            index.insert(n.id, nodes.len());
            nodes.push(NodeRt {
                id: n.id,
                path,
                height: n.antenna_height_m.unwrap_or(cfg.radio.antenna_height_m),
            });
        }

        let mut net = Network {
            cfg: cfg.clone(),
            opts,
            phy: phy.clone(),
            radio,
            horizon,
            bucket,
            reevaluate,
            nodes,
            index,
            ifaces: Vec::new(),
            channels: Vec::new(),
            wired: Vec::new(),
            routes: RoutingTable::default(),
            hop_iface: HashMap::new(),
            sip: SipLayer::new(SipConfig {
                proxy_node: cfg.signaling.proxy,
                mode: cfg.signaling.mode.into(),
                retransmit_interval: SimTime::from_millis(cfg.signaling.retransmit_ms),
                max_attempts: cfg.signaling.max_attempts,
                request_bytes: cfg.signaling.request_bytes,
                response_bytes: cfg.signaling.response_bytes,
            }),
            calls: Vec::new(),
            cbrs: Vec::new(),
            ftps: Vec::new(),
            flow_names: Vec::new(),
            flow_counters: Vec::new(),
            signaling_flow: FlowId(cfg.flows.len() as u32),
            progressed: HashSet::new(),
            next_packet_id: 0,
            samples: Samples::default(),
            engine: Engine::new(),
        };
        net.build_topology()?;
        net.build_flows()?;
        Ok(net)
    }

    fn build_topology(&mut self) -> Result<(), RunError> {
        let cfg = &self.cfg;
        let cap = cfg.mac.queue_capacity;
        let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> =
            self.nodes.iter().map(|n| (n.id, BTreeSet::new())).collect();

        let mut channel_specs: Vec<_> = cfg
            .channels
            .iter()
            .filter(|c| c.medium == Medium::Wireless)
            .collect();
        channel_specs.sort_by_key(|c| c.index);
        for spec in channel_specs {
            let mut wlan = Wlan::new(self.phy.clone(), cfg.mac.retry_limit);
            let mut members = Vec::new();
            let mut ifaces = Vec::new();
            let chan = self.channels.len();
            for (ni, n) in cfg.nodes.iter().enumerate() {
                let mask: ChannelMask = n.mask.parse().map_err(setup)?;
                if !mask.contains(spec.index) {
                    continue;
                }
                let label = format!("mac.backoff.ch{}.node{}", spec.index, n.id);
                let sta = wlan.add_station(RngStream::new(self.opts.seed, &label));
                members.push(ni);
                ifaces.push(self.ifaces.len());
                self.ifaces.push(Iface {
                    kind: IfaceKind::Wireless { chan, sta },
                    queue: FifoQueue::new(cap),
                });
            }
            for &a in &members {
                for &b in &members {
                    if a != b {
                        adjacency
                            .get_mut(&self.nodes[a].id)
                            .expect("node")
                            .insert(self.nodes[b].id);
                    }
                }
            }
            self.channels.push(Channel {
                wlan,
                freq_hz: spec.frequency_ghz * 1e9,
                members,
                ifaces,
            });
        }

        for l in &cfg.wired_links {
            let (a, b) = (self.index[&l.a], self.index[&l.b]);
            for (from, to) in [(a, b), (b, a)] {
                let link = self.wired.len();
                let iface = self.ifaces.len();
                self.ifaces.push(Iface {
                    kind: IfaceKind::Wired { link },
                    queue: FifoQueue::new(cap),
                });
                self.wired.push(WiredDir {
                    to,
                    rate_bps: l.rate_mbps * 1e6,
                    delay: SimTime(l.delay_us),
                    iface,
                    in_service: None,
                    in_transit: VecDeque::new(),
                });
                self.hop_iface
                    .insert((from, self.nodes[to].id), (iface, None));
            }
            adjacency.get_mut(&l.a).expect("node").insert(l.b);
            adjacency.get_mut(&l.b).expect("node").insert(l.a);
        }

        // wireless next hops, unless a wired link already connects the pair
        for ch in &self.channels {
            for (sa, &a) in ch.members.iter().enumerate() {
                for (sb, &b) in ch.members.iter().enumerate() {
                    if a != b {
                        self.hop_iface
                            .entry((a, self.nodes[b].id))
                            .or_insert((ch.ifaces[sa], Some(sb)));
                    }
                }
            }
        }
        self.routes = RoutingTable::shortest_paths(&adjacency);
        for chan in 0..self.channels.len() {
            self.refresh_channel_rates(chan, None, SimTime::ZERO);
        }
        Ok(())
    }

    fn build_flows(&mut self) -> Result<(), RunError> {
        let flows = self.cfg.flows.clone();
        let ring_default = self.cfg.signaling.ring_delay_s;
        for (i, f) in flows.iter().enumerate() {
            self.flow_names.push(f.id().to_string());
            self.flow_counters.push(FlowCounters::default());
            match f {
                FlowSpec::Voip(v) => {
                    let ring = SimTime::from_secs_f64(v.ring_delay_s.unwrap_or(ring_default));
                    let sip_id = self.sip.add_call(v.src, v.dst, ring);
                    self.calls.push(CallRt {
                        flow: i,
                        sip_id,
                        caller: v.src,
                        callee: v.dst,
                        bye_at: SimTime::from_secs_f64(v.bye_at_s),
                        from_caller: G711Source::new(spurts(&v.initiator_spurts)).map_err(setup)?,
                        from_callee: G711Source::new(spurts(&v.receiver_spurts)).map_err(setup)?,
                        jb_callee: self.jitter_buffer(),
                        jb_caller: self.jitter_buffer(),
                        received_at_callee: 0,
                        received_at_caller: 0,
                        delay: DelayStats::default(),
                        first_frame: None,
                        last_frame: None,
                        started: false,
                    });
                }
                FlowSpec::Cbr(c) => {
                    let params = CbrParams {
                        payload_bytes: c.payload_bytes,
                        interval: SimTime::from_millis(c.interval_ms),
                        start_at: SimTime::from_secs_f64(c.start_s),
                        stop_at: SimTime::from_secs_f64(c.stop_s),
                    };
                    params.validate().map_err(setup)?;
                    self.cbrs.push(CbrRt {
                        flow: i,
                        params,
                        src: c.src,
                        dst: c.dst,
                        sent: 0,
                        received: 0,
                        delay: DelayStats::default(),
                        meter: ThroughputMeter::new(self.bucket).map_err(setup)?,
                        delay_buckets: BTreeMap::new(),
                    });
                }
                FlowSpec::Ftp(p) => {
                    let params = FtpParams {
                        item_bytes: p.item_bytes,
                        chunk_bytes: p.chunk_bytes,
                        window: p.window,
                        rto: SimTime::from_millis(p.rto_ms),
                        start_at: SimTime::from_secs_f64(p.start_s),
                        ..FtpParams::default()
                    };
                    self.ftps.push(FtpRt {
                        flow: i,
                        client: p.src,
                        server: p.dst,
                        transfer: FtpTransfer::new(params, self.bucket).map_err(setup)?,
                    });
                }
            }
        }
        self.flow_names.push("signaling".into());
        self.flow_counters.push(FlowCounters::default());
        Ok(())
    }

    fn jitter_buffer(&self) -> JitterBuffer {
        JitterBuffer::new(
            SimTime::from_millis(self.cfg.jitter.playout_ms),
            SimTime::from_millis(self.cfg.jitter.capacity_ms),
        )
    }

    fn position(&self, node: usize, t: SimTime) -> Position {
        self.nodes[node].path.position_at(t)
    }

    /// Recomputes link rates on `chan`, for every pair or only pairs involving `only`.
    fn refresh_channel_rates(&mut self, chan: usize, only: Option<usize>, t: SimTime) {
        let ch = &self.channels[chan];
        let mut updates = Vec::new();
        for (sa, &a) in ch.members.iter().enumerate() {
            for (sb, &b) in ch.members.iter().enumerate() {
                if a == b || only.is_some_and(|o| o != a && o != b) {
                    continue;
                }
                let d = self.position(a, t).distance(self.position(b, t)).max(1.0);
                let rate = path_loss_db(d, ch.freq_hz, self.nodes[a].height, self.nodes[b].height)
                    .ok()
                    .and_then(|loss| select_rate(&self.radio, loss, &self.phy));
                updates.push((sa, sb, rate));
            }
        }
        let wlan = &mut self.channels[chan].wlan;
        for (sa, sb, rate) in updates {
            wlan.set_link_rate(sa, sb, rate);
        }
    }

    fn schedule(&mut self, at: SimTime, ev: Ev) -> Result<(), RunError> {
        self.engine.schedule(at, ev)?;
        Ok(())
    }

    fn prime(&mut self) -> Result<(), RunError> {
        let register_at = SimTime::from_secs_f64(self.cfg.signaling.register_at_s);
        let mut uas = BTreeSet::new();
        for c in &self.calls {
            uas.insert(c.caller);
            uas.insert(c.callee);
        }
        for node in uas {
            self.schedule(register_at, Ev::Register { node })?;
        }
        for call in 0..self.calls.len() {
            let FlowSpec::Voip(v) = &self.cfg.flows[self.calls[call].flow] else {
                unreachable!("calls come from voip flows")
            };
            let invite_at = SimTime::from_secs_f64(v.invite_at_s);
            let bye_at = self.calls[call].bye_at;
            self.schedule(invite_at, Ev::Invite { call })?;
            self.schedule(bye_at, Ev::HangUp { call })?;
        }
        for flow in 0..self.cbrs.len() {
            let at = self.cbrs[flow].params.start_at;
            self.schedule(at, Ev::Cbr { flow, k: 0 })?;
        }
        for flow in 0..self.ftps.len() {
            let at = self.ftps[flow].transfer.params().start_at;
            self.schedule(at, Ev::FtpStart { flow })?;
        }
        for node in 0..self.nodes.len() {
            if let Some(at) = self.nodes[node]
                .path
                .next_move_event(SimTime::ZERO, self.reevaluate)
            {
                self.schedule(at, Ev::Mobility { node })?;
            }
        }
        self.schedule(self.bucket, Ev::Sample)?;
        Ok(())
    }

    /// Runs to the horizon and assembles the report.
    pub fn run(mut self) -> Result<RunReport, RunError> {
        self.prime()?;
        let horizon = self.horizon;
        let mut engine = std::mem::take(&mut self.engine);
        engine.run_until(horizon, |eng, ev| {
            self.handle(eng, ev.payload).map_err(|e| e.to_string())
        })?;
        let fired = engine.events_fired();
        self.engine = engine;
        Ok(self.report(fired))
    }

    fn handle(&mut self, eng: &mut Engine<Ev>, ev: Ev) -> Result<(), RunError> {
        let now = eng.now();
        match ev {
            Ev::Mac { chan, ev } => {
                let mut out = Vec::new();
                {
                    let mut sched = Mapped::new(eng, move |ev| Ev::Mac { chan, ev });
                    self.channels[chan].wlan.handle(ev, &mut sched, &mut out);
                }
                for ind in out {
                    self.on_mac(eng, chan, ind)?;
                }
            }
            Ev::WiredTxDone { link } => {
                let w = &mut self.wired[link];
                let pkt = w.in_service.take().expect("link was transmitting");
                w.in_transit.push_back(pkt);
                let iface = w.iface;
                eng.schedule(now + w.delay, Ev::WiredArrive { link })?;
                self.kick(eng, iface)?;
            }
            Ev::WiredArrive { link } => {
                let w = &mut self.wired[link];
                let mut pkt = w.in_transit.pop_front().expect("packet in transit");
                pkt.app.hop += 1;
                let to = w.to;
                self.route(eng, to, pkt)?;
            }
            Ev::Sip(timer) => {
                let outs = self.sip.on_timer(timer, now);
                self.sip_outputs(eng, outs)?;
            }
            Ev::Register { node } => {
                let outs = self.sip.start_register(node, now);
                self.sip_outputs(eng, outs)?;
            }
            Ev::Invite { call } => {
                let outs = self
                    .sip
                    .start_invite(self.calls[call].sip_id, now)
                    .map_err(setup)?;
                self.sip_outputs(eng, outs)?;
            }
            Ev::HangUp { call } => {
                let outs = self
                    .sip
                    .hang_up(self.calls[call].sip_id, now)
                    .map_err(setup)?;
                self.sip_outputs(eng, outs)?;
            }
            Ev::Frame { call, from_caller } => {
                let c = &mut self.calls[call];
                let src = if from_caller {
                    &mut c.from_caller
                } else {
                    &mut c.from_callee
                };
                if let Some(frame) = src.emit(now) {
                    let next = src.next_frame_at(now + SimTime(1));
                    c.first_frame.get_or_insert(now);
                    c.last_frame = Some(now);
                    let (from, to) = if from_caller {
                        (c.caller, c.callee)
                    } else {
                        (c.callee, c.caller)
                    };
                    let flow = FlowId(c.flow as u32);
                    self.originate(
                        eng,
                        from,
                        to,
                        flow,
                        FRAME_BYTES,
                        true,
                        AppData::Rtp {
                            call,
                            from_caller,
                            frame,
                        },
                    )?;
                    if let Some(at) = next {
                        eng.schedule(at, Ev::Frame { call, from_caller })?;
                    }
                }
            }
            Ev::Cbr { flow, k } => {
                let c = &mut self.cbrs[flow];
                if c.params.departure(k) == Some(now) {
                    c.sent += 1;
                    let (src, dst, bytes, fid) =
                        (c.src, c.dst, c.params.payload_bytes, FlowId(c.flow as u32));
                    if let Some(next) = c.params.departure(k + 1) {
                        eng.schedule(next, Ev::Cbr { flow, k: k + 1 })?;
                    }
                    self.originate(eng, src, dst, fid, bytes, false, AppData::Cbr { flow })?;
                }
            }
            Ev::FtpStart { flow } => {
                let outs = self.ftps[flow].transfer.start(now);
                self.ftp_outputs(eng, flow, outs)?;
            }
            Ev::FtpTimer { flow, timer } => {
                let outs = self.ftps[flow].transfer.on_timer(timer, now);
                self.ftp_outputs(eng, flow, outs)?;
            }
            Ev::Mobility { node } => {
                let chans: Vec<usize> = (0..self.channels.len())
                    .filter(|&c| self.channels[c].members.contains(&node))
                    .collect();
                for chan in chans {
                    self.refresh_channel_rates(chan, Some(node), now);
                }
                if let Some(at) = self.nodes[node].path.next_move_event(now, self.reevaluate) {
                    eng.schedule(at, Ev::Mobility { node })?;
                }
            }
            Ev::Sample => {
                let t = now.as_secs_f64();
                let retx = self.total_retx() as f64;
                let drops = self
                    .calls
                    .iter()
                    .map(|c| c.jb_caller.counters().dropped() + c.jb_callee.counters().dropped())
                    .sum::<u64>() as f64;
                let wait = self.wireless_queue_stats().avg_wait_ms().unwrap_or(0.0);
                self.samples.retx.push((t, retx));
                let sent = self.mac_total(|c| c.frames_sent) as f64;
                let received = self.mac_total(|c| c.frames_received) as f64;
                self.samples.frames_sent.push((t, sent));
                self.samples.frames_received.push((t, received));
                self.samples.jitter_drops.push((t, drops));
                self.samples.fifo_wait.push((t, wait));
                let next = now + self.bucket;
                if next <= self.horizon {
                    eng.schedule(next, Ev::Sample)?;
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn originate(
        &mut self,
        eng: &mut Engine<Ev>,
        from: NodeId,
        to: NodeId,
        flow: FlowId,
        payload: u32,
        rtp: bool,
        app: AppData,
    ) -> Result<(), RunError> {
        let encap = encapsulate(payload, rtp).map_err(setup)?;
        let id = self.next_packet_id;
        self.next_packet_id += 1;
        let pkt = Packet {
            id,
            flow,
            encap,
            src: from,
            dst: to,
            sequence_number: id,
            created_at: eng.now(),
            enqueued_at: None,
            dequeued_at: None,
            delivered_at: None,
            app: Carried { app, hop: 0 },
        };
        self.flow_counters[flow.0 as usize].sent += 1;
        let at = self.index[&from];
        self.route(eng, at, pkt)
    }

    fn route(&mut self, eng: &mut Engine<Ev>, at: usize, mut pkt: Pkt) -> Result<(), RunError> {
        let here = self.nodes[at].id;
        match self.routes.route_next_hop(here, pkt.dst) {
            Ok(NextHop::Local) => {
                pkt.delivered_at = Some(eng.now());
                self.flow_counters[pkt.flow.0 as usize].delivered += 1;
                self.deliver(eng, here, pkt)
            }
            Ok(NextHop::Forward(next)) => {
                let (iface, _) = self.hop_iface[&(at, next)];
                let now = eng.now();
                pkt.enqueued_at = Some(now);
                let flow = pkt.flow;
                match self.ifaces[iface].queue.enqueue((pkt, next), now) {
                    EnqueueOutcome::Accepted => self.kick(eng, iface),
                    EnqueueOutcome::DroppedFull(_) => {
                        self.flow_counters[flow.0 as usize].dropped_queue += 1;
                        Ok(())
                    }
                }
            }
            Err(_) => {
                self.flow_counters[pkt.flow.0 as usize].dropped_routing += 1;
                Ok(())
            }
        }
    }

    /// Starts service on an interface if it is idle and has a packet waiting.
    fn kick(&mut self, eng: &mut Engine<Ev>, iface: usize) -> Result<(), RunError> {
        let now = eng.now();
        match self.ifaces[iface].kind {
            IfaceKind::Wireless { chan, sta } => {
                if !self.channels[chan].wlan.is_idle(sta) {
                    return Ok(());
                }
                let Some(((mut pkt, next), _)) = self.ifaces[iface].queue.dequeue(now) else {
                    return Ok(());
                };
                pkt.dequeued_at = Some(now);
                let at = self.channels[chan].members[sta];
                let (_, dst) = self.hop_iface[&(at, next)];
                let dst = MacDst::Unicast(dst.expect("wireless hop has a station"));
                let bytes = pkt.wire_bytes();
                let enq = pkt.enqueued_at.unwrap_or(now);
                let ch = &mut self.channels[chan];
                let mut sched = Mapped::new(eng, move |ev| Ev::Mac { chan, ev });
                ch.wlan
                    .start_transmission(sta, dst, bytes, pkt, enq, &mut sched)
                    .map_err(setup)?;
            }
            IfaceKind::Wired { link } => {
                if self.wired[link].in_service.is_some() {
                    return Ok(());
                }
                let Some(((mut pkt, _), _)) = self.ifaces[iface].queue.dequeue(now) else {
                    return Ok(());
                };
                pkt.dequeued_at = Some(now);
                let w = &mut self.wired[link];
                let tx = SimTime::from_secs_f64(pkt.wire_bytes() as f64 * 8.0 / w.rate_bps);
                w.in_service = Some(pkt);
                eng.schedule(now + tx, Ev::WiredTxDone { link })?;
            }
        }
        Ok(())
    }

    fn on_mac(
        &mut self,
        eng: &mut Engine<Ev>,
        chan: usize,
        ind: MacIndication<Pkt>,
    ) -> Result<(), RunError> {
        match ind {
            MacIndication::Delivered { sta, body, .. } => {
                self.progressed.insert((body.id, body.app.hop));
                let mut pkt = body;
                pkt.app.hop += 1;
                let at = self.channels[chan].members[sta];
                self.route(eng, at, pkt)?;
            }
            MacIndication::Acked { sta, frame } => {
                self.progressed.remove(&(frame.body.id, frame.body.app.hop));
                self.kick(eng, self.channels[chan].ifaces[sta])?;
            }
            MacIndication::Dropped { sta, frame } => {
                if !self.progressed.remove(&(frame.body.id, frame.body.app.hop)) {
                    self.flow_counters[frame.body.flow.0 as usize].dropped_mac += 1;
                }
                self.kick(eng, self.channels[chan].ifaces[sta])?;
            }
            MacIndication::BroadcastDone { sta, .. } => {
                self.kick(eng, self.channels[chan].ifaces[sta])?;
            }
        }
        Ok(())
    }

    fn deliver(&mut self, eng: &mut Engine<Ev>, here: NodeId, pkt: Pkt) -> Result<(), RunError> {
        let now = eng.now();
        match pkt.app.app {
            AppData::Sip(msg) => {
                let outs = self.sip.on_message(here, pkt.src, msg, now);
                self.sip_outputs(eng, outs)?;
            }
            AppData::Rtp {
                call,
                from_caller,
                frame,
            } => {
                let c = &mut self.calls[call];
                c.delay.record(now - pkt.created_at);
                if from_caller {
                    c.received_at_callee += 1;
                    c.jb_callee.insert(frame, now);
                } else {
                    c.received_at_caller += 1;
                    c.jb_caller.insert(frame, now);
                }
            }
            AppData::Cbr { flow } => {
                let c = &mut self.cbrs[flow];
                let delay = now - pkt.created_at;
                c.received += 1;
                c.delay.record(delay);
                c.delay_buckets
                    .entry(now.0 / self.bucket.0)
                    .or_default()
                    .record(delay);
                c.meter.record(now, pkt.encap.payload_bytes as u64);
            }
            AppData::Ftp {
                flow,
                msg,
                to_server,
            } => {
                let t = &mut self.ftps[flow].transfer;
                let outs = if to_server {
                    t.on_server_receive(msg, now)
                } else {
                    t.on_client_receive(msg, now)
                };
                self.ftp_outputs(eng, flow, outs)?;
            }
        }
        Ok(())
    }

    fn sip_outputs(&mut self, eng: &mut Engine<Ev>, outs: Vec<SipOutput>) -> Result<(), RunError> {
        let now = eng.now();
        for o in outs {
            match o {
                SipOutput::Send { from, to, msg } => {
                    if from == to {
                        let outs = self.sip.on_message(to, from, msg, now);
                        self.sip_outputs(eng, outs)?;
                    } else {
                        let bytes = msg.body_bytes;
                        self.originate(
                            eng,
                            from,
                            to,
                            self.signaling_flow,
                            bytes,
                            false,
                            AppData::Sip(msg),
                        )?;
                    }
                }
                SipOutput::Timer { at, timer } => {
                    eng.schedule(at, Ev::Sip(timer))?;
                }
                SipOutput::MediaStart(id) => {
                    let call = self.call_index(id);
                    let c = &mut self.calls[call];
                    if !c.started {
                        c.started = true;
                        c.from_caller.start(now);
                        c.from_callee.start(now);
                        for (from_caller, src) in [(true, &c.from_caller), (false, &c.from_callee)]
                        {
                            if let Some(at) = src.next_frame_at(now) {
                                eng.schedule(at, Ev::Frame { call, from_caller })?;
                            }
                        }
                    }
                }
                SipOutput::MediaStop(id) => {
                    let call = self.call_index(id);
                    let c = &mut self.calls[call];
                    c.from_caller.stop(now);
                    c.from_callee.stop(now);
                }
            }
        }
        Ok(())
    }

    fn call_index(&self, id: CallId) -> usize {
        self.calls
            .iter()
            .position(|c| c.sip_id == id)
            .expect("known call")
    }

    fn ftp_outputs(
        &mut self,
        eng: &mut Engine<Ev>,
        flow: usize,
        outs: Vec<FtpOutput>,
    ) -> Result<(), RunError> {
        let f = &self.ftps[flow];
        let (client, server, fid) = (f.client, f.server, FlowId(f.flow as u32));
        let control = f.transfer.params().control_bytes;
        for o in outs {
            match o {
                FtpOutput::ToServer(msg) => {
                    self.originate(
                        eng,
                        client,
                        server,
                        fid,
                        control,
                        false,
                        AppData::Ftp {
                            flow,
                            msg,
                            to_server: true,
                        },
                    )?;
                }
                FtpOutput::ToClient(msg) => {
                    let bytes = match msg {
                        FtpMsg::Chunk { bytes, .. } => bytes,
                        _ => control,
                    };
                    self.originate(
                        eng,
                        server,
                        client,
                        fid,
                        bytes,
                        false,
                        AppData::Ftp {
                            flow,
                            msg,
                            to_server: false,
                        },
                    )?;
                }
                FtpOutput::Timer { at, timer } => {
                    eng.schedule(at, Ev::FtpTimer { flow, timer })?;
                }
            }
        }
        Ok(())
    }

    fn mac_total(&self, f: impl Fn(DcfCounters) -> u64) -> u64 {
        self.channels
            .iter()
            .map(|ch| {
                (0..ch.members.len())
                    .map(|s| f(ch.wlan.counters(s)))
                    .sum::<u64>()
            })
            .sum()
    }

    fn total_retx(&self) -> u64 {
        self.mac_total(|c| c.retx_ack_timeout)
    }

    fn wireless_queue_stats(&self) -> QueueStats {
        let mut s = QueueStats::default();
        for i in &self.ifaces {
            if matches!(i.kind, IfaceKind::Wireless { .. }) {
                s.merge(&i.queue.stats());
            }
        }
        s
    }

    /// Packets of each flow still held somewhere in the network.
    fn in_flight(&self) -> Vec<u64> {
        let mut n = vec![0u64; self.flow_counters.len()];
        let mut count = |p: &Pkt| n[p.flow.0 as usize] += 1;
        for i in &self.ifaces {
            i.queue.iter().for_each(|(p, _)| count(p));
        }
        for ch in &self.channels {
            for sta in 0..ch.members.len() {
                if let Some(f) = ch.wlan.frame_in_service(sta) {
                    if !self.progressed.contains(&(f.body.id, f.body.app.hop)) {
                        count(&f.body);
                    }
                }
            }
        }
        for w in &self.wired {
            w.in_service
                .iter()
                .chain(w.in_transit.iter())
                .for_each(&mut count);
        }
        n
    }

    fn report(mut self, events_fired: u64) -> RunReport {
        let horizon = self.horizon;
        let secs = |t: Option<SimTime>| t.map(SimTime::as_secs_f64);
        let mut scalars = BTreeMap::new();
        let mut series = Vec::new();

        let mut timeline = Vec::new();
        let mut voip = Vec::new();
        let mut jitter_drops = 0u64;
        for c in &mut self.calls {
            c.jb_callee.play_due(horizon);
            c.jb_caller.play_due(horizon);
            let d = self.sip.dialog(c.sip_id).expect("dialog");
            let tl = d.timeline();
            timeline.push(TimelineRow {
                call_id: self.flow_names[c.flow].clone(),
                initiator: c.caller,
                receiver: c.callee,
                state: d.state(),
                initiation_s: secs(tl.invite_sent_at),
                establishment_s: secs(tl.established_at),
                bye_s: secs(tl.bye_at),
                end_s: secs(tl.ended_at),
                rtp_start_s: secs(c.from_caller.rtp_start_at()),
                talk_initiator_s: c.from_caller.talk_time().as_secs_f64(),
                talk_receiver_s: c.from_callee.talk_time().as_secs_f64(),
                sent_initiator: c.from_caller.frames_sent() as u64,
                sent_receiver: c.from_callee.frames_sent() as u64,
                received_initiator: c.received_at_caller,
                received_receiver: c.received_at_callee,
                first_frame_s: secs(c.first_frame),
                last_frame_s: secs(c.last_frame),
            });
            let mut jitter = c.jb_callee.counters();
            let other = c.jb_caller.counters();
            jitter.received += other.received;
            jitter.played += other.played;
            jitter.dropped_late += other.dropped_late;
            jitter.dropped_overflow += other.dropped_overflow;
            jitter.duplicates += other.duplicates;
            let buffered = (c.jb_callee.buffered() + c.jb_caller.buffered()) as u64;
            let sent = (c.from_caller.frames_sent() + c.from_callee.frames_sent()) as u64;
            let loss = if sent == 0 {
                0.0
            } else {
                1.0 - (jitter.played + buffered) as f64 / sent as f64
            };
            jitter_drops += jitter.dropped();
            let name = &self.flow_names[c.flow];
            scalars.insert(format!("voip.{name}.loss_fraction"), loss);
            scalars.insert(format!("voip.{name}.jitter_drops"), jitter.dropped() as f64);
            voip.push(VoipFlowReport {
                id: name.clone(),
                sent,
                jitter,
                still_buffered: buffered,
                mean_delay_ms: c.delay.mean_ms(),
                max_delay_ms: c.delay.max_ms(),
                quality: classify_quality(loss.clamp(0.0, 1.0)).expect("clamped"),
            });
        }

        let mut ftp = Vec::new();
        let (mut server_peak, mut client_peak) = (0.0f64, 0.0f64);
        for f in &self.ftps {
            let t = &f.transfer;
            let name = &self.flow_names[f.flow];
            let c = t.counters();
            series.push(MetricSeries::new(
                format!("app.ftp_server_throughput.{name}"),
                "bps",
                t.server_meter().series(horizon),
            ));
            series.push(MetricSeries::new(
                format!("app.ftp_client_throughput.{name}"),
                "bps",
                t.client_meter().series(horizon),
            ));
            server_peak = server_peak.max(t.server_meter().peak_bps());
            client_peak = client_peak.max(t.client_meter().peak_bps());
            scalars.insert(
                format!("ftp.{name}.server_peak_bps"),
                t.server_meter().peak_bps(),
            );
            scalars.insert(
                format!("ftp.{name}.client_peak_bps"),
                t.client_meter().peak_bps(),
            );
            scalars.insert(format!("ftp.{name}.bytes_acked"), c.bytes_acked as f64);
            ftp.push(FtpFlowReport {
                id: name.clone(),
                server: f.server,
                client: f.client,
                item_bytes: t.params().item_bytes,
                bytes_acked: c.bytes_acked,
                bytes_received: c.bytes_received,
                retransmissions: c.retransmissions,
                completed_s: secs(t.completed_at()),
                server_peak_bps: t.server_meter().peak_bps(),
                client_peak_bps: t.client_meter().peak_bps(),
            });
        }
        scalars.insert("ftp_server_peak_bps".into(), server_peak);
        scalars.insert("ftp_client_peak_bps".into(), client_peak);

        let mut cbr = Vec::new();
        let mut all_cbr = DelayStats::default();
        let mut cbr_bps = 0.0;
        for c in &self.cbrs {
            let name = &self.flow_names[c.flow];
            let active = (c.params.stop_at.min(horizon))
                .saturating_sub(c.params.start_at)
                .as_secs_f64();
            let bps = if active > 0.0 {
                c.received as f64 * c.params.payload_bytes as f64 * 8.0 / active
            } else {
                0.0
            };
            all_cbr.merge(&c.delay);
            cbr_bps += bps;
            let n = horizon.0.div_ceil(self.bucket.0);
            let delay_points = (0..n)
                .filter_map(|b| {
                    c.delay_buckets
                        .get(&b)
                        .and_then(DelayStats::mean_ms)
                        .map(|m| ((b * self.bucket.0) as f64 / 1e6, m))
                })
                .collect();
            series.push(MetricSeries::new(
                format!("app.cbr_delay_ms.{name}"),
                "ms",
                delay_points,
            ));
            series.push(MetricSeries::new(
                format!("app.cbr_throughput.{name}"),
                "bps",
                c.meter.series(horizon),
            ));
            cbr.push(CbrFlowReport {
                id: name.clone(),
                sent: c.sent,
                received: c.received,
                mean_delay_ms: c.delay.mean_ms(),
                max_delay_ms: c.delay.max_ms(),
                throughput_bps: bps,
            });
        }
        if let Some(m) = all_cbr.mean_ms() {
            scalars.insert("cbr_mean_delay_ms".into(), m);
        }
        scalars.insert("cbr_throughput_bps".into(), cbr_bps);

        let retx = self.total_retx();
        let queue = self.wireless_queue_stats();
        scalars.insert("jitter_drops".into(), jitter_drops as f64);
        scalars.insert("mac_retx_ack_timeout".into(), retx as f64);
        scalars.insert(
            "fifo_avg_wait_ms".into(),
            queue.avg_wait_ms().unwrap_or(0.0),
        );
        scalars.insert("fifo_drops_full".into(), queue.drops_full as f64);
        scalars.insert(
            "mac_collisions".into(),
            self.channels
                .iter()
                .map(|c| c.wlan.collisions())
                .sum::<u64>() as f64,
        );
        let sip = self.sip.stats();
        scalars.insert("sip_retransmissions".into(), sip.retransmissions as f64);
        scalars.insert("sip_invite_failures".into(), sip.invite_failures as f64);
        scalars.insert(
            "sip_registration_failures".into(),
            sip.registration_failures as f64,
        );

        let samples = std::mem::take(&mut self.samples);
        series.push(MetricSeries::new(
            "mac.retx_ack_timeout",
            "count",
            samples.retx,
        ));
        series.push(MetricSeries::new(
            "mac.frames_sent",
            "count",
            samples.frames_sent,
        ));
        series.push(MetricSeries::new(
            "mac.frames_received",
            "count",
            samples.frames_received,
        ));
        series.push(MetricSeries::new(
            "voip.jitter_drops",
            "count",
            samples.jitter_drops,
        ));
        series.push(MetricSeries::new(
            "stack.fifo_avg_wait_ms",
            "ms",
            samples.fifo_wait,
        ));

        let in_flight = self.in_flight();
        let conservation = self
            .flow_names
            .iter()
            .zip(&self.flow_counters)
            .zip(in_flight)
            .map(|((flow, counters), in_flight)| ConservationRow {
                flow: flow.clone(),
                counters: *counters,
                in_flight,
            })
            .collect();

        RunReport {
            scenario: self.cfg.name.clone(),
            phy: self.opts.phy,
            seed: self.opts.seed,
            duration_s: horizon.as_secs_f64(),
            events_fired,
            scalars,
            series,
            timeline,
            voip,
            ftp,
            cbr,
            conservation,
            sip,
        }
    }
}

/// Runs one arm of a scenario.
pub fn run_once(cfg: &ScenarioConfig, opts: RunOptions) -> Result<RunReport, RunError> {
    Network::new(cfg, opts)?.run()
}
