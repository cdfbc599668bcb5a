//! 802.11 DCF over a single shared channel.
//!
//! Every station attached to a [`Wlan`] senses every transmission on it
//! (one collision domain, no hidden terminals). Any temporal overlap
//! corrupts all overlapping frames; there is no capture. Unicast frames are
//! acknowledged after SIFS; a missing ACK triggers binary exponential
//! backoff and a retransmission until the retry limit is exceeded.
//!
//! The module also carries the analytical saturation-throughput model used
//! to cross-check the simulated DCF.

use std::collections::HashMap;

use thiserror::Error;

use crate::engine::{Engine, EventHandle, RngStream, Scheduler, SimTime};
use crate::radio::PhyProfile;

/// MAC header (24 B) plus FCS (4 B).
pub const MAC_OVERHEAD_BYTES: u32 = 28;
pub const ACK_FRAME_BYTES: u32 = 14;
pub const DEFAULT_RETRY_LIMIT: u32 = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MacDst {
    Unicast(usize),
    Broadcast,
}

#[derive(Debug, Clone)]
pub struct MacFrame<B> {
    pub src: usize,
    pub dst: MacDst,
    pub body_bytes: u32,
    pub retry_count: u32,
    pub frame_seq: u64,
    pub enqueued_at: SimTime,
    pub body: B,
}

impl<B> MacFrame<B> {
    pub fn on_air_bytes(&self) -> u32 {
        self.body_bytes + MAC_OVERHEAD_BYTES
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DcfCounters {
    pub retx_ack_timeout: u64,
    pub frames_sent: u64,
    pub frames_received: u64,
    pub frames_acked: u64,
    pub frames_dropped_retry: u64,
    pub broadcasts_sent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacEvent {
    BackoffDone { sta: usize },
    TxEnd { tx: u64 },
    AckStart { from: usize, to: usize, seq: u64 },
    AckTimeout { sta: usize },
}

/// What the MAC hands back to the layer above after processing an event.
#[derive(Debug, Clone)]
pub enum MacIndication<B> {
    /// A frame body reached station `sta`.
    Delivered { sta: usize, from: usize, body: B },
    /// Sender's unicast frame was acknowledged; the station is idle again.
    Acked { sta: usize, frame: MacFrame<B> },
    /// Retry limit exceeded; the station is idle again.
    Dropped { sta: usize, frame: MacFrame<B> },
    /// Broadcast sent once; the station is idle again.
    BroadcastDone { sta: usize, frame: MacFrame<B> },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MacError {
    #[error("station {0} already has a frame in service")]
    Busy(usize),
    #[error("station {0} does not exist")]
    NoSuchStation(usize),
}

#[derive(Debug)]
enum Phase {
    Idle,
    Backoff {
        slots: u32,
        timer: Option<BackoffTimer>,
    },
    Transmitting,
    AwaitAck {
        timer: EventHandle,
    },
}

#[derive(Debug, Clone, Copy)]
struct BackoffTimer {
    handle: EventHandle,
    resume_at: SimTime,
    end: SimTime,
}

#[derive(Debug)]
struct Station<B> {
    cw: u32,
    rng: RngStream,
    phase: Phase,
    frame: Option<MacFrame<B>>,
    counters: DcfCounters,
    next_seq: u64,
    last_delivered: HashMap<usize, u64>,
}

#[derive(Debug, Clone, Copy)]
enum TxKind {
    Data { dst: MacDst, rate: u64 },
    Ack { to: usize, seq: u64 },
}

#[derive(Debug)]
struct ActiveTx {
    id: u64,
    sender: usize,
    kind: TxKind,
    corrupted: bool,
}

/// One 802.11 channel and the DCF state of every station on it.
#[derive(Debug)]
pub struct Wlan<B> {
    phy: PhyProfile,
    retry_limit: u32,
    stations: Vec<Station<B>>,
    /// `links[a][b]`: highest usable rate from a to b, `None` when out of range.
    links: Vec<Vec<Option<u64>>>,
    active: Vec<ActiveTx>,
    next_tx_id: u64,
    collisions: u64,
}

impl<B: Clone> Wlan<B> {
    pub fn new(phy: PhyProfile, retry_limit: u32) -> Self {
        Self {
            phy,
            retry_limit,
            stations: Vec::new(),
            links: Vec::new(),
            active: Vec::new(),
            next_tx_id: 0,
            collisions: 0,
        }
    }

    pub fn phy(&self) -> &PhyProfile {
        &self.phy
    }

    /// Adds a station whose backoff draws come from `rng`. All links to and
    /// from it start at the PHY's maximum rate.
    pub fn add_station(&mut self, rng: RngStream) -> usize {
        let idx = self.stations.len();
        let max = Some(self.phy.max_rate());
        for row in &mut self.links {
            row.push(max);
        }
        self.links.push(vec![max; idx + 1]);
        self.stations.push(Station {
            cw: self.phy.cw_min,
            rng,
            phase: Phase::Idle,
            frame: None,
            counters: DcfCounters::default(),
            next_seq: 0,
            last_delivered: HashMap::new(),
        });
        idx
    }

    pub fn station_count(&self) -> usize {
        self.stations.len()
    }

    pub fn set_link_rate(&mut self, from: usize, to: usize, rate: Option<u64>) {
        self.links[from][to] = rate;
    }

    pub fn link_rate(&self, from: usize, to: usize) -> Option<u64> {
        self.links[from][to]
    }

    pub fn counters(&self, sta: usize) -> DcfCounters {
        self.stations[sta].counters
    }

    pub fn contention_window(&self, sta: usize) -> u32 {
        self.stations[sta].cw
    }

    pub fn is_idle(&self, sta: usize) -> bool {
        matches!(self.stations[sta].phase, Phase::Idle)
    }

    pub fn frame_in_service(&self, sta: usize) -> Option<&MacFrame<B>> {
        self.stations[sta].frame.as_ref()
    }

    pub fn medium_busy(&self) -> bool {
        !self.active.is_empty()
    }

    /// Number of transmissions that were corrupted by overlap.
    pub fn collisions(&self) -> u64 {
        self.collisions
    }

    fn ack_duration(&self) -> SimTime {
        self.phy
            .transmit_duration(ACK_FRAME_BYTES, self.phy.control_rate)
            .expect("control rate belongs to the profile")
    }

    fn reachable(&self, from: usize, to: usize, rate: u64) -> bool {
        self.links[from][to].is_some_and(|best| rate <= best)
    }

    /// Hands a frame to an idle station; it contends for the medium with DIFS
    /// followed by a uniform backoff in `[0, cw]` slots.
    pub fn start_transmission<S: Scheduler<MacEvent>>(
        &mut self,
        sta: usize,
        dst: MacDst,
        body_bytes: u32,
        body: B,
        enqueued_at: SimTime,
        sched: &mut S,
    ) -> Result<(), MacError> {
        let station = self
            .stations
            .get_mut(sta)
            .ok_or(MacError::NoSuchStation(sta))?;
        if !matches!(station.phase, Phase::Idle) {
            return Err(MacError::Busy(sta));
        }
        let frame_seq = station.next_seq;
        station.next_seq += 1;
        station.frame = Some(MacFrame {
            src: sta,
            dst,
            body_bytes,
            retry_count: 0,
            frame_seq,
            enqueued_at,
            body,
        });
        self.begin_contention(sta, sched);
        Ok(())
    }

    fn begin_contention<S: Scheduler<MacEvent>>(&mut self, sta: usize, sched: &mut S) {
        let station = &mut self.stations[sta];
        let slots = station
            .rng
            .draw_uniform(0, station.cw as i64)
            .expect("cw is non-negative") as u32;
        station.phase = Phase::Backoff { slots, timer: None };
        if !self.medium_busy() {
            self.arm_backoff(sta, sched);
        }
    }

    fn arm_backoff<S: Scheduler<MacEvent>>(&mut self, sta: usize, sched: &mut S) {
        let now = sched.now();
        let difs = self.phy.difs();
        let slot = self.phy.slot;
        if let Phase::Backoff { slots, timer } = &mut self.stations[sta].phase {
            if timer.is_none() {
                let resume_at = now + difs;
                let end = resume_at + SimTime(*slots as u64 * slot.0);
                let handle = sched
                    .schedule(end, MacEvent::BackoffDone { sta })
                    .expect("backoff end lies in the future");
                *timer = Some(BackoffTimer {
                    handle,
                    resume_at,
                    end,
                });
            }
        }
    }

    /// Medium turned busy at `now`: freeze every running countdown. A
    /// station whose countdown expires in this very instant transmits too.
    fn on_medium_busy<S: Scheduler<MacEvent>>(
        &mut self,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        let now = sched.now();
        let slot = self.phy.slot.0;
        let mut due = Vec::new();
        for (idx, st) in self.stations.iter_mut().enumerate() {
            if let Phase::Backoff { slots, timer } = &mut st.phase {
                if let Some(t) = timer.take() {
                    sched.cancel(t.handle);
                    if t.end <= now {
                        *slots = 0;
                        due.push(idx);
                    } else if now > t.resume_at {
                        let elapsed = ((now - t.resume_at).0 / slot) as u32;
                        *slots = slots.saturating_sub(elapsed);
                    }
                }
            }
        }
        for idx in due {
            self.transmit_data(idx, sched, out);
        }
    }

    fn on_medium_idle<S: Scheduler<MacEvent>>(&mut self, sched: &mut S) {
        for idx in 0..self.stations.len() {
            self.arm_backoff(idx, sched);
        }
    }

    fn begin_tx<S: Scheduler<MacEvent>>(
        &mut self,
        sender: usize,
        kind: TxKind,
        duration: SimTime,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        let id = self.next_tx_id;
        self.next_tx_id += 1;
        let overlapped = !self.active.is_empty();
        if overlapped {
            for tx in &mut self.active {
                if !tx.corrupted {
                    tx.corrupted = true;
                    self.collisions += 1;
                }
            }
            self.collisions += 1;
        }
        self.active.push(ActiveTx {
            id,
            sender,
            kind,
            corrupted: overlapped,
        });
        sched.schedule_in(duration, MacEvent::TxEnd { tx: id });
        self.on_medium_busy(sched, out);
    }

    fn transmit_data<S: Scheduler<MacEvent>>(
        &mut self,
        sta: usize,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        let frame = self.stations[sta]
            .frame
            .as_ref()
            .expect("backoff only runs with a frame in service");
        let dst = frame.dst;
        let on_air = frame.on_air_bytes();
        let rate = match dst {
            MacDst::Unicast(to) => self.links[sta][to].unwrap_or(self.phy.min_rate()),
            MacDst::Broadcast => self.phy.min_rate(),
        };
        let duration = self
            .phy
            .transmit_duration(on_air, rate)
            .expect("rate taken from the profile");
        let st = &mut self.stations[sta];
        st.phase = Phase::Transmitting;
        st.counters.frames_sent += 1;
        if dst == MacDst::Broadcast {
            st.counters.broadcasts_sent += 1;
        }
        self.begin_tx(sta, TxKind::Data { dst, rate }, duration, sched, out);
    }

    fn deliver(&mut self, to: usize, from: usize, out: &mut Vec<MacIndication<B>>) {
        let frame = self.stations[from]
            .frame
            .as_ref()
            .expect("sender holds frame");
        let (seq, body) = (frame.frame_seq, frame.body.clone());
        let rx = &mut self.stations[to];
        rx.counters.frames_received += 1;
        // retransmissions of an already delivered frame are ACKed but not passed up
        if rx.last_delivered.get(&from) != Some(&seq) {
            rx.last_delivered.insert(from, seq);
            out.push(MacIndication::Delivered {
                sta: to,
                from,
                body,
            });
        }
    }

    pub fn handle<S: Scheduler<MacEvent>>(
        &mut self,
        ev: MacEvent,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        match ev {
            MacEvent::BackoffDone { sta } => {
                if let Phase::Backoff { timer: Some(_), .. } = self.stations[sta].phase {
                    self.transmit_data(sta, sched, out);
                }
            }
            MacEvent::TxEnd { tx } => self.on_tx_end(tx, sched, out),
            MacEvent::AckStart { from, to, seq } => {
                let duration = self.ack_duration();
                self.begin_tx(from, TxKind::Ack { to, seq }, duration, sched, out);
            }
            MacEvent::AckTimeout { sta } => self.on_ack_timeout(sta, sched, out),
        }
    }

    fn on_tx_end<S: Scheduler<MacEvent>>(
        &mut self,
        tx: u64,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        let pos = self
            .active
            .iter()
            .position(|t| t.id == tx)
            .expect("TxEnd for an active transmission");
        let done = self.active.swap_remove(pos);
        let now = sched.now();
        match done.kind {
            TxKind::Data { dst, rate } => {
                let sender = done.sender;
                match dst {
                    MacDst::Unicast(to) => {
                        let timeout = self.phy.sifs + self.ack_duration() + self.phy.slot;
                        let timer =
                            sched.schedule_in(timeout, MacEvent::AckTimeout { sta: sender });
                        self.stations[sender].phase = Phase::AwaitAck { timer };
                        if !done.corrupted && self.reachable(sender, to, rate) {
                            let seq = self.stations[sender]
                                .frame
                                .as_ref()
                                .map(|f| f.frame_seq)
                                .unwrap_or(0);
                            self.deliver(to, sender, out);
                            sched
                                .schedule(
                                    now + self.phy.sifs,
                                    MacEvent::AckStart {
                                        from: to,
                                        to: sender,
                                        seq,
                                    },
                                )
                                .expect("future");
                        }
                    }
                    MacDst::Broadcast => {
                        if !done.corrupted {
                            for to in 0..self.stations.len() {
                                if to != sender && self.reachable(sender, to, rate) {
                                    self.deliver(to, sender, out);
                                }
                            }
                        }
                        let st = &mut self.stations[sender];
                        st.phase = Phase::Idle;
                        let frame = st.frame.take().expect("sender holds frame");
                        out.push(MacIndication::BroadcastDone { sta: sender, frame });
                    }
                }
            }
            TxKind::Ack { to, seq } => {
                let from = done.sender;
                let rate = self.phy.control_rate;
                if !done.corrupted && self.reachable(from, to, rate) {
                    let st = &mut self.stations[to];
                    let matches = st.frame.as_ref().is_some_and(|f| f.frame_seq == seq);
                    if let (Phase::AwaitAck { timer }, true) = (&st.phase, matches) {
                        sched.cancel(*timer);
                        st.phase = Phase::Idle;
                        st.cw = self.phy.cw_min;
                        st.counters.frames_acked += 1;
                        let frame = st.frame.take().expect("checked above");
                        out.push(MacIndication::Acked { sta: to, frame });
                    }
                }
            }
        }
        if self.active.is_empty() {
            self.on_medium_idle(sched);
        }
    }

    fn on_ack_timeout<S: Scheduler<MacEvent>>(
        &mut self,
        sta: usize,
        sched: &mut S,
        out: &mut Vec<MacIndication<B>>,
    ) {
        let cw_min = self.phy.cw_min;
        let cw_max = self.phy.cw_max;
        let retry_limit = self.retry_limit;
        let st = &mut self.stations[sta];
        if !matches!(st.phase, Phase::AwaitAck { .. }) {
            return;
        }
        let frame = st.frame.as_mut().expect("awaiting ACK for a held frame");
        frame.retry_count += 1;
        if frame.retry_count > retry_limit {
            st.counters.frames_dropped_retry += 1;
            st.cw = cw_min;
            st.phase = Phase::Idle;
            let frame = st.frame.take().expect("checked above");
            out.push(MacIndication::Dropped { sta, frame });
        } else {
            st.counters.retx_ack_timeout += 1;
            st.cw = (2 * (st.cw + 1) - 1).min(cw_max);
            self.begin_contention(sta, sched);
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BianchiError {
    #[error("station count must be at least 1")]
    NoStations,
    #[error("fixed point did not converge")]
    NoConvergence,
    #[error(transparent)]
    Radio(#[from] crate::radio::RadioError),
}

/// Solution of the saturation fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BianchiSolution {
    /// Per-slot transmission probability.
    pub tau: f64,
    /// Conditional collision probability.
    pub p: f64,
    /// Normalized saturation throughput.
    pub throughput: f64,
}

/// Number of backoff stages such that `(cw_min + 1) · 2^m = cw_max + 1`.
pub fn backoff_stages(phy: &PhyProfile) -> u32 {
    let mut m = 0;
    let mut w = phy.cw_min + 1;
    while w < phy.cw_max + 1 {
        w *= 2;
        m += 1;
    }
    m
}

/// Saturation throughput of `n` basic-access stations sending
/// `payload_bytes` MAC bodies at the profile's maximum rate.
///
/// Solves τ = 2 / (1 + W + pW·Σ_{i<m}(2p)^i) with p = 1 − (1 − τ)^(n−1)
/// by bisection, then evaluates the slot-average throughput with
/// T_s = DATA + SIFS + ACK + DIFS and T_c = DATA + DIFS.
pub fn bianchi_saturation_throughput(
    n: u32,
    phy: &PhyProfile,
    payload_bytes: u32,
) -> Result<BianchiSolution, BianchiError> {
    if n == 0 {
        return Err(BianchiError::NoStations);
    }
    let w = (phy.cw_min + 1) as f64;
    let m = backoff_stages(phy);
    let collision_prob = |tau: f64| 1.0 - (1.0 - tau).powi(n as i32 - 1);
    let tau_of_p = |p: f64| {
        let series: f64 = (0..m).map(|i| (2.0 * p).powi(i as i32)).sum();
        2.0 / (1.0 + w + p * w * series)
    };

    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let mut converged = false;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid - tau_of_p(collision_prob(mid)) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(BianchiError::NoConvergence);
    }
    let tau = 0.5 * (lo + hi);
    let p = collision_prob(tau);

    let rate = phy.max_rate();
    let data = phy
        .transmit_duration(payload_bytes + MAC_OVERHEAD_BYTES, rate)?
        .0 as f64;
    let ack = phy.transmit_duration(ACK_FRAME_BYTES, phy.control_rate)?.0 as f64;
    let sifs = phy.sifs.0 as f64;
    let difs = phy.difs().0 as f64;
    let slot = phy.slot.0 as f64;
    let payload_time = 8.0 * payload_bytes as f64 * 1e6 / rate as f64;
    let t_s = data + sifs + ack + difs;
    let t_c = data + difs;

    let p_tr = 1.0 - (1.0 - tau).powi(n as i32);
    let p_s = n as f64 * tau * (1.0 - tau).powi(n as i32 - 1) / p_tr;
    let throughput = p_s * p_tr * payload_time
        / ((1.0 - p_tr) * slot + p_tr * p_s * t_s + p_tr * (1.0 - p_s) * t_c);
    Ok(BianchiSolution { tau, p, throughput })
}

/// Outcome of a saturated single-channel DCF run.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationRun {
    /// Payload airtime fraction at the maximum rate.
    pub throughput: f64,
    pub acked_per_station: Vec<u64>,
    pub retransmissions: u64,
    pub drops: u64,
}

/// Runs `n` always-backlogged stations sending to a silent sink.
pub fn simulate_saturation(
    n: usize,
    phy: &PhyProfile,
    payload_bytes: u32,
    duration: SimTime,
    seed: u64,
) -> SaturationRun {
    let mut wlan: Wlan<()> = Wlan::new(phy.clone(), DEFAULT_RETRY_LIMIT);
    for i in 0..n {
        wlan.add_station(RngStream::new(seed, format!("mac.backoff.sta{i}")));
    }
    let sink = wlan.add_station(RngStream::new(seed, "mac.backoff.sink"));
    let mut engine: Engine<MacEvent> = Engine::new();
    let mut out = Vec::new();
    for sta in 0..n {
        wlan.start_transmission(
            sta,
            MacDst::Unicast(sink),
            payload_bytes,
            (),
            SimTime::ZERO,
            &mut engine,
        )
        .expect("fresh station is idle");
    }
    let mut acked = vec![0u64; n];
    while let Some(ev) = engine.pop_until(duration) {
        wlan.handle(ev.payload, &mut engine, &mut out);
        for ind in std::mem::take(&mut out) {
            let sta = match ind {
                MacIndication::Acked { sta, .. } => {
                    acked[sta] += 1;
                    sta
                }
                MacIndication::Dropped { sta, .. } => sta,
                _ => continue,
            };
            let now = engine.now();
            wlan.start_transmission(
                sta,
                MacDst::Unicast(sink),
                payload_bytes,
                (),
                now,
                &mut engine,
            )
            .expect("station reported idle");
        }
    }
    let payload_us = 8.0 * payload_bytes as f64 * 1e6 / phy.max_rate() as f64;
    let total: u64 = acked.iter().sum();
    SaturationRun {
        throughput: total as f64 * payload_us / duration.0 as f64,
        acked_per_station: acked,
        retransmissions: (0..n).map(|s| wlan.counters(s).retx_ack_timeout).sum(),
        drops: (0..n).map(|s| wlan.counters(s).frames_dropped_retry).sum(),
    }
}
