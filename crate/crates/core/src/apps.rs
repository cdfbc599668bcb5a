//! Background load: constant-bit-rate streams and a windowed reliable bulk
//! transfer standing in for FTP.
//!
//! Both are sans-IO. The network glue asks a flow what to send and feeds
//! arrivals and timer expiries back in.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::engine::SimTime;

pub const DEFAULT_BUCKET: SimTime = SimTime(1_000_000);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AppError {
    #[error("start {start} is not before stop {stop}")]
    EmptyWindow { start: SimTime, stop: SimTime },
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

/// Bits delivered per fixed-width time bucket.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThroughputMeter {
    bucket: SimTime,
    bits: Vec<u64>,
}

impl ThroughputMeter {
    pub fn new(bucket: SimTime) -> Result<Self, AppError> {
        if bucket == SimTime::ZERO {
            return Err(AppError::NonPositive("bucket"));
        }
        Ok(Self {
            bucket,
            bits: Vec::new(),
        })
    }

    pub fn record(&mut self, at: SimTime, bytes: u64) {
        let idx = (at.0 / self.bucket.0) as usize;
        if self.bits.len() <= idx {
            self.bits.resize(idx + 1, 0);
        }
        self.bits[idx] += bytes * 8;
    }

    pub fn total_bits(&self) -> u64 {
        self.bits.iter().sum()
    }

    /// `(bucket start in seconds, bits/s)` for every bucket in `[0, horizon)`,
    /// empty buckets included.
    pub fn series(&self, horizon: SimTime) -> Vec<(f64, f64)> {
        let n = horizon.0.div_ceil(self.bucket.0) as usize;
        let width = self.bucket.as_secs_f64();
        (0..n.max(self.bits.len()))
            .map(|i| {
                let bits = self.bits.get(i).copied().unwrap_or(0);
                (i as f64 * width, bits as f64 / width)
            })
            .collect()
    }

    pub fn peak_bps(&self) -> f64 {
        let width = self.bucket.as_secs_f64();
        self.bits
            .iter()
            .map(|&b| b as f64 / width)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbrParams {
    pub payload_bytes: u32,
    pub interval: SimTime,
    pub start_at: SimTime,
    pub stop_at: SimTime,
}

impl CbrParams {
    pub fn validate(&self) -> Result<(), AppError> {
        if self.payload_bytes == 0 {
            return Err(AppError::NonPositive("payload_bytes"));
        }
        if self.interval == SimTime::ZERO {
            return Err(AppError::NonPositive("interval"));
        }
        if self.start_at >= self.stop_at {
            return Err(AppError::EmptyWindow {
                start: self.start_at,
                stop: self.stop_at,
            });
        }
        Ok(())
    }

    /// Departure instant of packet `k`, if it falls before `stop_at`.
    pub fn departure(&self, k: u64) -> Option<SimTime> {
        let t = self.start_at + SimTime(k * self.interval.0);
        (t < self.stop_at).then_some(t)
    }

    pub fn packet_count(&self) -> u64 {
        (self.stop_at - self.start_at).0.div_ceil(self.interval.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FtpParams {
    pub item_bytes: u64,
    pub chunk_bytes: u32,
    pub window: u32,
    pub rto: SimTime,
    pub start_at: SimTime,
    /// Payload of requests and acknowledgements.
    pub control_bytes: u32,
}

impl Default for FtpParams {
    fn default() -> Self {
        Self {
            item_bytes: 25_000_000,
            chunk_bytes: 1460,
            window: 4,
            rto: SimTime::from_millis(200),
            start_at: SimTime::ZERO,
            control_bytes: 40,
        }
    }
}

impl FtpParams {
    pub fn validate(&self) -> Result<(), AppError> {
        for (v, name) in [
            (self.item_bytes, "item_bytes"),
            (self.chunk_bytes as u64, "chunk_bytes"),
            (self.window as u64, "window"),
            (self.rto.0, "rto"),
            (self.control_bytes as u64, "control_bytes"),
        ] {
            if v == 0 {
                return Err(AppError::NonPositive(name));
            }
        }
        Ok(())
    }

    pub fn chunk_count(&self) -> u32 {
        self.item_bytes.div_ceil(self.chunk_bytes as u64) as u32
    }

    pub fn chunk_len(&self, index: u32) -> u32 {
        let start = index as u64 * self.chunk_bytes as u64;
        (self.item_bytes - start).min(self.chunk_bytes as u64) as u32
    }
}

/// Application messages of the bulk transfer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FtpMsg {
    /// Client asks the server to start streaming.
    Request,
    Chunk {
        index: u32,
        bytes: u32,
    },
    Ack {
        index: u32,
    },
}

/// Opaque retransmission timer token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FtpTimer {
    /// `None` for the request timer.
    chunk: Option<u32>,
    generation: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FtpOutput {
    /// Client to server.
    ToServer(FtpMsg),
    /// Server to client.
    ToClient(FtpMsg),
    Timer {
        at: SimTime,
        timer: FtpTimer,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FtpCounters {
    pub chunks_sent: u64,
    pub retransmissions: u64,
    pub bytes_acked: u64,
    pub bytes_received: u64,
    pub duplicate_chunks: u64,
}

/// Both ends of one transfer. The server streams the item to the client.
#[derive(Debug, Clone)]
pub struct FtpTransfer {
    params: FtpParams,
    started: bool,
    request_generation: Option<u64>,
    next_new: u32,
    outstanding: BTreeMap<u32, u64>,
    acked: BTreeSet<u32>,
    received: BTreeSet<u32>,
    next_generation: u64,
    counters: FtpCounters,
    completed_at: Option<SimTime>,
    server_meter: ThroughputMeter,
    client_meter: ThroughputMeter,
}

impl FtpTransfer {
    pub fn new(params: FtpParams, bucket: SimTime) -> Result<Self, AppError> {
        params.validate()?;
        Ok(Self {
            params,
            started: false,
            request_generation: None,
            next_new: 0,
            outstanding: BTreeMap::new(),
            acked: BTreeSet::new(),
            received: BTreeSet::new(),
            next_generation: 0,
            counters: FtpCounters::default(),
            completed_at: None,
            server_meter: ThroughputMeter::new(bucket)?,
            client_meter: ThroughputMeter::new(bucket)?,
        })
    }

    pub fn params(&self) -> &FtpParams {
        &self.params
    }

    pub fn counters(&self) -> FtpCounters {
        self.counters
    }

    pub fn completed_at(&self) -> Option<SimTime> {
        self.completed_at
    }

    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }

    /// Bits sent by the data-sending side, per bucket.
    pub fn server_meter(&self) -> &ThroughputMeter {
        &self.server_meter
    }

    /// New bits received by the data-receiving side, per bucket.
    pub fn client_meter(&self) -> &ThroughputMeter {
        &self.client_meter
    }

    fn arm(&mut self, chunk: Option<u32>, now: SimTime, out: &mut Vec<FtpOutput>) -> u64 {
        let generation = self.next_generation;
        self.next_generation += 1;
        out.push(FtpOutput::Timer {
            at: now + self.params.rto,
            timer: FtpTimer { chunk, generation },
        });
        generation
    }

    /// Client opens the transfer.
    pub fn start(&mut self, now: SimTime) -> Vec<FtpOutput> {
        let mut out = vec![FtpOutput::ToServer(FtpMsg::Request)];
        let g = self.arm(None, now, &mut out);
        self.request_generation = Some(g);
        out
    }

    fn send_chunk(&mut self, index: u32, now: SimTime, out: &mut Vec<FtpOutput>) {
        let bytes = self.params.chunk_len(index);
        self.counters.chunks_sent += 1;
        self.server_meter.record(now, bytes as u64);
        out.push(FtpOutput::ToClient(FtpMsg::Chunk { index, bytes }));
        let g = self.arm(Some(index), now, out);
        self.outstanding.insert(index, g);
    }

    fn fill_window(&mut self, now: SimTime, out: &mut Vec<FtpOutput>) {
        while (self.outstanding.len() as u32) < self.params.window
            && self.next_new < self.params.chunk_count()
        {
            let idx = self.next_new;
            self.next_new += 1;
            self.send_chunk(idx, now, out);
        }
    }

    /// Message delivered to the server.
    pub fn on_server_receive(&mut self, msg: FtpMsg, now: SimTime) -> Vec<FtpOutput> {
        let mut out = Vec::new();
        match msg {
            FtpMsg::Request => {
                if !self.started {
                    self.started = true;
                    self.fill_window(now, &mut out);
                }
            }
            FtpMsg::Ack { index } => {
                if self.outstanding.remove(&index).is_some() && self.acked.insert(index) {
                    self.counters.bytes_acked += self.params.chunk_len(index) as u64;
                    if self.acked.len() as u32 == self.params.chunk_count() {
                        self.completed_at = Some(now);
                    }
                }
                self.fill_window(now, &mut out);
            }
            FtpMsg::Chunk { .. } => {}
        }
        out
    }

    /// Message delivered to the client.
    pub fn on_client_receive(&mut self, msg: FtpMsg, now: SimTime) -> Vec<FtpOutput> {
        let mut out = Vec::new();
        if let FtpMsg::Chunk { index, bytes } = msg {
            self.request_generation = None;
            if self.received.insert(index) {
                self.counters.bytes_received += bytes as u64;
                self.client_meter.record(now, bytes as u64);
            } else {
                self.counters.duplicate_chunks += 1;
            }
            out.push(FtpOutput::ToServer(FtpMsg::Ack { index }));
        }
        out
    }

    pub fn on_timer(&mut self, timer: FtpTimer, now: SimTime) -> Vec<FtpOutput> {
        let mut out = Vec::new();
        match timer.chunk {
            None => {
                if self.request_generation == Some(timer.generation) && !self.started {
                    out.push(FtpOutput::ToServer(FtpMsg::Request));
                    let g = self.arm(None, now, &mut out);
                    self.request_generation = Some(g);
                }
            }
            Some(index) => {
                if self.outstanding.get(&index) == Some(&timer.generation) {
                    self.counters.retransmissions += 1;
                    self.send_chunk(index, now, &mut out);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cbr_departures_are_exact() {
        let p = CbrParams {
            payload_bytes: 512,
            interval: SimTime::from_millis(20),
            start_at: SimTime::from_secs(50),
            stop_at: SimTime::from_secs(60),
        };
        p.validate().unwrap();
        assert_eq!(p.packet_count(), 500);
        assert_eq!(p.departure(0), Some(SimTime::from_secs(50)));
        assert_eq!(p.departure(499), Some(SimTime::from_millis(59_980)));
        assert_eq!(p.departure(500), None);
        let bps = 8.0 * 512.0 / 0.02;
        assert_eq!(bps, 204_800.0);
    }

    #[test]
    fn meter_bins_and_conserves() {
        let mut m = ThroughputMeter::new(DEFAULT_BUCKET).unwrap();
        assert!(m
            .series(SimTime::from_secs(3))
            .iter()
            .all(|&(_, v)| v == 0.0));
        m.record(SimTime::from_millis(1500), 1000);
        let s = m.series(SimTime::from_secs(3));
        assert_eq!(s, vec![(0.0, 0.0), (1.0, 8000.0), (2.0, 0.0)]);
        let total: f64 = s.iter().map(|&(_, v)| v * 1.0).sum();
        assert_eq!(total as u64, m.total_bits());
        assert!(ThroughputMeter::new(SimTime::ZERO).is_err());
    }

    fn drive(ftp: &mut FtpTransfer, lose_first_chunk: bool) -> SimTime {
        // zero-latency loopback with a 1 ms hop
        let hop = SimTime::from_millis(1);
        let mut q: std::collections::BTreeMap<(SimTime, u64), FtpOutput> = Default::default();
        let mut n = 0u64;
        let mut push = |q: &mut std::collections::BTreeMap<(SimTime, u64), FtpOutput>,
                        at: SimTime,
                        o: FtpOutput| {
            q.insert((at, n), o);
            n += 1;
        };
        for o in ftp.start(SimTime::ZERO) {
            let at = if matches!(o, FtpOutput::Timer { .. }) {
                SimTime::ZERO
            } else {
                hop
            };
            push(&mut q, at, o);
        }
        let mut dropped = !lose_first_chunk;
        let mut now = SimTime::ZERO;
        while let Some(((at, _), o)) = q.pop_first() {
            now = at;
            if ftp.is_complete() {
                break;
            }
            let outs = match o {
                FtpOutput::ToServer(m) => ftp.on_server_receive(m, now),
                FtpOutput::ToClient(m) => {
                    if !dropped && matches!(m, FtpMsg::Chunk { index: 0, .. }) {
                        dropped = true;
                        Vec::new()
                    } else {
                        ftp.on_client_receive(m, now)
                    }
                }
                FtpOutput::Timer { at, timer } if at > now => {
                    push(&mut q, at, FtpOutput::Timer { at, timer });
                    continue;
                }
                FtpOutput::Timer { timer, .. } => ftp.on_timer(timer, now),
            };
            for o in outs {
                let at = match o {
                    FtpOutput::Timer { at, .. } => at,
                    _ => now + hop,
                };
                push(&mut q, at, o);
            }
        }
        now
    }

    #[test]
    fn lossless_transfer_completes() {
        let p = FtpParams {
            item_bytes: 10_000,
            ..FtpParams::default()
        };
        let mut ftp = FtpTransfer::new(p, DEFAULT_BUCKET).unwrap();
        drive(&mut ftp, false);
        let c = ftp.counters();
        assert!(ftp.is_complete());
        assert_eq!(c.bytes_acked, 10_000);
        assert_eq!(c.bytes_received, 10_000);
        assert_eq!(c.retransmissions, 0);
        assert_eq!(p.chunk_len(6), 10_000 - 6 * 1460);
    }

    #[test]
    fn single_loss_costs_one_retransmission() {
        let p = FtpParams {
            item_bytes: 10_000,
            ..FtpParams::default()
        };
        let mut ftp = FtpTransfer::new(p, DEFAULT_BUCKET).unwrap();
        drive(&mut ftp, true);
        let c = ftp.counters();
        assert!(ftp.is_complete());
        assert_eq!(c.retransmissions, 1);
        assert_eq!(c.bytes_acked, 10_000);
        assert_eq!(c.bytes_received, 10_000);
        assert_eq!(c.duplicate_chunks, 0);
    }

    #[test]
    fn window_bounds_outstanding() {
        let p = FtpParams::default();
        let mut ftp = FtpTransfer::new(p, DEFAULT_BUCKET).unwrap();
        ftp.start(SimTime::ZERO);
        let out = ftp.on_server_receive(FtpMsg::Request, SimTime(10));
        let chunks = out
            .iter()
            .filter(|o| matches!(o, FtpOutput::ToClient(_)))
            .count();
        assert_eq!(chunks, 4);
        assert_eq!(ftp.outstanding(), 4);
        assert!(ftp
            .on_server_receive(FtpMsg::Request, SimTime(11))
            .is_empty());
    }
}
