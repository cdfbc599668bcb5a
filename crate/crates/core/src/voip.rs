//! G.711 media: talk-spurt driven frame generation, receive-side jitter
//! buffer and the loss-based quality verdict.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::engine::SimTime;

pub const FRAME_INTERVAL: SimTime = SimTime(20_000);
pub const FRAME_BYTES: u32 = 160;
pub const DEFAULT_PLAYOUT_DELAY: SimTime = SimTime(60_000);
pub const DEFAULT_JITTER_CAPACITY: SimTime = SimTime(120_000);
/// Loss fraction at or above which a stream is rated Poor.
pub const POOR_LOSS_THRESHOLD: f64 = 0.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VoipError {
    #[error("loss fraction {0} outside [0, 1]")]
    LossOutOfRange(f64),
    #[error("talk spurt {index} is empty or reversed ({start} .. {stop})")]
    BadSpurt {
        index: usize,
        start: SimTime,
        stop: SimTime,
    },
    #[error("talk spurts {index} and {next} overlap")]
    OverlappingSpurts { index: usize, next: usize },
}

/// Interval of speech, as offsets from dialog establishment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TalkSpurt {
    pub start: SimTime,
    pub stop: SimTime,
}

impl TalkSpurt {
    pub fn new(start: SimTime, stop: SimTime) -> Self {
        Self { start, stop }
    }

    pub fn duration(&self) -> SimTime {
        self.stop.saturating_sub(self.start)
    }
}

pub fn validate_spurts(spurts: &[TalkSpurt]) -> Result<(), VoipError> {
    for (index, s) in spurts.iter().enumerate() {
        if s.stop <= s.start {
            return Err(VoipError::BadSpurt {
                index,
                start: s.start,
                stop: s.stop,
            });
        }
        if let Some(next) = spurts.get(index + 1) {
            if next.start < s.stop {
                return Err(VoipError::OverlappingSpurts {
                    index,
                    next: index + 1,
                });
            }
        }
    }
    Ok(())
}

/// One generated media frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RtpFrame {
    pub seq: u32,
    pub generated_at: SimTime,
}

/// Sender side of one media direction.
#[derive(Debug, Clone)]
pub struct G711Source {
    spurts: Vec<TalkSpurt>,
    rtp_seq: u32,
    rtp_start_at: Option<SimTime>,
    stop_at: Option<SimTime>,
    talk_time: SimTime,
}

impl G711Source {
    pub fn new(spurts: Vec<TalkSpurt>) -> Result<Self, VoipError> {
        validate_spurts(&spurts)?;
        Ok(Self {
            spurts,
            rtp_seq: 0,
            rtp_start_at: None,
            stop_at: None,
            talk_time: SimTime::ZERO,
        })
    }

    /// Dialog established at `at`; spurt offsets are measured from here.
    pub fn start(&mut self, at: SimTime) {
        if self.rtp_start_at.is_none() {
            self.rtp_start_at = Some(at);
        }
    }

    /// Dialog left Established at `at`; no frame at or after `at` is produced.
    pub fn stop(&mut self, at: SimTime) {
        self.stop_at = Some(self.stop_at.map_or(at, |s| s.min(at)));
    }

    pub fn rtp_start_at(&self) -> Option<SimTime> {
        self.rtp_start_at
    }

    pub fn frames_sent(&self) -> u32 {
        self.rtp_seq
    }

    /// Talk time actually spent generating frames.
    pub fn talk_time(&self) -> SimTime {
        self.talk_time
    }

    /// Earliest frame instant `>= t`, if any.
    pub fn next_frame_at(&self, t: SimTime) -> Option<SimTime> {
        let base = self.rtp_start_at?;
        for s in &self.spurts {
            let (start, stop) = (base + s.start, base + s.stop);
            let stop = self.stop_at.map_or(stop, |x| x.min(stop));
            if t >= stop {
                continue;
            }
            let t = t.max(start);
            let k = (t - start).0.div_ceil(FRAME_INTERVAL.0);
            let at = start + SimTime(k * FRAME_INTERVAL.0);
            if at < stop {
                return Some(at);
            }
        }
        None
    }

    /// Produces the frame due at `now`; `None` if `now` is not a frame instant.
    pub fn emit(&mut self, now: SimTime) -> Option<RtpFrame> {
        if self.next_frame_at(now) != Some(now) {
            return None;
        }
        let frame = RtpFrame {
            seq: self.rtp_seq,
            generated_at: now,
        };
        self.rtp_seq += 1;
        self.talk_time = self.talk_time + FRAME_INTERVAL;
        Some(frame)
    }

    /// Every frame instant for a dialog established at `at` and never stopped.
    pub fn schedule(spurts: &[TalkSpurt], at: SimTime) -> Vec<SimTime> {
        let mut src = G711Source {
            spurts: spurts.to_vec(),
            rtp_seq: 0,
            rtp_start_at: Some(at),
            stop_at: None,
            talk_time: SimTime::ZERO,
        };
        let mut out = Vec::new();
        let mut t = at;
        while let Some(next) = src.next_frame_at(t) {
            src.emit(next);
            out.push(next);
            t = next + SimTime(1);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JitterOutcome {
    ScheduledPlay(SimTime),
    DroppedLate,
    DroppedOverflow,
    Duplicate,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct JitterCounters {
    pub received: u64,
    pub played: u64,
    pub dropped_late: u64,
    pub dropped_overflow: u64,
    pub duplicates: u64,
}

impl JitterCounters {
    pub fn dropped(&self) -> u64 {
        self.dropped_late + self.dropped_overflow
    }
}

/// Fixed-delay playout buffer for one stream.
#[derive(Debug, Clone)]
pub struct JitterBuffer {
    playout_delay: SimTime,
    capacity: SimTime,
    buffered: BTreeMap<u32, SimTime>,
    seen: HashSet<u32>,
    counters: JitterCounters,
    last_played: Option<u32>,
}

impl Default for JitterBuffer {
    fn default() -> Self {
        Self::new(DEFAULT_PLAYOUT_DELAY, DEFAULT_JITTER_CAPACITY)
    }
}

impl JitterBuffer {
    pub fn new(playout_delay: SimTime, capacity: SimTime) -> Self {
        Self {
            playout_delay,
            capacity,
            buffered: BTreeMap::new(),
            seen: HashSet::new(),
            counters: JitterCounters::default(),
            last_played: None,
        }
    }

    pub fn counters(&self) -> JitterCounters {
        self.counters
    }

    /// Packets accepted but not yet played.
    pub fn buffered(&self) -> usize {
        self.buffered.len()
    }

    pub fn insert(&mut self, frame: RtpFrame, arrival: SimTime) -> JitterOutcome {
        self.play_due(arrival);
        self.counters.received += 1;
        if !self.seen.insert(frame.seq) {
            self.counters.duplicates += 1;
            return JitterOutcome::Duplicate;
        }
        let play_at = frame.generated_at + self.playout_delay;
        if arrival > play_at || self.last_played.is_some_and(|s| frame.seq < s) {
            self.counters.dropped_late += 1;
            return JitterOutcome::DroppedLate;
        }
        let oldest = self
            .buffered
            .values()
            .copied()
            .min()
            .unwrap_or(play_at)
            .min(play_at);
        let newest = self
            .buffered
            .values()
            .copied()
            .max()
            .unwrap_or(play_at)
            .max(play_at);
        if newest - oldest > self.capacity {
            self.counters.dropped_overflow += 1;
            return JitterOutcome::DroppedOverflow;
        }
        self.buffered.insert(frame.seq, play_at);
        JitterOutcome::ScheduledPlay(play_at)
    }

    /// Plays every buffered packet whose playout instant is `<= now`, in
    /// sequence order. Returns the sequence numbers played.
    pub fn play_due(&mut self, now: SimTime) -> Vec<u32> {
        let mut played = Vec::new();
        while let Some((&seq, &at)) = self.buffered.iter().next() {
            if at > now {
                break;
            }
            self.buffered.remove(&seq);
            self.last_played = Some(seq);
            self.counters.played += 1;
            played.push(seq);
        }
        played
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Good,
    Poor,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityVerdict {
    pub loss_fraction: f64,
    pub verdict: Verdict,
}

pub fn classify_quality(loss_fraction: f64) -> Result<QualityVerdict, VoipError> {
    if !(0.0..=1.0).contains(&loss_fraction) {
        return Err(VoipError::LossOutOfRange(loss_fraction));
    }
    let verdict = if loss_fraction < POOR_LOSS_THRESHOLD {
        Verdict::Good
    } else {
        Verdict::Poor
    };
    Ok(QualityVerdict {
        loss_fraction,
        verdict,
    })
}

/// One-way delay accumulator shared by media and CBR flows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DelayStats {
    pub count: u64,
    pub sum_us: u64,
    pub max_us: u64,
}

impl DelayStats {
    pub fn record(&mut self, delay: SimTime) {
        self.count += 1;
        self.sum_us += delay.0;
        self.max_us = self.max_us.max(delay.0);
    }

    /// Mean delay in ms; `None` when nothing was delivered.
    pub fn mean_ms(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_us as f64 / self.count as f64 / 1000.0)
    }

    pub fn max_ms(&self) -> Option<f64> {
        (self.count > 0).then(|| self.max_us as f64 / 1000.0)
    }

    pub fn merge(&mut self, other: &DelayStats) {
        self.count += other.count;
        self.sum_us += other.sum_us;
        self.max_us = self.max_us.max(other.max_us);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::encapsulate;

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    #[test]
    fn one_second_spurt_is_fifty_frames() {
        let times = G711Source::schedule(&[TalkSpurt::new(ms(0), ms(1000))], ms(5000));
        assert_eq!(times.len(), 50);
        assert_eq!(times[0], ms(5000));
        assert_eq!(times[49], ms(5980));
    }

    #[test]
    fn payload_and_wire_rates() {
        let spurt = SimTime::from_secs(3);
        let n = G711Source::schedule(&[TalkSpurt::new(SimTime::ZERO, spurt)], SimTime::ZERO).len()
            as u64;
        assert_eq!(n * FRAME_BYTES as u64 * 8 / 3, 64_000);
        let wire = encapsulate(FRAME_BYTES, true).unwrap().wire_bytes() as u64;
        assert_eq!(n * wire * 8 / 3, 80_000);
    }

    #[test]
    fn stop_gates_generation() {
        let mut src = G711Source::new(vec![TalkSpurt::new(ms(0), ms(1000))]).unwrap();
        assert_eq!(src.next_frame_at(SimTime::ZERO), None);
        src.start(ms(100));
        src.stop(ms(200));
        let mut t = ms(100);
        let mut sent = Vec::new();
        while let Some(at) = src.next_frame_at(t) {
            sent.push(src.emit(at).unwrap());
            t = at + SimTime(1);
        }
        assert_eq!(sent.len(), 5);
        assert!(sent
            .iter()
            .all(|f| f.generated_at >= ms(100) && f.generated_at < ms(200)));
        assert_eq!(src.talk_time(), ms(100));
    }

    #[test]
    fn bad_spurts_rejected() {
        assert!(G711Source::new(vec![TalkSpurt::new(ms(5), ms(5))]).is_err());
        assert_eq!(
            validate_spurts(&[
                TalkSpurt::new(ms(0), ms(50)),
                TalkSpurt::new(ms(40), ms(60))
            ]),
            Err(VoipError::OverlappingSpurts { index: 0, next: 1 })
        );
    }

    #[test]
    fn lateness_is_strict() {
        let mut jb = JitterBuffer::default();
        let f = |seq, g| RtpFrame {
            seq,
            generated_at: ms(g),
        };
        assert_eq!(
            jb.insert(f(0, 0), ms(0)),
            JitterOutcome::ScheduledPlay(ms(60))
        );
        assert_eq!(
            jb.insert(f(1, 20), ms(80)),
            JitterOutcome::ScheduledPlay(ms(80))
        );
        assert_eq!(jb.insert(f(2, 40), ms(101)), JitterOutcome::DroppedLate);
        assert_eq!(jb.insert(f(1, 20), ms(102)), JitterOutcome::Duplicate);
        let c = jb.counters();
        assert_eq!((c.played, c.dropped_late, c.duplicates), (2, 1, 1));
        assert_eq!(
            c.received,
            c.played + c.dropped() + c.duplicates + jb.buffered() as u64
        );
    }

    #[test]
    fn quality_thresholds() {
        assert_eq!(classify_quality(0.0).unwrap().verdict, Verdict::Good);
        assert_eq!(classify_quality(0.04).unwrap().verdict, Verdict::Good);
        assert_eq!(classify_quality(0.05).unwrap().verdict, Verdict::Poor);
        assert_eq!(classify_quality(0.06).unwrap().verdict, Verdict::Poor);
        assert!(classify_quality(1.2).is_err());
        assert!(classify_quality(f64::NAN).is_err());
    }

    #[test]
    fn delay_stats_arithmetic() {
        let mut d = DelayStats::default();
        assert_eq!(d.mean_ms(), None);
        for v in [10, 20, 30] {
            d.record(ms(v));
        }
        assert_eq!(d.mean_ms(), Some(20.0));
        assert_eq!(d.max_ms(), Some(30.0));
    }

    proptest::proptest! {
        #[test]
        fn jitter_closure_and_monotone_playout(
            delays in proptest::collection::vec((0u64..150_000, 0u8..4), 1..200)
        ) {
            let mut jb = JitterBuffer::default();
            let mut arrivals: Vec<(SimTime, RtpFrame)> = Vec::new();
            for (i, &(d, dup)) in delays.iter().enumerate() {
                let frame = RtpFrame { seq: i as u32, generated_at: SimTime(i as u64 * 20_000) };
                arrivals.push((frame.generated_at + SimTime(d), frame));
                if dup == 0 {
                    arrivals.push((frame.generated_at + SimTime(d + 3_000), frame));
                }
            }
            arrivals.sort_by_key(|(t, f)| (*t, f.seq));
            let mut played = Vec::new();
            for (t, f) in &arrivals {
                played.extend(jb.play_due(*t));
                jb.insert(*f, *t);
            }
            played.extend(jb.play_due(SimTime::MAX));
            let c = jb.counters();
            proptest::prop_assert_eq!(c.received, arrivals.len() as u64);
            proptest::prop_assert_eq!(c.received, c.played + c.dropped() + c.duplicates);
            proptest::prop_assert!(played.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn verdict_is_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let good_hi = classify_quality(hi).unwrap().verdict == Verdict::Good;
            let good_lo = classify_quality(lo).unwrap().verdict == Verdict::Good;
            proptest::prop_assert!(!good_hi || good_lo);
        }
    }
}
