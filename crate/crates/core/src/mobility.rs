//! Piecewise-linear waypoint motion.

use crate::engine::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn lerp(self, to: Position, frac: f64) -> Position {
        Position::new(
            self.x + (to.x - self.x) * frac,
            self.y + (to.y - self.y) * frac,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub position: Position,
    /// Speed on the segment ending at this waypoint, m/s.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Segment {
    from: Position,
    to: Position,
    start: SimTime,
    end: SimTime,
}

/// A node that starts at `start_position`, waits until `start_time`, then
/// visits each waypoint in order and stays at the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct WaypointPath {
    start_position: Position,
    start_time: SimTime,
    segments: Vec<Segment>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("waypoint {index}: speed must be positive and finite, got {speed}")]
pub struct BadSpeed {
    pub index: usize,
    pub speed: f64,
}

impl WaypointPath {
    pub fn new(
        start_position: Position,
        start_time: SimTime,
        waypoints: &[Waypoint],
    ) -> Result<Self, BadSpeed> {
        let mut segments = Vec::with_capacity(waypoints.len());
        let mut from = start_position;
        let mut t = start_time;
        for (index, wp) in waypoints.iter().enumerate() {
            if !(wp.speed > 0.0 && wp.speed.is_finite()) {
                return Err(BadSpeed {
                    index,
                    speed: wp.speed,
                });
            }
            let travel = SimTime::from_secs_f64(from.distance(wp.position) / wp.speed);
            segments.push(Segment {
                from,
                to: wp.position,
                start: t,
                end: t + travel,
            });
            from = wp.position;
            t = t + travel;
        }
        Ok(Self {
            start_position,
            start_time,
            segments,
        })
    }

    pub fn stationary(at: Position) -> Self {
        Self {
            start_position: at,
            start_time: SimTime::ZERO,
            segments: Vec::new(),
        }
    }

    pub fn start_position(&self) -> Position {
        self.start_position
    }

    /// Time the node reaches its final waypoint.
    pub fn arrival_time(&self) -> SimTime {
        self.segments.last().map_or(self.start_time, |s| s.end)
    }

    pub fn is_stationary(&self) -> bool {
        self.segments.iter().all(|s| s.from == s.to)
    }

    pub fn max_speed(&self) -> f64 {
        self.segments
            .iter()
            .filter(|s| s.end > s.start)
            .map(|s| s.from.distance(s.to) / (s.end - s.start).as_secs_f64())
            .fold(0.0, f64::max)
    }

    pub fn position_at(&self, t: SimTime) -> Position {
        if t <= self.start_time {
            return self.start_position;
        }
        for seg in &self.segments {
            if t < seg.end {
                let span = (seg.end - seg.start).as_micros() as f64;
                let frac = (t - seg.start).as_micros() as f64 / span;
                return seg.from.lerp(seg.to, frac);
            }
        }
        self.segments.last().map_or(self.start_position, |s| s.to)
    }

    /// Next time the node's link rates must be re-evaluated: the earlier of
    /// `t + interval` and the next segment boundary, or `None` once the node
    /// has stopped for good.
    pub fn next_move_event(&self, t: SimTime, interval: SimTime) -> Option<SimTime> {
        if self.is_stationary() || t >= self.arrival_time() {
            return None;
        }
        if t < self.start_time {
            return Some(self.start_time);
        }
        let boundary = self
            .segments
            .iter()
            .map(|s| s.end)
            .find(|&end| end > t)
            .unwrap_or(self.arrival_time());
        Some((t + interval).min(boundary))
    }

    /// Every re-evaluation instant over `[0, horizon]`.
    pub fn reevaluation_times(&self, horizon: SimTime, interval: SimTime) -> Vec<SimTime> {
        let mut out = Vec::new();
        let mut t = SimTime::ZERO;
        while let Some(next) = self.next_move_event(t, interval) {
            if next > horizon {
                break;
            }
            out.push(next);
            t = next;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wp(x: f64, y: f64, speed: f64) -> Waypoint {
        Waypoint {
            position: Position::new(x, y),
            speed,
        }
    }

    #[test]
    fn starts_at_start_position() {
        let p = WaypointPath::new(
            Position::new(3.0, 4.0),
            SimTime::ZERO,
            &[wp(10.0, 4.0, 1.0)],
        )
        .unwrap();
        assert_eq!(p.position_at(SimTime::ZERO), Position::new(3.0, 4.0));
    }

    #[test]
    fn midpoint_of_single_segment() {
        let p = WaypointPath::new(
            Position::new(0.0, 0.0),
            SimTime::from_secs(2),
            &[wp(100.0, 0.0, 10.0)],
        )
        .unwrap();
        assert_eq!(
            p.position_at(SimTime::from_secs(7)),
            Position::new(50.0, 0.0)
        );
        assert_eq!(
            p.position_at(SimTime::from_secs(1)),
            Position::new(0.0, 0.0)
        );
        assert_eq!(
            p.position_at(SimTime::from_secs(500)),
            Position::new(100.0, 0.0)
        );
    }

    #[test]
    fn rejects_non_positive_speed() {
        let err = WaypointPath::new(
            Position::new(0.0, 0.0),
            SimTime::ZERO,
            &[wp(1.0, 0.0, 1.0), wp(2.0, 0.0, 0.0)],
        )
        .unwrap_err();
        assert_eq!(err.index, 1);
    }

    #[test]
    fn stationary_never_reevaluates() {
        let p = WaypointPath::stationary(Position::new(1.0, 1.0));
        assert_eq!(
            p.next_move_event(SimTime::ZERO, SimTime::from_secs(1)),
            None
        );
    }

    #[test]
    fn next_event_is_min_of_interval_and_boundary() {
        let p = WaypointPath::new(
            Position::new(0.0, 0.0),
            SimTime::ZERO,
            &[wp(11.0, 0.0, 1.0), wp(11.0, 100.0, 1.0)],
        )
        .unwrap();
        let one = SimTime::from_secs(1);
        assert_eq!(
            p.next_move_event(SimTime::from_millis(10_200), one),
            Some(SimTime::from_millis(11_000))
        );
        assert_eq!(
            p.next_move_event(SimTime::from_millis(9_800), one),
            Some(SimTime::from_millis(10_800))
        );
        assert_eq!(p.next_move_event(SimTime::from_secs(111), one), None);
    }

    proptest::proptest! {
        #[test]
        fn speed_bound_and_continuity(
            pts in proptest::collection::vec((-200.0f64..200.0, -200.0f64..200.0, 0.1f64..20.0), 1..6),
            t1 in 0u64..200_000_000,
            dt in 0u64..5_000_000,
        ) {
            let wps: Vec<_> = pts.iter().map(|&(x, y, s)| wp(x, y, s)).collect();
            let p = WaypointPath::new(Position::new(0.0, 0.0), SimTime::from_secs(1), &wps).unwrap();
            let a = p.position_at(SimTime(t1));
            let b = p.position_at(SimTime(t1 + dt));
            let bound = p.max_speed() * dt as f64 / 1e6;
            // rounding segment durations to whole microseconds perturbs speed slightly
            proptest::prop_assert!(a.distance(b) <= bound * (1.0 + 1e-6) + 1e-3);
        }
    }
}
