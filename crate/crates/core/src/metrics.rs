//! Result records of one run: time series, scalar summary, session
//! timeline and per-flow accounting.

use std::collections::BTreeMap;

use crate::radio::Standard;
use crate::sip::{DialogState, SipStats};
use crate::stack::FlowCounters;
use crate::voip::{JitterCounters, QualityVerdict};

/// One named time series, `(t_seconds, value)` points in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricSeries {
    pub name: String,
    pub unit: String,
    pub points: Vec<(f64, f64)>,
}

impl MetricSeries {
    pub fn new(name: impl Into<String>, unit: impl Into<String>, points: Vec<(f64, f64)>) -> Self {
        Self {
            name: name.into(),
            unit: unit.into(),
            points,
        }
    }

    pub fn max_value(&self) -> Option<f64> {
        self.points.iter().map(|p| p.1).reduce(f64::max)
    }

    /// File-system friendly form of the name.
    pub fn file_stem(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                    c
                } else {
                    '_'
                }
            })
            .collect()
    }
}

/// One dialog, shaped like a session statistics table.
#[derive(Debug, Clone, PartialEq)]
pub struct TimelineRow {
    pub call_id: String,
    pub initiator: u32,
    pub receiver: u32,
    pub state: DialogState,
    pub initiation_s: Option<f64>,
    pub establishment_s: Option<f64>,
    pub bye_s: Option<f64>,
    pub end_s: Option<f64>,
    pub rtp_start_s: Option<f64>,
    pub talk_initiator_s: f64,
    pub talk_receiver_s: f64,
    pub sent_initiator: u64,
    pub sent_receiver: u64,
    /// Media packets that reached the initiator.
    pub received_initiator: u64,
    pub received_receiver: u64,
    /// Earliest and latest generation instant of any media frame.
    pub first_frame_s: Option<f64>,
    pub last_frame_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoipFlowReport {
    pub id: String,
    pub sent: u64,
    pub jitter: JitterCounters,
    pub still_buffered: u64,
    pub mean_delay_ms: Option<f64>,
    pub max_delay_ms: Option<f64>,
    pub quality: QualityVerdict,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtpFlowReport {
    pub id: String,
    pub server: u32,
    pub client: u32,
    pub item_bytes: u64,
    pub bytes_acked: u64,
    pub bytes_received: u64,
    pub retransmissions: u64,
    pub completed_s: Option<f64>,
    pub server_peak_bps: f64,
    pub client_peak_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CbrFlowReport {
    pub id: String,
    pub sent: u64,
    pub received: u64,
    pub mean_delay_ms: Option<f64>,
    pub max_delay_ms: Option<f64>,
    /// Received payload bits over the active window.
    pub throughput_bps: f64,
}

/// Packet accounting of one flow at the end of a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConservationRow {
    pub flow: String,
    pub counters: FlowCounters,
    pub in_flight: u64,
}

impl ConservationRow {
    pub fn holds(&self) -> bool {
        self.counters.sent == self.counters.accounted() + self.in_flight
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub scenario: String,
    pub phy: Standard,
    pub seed: u64,
    pub duration_s: f64,
    pub events_fired: u64,
    pub scalars: BTreeMap<String, f64>,
    pub series: Vec<MetricSeries>,
    pub timeline: Vec<TimelineRow>,
    pub voip: Vec<VoipFlowReport>,
    pub ftp: Vec<FtpFlowReport>,
    pub cbr: Vec<CbrFlowReport>,
    pub conservation: Vec<ConservationRow>,
    pub sip: SipStats,
}

/// Scalar keys every report carries, one per headline metric family.
pub const FAMILY_KEYS: [&str; 7] = [
    "ftp_server_peak_bps",
    "ftp_client_peak_bps",
    "cbr_mean_delay_ms",
    "cbr_throughput_bps",
    "jitter_drops",
    "mac_retx_ack_timeout",
    "fifo_avg_wait_ms",
];

impl RunReport {
    pub fn scalar(&self, key: &str) -> Option<f64> {
        self.scalars.get(key).copied()
    }

    pub fn series(&self, name: &str) -> Option<&MetricSeries> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn has_all_families(&self) -> bool {
        FAMILY_KEYS.iter().all(|k| self.scalars.contains_key(*k))
    }

    pub fn conservation_holds(&self) -> bool {
        self.conservation.iter().all(ConservationRow::holds)
    }

    pub fn jitter_closure_holds(&self) -> bool {
        self.voip.iter().all(|v| {
            let j = v.jitter;
            j.received
                == j.played + j.dropped_late + j.dropped_overflow + j.duplicates + v.still_buffered
        })
    }
}
