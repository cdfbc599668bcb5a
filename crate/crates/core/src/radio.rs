//! PHY profiles, channel masks, two-ray path loss and reception decisions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, PartialEq)]
pub enum RadioError {
    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("rate {0} b/s is not part of the PHY profile")]
    UnknownRate(u64),
    #[error("frame size must be positive")]
    EmptyFrame,
    #[error("invalid channel mask {0:?}: expected 1-4 characters of '0'/'1'")]
    BadMask(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Standard {
    A,
    B,
}

impl fmt::Display for Standard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Standard::A => "802.11a",
            Standard::B => "802.11b",
        })
    }
}

impl FromStr for Standard {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "a" | "802.11a" => Ok(Standard::A),
            "b" | "802.11b" => Ok(Standard::B),
            other => Err(format!("unknown PHY {other:?} (expected a or b)")),
        }
    }
}

/// Timing, rate set and receive sensitivity of one 802.11 PHY.
#[derive(Debug, Clone, PartialEq)]
pub struct PhyProfile {
    pub standard: Standard,
    /// Ascending data rates in bits/s.
    pub rates: Vec<u64>,
    /// dBm threshold per entry of `rates`.
    pub rx_sensitivity_dbm: Vec<f64>,
    pub slot: SimTime,
    pub sifs: SimTime,
    pub preamble: SimTime,
    pub cw_min: u32,
    pub cw_max: u32,
    /// Rate used for ACK frames.
    pub control_rate: u64,
}

impl PhyProfile {
    /// 802.11b DSSS/CCK with the long preamble.
    pub fn dot11b() -> Self {
        Self {
            standard: Standard::B,
            rates: vec![1_000_000, 2_000_000, 5_500_000, 11_000_000],
            rx_sensitivity_dbm: vec![-94.0, -91.0, -87.0, -83.0],
            slot: SimTime(20),
            sifs: SimTime(10),
            preamble: SimTime(192),
            cw_min: 31,
            cw_max: 1023,
            control_rate: 1_000_000,
        }
    }

    /// 802.11a OFDM.
    pub fn dot11a() -> Self {
        Self {
            standard: Standard::A,
            rates: vec![
                6_000_000, 9_000_000, 12_000_000, 18_000_000, 24_000_000, 36_000_000, 48_000_000,
                54_000_000,
            ],
            rx_sensitivity_dbm: vec![-85.0, -84.0, -82.0, -80.0, -77.0, -73.0, -69.0, -68.0],
            slot: SimTime(9),
            sifs: SimTime(16),
            preamble: SimTime(20),
            cw_min: 15,
            cw_max: 1023,
            control_rate: 6_000_000,
        }
    }

    pub fn for_standard(standard: Standard) -> Self {
        match standard {
            Standard::A => Self::dot11a(),
            Standard::B => Self::dot11b(),
        }
    }

    pub fn difs(&self) -> SimTime {
        self.sifs + SimTime(2 * self.slot.0)
    }

    pub fn max_rate(&self) -> u64 {
        *self.rates.last().expect("profile has at least one rate")
    }

    pub fn min_rate(&self) -> u64 {
        self.rates[0]
    }

    pub fn sensitivity(&self, rate: u64) -> Result<f64, RadioError> {
        self.rates
            .iter()
            .position(|&r| r == rate)
            .map(|i| self.rx_sensitivity_dbm[i])
            .ok_or(RadioError::UnknownRate(rate))
    }

    /// Airtime of a frame of `frame_bytes` at `rate`, PHY header included.
    ///
    /// DSSS/CCK: preamble + ceil(8L / rate).
    /// OFDM: preamble + 4 µs symbols carrying 16 service bits, 8L data bits and 6 tail bits.
    pub fn transmit_duration(&self, frame_bytes: u32, rate: u64) -> Result<SimTime, RadioError> {
        if frame_bytes == 0 {
            return Err(RadioError::EmptyFrame);
        }
        self.sensitivity(rate)?;
        let bits = 8 * frame_bytes as u64;
        let payload_us = match self.standard {
            Standard::B => (bits * 1_000_000).div_ceil(rate),
            Standard::A => {
                let bits_per_symbol = rate * 4 / 1_000_000;
                4 * (16 + bits + 6).div_ceil(bits_per_symbol)
            }
        };
        Ok(self.preamble + SimTime(payload_us))
    }
}

/// Transmit-side radio settings shared by every node of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioConfig {
    pub tx_power_dbm: f64,
    /// Applied at both transmitter and receiver.
    pub antenna_gain_db: f64,
    pub noise_floor_dbm: f64,
}

impl Default for RadioConfig {
    fn default() -> Self {
        Self {
            tx_power_dbm: 39.0,
            antenna_gain_db: 15.0,
            noise_floor_dbm: -101.0,
        }
    }
}

impl RadioConfig {
    pub fn received_power_dbm(&self, loss_db: f64) -> f64 {
        self.tx_power_dbm + 2.0 * self.antenna_gain_db - loss_db
    }
}

fn wavelength(freq_hz: f64) -> f64 {
    SPEED_OF_LIGHT / freq_hz
}

/// Distance where the two-ray model switches from free-space to d⁻⁴ decay.
pub fn crossover_distance(freq_hz: f64, ht: f64, hr: f64) -> f64 {
    4.0 * std::f64::consts::PI * ht * hr / wavelength(freq_hz)
}

/// Two-ray ground reflection path loss in dB.
pub fn path_loss_db(d: f64, freq_hz: f64, ht: f64, hr: f64) -> Result<f64, RadioError> {
    for (what, value) in [
        ("distance", d),
        ("frequency", freq_hz),
        ("tx antenna height", ht),
        ("rx antenna height", hr),
    ] {
        if !(value > 0.0) {
            return Err(RadioError::NonPositive { what, value });
        }
    }
    let lambda = wavelength(freq_hz);
    if d < crossover_distance(freq_hz, ht, hr) {
        Ok(20.0 * (4.0 * std::f64::consts::PI * d / lambda).log10())
    } else {
        Ok(40.0 * d.log10() - 20.0 * (ht * hr).log10())
    }
}

pub fn can_decode(
    tx: &RadioConfig,
    loss_db: f64,
    rate: u64,
    phy: &PhyProfile,
) -> Result<bool, RadioError> {
    let threshold = phy.sensitivity(rate)?;
    Ok(tx.received_power_dbm(loss_db) >= threshold)
}

/// Highest rate whose sensitivity threshold is met, or `None` when out of range.
pub fn select_rate(tx: &RadioConfig, loss_db: f64, phy: &PhyProfile) -> Option<u64> {
    let rx = tx.received_power_dbm(loss_db);
    phy.rates
        .iter()
        .zip(&phy.rx_sensitivity_dbm)
        .filter(|(_, &s)| rx >= s)
        .map(|(&r, _)| r)
        .next_back()
}

/// Four-bit channel mask, written left to right as channels 0..3 ("0100" = channel 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ChannelMask(u8);

impl ChannelMask {
    pub const WIDTH: usize = 4;

    pub fn single(channel: usize) -> Self {
        assert!(channel < Self::WIDTH);
        ChannelMask(1 << channel)
    }

    pub fn contains(self, channel: usize) -> bool {
        channel < Self::WIDTH && self.0 & (1 << channel) != 0
    }

    pub fn channels(self) -> impl Iterator<Item = usize> {
        (0..Self::WIDTH).filter(move |&c| self.contains(c))
    }

    pub fn is_subset_of(self, other: ChannelMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl FromStr for ChannelMask {
    type Err = RadioError;
    fn from_str(s: &str) -> Result<Self, RadioError> {
        if s.is_empty() || s.len() > Self::WIDTH {
            return Err(RadioError::BadMask(s.to_string()));
        }
        let mut bits = 0u8;
        for (i, c) in s.chars().enumerate() {
            match c {
                '1' => bits |= 1 << i,
                '0' => {}
                _ => return Err(RadioError::BadMask(s.to_string())),
            }
        }
        Ok(ChannelMask(bits))
    }
}

impl fmt::Display for ChannelMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in 0..Self::WIDTH {
            f.write_str(if self.contains(c) { "1" } else { "0" })?;
        }
        Ok(())
    }
}
