//! Sampling primitives: ADC channel configuration, burst averaging and the
//! integer median filter used on the TDS window.
//!
//! Counts are unsigned, so the truncating division in the even-length median
//! branch is the same as floor division.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Raw ADC code.
pub type Counts = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelId {
    Ph,
    Do,
    Tds,
    Temp,
    Level,
}

/// One quantized reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdcSample {
    pub channel: ChannelId,
    pub counts: Counts,
    /// Simulation time in milliseconds.
    pub t_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig {
    pub bits: u8,
    pub vref: f64,
    pub sample_period_ms: u64,
    pub burst_len: usize,
}

impl ChannelConfig {
    pub fn new(bits: u8, vref: f64, sample_period_ms: u64, burst_len: usize) -> Result<Self> {
        let cfg = ChannelConfig {
            bits,
            vref,
            sample_period_ms,
            burst_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// pH on the node: 10-bit, 5 V, 20 samples at 20 ms.
    pub fn ph() -> Self {
        ChannelConfig {
            bits: 10,
            vref: 5.0,
            sample_period_ms: 20,
            burst_len: 20,
        }
    }

    /// DO on the node: same converter as pH, one reading per cycle.
    pub fn dissolved_oxygen() -> Self {
        ChannelConfig {
            bits: 10,
            vref: 5.0,
            sample_period_ms: 20,
            burst_len: 1,
        }
    }

    /// TDS on the gateway: 12-bit, 3.3 V, 30-sample window at 40 ms.
    pub fn tds() -> Self {
        ChannelConfig {
            bits: 12,
            vref: 3.3,
            sample_period_ms: 40,
            burst_len: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bits != 10 && self.bits != 12 {
            return Err(Error::ChannelConfig(format!("bits must be 10 or 12, got {}", self.bits)));
        }
        if !(self.vref > 0.0) || !self.vref.is_finite() {
            return Err(Error::ChannelConfig(format!("vref must be positive, got {}", self.vref)));
        }
        if self.sample_period_ms == 0 {
            return Err(Error::ChannelConfig("sample period must be positive".into()));
        }
        if self.burst_len == 0 {
            return Err(Error::ChannelConfig("burst length must be at least 1".into()));
        }
        Ok(())
    }

    pub fn max_counts(&self) -> Counts {
        (1u32 << self.bits) - 1
    }

    /// Number of codes, 2^bits.
    pub fn full_scale(&self) -> f64 {
        f64::from(1u32 << self.bits)
    }

    /// Volts per code.
    pub fn lsb_volts(&self) -> f64 {
        self.vref / self.full_scale()
    }
}

/// Median of a window of raw counts.
///
/// Odd lengths return the middle order statistic. Even lengths return the
/// truncated mean of the two central order statistics, i.e. the integer
/// division `(a + b) / 2` the firmware performs.
pub fn median_filter(window: &[Counts]) -> Result<Counts> {
    if window.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut sorted = window.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    if n % 2 == 1 {
        Ok(sorted[(n - 1) / 2])
    } else {
        let sum = u64::from(sorted[n / 2]) + u64::from(sorted[n / 2 - 1]);
        // the mean of two u32 values always fits back in u32
        Ok((sum / 2) as Counts)
    }
}

/// Arithmetic mean of a burst, without truncation.
pub fn burst_mean(burst: &[Counts]) -> Result<f64> {
    if burst.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let sum: u64 = burst.iter().map(|&c| u64::from(c)).sum();
    Ok(sum as f64 / burst.len() as f64)
}

/// Standard ADC transfer: `counts * vref / 2^bits`.
pub fn counts_to_voltage(counts: f64, cfg: &ChannelConfig) -> Result<f64> {
    let max = cfg.max_counts();
    if !(0.0..=f64::from(max)).contains(&counts) {
        return Err(Error::AdcRange { counts, max });
    }
    Ok(counts * cfg.vref / cfg.full_scale())
}

/// Inverse of [`counts_to_voltage`], rounded to the nearest code and clamped
/// to the converter range.
pub fn quantize(volts: f64, cfg: &ChannelConfig) -> Counts {
    let code = (volts / cfg.lsb_volts()).round();
    clamp_code(code, cfg)
}

pub(crate) fn clamp_code(code: f64, cfg: &ChannelConfig) -> Counts {
    if code.is_nan() || code <= 0.0 {
        0
    } else if code >= f64::from(cfg.max_counts()) {
        cfg.max_counts()
    } else {
        code as Counts
    }
}
