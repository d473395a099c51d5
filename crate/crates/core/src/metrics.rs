//! Energy and reliability arithmetic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DAY_S: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerMode {
    pub name: String,
    pub current_ma: f64,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub modes: Vec<PowerMode>,
    pub supply_v: f64,
}

/// Daily energy use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DailyEnergy {
    pub mah: f64,
    pub wh: f64,
}

impl PowerProfile {
    pub fn new(modes: &[(&str, f64, f64)], supply_v: f64) -> Result<Self> {
        let profile = PowerProfile {
            modes: modes
                .iter()
                .map(|&(name, current_ma, duration_s)| PowerMode {
                    name: name.to_string(),
                    current_ma,
                    duration_s,
                })
                .collect(),
            supply_v,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        for m in &self.modes {
            if !(m.duration_s >= 0.0) || !m.current_ma.is_finite() || m.current_ma < 0.0 {
                return Err(Error::Config(format!("bad power mode {m:?}")));
            }
        }
        if !(self.supply_v > 0.0) {
            return Err(Error::Config(format!("supply voltage must be positive, got {}", self.supply_v)));
        }
        Ok(())
    }

    pub fn total_s(&self) -> f64 {
        self.modes.iter().map(|m| m.duration_s).sum()
    }

    /// Charge over the whole profile, mA·s.
    fn charge_mas(&self) -> f64 {
        self.modes.iter().map(|m| m.current_ma * m.duration_s).sum()
    }
}

/// One day sampling every 10 s: active sensing, wifi transmit, sleep.
pub fn reference_day_profile(supply_v: f64) -> PowerProfile {
    PowerProfile::new(
        &[
            ("active-sensing", 120.0, 8640.0),
            ("wifi-tx", 185.0, 864.0),
            ("sleep", 15.15, 76_896.0),
        ],
        supply_v,
    )
    .expect("constant profile is valid")
}

/// Time-weighted average current, mA.
pub fn p_avg(profile: &PowerProfile) -> Result<f64> {
    let total = profile.total_s();
    if !(total > 0.0) {
        return Err(Error::EmptyProfile);
    }
    Ok(profile.charge_mas() / total)
}

pub fn e_daily(profile: &PowerProfile) -> Result<DailyEnergy> {
    let total = profile.total_s();
    if (total - DAY_S).abs() > 1e-6 {
        return Err(Error::NotADay(total));
    }
    let mah = profile.charge_mas() / 3600.0;
    Ok(DailyEnergy {
        mah,
        wh: mah * profile.supply_v / 1000.0,
    })
}

/// Percentage of successes.
pub fn success_rate(n_success: u64, n_total: u64) -> Result<f64> {
    if n_total == 0 {
        return Err(Error::DivZero);
    }
    Ok(100.0 * n_success as f64 / n_total as f64)
}

/// Original size as a percentage of encoded size.
pub fn compression_ratio(original_bytes: u64, encoded_bytes: u64) -> Result<f64> {
    if encoded_bytes == 0 {
        return Err(Error::DivZero);
    }
    Ok(100.0 * original_bytes as f64 / encoded_bytes as f64)
}
