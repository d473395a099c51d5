//! Ground-truth water state and forward sensor models.
//!
//! Each forward model is the inverse of the matching conversion in
//! [`crate::calib`]: it turns a physical truth into the raw value a probe and
//! converter would produce, with optional Gaussian noise in ADC counts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::calib::{tds_invert, CalibrationCurve, DoCalib, DoIndexing, DoTable, TdsCalib};
use crate::dsp::{clamp_code, quantize, AdcSample, ChannelConfig, ChannelId};
use crate::error::{Error, Result};

/// Speed of sound, cm/µs.
pub const SOUND_CM_PER_US: f64 = 0.0343;
pub const ULTRASONIC_MIN_CM: f64 = 2.0;
pub const ULTRASONIC_MAX_CM: f64 = 400.0;
/// DS18B20 12-bit resolution.
pub const TEMP_RESOLUTION_C: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WaterTruth {
    pub ph: f64,
    pub do_mgl: f64,
    pub temp_c: f64,
    pub tds_ppm: f64,
    pub level_cm: f64,
}

impl Default for WaterTruth {
    fn default() -> Self {
        WaterTruth {
            ph: 7.0,
            do_mgl: 8.24,
            temp_c: 25.0,
            tds_ppm: 367.475,
            level_cm: 50.0,
        }
    }
}

impl WaterTruth {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("ph", self.ph, 0.0, 14.0),
            ("do_mgl", self.do_mgl, 0.0, 20.0),
            ("temp_c", self.temp_c, 0.0, 40.0),
            ("tds_ppm", self.tds_ppm, 0.0, 1200.0),
            ("level_cm", self.level_cm, 0.0, f64::INFINITY),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) {
                return Err(Error::Config(format!("truth {name}={v} outside {lo}..={hi}")));
            }
        }
        Ok(())
    }

    /// Pulls every field back inside its physical bounds.
    pub fn clamped(self) -> Self {
        WaterTruth {
            ph: self.ph.clamp(0.0, 14.0),
            do_mgl: self.do_mgl.clamp(0.0, 20.0),
            temp_c: self.temp_c.clamp(0.0, 40.0),
            tds_ppm: self.tds_ppm.clamp(0.0, 1200.0),
            level_cm: self.level_cm.max(0.0),
        }
    }
}

/// Random-walk intensities (per √s) and the diurnal temperature swing.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthDynamics {
    pub walk_ph: f64,
    pub walk_do: f64,
    pub walk_temp: f64,
    pub walk_tds: f64,
    pub walk_level: f64,
    /// Peak deviation of the daily temperature cycle, °C.
    pub diurnal_amp_c: f64,
}

impl TruthDynamics {
    pub fn is_static(&self) -> bool {
        *self == TruthDynamics::default()
    }
}

const DAY_S: f64 = 86_400.0;

/// Advances the truth by `dt` seconds starting at `elapsed_s`.
pub fn step_truth<R: Rng>(
    state: WaterTruth,
    dt: f64,
    elapsed_s: f64,
    dynamics: &TruthDynamics,
    rng: &mut R,
) -> WaterTruth {
    if dynamics.is_static() {
        return state;
    }
    let scale = dt.max(0.0).sqrt();
    let mut walk = |sigma: f64| {
        if sigma == 0.0 {
            0.0
        } else {
            let z: f64 = rng.sample(StandardNormal);
            z * sigma * scale
        }
    };
    let phase = |t: f64| (2.0 * std::f64::consts::PI * t / DAY_S).sin();
    let diurnal = dynamics.diurnal_amp_c * (phase(elapsed_s + dt) - phase(elapsed_s));

    WaterTruth {
        ph: state.ph + walk(dynamics.walk_ph),
        do_mgl: state.do_mgl + walk(dynamics.walk_do),
        temp_c: state.temp_c + walk(dynamics.walk_temp) + diurnal,
        tds_ppm: state.tds_ppm + walk(dynamics.walk_tds),
        level_cm: state.level_cm + walk(dynamics.walk_level),
    }
    .clamped()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma_counts: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            sigma_counts: 0.0,
            seed: 0,
        }
    }
}

/// A seeded Gaussian noise stream for one channel.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    sigma: f64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(spec: NoiseSpec) -> Result<Self> {
        Self::with_stream(spec, 0)
    }

    /// Independent stream `stream` derived from the same seed.
    pub fn with_stream(spec: NoiseSpec, stream: u64) -> Result<Self> {
        if !(spec.sigma_counts >= 0.0) || !spec.sigma_counts.is_finite() {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", spec.sigma_counts)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        Ok(NoiseSource {
            sigma: spec.sigma_counts,
            rng,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// One draw of N(0, σ) in counts; zero without touching the stream when σ = 0.
    pub fn draw(&mut self) -> f64 {
        if self.sigma == 0.0 {
            return 0.0;
        }
        let z: f64 = self.rng.sample(StandardNormal);
        z * self.sigma
    }
}

/// ADC code the pH probe produces for `truth.ph` under the electrode
/// characteristic `curve`.
pub fn ph_forward(
    truth: &WaterTruth,
    curve: &CalibrationCurve,
    cfg: &ChannelConfig,
    noise: &mut NoiseSource,
    t_ms: u64,
) -> AdcSample {
    let ideal = (truth.ph - curve.offset) / curve.slope;
    AdcSample {
        channel: ChannelId::Ph,
        counts: clamp_code((ideal + noise.draw()).round(), cfg),
        t_ms,
    }
}

/// Raw TDS probe voltage for the current truth, before quantization.
pub fn tds_raw_voltage(truth: &WaterTruth, cal: &TdsCalib) -> Result<f64> {
    let v_comp = tds_invert(truth.tds_ppm, cal.ref_temp, cal)?;
    Ok(v_comp * cal.compensation(truth.temp_c)?)
}

/// Quantizes a raw TDS voltage and adds noise in counts.
pub fn tds_sample(v_raw: f64, cfg: &ChannelConfig, noise: &mut NoiseSource, t_ms: u64) -> AdcSample {
    let ideal = v_raw / cfg.lsb_volts();
    let counts = if noise.sigma() == 0.0 {
        quantize(v_raw, cfg)
    } else {
        clamp_code((ideal + noise.draw()).round(), cfg)
    };
    AdcSample {
        channel: ChannelId::Tds,
        counts,
        t_ms,
    }
}

pub fn tds_forward(
    truth: &WaterTruth,
    cal: &TdsCalib,
    cfg: &ChannelConfig,
    noise: &mut NoiseSource,
    t_ms: u64,
) -> Result<AdcSample> {
    let v_raw = tds_raw_voltage(truth, cal)?;
    Ok(tds_sample(v_raw, cfg, noise, t_ms))
}

/// Galvanic probe voltage in mV. Noise is drawn in counts of `cfg` and
/// converted to mV; the channel itself is not quantized.
pub fn do_forward(
    truth: &WaterTruth,
    table: &DoTable,
    cal: &DoCalib,
    cfg: &ChannelConfig,
    noise: &mut NoiseSource,
) -> Result<f64> {
    do_forward_with(truth, table, cal, DoIndexing::Nearest, cfg, noise)
}

pub fn do_forward_with(
    truth: &WaterTruth,
    table: &DoTable,
    cal: &DoCalib,
    indexing: DoIndexing,
    cfg: &ChannelConfig,
    noise: &mut NoiseSource,
) -> Result<f64> {
    let saturation = table.lookup(truth.temp_c, indexing)?;
    let denom = cal.saturation_mv(truth.temp_c);
    if !(denom > 0.0) {
        return Err(Error::DoDomain(denom));
    }
    let ideal = truth.do_mgl * denom * 1000.0 / saturation;
    Ok(ideal + noise.draw() * cfg.lsb_volts() * 1000.0)
}

/// Round-trip echo time in µs for an ultrasonic sensor mounted
/// `mount_height_cm` above the bottom.
pub fn level_forward(truth: &WaterTruth, mount_height_cm: f64, noise_us: &mut NoiseSource) -> Result<f64> {
    let distance = mount_height_cm - truth.level_cm;
    if !(ULTRASONIC_MIN_CM..=ULTRASONIC_MAX_CM).contains(&distance) {
        return Err(Error::UltrasonicRange(distance));
    }
    Ok((distance * 2.0 / SOUND_CM_PER_US + noise_us.draw()).max(0.0))
}

/// Gateway-side inverse of [`level_forward`].
pub fn level_from_echo(echo_us: f64, mount_height_cm: f64) -> f64 {
    mount_height_cm - echo_us * SOUND_CM_PER_US / 2.0
}

/// DS18B20 reading: truth plus Gaussian noise, quantized to 1/16 °C.
pub fn temp_forward(truth: &WaterTruth, noise_c: &mut NoiseSource) -> f64 {
    ((truth.temp_c + noise_c.draw()) / TEMP_RESOLUTION_C).round() * TEMP_RESOLUTION_C
}
