//! Scenario files: plain TOML, one section per concern.
//!
//! ```toml
//! [run]
//! name = "buffers"
//! cycles = 5
//! seed = 1
//!
//! [[phases]]
//! cycles = 1
//! ph = 4.0
//!
//! [envelope]
//! ph_mean_abs = 0.06
//! ```
//!
//! Every section except `[run]` is optional.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{parse_calibration_pairs, CalibrationCurve, DoIndexing};
use crate::error::{Error, Result};
use crate::node::{default_electrode, FaultWindow};
use crate::sensors::{TruthDynamics, WaterTruth};
use crate::uplink::{OutageSchedule, RttModel};

/// Buffer solutions used for the automatic 5-point calibration.
pub const REFERENCE_BUFFERS: [f64; 5] = [4.00, 6.86, 7.00, 9.18, 10.01];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub run: RunSection,
    #[serde(default)]
    pub truth: WaterTruth,
    #[serde(default)]
    pub dynamics: TruthDynamics,
    #[serde(default)]
    pub noise: NoiseSection,
    #[serde(default)]
    pub outage: OutageSection,
    #[serde(default)]
    pub rtt: RttModel,
    #[serde(default)]
    pub link: LinkSection,
    #[serde(default)]
    pub faults: Vec<FaultWindow>,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub power: PowerSection,
    #[serde(default)]
    pub envelope: Envelope,
    #[serde(default)]
    pub phases: Vec<Phase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub cycles: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_device")]
    pub device_id: String,
}

fn default_device() -> String {
    "hs-01".into()
}

/// Gaussian noise per channel. ADC channels in counts, temperature in °C,
/// ultrasonic echo in µs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub ph_counts: f64,
    pub do_counts: f64,
    pub tds_counts: f64,
    pub temp_c: f64,
    pub echo_us: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutageSection {
    /// `[start_ms, end_ms]` pairs, half-open.
    pub windows: Vec<[u64; 2]>,
}

impl OutageSection {
    pub fn schedule(&self) -> Result<OutageSchedule> {
        OutageSchedule::new(self.windows.iter().map(|w| (w[0], w[1])).collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    /// Probability that any one bit of a node frame is flipped in transit.
    pub bit_error_rate: f64,
    /// Serial transit time of a node frame.
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibrationSource {
    /// Measure the buffers through the simulated probe and fit.
    #[default]
    Auto,
    /// Fit from a pairs file.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationSection {
    pub source: CalibrationSource,
    pub buffers: Vec<f64>,
    /// Pairs file, relative to the scenario file.
    pub file: Option<PathBuf>,
    /// The simulated electrode's true response.
    pub electrode_slope: f64,
    pub electrode_offset: f64,
    pub do_indexing: DoIndexing,
    pub mount_height_cm: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        let e = default_electrode();
        CalibrationSection {
            source: CalibrationSource::Auto,
            buffers: REFERENCE_BUFFERS.to_vec(),
            file: None,
            electrode_slope: e.slope,
            electrode_offset: e.offset,
            do_indexing: DoIndexing::Nearest,
            mount_height_cm: 150.0,
        }
    }
}

impl CalibrationSection {
    pub fn electrode(&self) -> CalibrationCurve {
        CalibrationCurve::from_line(self.electrode_slope, self.electrode_offset)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerSection {
    pub supply_v: f64,
}

impl Default for PowerSection {
    fn default() -> Self {
        PowerSection { supply_v: 5.0 }
    }
}

/// Pass limits checked by the report. Unset limits are not checked.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Envelope {
    pub ph_mean_abs: Option<f64>,
    pub ph_max_abs: Option<f64>,
    pub tds_mean_rel_pct: Option<f64>,
    pub tds_max_rel_pct: Option<f64>,
    pub do_mean_rel_pct: Option<f64>,
    pub do_max_rel_pct: Option<f64>,
    pub delivery_min_pct: Option<f64>,
    pub first_attempt_min_pct: Option<f64>,
    pub pending_max: Option<u64>,
    pub seq_gaps_max: Option<u64>,
    pub latency_mean_max_ms: Option<f64>,
}

/// Holds the truth at fixed values for `cycles` cycles. Unset fields carry
/// over from before.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub cycles: u64,
    pub ph: Option<f64>,
    pub do_mgl: Option<f64>,
    pub temp_c: Option<f64>,
    pub tds_ppm: Option<f64>,
    pub level_cm: Option<f64>,
}

impl Phase {
    pub fn apply(&self, truth: WaterTruth) -> WaterTruth {
        WaterTruth {
            ph: self.ph.unwrap_or(truth.ph),
            do_mgl: self.do_mgl.unwrap_or(truth.do_mgl),
            temp_c: self.temp_c.unwrap_or(truth.temp_c),
            tds_ppm: self.tds_ppm.unwrap_or(truth.tds_ppm),
            level_cm: self.level_cm.unwrap_or(truth.level_cm),
        }
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(scenario)
    }

    /// Reads, resolves relative paths against the file's directory and
    /// validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read scenario {}: {e}", path.display())))?;
        let mut scenario = Self::parse(&text)?;
        if let Some(file) = &scenario.calibration.file {
            if file.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                scenario.calibration.file = Some(base.join(file));
            }
        }
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |msg: String| Err(Error::Config(msg));
        if self.run.cycles < 1 {
            return cfg("run.cycles must be >= 1".into());
        }
        if self.run.name.is_empty() || self.run.name.contains(['/', '\\']) {
            return cfg(format!("run.name {:?} is not a plain name", self.run.name));
        }
        self.truth.validate()?;
        for (i, phase) in self.phases.iter().enumerate() {
            if phase.cycles < 1 {
                return cfg(format!("phase {i} needs cycles >= 1"));
            }
            phase
                .apply(self.truth)
                .validate()
                .map_err(|e| Error::Config(format!("phase {i}: {e}")))?;
        }
        let n = &self.noise;
        for (name, v) in [
            ("ph_counts", n.ph_counts),
            ("do_counts", n.do_counts),
            ("tds_counts", n.tds_counts),
            ("temp_c", n.temp_c),
            ("echo_us", n.echo_us),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return cfg(format!("noise.{name} must be a finite value >= 0"));
            }
        }
        self.outage.schedule()?;
        self.rtt.validate()?;
        if !(0.0..1.0).contains(&self.link.bit_error_rate) {
            return cfg("link.bit_error_rate must be within [0, 1)".into());
        }
        if self.link.latency_ms > 60_000 {
            return cfg("link.latency_ms must be at most 60000".into());
        }
        for f in &self.faults {
            if f.start_cycle >= f.end_cycle {
                return cfg(format!("fault window {f:?} is empty"));
            }
        }
        let c = &self.calibration;
        if !c.electrode().is_valid() {
            return cfg("calibration electrode slope must be finite and nonzero".into());
        }
        if !(c.mount_height_cm > 0.0) {
            return cfg("calibration.mount_height_cm must be positive".into());
        }
        match c.source {
            CalibrationSource::Auto => {
                if c.buffers.len() != 5 {
                    return cfg(format!("calibration.buffers needs 5 values, got {}", c.buffers.len()));
                }
            }
            CalibrationSource::File => {
                let Some(file) = &c.file else {
                    return cfg("calibration.source = \"file\" needs calibration.file".into());
                };
                let text = fs::read_to_string(file)
                    .map_err(|e| Error::Config(format!("calibration file {}: {e}", file.display())))?;
                parse_calibration_pairs(&text)?;
            }
        }
        if !(self.power.supply_v > 0.0) {
            return cfg("power.supply_v must be positive".into());
        }
        Ok(())
    }

    /// Truth setpoint phase active at `cycle`, if phases are defined.
    pub fn phase_at(&self, cycle: u64) -> Option<(usize, &Phase)> {
        let mut start = 0;
        for (i, p) in self.phases.iter().enumerate() {
            if cycle < start + p.cycles {
                return Some((i, p));
            }
            start += p.cycles;
        }
        None
    }

    /// First cycle of each phase.
    pub fn phase_starts(&self) -> Vec<u64> {
        self.phases
            .iter()
            .scan(0, |start, p| {
                let s = *start;
                *start += p.cycles;
                Some(s)
            })
            .collect()
    }
}
