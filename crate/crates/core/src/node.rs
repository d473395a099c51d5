//! The sensor node: samples pH and DO on a fixed schedule and ships the
//! semi-raw values to the gateway as checksummed ASCII sentences.
//!
//! Wire format, one frame per line:
//!
//! ```text
//! $HS,<seq>,<ph_counts_mean>,<do_mv>[,F=<CODE>|<CODE>...]*<XX>\n
//! ```
//!
//! `XX` is the XOR of every payload byte (between `$` and `*`) as two
//! uppercase hex digits. A dropped reading leaves its field empty.

use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationCurve, DoCalib, DoIndexing, DoTable};
use crate::clock::SimClock;
use crate::dsp::{burst_mean, AdcSample, ChannelConfig};
use crate::error::{Error, Result};
use crate::flags::{join_codes, Flag, FlagSet};
use crate::sensors::{do_forward_with, ph_forward, NoiseSource, WaterTruth};

/// Sentence tag for node frames.
pub const FRAME_TAG: &str = "HS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleSchedule {
    pub ph_burst_len: usize,
    pub ph_period_ms: u64,
    pub tds_window: usize,
    pub tds_period_ms: u64,
    pub cycle_period_ms: u64,
}

impl Default for CycleSchedule {
    fn default() -> Self {
        CycleSchedule {
            ph_burst_len: 20,
            ph_period_ms: 20,
            tds_window: 30,
            tds_period_ms: 40,
            cycle_period_ms: 1000,
        }
    }
}

impl CycleSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.ph_burst_len == 0 || self.tds_window == 0 {
            return Err(Error::Config("burst and window lengths must be >= 1".into()));
        }
        if self.ph_period_ms == 0 || self.tds_period_ms == 0 || self.cycle_period_ms == 0 {
            return Err(Error::Config("schedule periods must be positive".into()));
        }
        if self.ph_burst_ms() > self.cycle_period_ms {
            return Err(Error::Config(format!(
                "pH burst takes {} ms, longer than the {} ms cycle",
                self.ph_burst_ms(),
                self.cycle_period_ms
            )));
        }
        if !self.cycle_period_ms.is_multiple_of(self.tds_period_ms) {
            return Err(Error::Config("TDS sample period must divide the cycle period".into()));
        }
        Ok(())
    }

    /// Time the node spends collecting one pH burst.
    pub fn ph_burst_ms(&self) -> u64 {
        self.ph_burst_len as u64 * self.ph_period_ms
    }

    pub fn tds_samples_per_cycle(&self) -> usize {
        (self.cycle_period_ms / self.tds_period_ms) as usize
    }

    /// Whole cycles the TDS window spans.
    pub fn tds_window_cycles(&self) -> u64 {
        (self.tds_window as u64 * self.tds_period_ms).div_ceil(self.cycle_period_ms)
    }
}

/// XOR of all bytes.
pub fn checksum(payload: &[u8]) -> u8 {
    payload.iter().fold(0, |acc, b| acc ^ b)
}

/// Bytes a payload may not contain.
pub const RESERVED: [u8; 3] = *b"$*\n";

/// `$` + payload + `*` + checksum hex + `\n`.
pub fn frame_encode(payload: &str) -> Result<Vec<u8>> {
    if payload.bytes().any(|b| RESERVED.contains(&b)) {
        return Err(Error::FrameCharset);
    }
    let mut wire = Vec::with_capacity(payload.len() + 5);
    wire.push(b'$');
    wire.extend_from_slice(payload.as_bytes());
    wire.extend_from_slice(format!("*{:02X}\n", checksum(payload.as_bytes())).as_bytes());
    Ok(wire)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkFrame {
    pub seq: u64,
    pub payload: String,
}

impl LinkFrame {
    pub fn to_wire(&self) -> Result<Vec<u8>> {
        frame_encode(&self.payload)
    }
}

/// Values the node reports for one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeReading {
    pub seq: u64,
    pub ph_counts: Option<f64>,
    pub do_mv: Option<f64>,
    pub flags: FlagSet,
}

impl NodeReading {
    /// Payload text. Numbers use the shortest exact decimal form.
    pub fn to_payload(&self) -> String {
        let field = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut p = format!("{FRAME_TAG},{},{},{}", self.seq, field(self.ph_counts), field(self.do_mv));
        if !self.flags.is_empty() {
            p.push_str(",F=");
            p.push_str(&join_codes(&self.flags));
        }
        p
    }

    pub fn parse_payload(payload: &str) -> Result<Self> {
        let bad = |why: &str| Error::BadFraming(format!("{why}: {payload:?}"));
        let fields: Vec<&str> = payload.split(',').collect();
        if fields.len() < 4 || fields.len() > 5 || fields[0] != FRAME_TAG {
            return Err(bad("unexpected field layout"));
        }
        let seq = fields[1].parse::<u64>().map_err(|_| bad("bad seq"))?;
        let value = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                return Ok(None);
            }
            let v = s.parse::<f64>().map_err(|_| bad("bad number"))?;
            if !v.is_finite() {
                return Err(bad("non-finite number"));
            }
            Ok(Some(v))
        };
        let ph_counts = value(fields[2])?;
        let do_mv = value(fields[3])?;
        let mut flags = FlagSet::new();
        if let Some(f) = fields.get(4) {
            let codes = f.strip_prefix("F=").ok_or_else(|| bad("bad flag field"))?;
            for code in codes.split('|') {
                flags.insert(code.parse::<Flag>().map_err(|e| bad(&e))?);
            }
        }
        Ok(NodeReading {
            seq,
            ph_counts,
            do_mv,
            flags,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SensorFault {
    /// pH converter stuck at a fixed code.
    PhStuck { counts: u32 },
    PhDropout,
    DoDropout,
}

/// A fault active for cycles `start_cycle..end_cycle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultWindow {
    pub start_cycle: u64,
    pub end_cycle: u64,
    #[serde(flatten)]
    pub fault: SensorFault,
}

/// Probe and converter setup of the node.
#[derive(Debug, Clone)]
pub struct NodeConfig {
    pub schedule: CycleSchedule,
    pub ph_channel: ChannelConfig,
    pub do_channel: ChannelConfig,
    /// The physical electrode response (pH = slope * counts + offset).
    pub electrode: CalibrationCurve,
    pub do_table: DoTable,
    pub do_cal: DoCalib,
    pub do_indexing: DoIndexing,
    pub faults: Vec<FaultWindow>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            schedule: CycleSchedule::default(),
            ph_channel: ChannelConfig::ph(),
            do_channel: ChannelConfig::dissolved_oxygen(),
            electrode: default_electrode(),
            do_table: DoTable::default(),
            do_cal: DoCalib::default(),
            do_indexing: DoIndexing::Nearest,
            faults: Vec::new(),
        }
    }
}

/// Electrode response spanning pH 0..14 inside the 10-bit range
/// (pH 14 near code 14, pH 0 near code 1014).
pub fn default_electrode() -> CalibrationCurve {
    CalibrationCurve::from_line(-0.014, 14.2)
}

/// Output of one node cycle.
#[derive(Debug, Clone)]
pub struct NodeCycle {
    pub frame: LinkFrame,
    pub reading: NodeReading,
    /// Every pH sample taken, in time order.
    pub ph_samples: Vec<AdcSample>,
    pub do_sample_ms: u64,
}

pub struct Node {
    config: NodeConfig,
    ph_noise: NoiseSource,
    do_noise: NoiseSource,
    next_seq: u64,
    cycle: u64,
}

impl Node {
    pub fn new(config: NodeConfig, ph_noise: NoiseSource, do_noise: NoiseSource) -> Result<Self> {
        config.schedule.validate()?;
        config.ph_channel.validate()?;
        config.do_channel.validate()?;
        if !config.electrode.is_valid() {
            return Err(Error::Config("electrode curve needs a finite nonzero slope".into()));
        }
        Ok(Node {
            config,
            ph_noise,
            do_noise,
            next_seq: 1,
            cycle: 0,
        })
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    /// Seq the next frame will carry.
    pub fn next_seq(&self) -> u64 {
        self.next_seq
    }

    /// Mean counts of one pH burst for `truth`, as used during calibration.
    pub fn sample_ph_burst(&mut self, truth: &WaterTruth, clock: &mut SimClock) -> (f64, Vec<AdcSample>) {
        let cfg = &self.config;
        let mut samples = Vec::with_capacity(cfg.schedule.ph_burst_len);
        for _ in 0..cfg.schedule.ph_burst_len {
            samples.push(ph_forward(
                truth,
                &cfg.electrode,
                &cfg.ph_channel,
                &mut self.ph_noise,
                clock.now_ms(),
            ));
            clock.advance_by(cfg.schedule.ph_period_ms);
        }
        let counts: Vec<u32> = samples.iter().map(|s| s.counts).collect();
        let mean = burst_mean(&counts).expect("burst length validated >= 1");
        (mean, samples)
    }

    fn active_faults(&self) -> impl Iterator<Item = SensorFault> + '_ {
        let cycle = self.cycle;
        self.config
            .faults
            .iter()
            .filter(move |w| (w.start_cycle..w.end_cycle).contains(&cycle))
            .map(|w| w.fault)
    }

    /// Runs one sampling cycle starting at `clock.now_ms()`.
    ///
    /// pH samples land at t, t+20, ..., t+380 ms; DO is read right after the
    /// burst. The clock ends at t + burst duration.
    pub fn run_cycle(&mut self, truth: &WaterTruth, clock: &mut SimClock) -> NodeCycle {
        let mut flags = FlagSet::new();
        let faults: Vec<SensorFault> = self.active_faults().collect();

        let (mean, mut ph_samples) = self.sample_ph_burst(truth, clock);
        let mut ph_counts = Some(mean);
        let max = self.config.ph_channel.max_counts();
        if ph_samples.iter().any(|s| s.counts == 0 || s.counts == max) {
            flags.insert(Flag::AdcRail);
        }

        let do_sample_ms = clock.now_ms();
        let cfg = &self.config;
        let mut do_mv = match do_forward_with(
            truth,
            &cfg.do_table,
            &cfg.do_cal,
            cfg.do_indexing,
            &cfg.do_channel,
            &mut self.do_noise,
        ) {
            // reported at 1 µV resolution
            Ok(mv) => Some((mv.max(0.0) * 1000.0).round() / 1000.0),
            Err(_) => {
                flags.insert(Flag::DoDomain);
                None
            }
        };

        for fault in faults {
            match fault {
                SensorFault::PhStuck { counts } => {
                    let counts = counts.min(max);
                    for s in &mut ph_samples {
                        s.counts = counts;
                    }
                    ph_counts = Some(f64::from(counts));
                    flags.insert(Flag::PhStuck);
                }
                SensorFault::PhDropout => {
                    ph_counts = None;
                    flags.insert(Flag::PhDrop);
                }
                SensorFault::DoDropout => {
                    do_mv = None;
                    flags.insert(Flag::DoDrop);
                }
            }
        }

        let reading = NodeReading {
            seq: self.next_seq,
            ph_counts,
            do_mv,
            flags,
        };
        let frame = LinkFrame {
            seq: reading.seq,
            payload: reading.to_payload(),
        };
        self.next_seq += 1;
        self.cycle += 1;
        NodeCycle {
            frame,
            reading,
            ph_samples,
            do_sample_ms,
        }
    }
}
