//! The gateway: decodes node frames, samples its own probes (TDS,
//! temperature, level), applies calibration and assembles one
//! [`TelemetryRecord`] per cycle.
//!
//! A missing or corrupt node frame never costs a record: the cycle still
//! produces one with the node-side fields absent and flagged.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::calib::{
    do_from_raw_with, ph_from_counts, tds_from_raw, CalibrationCurve, DoCalib, DoIndexing, DoTable, TdsCalib,
    TDS_MAX_PPM,
};
use crate::dsp::{counts_to_voltage, median_filter, ChannelConfig, Counts};
use crate::error::{Error, Result};
use crate::flags::{Flag, FlagSet};
use crate::node::{checksum, CycleSchedule, NodeReading, RESERVED};
use crate::sensors::{
    level_forward, level_from_echo, tds_raw_voltage, tds_sample, temp_forward, NoiseSource, WaterTruth,
};

/// The fused multi-parameter measurement for one cycle.
///
/// Serialized as one JSON object; absent optionals are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryRecord {
    pub device_id: String,
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ph: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub do_mgl: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temp_c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tds_ppm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub level_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nitrogen_est: Option<f64>,
    pub flags: FlagSet,
}

impl TelemetryRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }

    /// Parses and checks one wire line.
    pub fn from_json_line(line: &str) -> Result<Self> {
        let rec: TelemetryRecord = serde_json::from_str(line).map_err(|e| Error::Schema(e.to_string()))?;
        rec.check_schema()?;
        Ok(rec)
    }

    pub fn check_schema(&self) -> Result<()> {
        if self.device_id.is_empty() {
            return Err(Error::Schema("empty device_id".into()));
        }
        let values = [
            self.ph,
            self.do_mgl,
            self.temp_c,
            self.tds_ppm,
            self.level_cm,
            self.nitrogen_est,
        ];
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Schema("non-finite measurement".into()));
        }
        Ok(())
    }

    pub fn is_flagged(&self) -> bool {
        !self.flags.is_empty()
    }
}

/// Pluggable nitrogen estimate. No formula is defined for it, so the default
/// reports nothing.
pub trait NitrogenEstimator: Send {
    fn estimate(&self, record: &TelemetryRecord) -> Option<f64>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoNitrogen;

impl NitrogenEstimator for NoNitrogen {
    fn estimate(&self, _record: &TelemetryRecord) -> Option<f64> {
        None
    }
}

impl<F> NitrogenEstimator for F
where
    F: Fn(&TelemetryRecord) -> Option<f64> + Send,
{
    fn estimate(&self, record: &TelemetryRecord) -> Option<f64> {
        self(record)
    }
}

/// Validates `$<payload>*XX\n` and returns the payload.
pub fn frame_decode(wire: &[u8]) -> Result<String> {
    let framing = |why: &str| Error::BadFraming(why.to_string());
    let n = wire.len();
    if n < 5 {
        return Err(framing("frame too short"));
    }
    if wire[0] != b'$' {
        return Err(framing("missing `$`"));
    }
    if wire[n - 1] != b'\n' {
        return Err(framing("missing line terminator"));
    }
    if wire[n - 4] != b'*' {
        return Err(framing("missing `*`"));
    }
    let payload = &wire[1..n - 4];
    if payload.iter().any(|b| RESERVED.contains(b)) {
        return Err(framing("reserved character inside payload"));
    }
    let expected = parse_hex_byte(wire[n - 3], wire[n - 2]).ok_or_else(|| framing("bad checksum digits"))?;
    let actual = checksum(payload);
    if expected != actual {
        return Err(Error::BadChecksum { expected, actual });
    }
    String::from_utf8(payload.to_vec()).map_err(|_| framing("payload is not UTF-8"))
}

// Uppercase only, so a case flip in the checksum is still caught.
fn parse_hex_byte(hi: u8, lo: u8) -> Option<u8> {
    let digit = |c: u8| match c {
        b'0'..=b'9' => Some(c - b'0'),
        b'A'..=b'F' => Some(c - b'A' + 10),
        _ => None,
    };
    Some(digit(hi)? << 4 | digit(lo)?)
}

/// Everything the gateway needs to turn raw values into physical units.
#[derive(Debug, Clone)]
pub struct CalibSet {
    pub ph_curve: CalibrationCurve,
    pub tds: TdsCalib,
    pub tds_channel: ChannelConfig,
    pub do_table: DoTable,
    pub do_cal: DoCalib,
    pub do_indexing: DoIndexing,
    /// Height of the ultrasonic sensor above the tank bottom, cm.
    pub mount_height_cm: f64,
}

impl CalibSet {
    pub fn with_ph_curve(ph_curve: CalibrationCurve) -> Self {
        CalibSet {
            ph_curve,
            tds: TdsCalib::default(),
            tds_channel: ChannelConfig::tds(),
            do_table: DoTable::default(),
            do_cal: DoCalib::default(),
            do_indexing: DoIndexing::Nearest,
            mount_height_cm: 150.0,
        }
    }
}

/// The gateway's own channels for one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalReadings {
    pub tds_window: Vec<Counts>,
    pub temp_c: f64,
    /// `None` when the ultrasonic sensor got no valid echo.
    pub echo_us: Option<f64>,
}

/// Builds the record for one cycle. Conversion failures become flags.
pub fn assemble_record(
    device_id: &str,
    seq: u64,
    ts_ms: u64,
    node: Option<&NodeReading>,
    local: &LocalReadings,
    calib: &CalibSet,
    nitrogen: &dyn NitrogenEstimator,
) -> TelemetryRecord {
    let mut flags = FlagSet::new();
    let temp = local.temp_c;
    if !(0.0..=40.0).contains(&temp) {
        flags.insert(Flag::TempRange);
    }

    let (mut ph, mut do_mgl) = (None, None);
    match node {
        None => {
            flags.insert(Flag::NodeMissing);
        }
        Some(reading) => {
            flags.extend(reading.flags.iter().copied());
            if let Some(counts) = reading.ph_counts {
                let b = ph_from_counts(counts, &calib.ph_curve);
                if b.clamped {
                    flags.insert(Flag::PhRange);
                }
                ph = Some(b.value);
            }
            if let Some(mv) = reading.do_mv {
                match do_from_raw_with(mv, temp, &calib.do_table, &calib.do_cal, calib.do_indexing) {
                    Ok(b) => {
                        if b.clamped || b.value > 20.0 {
                            flags.insert(Flag::DoRange);
                        }
                        do_mgl = Some(b.value);
                    }
                    Err(Error::DoDomain(_)) => {
                        flags.insert(Flag::DoDomain);
                    }
                    Err(_) => {
                        flags.insert(Flag::TempRange);
                    }
                }
            }
        }
    }

    let tds_ppm = median_filter(&local.tds_window)
        .and_then(|median| counts_to_voltage(f64::from(median), &calib.tds_channel))
        .and_then(|v| tds_from_raw(v, temp, &calib.tds));
    let tds_ppm = match tds_ppm {
        Ok(b) => {
            if b.clamped || b.value > TDS_MAX_PPM {
                flags.insert(Flag::TdsRange);
            }
            Some(b.value)
        }
        Err(_) => {
            flags.insert(Flag::TdsRange);
            None
        }
    };

    let level_cm = match local.echo_us {
        Some(echo) => {
            let level = level_from_echo(echo, calib.mount_height_cm);
            if level < 0.0 {
                flags.insert(Flag::LevelRange);
            }
            Some(level)
        }
        None => {
            flags.insert(Flag::LevelRange);
            None
        }
    };

    let mut record = TelemetryRecord {
        device_id: device_id.to_string(),
        seq,
        ts_ms,
        ph,
        do_mgl,
        temp_c: Some(temp),
        tds_ppm,
        level_cm,
        nitrogen_est: None,
        flags,
    };
    record.nitrogen_est = nitrogen.estimate(&record);
    record
}

/// One-line text rendering of a record for the local display.
///
/// `pH 7.00 | DO 8.24 | T 25.0C | TDS 367 | Lvl 50.0cm | OK`
pub fn render_status(record: &TelemetryRecord) -> String {
    let mut line = String::with_capacity(64);
    match record.ph {
        Some(v) => write!(line, "pH {v:.2}"),
        None => write!(line, "pH --.--"),
    }
    .ok();
    match record.do_mgl {
        Some(v) => write!(line, " | DO {v:.2}"),
        None => write!(line, " | DO --.--"),
    }
    .ok();
    match record.temp_c {
        Some(v) => write!(line, " | T {v:.1}C"),
        None => write!(line, " | T --.-C"),
    }
    .ok();
    match record.tds_ppm {
        Some(v) => write!(line, " | TDS {v:.0}"),
        None => write!(line, " | TDS ---"),
    }
    .ok();
    match record.level_cm {
        Some(v) => write!(line, " | Lvl {v:.1}cm"),
        None => write!(line, " | Lvl --.-cm"),
    }
    .ok();
    if record.flags.is_empty() {
        line.push_str(" | OK");
    } else {
        let codes: Vec<&str> = record.flags.iter().map(|f| f.code()).collect();
        write!(line, " | FLAG:{}", codes.join(",")).ok();
    }
    line
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LinkStats {
    pub frames_ok: u64,
    pub bad_checksum: u64,
    pub bad_framing: u64,
}

impl LinkStats {
    pub fn frame_errors(&self) -> u64 {
        self.bad_checksum + self.bad_framing
    }
}

/// Noise streams for the gateway's own probes.
pub struct GatewayNoise {
    pub tds: NoiseSource,
    pub temp: NoiseSource,
    pub level: NoiseSource,
}

pub struct Gateway {
    device_id: String,
    calib: CalibSet,
    schedule: CycleSchedule,
    noise: GatewayNoise,
    tds_window: VecDeque<Counts>,
    nitrogen: Box<dyn NitrogenEstimator>,
    next_seq: u64,
    last_ts: u64,
    stats: LinkStats,
}

impl Gateway {
    pub fn new(device_id: &str, calib: CalibSet, schedule: CycleSchedule, noise: GatewayNoise) -> Result<Self> {
        if device_id.is_empty() || device_id.bytes().any(|b| b.is_ascii_control()) {
            return Err(Error::Config("device id must be non-empty printable text".into()));
        }
        schedule.validate()?;
        calib.tds.validate()?;
        calib.do_cal.validate()?;
        calib.tds_channel.validate()?;
        if !calib.ph_curve.is_valid() {
            return Err(Error::Config("pH calibration curve is not usable".into()));
        }
        Ok(Gateway {
            device_id: device_id.to_string(),
            calib,
            schedule,
            noise,
            tds_window: VecDeque::with_capacity(schedule.tds_window),
            nitrogen: Box::new(NoNitrogen),
            next_seq: 1,
            last_ts: 0,
            stats: LinkStats::default(),
        })
    }

    pub fn with_nitrogen(mut self, estimator: Box<dyn NitrogenEstimator>) -> Self {
        self.nitrogen = estimator;
        self
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn calib(&self) -> &CalibSet {
        &self.calib
    }

    pub fn stats(&self) -> LinkStats {
        self.stats
    }

    /// Decodes one frame off the serial link, counting failures.
    pub fn receive_frame(&mut self, wire: &[u8]) -> Option<NodeReading> {
        let parsed = frame_decode(wire).and_then(|p| NodeReading::parse_payload(&p));
        match parsed {
            Ok(reading) => {
                self.stats.frames_ok += 1;
                Some(reading)
            }
            Err(Error::BadChecksum { .. }) => {
                self.stats.bad_checksum += 1;
                None
            }
            Err(_) => {
                self.stats.bad_framing += 1;
                None
            }
        }
    }

    /// Samples TDS through the cycle starting at `cycle_start_ms`, then reads
    /// temperature and level.
    pub fn sample_local(&mut self, truth: &WaterTruth, cycle_start_ms: u64) -> LocalReadings {
        let v_raw = tds_raw_voltage(truth, &self.calib.tds).ok();
        if let Some(v_raw) = v_raw {
            for k in 0..self.schedule.tds_samples_per_cycle() {
                let t = cycle_start_ms + k as u64 * self.schedule.tds_period_ms;
                let s = tds_sample(v_raw, &self.calib.tds_channel, &mut self.noise.tds, t);
                if self.tds_window.len() == self.schedule.tds_window {
                    self.tds_window.pop_front();
                }
                self.tds_window.push_back(s.counts);
            }
        } else {
            self.tds_window.clear();
        }
        let temp_c = temp_forward(truth, &mut self.noise.temp);
        let echo_us = level_forward(truth, self.calib.mount_height_cm, &mut self.noise.level).ok();
        LocalReadings {
            tds_window: self.tds_window.iter().copied().collect(),
            temp_c,
            echo_us,
        }
    }

    /// Stamps and assembles the record for the cycle ending at `ts_ms`.
    pub fn complete_cycle(&mut self, node: Option<&NodeReading>, local: &LocalReadings, ts_ms: u64) -> TelemetryRecord {
        let ts_ms = ts_ms.max(self.last_ts);
        let rec = assemble_record(
            &self.device_id,
            self.next_seq,
            ts_ms,
            node,
            local,
            &self.calib,
            self.nitrogen.as_ref(),
        );
        self.next_seq += 1;
        self.last_ts = ts_ms;
        rec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::node::frame_encode;
    use crate::sensors::NoiseSpec;

    fn sample_record() -> TelemetryRecord {
        TelemetryRecord {
            device_id: "hs-01".into(),
            seq: 1,
            ts_ms: 1000,
            ph: Some(7.0),
            do_mgl: Some(8.24),
            temp_c: Some(25.0),
            tds_ppm: Some(367.475),
            level_cm: Some(50.0),
            nitrogen_est: None,
            flags: FlagSet::new(),
        }
    }

    fn quiet() -> NoiseSource {
        NoiseSource::new(NoiseSpec::noiseless()).unwrap()
    }

    fn quiet_gateway(curve: CalibrationCurve) -> Gateway {
        Gateway::new(
            "hs-01",
            CalibSet::with_ph_curve(curve),
            CycleSchedule::default(),
            GatewayNoise {
                tds: quiet(),
                temp: quiet(),
                level: quiet(),
            },
        )
        .unwrap()
    }

    #[test]
    fn decode_examples() {
        for p in ["", "A", "HS,1,560,190"] {
            assert_eq!(frame_decode(&frame_encode(p).unwrap()).unwrap(), p);
        }
        let mut wire = frame_encode("HS,1,560,190").unwrap();
        wire[4] ^= 0x01;
        assert_eq!(frame_decode(&wire).unwrap_err().code(), "bad-checksum");
        assert_eq!(frame_decode(b"$HS,1,560,190 4A\n").unwrap_err().code(), "bad-framing");
        assert_eq!(frame_decode(b"HS*00\n").unwrap_err().code(), "bad-framing");
        assert_eq!(frame_decode(b"$A*41").unwrap_err().code(), "bad-framing");
        assert_eq!(frame_decode(b"$A*4g\n").unwrap_err().code(), "bad-framing");
        // lowercase hex is not accepted
        assert_eq!(frame_decode(b"$J*4a\n").unwrap_err().code(), "bad-framing");
        assert_eq!(frame_decode(b"$J*4A\n").unwrap(), "J");
    }

    #[test]
    fn status_line_examples() {
        let rec = sample_record();
        assert_eq!(render_status(&rec), "pH 7.00 | DO 8.24 | T 25.0C | TDS 367 | Lvl 50.0cm | OK");

        let absent = TelemetryRecord {
            do_mgl: None,
            ..sample_record()
        };
        assert_eq!(render_status(&absent), "pH 7.00 | DO --.-- | T 25.0C | TDS 367 | Lvl 50.0cm | OK");

        let mut flagged = sample_record();
        flagged.flags.insert(Flag::PhRange);
        flagged.flags.insert(Flag::AdcRail);
        assert_eq!(
            render_status(&flagged),
            "pH 7.00 | DO 8.24 | T 25.0C | TDS 367 | Lvl 50.0cm | FLAG:PH_RANGE,ADC_RAIL"
        );
    }

    #[test]
    fn record_json_omits_absent_fields() {
        let mut rec = sample_record();
        rec.ph = None;
        rec.flags.insert(Flag::NodeMissing);
        let line = rec.to_json_line();
        assert_eq!(
            line,
            r#"{"device_id":"hs-01","seq":1,"ts_ms":1000,"do_mgl":8.24,"temp_c":25.0,"tds_ppm":367.475,"level_cm":50.0,"flags":["NODE_MISSING"]}"#
        );
        assert_eq!(TelemetryRecord::from_json_line(&line).unwrap(), rec);
        assert_eq!(TelemetryRecord::from_json_line(r#"{"seq":1}"#).unwrap_err().code(), "schema");
        assert_eq!(
            TelemetryRecord::from_json_line(r#"{"device_id":"a","seq":1,"ts_ms":0,"flags":[],"extra":1}"#)
                .unwrap_err()
                .code(),
            "schema"
        );
        assert_eq!(
            TelemetryRecord::from_json_line(r#"{"device_id":"","seq":1,"ts_ms":0,"flags":[]}"#)
                .unwrap_err()
                .code(),
            "schema"
        );
    }

    #[test]
    fn noiseless_record_matches_truth() {
        let electrode = crate::node::default_electrode();
        let mut gw = quiet_gateway(electrode);
        let truth = WaterTruth::default();
        let local = gw.sample_local(&truth, 0);
        assert_eq!(local.tds_window.len(), 25);
        let node = NodeReading {
            seq: 1,
            ph_counts: Some(((truth.ph - electrode.offset) / electrode.slope).round()),
            do_mv: Some(190.0),
            flags: FlagSet::new(),
        };
        let rec = gw.complete_cycle(Some(&node), &local, 1000);
        assert!(rec.flags.is_empty(), "{:?}", rec.flags);
        assert!((rec.ph.unwrap() - 7.0).abs() <= 0.007);
        assert_eq!(rec.do_mgl, Some(8.24));
        assert_eq!(rec.temp_c, Some(25.0));
        // one 12-bit LSB at 3.3 V is about 0.3 ppm near 1 V
        assert!((rec.tds_ppm.unwrap() - 367.475).abs() < 0.5);
        assert!((rec.level_cm.unwrap() - 50.0).abs() < 1e-9);

        let local = gw.sample_local(&truth, 1000);
        assert_eq!(local.tds_window.len(), 30);
    }

    #[test]
    fn degraded_inputs_become_flags() {
        let mut gw = quiet_gateway(crate::node::default_electrode());
        let truth = WaterTruth::default();
        let local = gw.sample_local(&truth, 0);

        let missing = gw.complete_cycle(None, &local, 1000);
        assert_eq!((missing.ph, missing.do_mgl), (None, None));
        assert!(missing.flags.contains(&Flag::NodeMissing));
        assert!(render_status(&missing).starts_with("pH --.-- | DO --.--"));

        let mut node_flags = FlagSet::new();
        node_flags.insert(Flag::AdcRail);
        let railed = NodeReading {
            seq: 2,
            ph_counts: Some(1023.0),
            do_mv: Some(190.0),
            flags: node_flags,
        };
        let rec = gw.complete_cycle(Some(&railed), &local, 2000);
        assert_eq!(rec.ph, Some(0.0));
        assert!(rec.flags.contains(&Flag::PhRange) && rec.flags.contains(&Flag::AdcRail));

        let cold = LocalReadings {
            temp_c: 15.0,
            ..local.clone()
        };
        let rec = gw.complete_cycle(Some(&railed), &cold, 3000);
        assert!(rec.flags.contains(&Flag::DoDomain));
        assert_eq!(rec.do_mgl, None);

        let no_echo = LocalReadings {
            echo_us: None,
            tds_window: vec![],
            ..local
        };
        let rec = gw.complete_cycle(None, &no_echo, 500);
        assert!(rec.flags.contains(&Flag::LevelRange) && rec.flags.contains(&Flag::TdsRange));
        // never goes back in time
        assert_eq!(rec.ts_ms, 3000);
        assert_eq!(rec.seq, 4);
    }

    #[test]
    fn link_errors_are_counted() {
        let mut gw = quiet_gateway(crate::node::default_electrode());
        let good = frame_encode("HS,1,560,190").unwrap();
        assert!(gw.receive_frame(&good).is_some());
        let mut corrupt = good.clone();
        corrupt[5] ^= 0x10;
        assert!(gw.receive_frame(&corrupt).is_none());
        assert!(gw.receive_frame(b"garbage").is_none());
        assert!(gw.receive_frame(&frame_encode("XX,1").unwrap()).is_none());
        assert_eq!(
            gw.stats(),
            LinkStats {
                frames_ok: 1,
                bad_checksum: 1,
                bad_framing: 2
            }
        );
    }

    #[test]
    fn nitrogen_slot() {
        let gw = quiet_gateway(crate::node::default_electrode());
        let mut gw = gw.with_nitrogen(Box::new(|r: &TelemetryRecord| r.tds_ppm.map(|t| t * 0.01)));
        let local = gw.sample_local(&WaterTruth::default(), 0);
        let rec = gw.complete_cycle(None, &local, 1000);
        assert!(rec.nitrogen_est.is_some());
        assert!(rec.to_json_line().contains("nitrogen_est"));
    }
}
