//! Closed-loop run of a scenario: truth, node, serial link, gateway, uplink
//! and sink on one simulated clock.
//!
//! Per cycle `c` (starting at `c * 1000` ms): the truth advances, the node
//! samples and frames, the frame crosses the link (with optional bit errors),
//! the gateway samples its own probes and assembles a record stamped at the
//! end of the cycle, the record is displayed, enqueued and the uplink makes
//! every send attempt due by then. After the last cycle the uplink drains.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::calib::{fit_from_pairs, fit_ph_calibration, parse_calibration_pairs, CalibrationCurve};
use crate::clock::SimClock;
use crate::error::Result;
use crate::gateway::{render_status, CalibSet, Gateway, GatewayNoise};
use crate::node::{CycleSchedule, Node, NodeConfig};
use crate::scenario::{CalibrationSource, Scenario};
use crate::sensors::{step_truth, NoiseSource, NoiseSpec, WaterTruth};
use crate::uplink::{seq_gaps, Cache, MockSink, Uplink};

pub const METRICS_TXT: &str = "metrics.txt";
pub const METRICS_NDJSON: &str = "metrics.ndjson";
pub const SINK_DUMP: &str = "sink.ndjson";
pub const CACHE_RESIDUE: &str = "cache_residue.ndjson";
pub const STATUS_LOG: &str = "status.log";
pub const TRUTH_LOG: &str = "truth.ndjson";
pub const FRAMES_LOG: &str = "frames.log";
pub const ENVELOPE_FILE: &str = "envelope.toml";
pub const CACHE_DIR: &str = "cache";

// independent random streams derived from the run seed
const STREAM_PH: u64 = 1;
const STREAM_DO: u64 = 2;
const STREAM_TDS: u64 = 3;
const STREAM_TEMP: u64 = 4;
const STREAM_ECHO: u64 = 5;
const STREAM_TRUTH: u64 = 6;
const STREAM_LINK: u64 = 7;
const STREAM_CALIB: u64 = 8;
const RTT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Ground truth for one cycle, keyed like the record it produced.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct TruthRow {
    pub seq: u64,
    pub ts_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase: Option<usize>,
    pub ph: f64,
    pub do_mgl: f64,
    pub temp_c: f64,
    pub tds_ppm: f64,
    pub level_cm: f64,
}

impl TruthRow {
    pub fn new(seq: u64, ts_ms: u64, phase: Option<usize>, t: &WaterTruth) -> Self {
        TruthRow {
            seq,
            ts_ms,
            phase,
            ph: t.ph,
            do_mgl: t.do_mgl,
            temp_c: t.temp_c,
            tds_ppm: t.tds_ppm,
            level_cm: t.level_cm,
        }
    }
}

/// Run-level counters written to `metrics.txt` / `metrics.ndjson`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub scenario: String,
    pub seed: u64,
    pub cycles: u64,
    pub sim_duration_ms: u64,
    pub records_produced: u64,
    pub records_stored: u64,
    pub records_pending: u64,
    pub records_rejected: u64,
    pub seq_gaps: u64,
    pub sink_duplicates: u64,
    pub send_attempts: u64,
    pub failed_attempts: u64,
    pub first_attempt_success_pct: f64,
    pub attempt_success_pct: f64,
    pub eventual_delivery_pct: f64,
    pub latency_mean_ms: f64,
    pub latency_sd_ms: f64,
    pub latency_max_ms: u64,
    pub rtt_mean_ms: f64,
    pub rtt_sd_ms: f64,
    pub outage_ms: u64,
    pub outage_pct: f64,
    pub frames_ok: u64,
    pub frames_bad_checksum: u64,
    pub frames_bad_framing: u64,
    pub flagged_records: u64,
    pub sensor_fault_records: u64,
    pub ph_slope: f64,
    pub ph_offset: f64,
    pub supply_v: f64,
}

impl RunSummary {
    /// `key=value` lines in field order.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("summary serializes");
        let mut out = String::new();
        for (k, v) in summary_fields(&value) {
            out.push_str(&format!("{k}={}\n", v.as_str().map_or_else(|| v.to_string(), str::to_string)));
        }
        out
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("summary serializes") + "\n"
    }
}

fn summary_fields(value: &serde_json::Value) -> Vec<(String, serde_json::Value)> {
    match value {
        serde_json::Value::Object(map) => map.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        _ => Vec::new(),
    }
}

fn pct(n: u64, d: u64) -> f64 {
    if d == 0 {
        return 0.0;
    }
    round6(100.0 * n as f64 / d as f64)
}

pub(crate) fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn noise(sigma: f64, seed: u64, stream: u64) -> Result<NoiseSource> {
    NoiseSource::with_stream(
        NoiseSpec {
            sigma_counts: sigma,
            seed,
        },
        stream,
    )
}

/// The pH curve the gateway will use: fitted from a pairs file, or from the
/// buffers measured through the simulated probe.
pub fn calibrate(scenario: &Scenario, node_config: &NodeConfig, seed: u64) -> Result<CalibrationCurve> {
    let c = &scenario.calibration;
    match c.source {
        CalibrationSource::File => {
            let path = c.file.as_ref().expect("validated scenario has a file");
            let text = fs::read_to_string(path)?;
            fit_from_pairs(&parse_calibration_pairs(&text)?)
        }
        CalibrationSource::Auto => {
            let ph_noise = noise(scenario.noise.ph_counts, seed, STREAM_CALIB)?;
            let mut probe = Node::new(node_config.clone(), ph_noise, noise(0.0, seed, 0)?)?;
            let mut clock = SimClock::at(0);
            let mut raw = Vec::with_capacity(c.buffers.len());
            for &ph in &c.buffers {
                let truth = WaterTruth {
                    ph,
                    ..scenario.truth
                };
                raw.push(probe.sample_ph_burst(&truth, &mut clock).0);
            }
            fit_ph_calibration(&raw, &c.buffers)
        }
    }
}

fn flip_bits<R: Rng>(wire: &mut [u8], ber: f64, rng: &mut R) {
    if ber == 0.0 {
        return;
    }
    for byte in wire.iter_mut() {
        for bit in 0..8 {
            if rng.random::<f64>() < ber {
                *byte ^= 1 << bit;
            }
        }
    }
}

/// Runs `scenario` with `seed` and writes all artifacts into `out`.
///
/// Only configuration problems and I/O failures are errors; everything that
/// goes wrong inside the simulated system ends up as record flags.
pub fn run(scenario: &Scenario, seed: u64, out: &Path) -> Result<RunSummary> {
    scenario.validate()?;
    fs::create_dir_all(out)?;
    let cache_dir = out.join(CACHE_DIR);
    if cache_dir.exists() {
        // a previous run's queue must not leak into this one
        fs::remove_dir_all(&cache_dir)?;
    }

    let schedule = CycleSchedule::default();
    let cal = &scenario.calibration;
    let node_config = NodeConfig {
        electrode: cal.electrode(),
        do_indexing: cal.do_indexing,
        faults: scenario.faults.clone(),
        ..NodeConfig::default()
    };
    let ph_curve = calibrate(scenario, &node_config, seed)?;
    let ns = &scenario.noise;
    let mut node = Node::new(
        node_config,
        noise(ns.ph_counts, seed, STREAM_PH)?,
        noise(ns.do_counts, seed, STREAM_DO)?,
    )?;
    let calib = CalibSet {
        do_indexing: cal.do_indexing,
        mount_height_cm: cal.mount_height_cm,
        ..CalibSet::with_ph_curve(ph_curve)
    };
    let mut gateway = Gateway::new(
        &scenario.run.device_id,
        calib,
        schedule,
        GatewayNoise {
            tds: noise(ns.tds_counts, seed, STREAM_TDS)?,
            temp: noise(ns.temp_c, seed, STREAM_TEMP)?,
            level: noise(ns.echo_us, seed, STREAM_ECHO)?,
        },
    )?;
    let sink = MockSink::new(scenario.outage.schedule()?);
    let mut uplink = Uplink::new(Cache::open(&cache_dir)?, scenario.rtt, seed ^ RTT_SEED_SALT)?;

    let mut truth_rng = ChaCha8Rng::seed_from_u64(seed);
    truth_rng.set_stream(STREAM_TRUTH);
    let mut link_rng = ChaCha8Rng::seed_from_u64(seed);
    link_rng.set_stream(STREAM_LINK);

    let mut status = BufWriter::new(File::create(out.join(STATUS_LOG))?);
    let mut truth_log = BufWriter::new(File::create(out.join(TRUTH_LOG))?);
    let mut frames = BufWriter::new(File::create(out.join(FRAMES_LOG))?);

    let period = schedule.cycle_period_ms;
    let phase_starts = scenario.phase_starts();
    let mut truth = scenario.truth;
    let (mut flagged, mut faulted) = (0u64, 0u64);
    for cycle in 0..scenario.run.cycles {
        let start = cycle * period;
        let phase = scenario.phase_at(cycle);
        match phase {
            Some((i, p)) if phase_starts[i] == cycle => truth = p.apply(truth),
            Some(_) => {}
            None if cycle > 0 => {
                truth = step_truth(
                    truth,
                    period as f64 / 1000.0,
                    start as f64 / 1000.0,
                    &scenario.dynamics,
                    &mut truth_rng,
                )
            }
            None => {}
        }

        let mut clock = SimClock::at(start);
        let node_cycle = node.run_cycle(&truth, &mut clock);
        let mut wire = node_cycle.frame.to_wire()?;
        flip_bits(&mut wire, scenario.link.bit_error_rate, &mut link_rng);
        frames.write_all(&wire)?;
        let reading = gateway.receive_frame(&wire);
        let local = gateway.sample_local(&truth, start);
        // the record completes once the cycle is over and the frame has landed
        let ts = (start + period).max(clock.now_ms() + scenario.link.latency_ms);
        let record = gateway.complete_cycle(reading.as_ref(), &local, ts);

        if record.is_flagged() {
            flagged += 1;
        }
        if record.flags.iter().any(|f| f.is_sensor_fault()) {
            faulted += 1;
        }
        writeln!(status, "{}", render_status(&record))?;
        let row = TruthRow::new(record.seq, record.ts_ms, phase.map(|(i, _)| i), &truth);
        writeln!(truth_log, "{}", serde_json::to_string(&row).expect("truth row serializes"))?;

        uplink.enqueue(record, ts)?;
        uplink.flush(ts, &sink)?;
    }
    uplink.drain(&sink)?;
    status.flush()?;
    truth_log.flush()?;
    frames.flush()?;

    let produced = scenario.run.cycles;
    let st = uplink.stats();
    let ss = sink.stats();
    let link = gateway.stats();
    let (lat_mean, lat_sd) = st.latency_mean_sd_ms();
    let (rtt_mean, rtt_sd) = st.rtt_mean_sd_ms();
    let stored = sink.stored_count() as u64;
    let sim_duration_ms = produced * period;
    let outage_ms = sink.outages().total_ms();
    let summary = RunSummary {
        scenario: scenario.run.name.clone(),
        seed,
        cycles: produced,
        sim_duration_ms,
        records_produced: produced,
        records_stored: stored,
        records_pending: uplink.pending() as u64,
        records_rejected: st.rejected,
        seq_gaps: seq_gaps(&sink.seqs(&scenario.run.device_id)).len() as u64,
        sink_duplicates: ss.duplicates,
        send_attempts: st.attempts,
        failed_attempts: st.failed_attempts,
        first_attempt_success_pct: pct(st.first_attempt_ok, produced),
        attempt_success_pct: pct(st.attempts - st.failed_attempts, st.attempts),
        eventual_delivery_pct: pct(stored, produced),
        latency_mean_ms: round6(lat_mean),
        latency_sd_ms: round6(lat_sd),
        latency_max_ms: st.latency_max_ms,
        rtt_mean_ms: round6(rtt_mean),
        rtt_sd_ms: round6(rtt_sd),
        outage_ms,
        outage_pct: pct(outage_ms, sim_duration_ms),
        frames_ok: link.frames_ok,
        frames_bad_checksum: link.bad_checksum,
        frames_bad_framing: link.bad_framing,
        flagged_records: flagged,
        sensor_fault_records: faulted,
        ph_slope: ph_curve.slope,
        ph_offset: ph_curve.offset,
        supply_v: scenario.power.supply_v,
    };

    fs::write(out.join(SINK_DUMP), sink.dump())?;
    fs::write(out.join(CACHE_RESIDUE), uplink.cache().residue())?;
    fs::write(out.join(METRICS_TXT), summary.to_kv())?;
    fs::write(out.join(METRICS_NDJSON), summary.to_json_line())?;
    fs::write(
        out.join(ENVELOPE_FILE),
        toml::to_string(&scenario.envelope).expect("envelope serializes"),
    )?;
    Ok(summary)
}
