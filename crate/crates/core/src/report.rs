//! Accuracy and reliability report for a finished run directory.
//!
//! Joins `truth.ndjson` and `sink.ndjson` on seq, computes per-parameter
//! error statistics and checks them, together with the run counters from
//! `metrics.txt`, against the run's `envelope.toml`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gateway::TelemetryRecord;
use crate::metrics::{e_daily, p_avg, reference_day_profile};
use crate::scenario::Envelope;
use crate::sim::{TruthRow, ENVELOPE_FILE, METRICS_TXT, SINK_DUMP, TRUTH_LOG};

pub const REPORT_FILE: &str = "report.txt";

// published power-table figures
const PRINTED_DAILY_AVG_MA: f64 = 72.0;
const PRINTED_DAILY_MAH: f64 = 1728.0;
const PRINTED_DAILY_WH: f64 = 8.54;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorStats {
    pub n: u64,
    pub missing: u64,
    pub mean_signed: f64,
    pub mean_abs: f64,
    pub max_abs: f64,
    /// Over points with nonzero truth only.
    pub mean_rel_pct: f64,
    pub max_rel_pct: f64,
}

#[derive(Default)]
struct Accumulator {
    n: u64,
    missing: u64,
    sum: f64,
    sum_abs: f64,
    max_abs: f64,
    n_rel: u64,
    sum_rel: f64,
    max_rel: f64,
}

impl Accumulator {
    fn push(&mut self, truth: f64, measured: Option<f64>) {
        let Some(m) = measured else {
            self.missing += 1;
            return;
        };
        let err = m - truth;
        self.n += 1;
        self.sum += err;
        self.sum_abs += err.abs();
        self.max_abs = self.max_abs.max(err.abs());
        if truth != 0.0 {
            let rel = 100.0 * err.abs() / truth.abs();
            self.n_rel += 1;
            self.sum_rel += rel;
            self.max_rel = self.max_rel.max(rel);
        }
    }

    fn finish(&self) -> ErrorStats {
        let mean = |s: f64, n: u64| if n == 0 { 0.0 } else { s / n as f64 };
        ErrorStats {
            n: self.n,
            missing: self.missing,
            mean_signed: mean(self.sum, self.n),
            mean_abs: mean(self.sum_abs, self.n),
            max_abs: self.max_abs,
            mean_rel_pct: mean(self.sum_rel, self.n_rel),
            max_rel_pct: self.max_rel,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub value: f64,
    pub limit: f64,
    /// True when `value` must stay at or below `limit`.
    pub upper: bool,
}

impl Check {
    pub fn passed(&self) -> bool {
        if self.upper {
            self.value <= self.limit
        } else {
            self.value >= self.limit
        }
    }
}

/// Mean truth and mean measured value of one parameter within one phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhasePoint {
    pub truth: f64,
    pub measured: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub metrics: BTreeMap<String, String>,
    pub ph: ErrorStats,
    pub do_mgl: ErrorStats,
    pub tds: ErrorStats,
    pub temp: ErrorStats,
    pub level: ErrorStats,
    /// Per phase: (pH, DO, TDS).
    pub phases: Vec<[PhasePoint; 3]>,
    pub checks: Vec<Check>,
}

fn read_artifact(dir: &Path, name: &str) -> Result<String> {
    fs::read_to_string(dir.join(name)).map_err(|e| Error::IncompleteRun(format!("{name}: {e}")))
}

fn parse_kv(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

#[derive(Default)]
struct PhaseAcc {
    n: [u64; 3],
    truth: [f64; 3],
    measured: [f64; 3],
    rows: u64,
}

/// Builds the report for `run_dir` without writing anything.
pub fn generate(run_dir: impl AsRef<Path>) -> Result<Report> {
    let dir = run_dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::IncompleteRun(format!("{} is not a directory", dir.display())));
    }
    let truth_text = read_artifact(dir, TRUTH_LOG)?;
    let sink_text = read_artifact(dir, SINK_DUMP)?;
    let metrics = parse_kv(&read_artifact(dir, METRICS_TXT)?);
    let envelope: Envelope = toml::from_str(&read_artifact(dir, ENVELOPE_FILE)?)
        .map_err(|e| Error::IncompleteRun(format!("{ENVELOPE_FILE}: {e}")))?;

    let mut stored = BTreeMap::new();
    for line in sink_text.lines() {
        let rec = TelemetryRecord::from_json_line(line)
            .map_err(|e| Error::IncompleteRun(format!("{SINK_DUMP}: {e}")))?;
        stored.insert(rec.seq, rec);
    }

    let mut ph = Accumulator::default();
    let mut dox = Accumulator::default();
    let mut tds = Accumulator::default();
    let mut temp = Accumulator::default();
    let mut level = Accumulator::default();
    let mut phases: BTreeMap<usize, PhaseAcc> = BTreeMap::new();
    for line in truth_text.lines() {
        let row: TruthRow =
            serde_json::from_str(line).map_err(|e| Error::IncompleteRun(format!("{TRUTH_LOG}: {e}")))?;
        let Some(rec) = stored.get(&row.seq) else {
            continue;
        };
        // a faulted probe reports garbage on purpose; keep it out of accuracy
        let faulted = rec.flags.iter().any(|f| f.is_sensor_fault());
        let node_value = |v: Option<f64>| if faulted { None } else { v };
        let pairs = [
            (row.ph, node_value(rec.ph)),
            (row.do_mgl, node_value(rec.do_mgl)),
            (row.tds_ppm, rec.tds_ppm),
            (row.temp_c, rec.temp_c),
            (row.level_cm, rec.level_cm),
        ];
        ph.push(pairs[0].0, pairs[0].1);
        dox.push(pairs[1].0, pairs[1].1);
        tds.push(pairs[2].0, pairs[2].1);
        temp.push(pairs[3].0, pairs[3].1);
        level.push(pairs[4].0, pairs[4].1);
        if let Some(p) = row.phase {
            let acc = phases.entry(p).or_default();
            acc.rows += 1;
            for (k, (t, m)) in pairs[..3].iter().enumerate() {
                acc.truth[k] += t;
                if let Some(m) = m {
                    acc.n[k] += 1;
                    acc.measured[k] += m;
                }
            }
        }
    }

    let phases = phases
        .values()
        .map(|acc| {
            std::array::from_fn(|k| PhasePoint {
                truth: acc.truth[k] / acc.rows as f64,
                measured: (acc.n[k] > 0).then(|| acc.measured[k] / acc.n[k] as f64),
            })
        })
        .collect();

    let (ph, do_mgl, tds) = (ph.finish(), dox.finish(), tds.finish());
    let metric = |key: &str| -> Result<f64> {
        metrics
            .get(key)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::IncompleteRun(format!("{METRICS_TXT} lacks {key}")))
    };
    let mut checks = Vec::new();
    let mut upper = |name, value, limit: Option<f64>| {
        if let Some(limit) = limit {
            checks.push(Check {
                name,
                value,
                limit,
                upper: true,
            });
        }
    };
    let e = envelope;
    upper("ph_mean_abs", ph.mean_abs, e.ph_mean_abs);
    upper("ph_max_abs", ph.max_abs, e.ph_max_abs);
    upper("tds_mean_rel_pct", tds.mean_rel_pct, e.tds_mean_rel_pct);
    upper("tds_max_rel_pct", tds.max_rel_pct, e.tds_max_rel_pct);
    upper("do_mean_rel_pct", do_mgl.mean_rel_pct, e.do_mean_rel_pct);
    upper("do_max_rel_pct", do_mgl.max_rel_pct, e.do_max_rel_pct);
    upper("records_pending", metric("records_pending")?, e.pending_max.map(|v| v as f64));
    upper("seq_gaps", metric("seq_gaps")?, e.seq_gaps_max.map(|v| v as f64));
    upper("latency_mean_ms", metric("latency_mean_ms")?, e.latency_mean_max_ms);
    for (name, key, limit) in [
        ("eventual_delivery_pct", "eventual_delivery_pct", e.delivery_min_pct),
        ("first_attempt_success_pct", "first_attempt_success_pct", e.first_attempt_min_pct),
    ] {
        if let Some(limit) = limit {
            checks.push(Check {
                name,
                value: metric(key)?,
                limit,
                upper: false,
            });
        }
    }
    // an accuracy limit over zero samples proves nothing
    for (name, stats, limited) in [
        ("ph_samples", &ph, e.ph_mean_abs.or(e.ph_max_abs)),
        ("do_samples", &do_mgl, e.do_mean_rel_pct.or(e.do_max_rel_pct)),
        ("tds_samples", &tds, e.tds_mean_rel_pct.or(e.tds_max_rel_pct)),
    ] {
        if limited.is_some() {
            checks.push(Check {
                name,
                value: stats.n as f64,
                limit: 1.0,
                upper: false,
            });
        }
    }

    Ok(Report {
        metrics,
        ph,
        do_mgl,
        tds,
        temp: temp.finish(),
        level: level.finish(),
        phases,
        checks,
    })
}

/// Generates the report and writes it to `report.txt` in the run directory.
pub fn write(run_dir: impl AsRef<Path>) -> Result<Report> {
    let report = generate(&run_dir)?;
    fs::write(run_dir.as_ref().join(REPORT_FILE), report.render())?;
    Ok(report)
}

impl Report {
    /// True iff every configured envelope passes.
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = |k: &str| self.metrics.get(k).map_or("?", String::as_str);
        writeln!(out, "scenario={}", m("scenario")).ok();
        writeln!(out, "seed={}", m("seed")).ok();
        writeln!(out, "cycles={}", m("cycles")).ok();
        for (name, s) in [
            ("ph", &self.ph),
            ("do_mgl", &self.do_mgl),
            ("tds_ppm", &self.tds),
            ("temp_c", &self.temp),
            ("level_cm", &self.level),
        ] {
            writeln!(
                out,
                "{name}.n={}\n{name}.missing={}\n{name}.mean_err={:.6}\n{name}.mean_abs_err={:.6}\n{name}.max_abs_err={:.6}\n{name}.mean_rel_err_pct={:.6}\n{name}.max_rel_err_pct={:.6}",
                s.n, s.missing, s.mean_signed, s.mean_abs, s.max_abs, s.mean_rel_pct, s.max_rel_pct
            )
            .ok();
        }
        for (i, points) in self.phases.iter().enumerate() {
            for (name, p) in ["ph", "do_mgl", "tds_ppm"].iter().zip(points) {
                let measured = p.measured.map_or("-".to_string(), |v| format!("{v:.6}"));
                writeln!(out, "phase.{i}.{name}=truth {:.6} measured {measured}", p.truth).ok();
            }
        }
        for key in [
            "records_produced",
            "records_stored",
            "records_pending",
            "seq_gaps",
            "eventual_delivery_pct",
            "first_attempt_success_pct",
            "attempt_success_pct",
            "latency_mean_ms",
            "latency_sd_ms",
            "latency_max_ms",
            "outage_pct",
        ] {
            writeln!(out, "{key}={}", m(key)).ok();
        }
        let supply_v = m("supply_v").parse().unwrap_or(5.0);
        out.push_str(&energy_section(supply_v));
        for c in &self.checks {
            let op = if c.upper { "<=" } else { ">=" };
            let verdict = if c.passed() { "PASS" } else { "FAIL" };
            writeln!(out, "check.{}={verdict} {:.6} {op} {:.6}", c.name, c.value, c.limit).ok();
        }
        writeln!(out, "result={}", if self.passed() { "PASS" } else { "FAIL" }).ok();
        out
    }
}

/// Recomputed daily energy next to the published figures.
pub fn energy_section(supply_v: f64) -> String {
    let profile = reference_day_profile(supply_v);
    let avg = p_avg(&profile).expect("profile has duration");
    let day = e_daily(&profile).expect("profile spans a day");
    let mut out = String::new();
    writeln!(out, "energy.supply_v={supply_v}").ok();
    writeln!(out, "energy.p_avg_ma={avg:.6}").ok();
    writeln!(out, "energy.daily_mah={:.6}", day.mah).ok();
    writeln!(out, "energy.daily_wh={:.6}", day.wh).ok();
    writeln!(out, "energy.printed_daily_avg_ma={PRINTED_DAILY_AVG_MA}").ok();
    writeln!(out, "energy.printed_daily_mah={PRINTED_DAILY_MAH}").ok();
    writeln!(out, "energy.printed_daily_wh={PRINTED_DAILY_WH}").ok();
    writeln!(
        out,
        "energy.note=printed daily figures do not follow from the mode currents and durations; recomputed values above"
    )
    .ok();
    out
}

/// Published target envelopes, as `key=value` lines.
pub fn reference_tables() -> String {
    let mut out = String::new();
    for (k, v) in [
        ("ph.buffers", "4.00 6.86 7.00 9.18 10.01"),
        ("ph.mean_abs_err", "0.06"),
        ("ph.max_abs_err", "0.08"),
        ("ph.noisy_mean_abs_err", "0.10"),
        ("tds.points_ppm", "342 500 750 1000"),
        ("tds.max_rel_err_pct", "2.0"),
        ("tds.published_mean_err_pct", "1.99"),
        ("do.air_saturated_25c_mgl", "8.24"),
        ("do.mean_rel_err_pct", "1.5"),
        ("do.published_mean_err_pct", "1.20"),
        ("reliability.cloud_success_pct", "99.83"),
        ("reliability.latency_mean_s", "1.75"),
        ("reliability.latency_sd_s", "0.42"),
        ("reliability.latency_max_s", "4.2"),
        ("reliability.data_loss_pct", "0"),
        ("backoff.sequence_ms", "1000 2000 4000 8000 16000 32000 60000 60000"),
    ] {
        writeln!(out, "{k}={v}").ok();
    }
    out.push_str(&energy_section(5.0));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_directory_is_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(generate(dir.path()).unwrap_err().code(), "incomplete-run");
        assert_eq!(
            generate(dir.path().join("nope")).unwrap_err().code(),
            "incomplete-run"
        );
    }

    #[test]
    fn accumulator_relative_skips_zero_truth() {
        let mut a = Accumulator::default();
        a.push(0.0, Some(5.0));
        a.push(100.0, Some(98.0));
        a.push(100.0, None);
        let s = a.finish();
        assert_eq!((s.n, s.missing), (2, 1));
        assert_eq!(s.max_abs, 5.0);
        assert_eq!(s.mean_rel_pct, 2.0);
    }

    #[test]
    fn check_direction() {
        let c = Check {
            name: "x",
            value: 1.0,
            limit: 1.0,
            upper: true,
        };
        assert!(c.passed());
        assert!(!Check { value: 0.5, upper: false, ..c }.passed());
    }

    #[test]
    fn energy_lines() {
        let e = energy_section(5.0);
        assert!(e.contains("energy.daily_mah=656.004"));
        assert!(e.contains("energy.daily_wh=3.280"));
    }
}
