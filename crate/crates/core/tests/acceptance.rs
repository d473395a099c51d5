//! Acceptance criteria 1-11, one PASS/FAIL line each.
//!
//! Criteria listed in `KNOWN_RED` are reported as FAIL but do not fail the
//! process; each has a written analysis alongside the project notes.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hydropipe::calib::{
    do_from_raw, fit_ph_calibration, tds_from_raw, tds_invert, DoCalib, DoIndexing, DoTable, TdsCalib, TDS_MAX_PPM,
};
use hydropipe::dsp::{median_filter, ChannelConfig};
use hydropipe::gateway::frame_decode;
use hydropipe::metrics::{e_daily, p_avg, reference_day_profile};
use hydropipe::node::frame_encode;
use hydropipe::report;
use hydropipe::scenario::Scenario;
use hydropipe::sensors::{do_forward_with, NoiseSource, NoiseSpec, WaterTruth};
use hydropipe::sim;
use hydropipe::uplink::{Cache, MockSink, Outcome, OutageSchedule, RttModel, Uplink};

/// Criteria whose literal target is arithmetically unreachable.
const KNOWN_RED: &[u32] = &[10];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn load(name: &str) -> Scenario {
    Scenario::load(scenarios_dir().join(name)).expect("bundled scenario loads")
}

fn run_in(name: &str, dir: &Path) -> (sim::RunSummary, report::Report) {
    let s = load(name);
    let summary = sim::run(&s, s.run.seed, dir).expect("scenario runs");
    let rep = report::write(dir).expect("report builds");
    (summary, rep)
}

// Least squares from raw (uncentered) integer sums; pH is carried in
// hundredths so every intermediate is exact.
fn exact_ls(raw: &[i64], ph_centi: &[i64]) -> (f64, f64) {
    let n = raw.len() as i128;
    let sx: i128 = raw.iter().map(|&x| x as i128).sum();
    let sy: i128 = ph_centi.iter().map(|&y| y as i128).sum();
    let sxx: i128 = raw.iter().map(|&x| (x as i128) * (x as i128)).sum();
    let sxy: i128 = raw.iter().zip(ph_centi).map(|(&x, &y)| x as i128 * y as i128).sum();
    let det = n * sxx - sx * sx;
    let slope_num = n * sxy - sx * sy;
    let offset_num = sy * sxx - sx * sxy;
    (
        slope_num as f64 / (det as f64 * 100.0),
        offset_num as f64 / (det as f64 * 100.0),
    )
}

fn c1_calibration_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let raw: Vec<i64> = loop {
            let r: Vec<i64> = (0..5).map(|_| rng.random_range(0..=1023)).collect();
            if r.iter().any(|&x| x != r[0]) {
                break r;
            }
        };
        let ph: Vec<i64> = (0..5).map(|_| rng.random_range(0..=1400)).collect();
        let (slope, offset) = exact_ls(&raw, &ph);
        let rawf: Vec<f64> = raw.iter().map(|&x| x as f64).collect();
        let phf: Vec<f64> = ph.iter().map(|&y| y as f64 / 100.0).collect();
        let c = fit_ph_calibration(&rawf, &phf).expect("non-degenerate");
        worst = worst.max((c.slope - slope).abs()).max((c.offset - offset).abs());
    }
    let mut collinear_worst = 0.0f64;
    for _ in 0..100 {
        let slope = -rng.random_range(5..=15) as f64 / 1000.0;
        let offset = rng.random_range(13.0..14.0);
        let raw: Vec<f64> = (0..5).map(|k| 100.0 + 150.0 * k as f64).collect();
        let ph: Vec<f64> = raw.iter().map(|x| slope * x + offset).collect();
        let c = fit_ph_calibration(&raw, &ph).unwrap();
        collinear_worst = collinear_worst
            .max((c.slope - slope).abs())
            .max((c.offset - offset).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        worst < 1e-9 && collinear_worst < 1e-9 && elapsed < 1.0,
        format!("max |dev| {worst:.2e}, collinear {collinear_worst:.2e}, {elapsed:.3} s"),
    )
}

fn c2_ph_envelope(work: &Path) -> Verdict {
    let (_, quiet) = run_in("buffers.scn", &work.join("buffers"));
    let (_, noisy) = run_in("buffers_noisy.scn", &work.join("buffers_noisy"));
    let pass = quiet.ph.n == 5
        && quiet.ph.mean_abs <= 0.06
        && quiet.ph.max_abs <= 0.08
        && noisy.ph.n == 1000
        && noisy.ph.mean_abs <= 0.10;
    verdict(
        pass,
        format!(
            "noiseless mean {:.4} max {:.4}; sigma=1 mean {:.4} over {} cycles",
            quiet.ph.mean_abs, quiet.ph.max_abs, noisy.ph.mean_abs, noisy.ph.n
        ),
    )
}

fn c3_tds(work: &Path) -> Verdict {
    let cal = TdsCalib::default();
    let mut worst_rt = 0.0f64;
    for temp in [5.0, 15.0, 25.0, 35.0] {
        for i in 0..=1200 {
            let tds = i as f64;
            let v = tds_invert(tds, temp, &cal).unwrap();
            let back = tds_from_raw(v, temp, &cal).unwrap().value;
            worst_rt = worst_rt.max((back - tds).abs());
        }
    }
    // monotone on a 10,000-point voltage grid covering the ppm range
    let v_top = tds_invert(TDS_MAX_PPM, 25.0, &cal).unwrap();
    let grid: Vec<f64> = (0..10_000)
        .map(|i| tds_from_raw(v_top * i as f64 / 9999.0, 25.0, &cal).unwrap().value)
        .collect();
    let monotone = grid.windows(2).all(|w| w[1] > w[0]);

    let (_, rep) = run_in("tds_sweep.scn", &work.join("tds_sweep"));
    let points: Vec<f64> = rep
        .phases
        .iter()
        .map(|p| {
            let t = p[2];
            100.0 * (t.measured.unwrap_or(f64::NAN) - t.truth).abs() / t.truth
        })
        .collect();
    let sweep_ok = points.len() == 4 && points.iter().all(|&e| e <= 2.0) && rep.tds.max_rel_pct <= 2.0;
    verdict(
        worst_rt <= 1e-6 && monotone && sweep_ok,
        format!(
            "round trip {worst_rt:.2e} ppm, monotone {monotone}, sweep errors % {:?}",
            points.iter().map(|e| (e * 1e4).round() / 1e4).collect::<Vec<_>>()
        ),
    )
}

fn c4_do() -> Verdict {
    let table = DoTable::default();
    let cal = DoCalib::default();
    let at_25 = do_from_raw(190.0, 25.0, &table, &cal).unwrap().value;
    let exact = at_25 == f64::from(table.at(25).unwrap()) / 1000.0 && at_25 == 8.24;

    let mut quiet = NoiseSource::new(NoiseSpec::noiseless()).unwrap();
    let cfg = ChannelConfig::dissolved_oxygen();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let temp = rng.random_range(20.0..40.0);
        let truth = WaterTruth {
            do_mgl: rng.random_range(0.0..14.0),
            temp_c: temp,
            ..WaterTruth::default()
        };
        let mv = do_forward_with(&truth, &table, &cal, DoIndexing::Nearest, &cfg, &mut quiet).unwrap();
        let back = do_from_raw(mv, temp, &table, &cal).unwrap().value;
        worst = worst.max((back - truth.do_mgl).abs());
    }
    verdict(
        exact && worst <= 1e-9,
        format!("(190 mV, 25 C) -> {at_25}, round trip {worst:.2e}"),
    )
}

fn c5_median() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut even = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=64usize);
        let w: Vec<u32> = (0..len).map(|_| rng.random_range(0..=4095)).collect();
        let mut s = w.clone();
        s.sort_unstable();
        let oracle = if len % 2 == 1 {
            s[len / 2]
        } else {
            even += 1;
            (s[len / 2 - 1] + s[len / 2]) / 2
        };
        if median_filter(&w).unwrap() != oracle {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches} mismatches, {even} even-length windows"))
}

fn c6_backoff(work: &Path) -> Verdict {
    let sink = MockSink::new(OutageSchedule::new(vec![(0, 10_000_000)]).unwrap());
    let cache = Cache::open(work.join("backoff")).unwrap();
    let mut up = Uplink::new(cache, RttModel::fixed(0.0), 1).unwrap();
    up.enqueue(sample_record(1), 0).unwrap();
    let events = up.flush(300_000, &sink).unwrap();
    let waits: Vec<u64> = events
        .iter()
        .filter_map(|e| match e.outcome {
            Outcome::Refused { retry_in_ms } => Some(retry_in_ms),
            _ => None,
        })
        .take(8)
        .collect();
    let expected = vec![1000, 2000, 4000, 8000, 16_000, 32_000, 60_000, 60_000];
    verdict(waits == expected, format!("{waits:?}"))
}

fn sample_record(seq: u64) -> hydropipe::gateway::TelemetryRecord {
    hydropipe::gateway::TelemetryRecord {
        device_id: "hs-01".into(),
        seq,
        ts_ms: seq * 1000,
        ph: Some(7.0),
        do_mgl: Some(8.24),
        temp_c: Some(25.0),
        tds_ppm: Some(367.0),
        level_cm: Some(50.0),
        nitrogen_est: None,
        flags: Default::default(),
    }
}

fn c7_zero_loss(work: &Path) -> Verdict {
    let start = Instant::now();
    let (s, _) = run_in("reliability.scn", &work.join("reliability"));
    let elapsed = start.elapsed().as_secs_f64();
    let outage_ok = (s.outage_pct - 0.17).abs() < 0.005;
    let pass = s.cycles == 86_400
        && outage_ok
        && s.records_pending == 0
        && s.seq_gaps == 0
        && s.records_produced == s.records_stored
        && elapsed < 60.0;
    verdict(
        pass,
        format!(
            "outage {:.3}%, produced {} stored {} pending {}, first-attempt {:.4}%, eventual {:.4}%, {elapsed:.1} s",
            s.outage_pct,
            s.records_produced,
            s.records_stored,
            s.records_pending,
            s.first_attempt_success_pct,
            s.eventual_delivery_pct
        ),
    )
}

fn c8_crash(work: &Path) -> Verdict {
    let dir = work.join("crash");
    let sink = MockSink::default();
    {
        let mut up = Uplink::new(Cache::open(&dir).unwrap(), RttModel::fixed(100.0), 1).unwrap();
        for seq in 1..=50 {
            up.enqueue(sample_record(seq), seq * 1000).unwrap();
        }
        // part of the queue goes out, then the process dies
        up.flush(20_000, &sink).unwrap();
        for seq in 51..=100 {
            up.enqueue(sample_record(seq), seq * 1000).unwrap();
        }
    }
    let first = Cache::open(&dir).unwrap();
    let pending_after_restart = first.pending_len();
    let mut up = Uplink::new(first, RttModel::fixed(100.0), 2).unwrap();
    up.drain(&sink).unwrap();
    let seqs = sink.seqs("hs-01");
    let pass = pending_after_restart == 80
        && seqs == (1..=100).collect::<Vec<_>>()
        && sink.stats().duplicates == 0
        && up.pending() == 0;
    verdict(
        pass,
        format!("{pending_after_restart} pending after restart, {} stored in total", seqs.len()),
    )
}

fn c9_framing() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad_roundtrips = 0;
    let mut missed = 0u64;
    let mut flips = 0u64;
    for _ in 0..10_000 {
        let len = rng.random_range(0..=60);
        let payload: String = (0..len)
            .map(|_| loop {
                let c = rng.random_range(0x20u8..0x7f);
                if c != b'$' && c != b'*' {
                    break c as char;
                }
            })
            .collect();
        let wire = frame_encode(&payload).unwrap();
        if frame_decode(&wire).ok().as_deref() != Some(payload.as_str()) {
            bad_roundtrips += 1;
        }
        for byte in 0..wire.len() {
            for bit in 0..8 {
                let mut w = wire.clone();
                w[byte] ^= 1 << bit;
                flips += 1;
                if frame_decode(&w).is_ok() {
                    missed += 1;
                }
            }
        }
    }
    verdict(
        bad_roundtrips == 0 && missed == 0,
        format!("{bad_roundtrips} bad round trips, {missed} of {flips} single-bit flips undetected"),
    )
}

fn c10_energy(work: &Path) -> Verdict {
    // oracle: integer arithmetic in hundredths of a mA
    let oracle_mah = (12_000u64 * 8640 + 18_500 * 864 + 1515 * 76_896) as f64 / 100.0 / 3600.0;
    let profile = reference_day_profile(5.0);
    let day = e_daily(&profile).unwrap();
    let avg = p_avg(&profile).unwrap();
    let oracle_agrees = (day.mah - oracle_mah).abs() < 1e-9;
    let identity = (day.wh - avg * 24.0 * 5.0 / 1000.0).abs() < 1e-9;
    let target_hit = (day.mah - 655.99).abs() <= 0.01;
    let (_, rep) = run_in("buffers.scn", &work.join("energy"));
    let rendered = rep.render();
    let documented = rendered.contains("energy.printed_daily_wh=8.54")
        && rendered.contains("energy.printed_daily_mah=1728")
        && rendered.contains("energy.note=");
    verdict(
        target_hit && oracle_agrees && identity && documented,
        format!(
            "e_daily {:.4} mAh vs target 655.99 +/- 0.01 (oracle {:.4}, agrees {oracle_agrees}); Wh identity {identity}; divergence documented {documented}",
            day.mah, oracle_mah
        ),
    )
}

fn c11_determinism(work: &Path) -> Verdict {
    let mut differing = Vec::new();
    for name in ["buffers", "buffers_noisy", "tds_sweep", "do_points", "reliability"] {
        let a = work.join(format!("det-a-{name}"));
        let b = work.join(format!("det-b-{name}"));
        run_in(&format!("{name}.scn"), &a);
        run_in(&format!("{name}.scn"), &b);
        for f in [
            report::REPORT_FILE,
            sim::METRICS_TXT,
            sim::METRICS_NDJSON,
            sim::SINK_DUMP,
            sim::CACHE_RESIDUE,
            sim::STATUS_LOG,
        ] {
            if fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap() {
                differing.push(format!("{name}/{f}"));
            }
        }
    }
    verdict(differing.is_empty(), format!("differing artifacts: {differing:?}"))
}

type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Verdict + 'a>);

fn main() -> ExitCode {
    let work = tempfile::tempdir().expect("temp dir");
    let w = work.path();
    let criteria: Vec<Criterion> = vec![
        (1, "calibration oracle equivalence", Box::new(c1_calibration_oracle)),
        (2, "pH accuracy envelope", Box::new(|| c2_ph_envelope(w))),
        (3, "TDS round trip and envelope", Box::new(|| c3_tds(w))),
        (4, "DO pipeline", Box::new(c4_do)),
        (5, "median filter oracle", Box::new(c5_median)),
        (6, "backoff sequence", Box::new(|| c6_backoff(w))),
        (7, "zero data loss", Box::new(|| c7_zero_loss(w))),
        (8, "crash durability", Box::new(|| c8_crash(w))),
        (9, "framing", Box::new(c9_framing)),
        (10, "energy identities", Box::new(|| c10_energy(w))),
        (11, "determinism", Box::new(|| c11_determinism(w))),
    ];
    let mut unexpected = 0;
    let mut passed = 0;
    for (id, name, check) in &criteria {
        let o = check();
        let status = if o.pass { "PASS" } else { "FAIL" };
        let note = if !o.pass && KNOWN_RED.contains(id) {
            " [known]"
        } else {
            ""
        };
        println!("criterion {id:>2} {status}{note} {name}: {}", o.detail);
        if o.pass {
            passed += 1;
        } else if !KNOWN_RED.contains(id) {
            unexpected += 1;
        }
    }
    println!("{passed}/{} criteria pass", criteria.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
