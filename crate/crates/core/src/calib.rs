//! Calibration math for every analog channel.
//!
//! * pH: least-squares line through buffer readings, with OLS standard errors.
//! * TDS: temperature-compensated cubic conversion and its numerical inverse.
//! * DO: single-point galvanic calibration scaled by a saturation table.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::ChannelConfig;
use crate::error::{Error, Result};

/// Standard buffer set used by the 5-point procedure.
pub const DEFAULT_BUFFERS: [f64; 5] = [4.0, 5.5, 7.0, 8.5, 10.0];

pub const PH_MIN: f64 = 0.0;
pub const PH_MAX: f64 = 14.0;

/// A converted value plus whether it had to be clamped into range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounded {
    pub value: f64,
    pub clamped: bool,
}

impl Bounded {
    fn exact(value: f64) -> Self {
        Bounded { value, clamped: false }
    }

    fn clamp(value: f64, lo: f64, hi: f64) -> Self {
        if value < lo {
            Bounded { value: lo, clamped: true }
        } else if value > hi {
            Bounded { value: hi, clamped: true }
        } else {
            Bounded::exact(value)
        }
    }
}

/// Linear counts-to-pH map with 1σ parameter uncertainties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    /// pH per ADC count.
    pub slope: f64,
    pub offset: f64,
    pub u_slope: f64,
    pub u_offset: f64,
    pub points_used: usize,
}

impl CalibrationCurve {
    /// A curve with no fit behind it (zero uncertainty).
    pub fn from_line(slope: f64, offset: f64) -> Self {
        CalibrationCurve {
            slope,
            offset,
            u_slope: 0.0,
            u_offset: 0.0,
            points_used: 2,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.points_used >= 2 && self.slope.is_finite() && self.slope != 0.0 && self.offset.is_finite()
    }
}

impl fmt::Display for CalibrationCurve {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "slope={:.9}", self.slope)?;
        writeln!(f, "offset={:.9}", self.offset)?;
        writeln!(f, "u_slope={:.9}", self.u_slope)?;
        writeln!(f, "u_offset={:.9}", self.u_offset)?;
        write!(f, "points_used={}", self.points_used)
    }
}

/// Least-squares fit of buffer pH against raw counts.
///
/// Means first, then centered sums, exactly like the firmware routine. The
/// uncertainties are the ordinary least-squares standard errors from the
/// residuals (zero when the points are collinear or only two are given).
pub fn fit_ph_calibration(raw: &[f64], buffers: &[f64]) -> Result<CalibrationCurve> {
    if raw.len() != buffers.len() {
        return Err(Error::CalibrationInput(format!(
            "{} raw readings but {} buffers",
            raw.len(),
            buffers.len()
        )));
    }
    let n = raw.len();
    if n < 2 {
        return Err(Error::CalibrationInput("need at least two points".into()));
    }
    if let Some(bad) = buffers.iter().find(|b| !(PH_MIN..=PH_MAX).contains(*b)) {
        return Err(Error::CalibrationInput(format!("buffer pH {bad} outside 0..14")));
    }
    if raw.iter().any(|x| !x.is_finite()) {
        return Err(Error::CalibrationInput("non-finite raw reading".into()));
    }

    let nf = n as f64;
    let mean_x = raw.iter().sum::<f64>() / nf;
    let mean_y = buffers.iter().sum::<f64>() / nf;
    let mut numerator = 0.0;
    let mut denominator = 0.0;
    for (x, y) in raw.iter().zip(buffers) {
        numerator += (x - mean_x) * (y - mean_y);
        denominator += (x - mean_x) * (x - mean_x);
    }
    if denominator == 0.0 {
        return Err(Error::DegenerateCalibration);
    }
    let slope = numerator / denominator;
    let offset = mean_y - slope * mean_x;

    let (u_slope, u_offset) = if n > 2 {
        let ssr: f64 = raw
            .iter()
            .zip(buffers)
            .map(|(x, y)| {
                let r = y - (slope * x + offset);
                r * r
            })
            .sum();
        let s2 = ssr / (nf - 2.0);
        let u_slope = (s2 / denominator).sqrt();
        let u_offset = (s2 * (1.0 / nf + mean_x * mean_x / denominator)).sqrt();
        (u_slope, u_offset)
    } else {
        (0.0, 0.0)
    };

    Ok(CalibrationCurve {
        slope,
        offset,
        u_slope,
        u_offset,
        points_used: n,
    })
}

/// `slope * counts + offset`, clamped to 0..14.
pub fn ph_from_counts(mean_counts: f64, curve: &CalibrationCurve) -> Bounded {
    Bounded::clamp(curve.slope * mean_counts + curve.offset, PH_MIN, PH_MAX)
}

/// Unit of the one-code quantization uncertainty fed into [`ph_uncertainty_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum QuantizationUnit {
    /// 1/√12 counts; consistent with a per-count slope.
    #[default]
    Counts,
    /// 1/√12 · vref/2^bits volts, the literal firmware-document form.
    Volts,
}

/// 1σ pH uncertainty of a single reading, quantization in counts.
pub fn ph_uncertainty(curve: &CalibrationCurve, cfg: &ChannelConfig) -> f64 {
    ph_uncertainty_with(curve, cfg, QuantizationUnit::Counts)
}

pub fn ph_uncertainty_with(curve: &CalibrationCurve, cfg: &ChannelConfig, unit: QuantizationUnit) -> f64 {
    let one_code = 1.0 / 12f64.sqrt();
    let u_adc = match unit {
        QuantizationUnit::Counts => one_code,
        QuantizationUnit::Volts => one_code * cfg.lsb_volts(),
    };
    (curve.slope * u_adc).hypot(curve.u_offset)
}

/// Cubic coefficients of the conductivity-voltage to ppm conversion.
pub const TDS_CUBIC: [f64; 3] = [133.42, -255.86, 857.39];

/// Upper end of the invertible TDS range, ppm.
pub const TDS_MAX_PPM: f64 = 1200.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TdsCalib {
    pub k_factor: f64,
    /// Per °C.
    pub temp_coeff: f64,
    pub ref_temp: f64,
}

impl Default for TdsCalib {
    fn default() -> Self {
        TdsCalib {
            k_factor: 0.5,
            temp_coeff: 0.02,
            ref_temp: 25.0,
        }
    }
}

impl TdsCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_factor > 0.0) {
            return Err(Error::Config(format!("tds k_factor must be positive, got {}", self.k_factor)));
        }
        if !(self.temp_coeff >= 0.0) {
            return Err(Error::Config(format!("tds temp_coeff must be >= 0, got {}", self.temp_coeff)));
        }
        Ok(())
    }

    /// `1 + temp_coeff * (temp - ref_temp)`.
    pub fn compensation(&self, temp: f64) -> Result<f64> {
        let k = 1.0 + self.temp_coeff * (temp - self.ref_temp);
        if !(k > 0.0) {
            return Err(Error::CompensationDomain { k });
        }
        Ok(k)
    }

    fn cubic(&self, v: f64) -> f64 {
        let [a, b, c] = TDS_CUBIC;
        ((a * v + b) * v + c) * v * self.k_factor
    }
}

/// Temperature-compensated TDS in ppm. Negative results clamp to zero.
pub fn tds_from_raw(v_raw: f64, temp: f64, cal: &TdsCalib) -> Result<Bounded> {
    let k = cal.compensation(temp)?;
    let tds = cal.cubic(v_raw / k);
    Ok(Bounded::clamp(tds, 0.0, f64::INFINITY))
}

/// Raw sensor voltage that reads as `tds` ppm at `temp`.
///
/// The cubic is strictly increasing (its derivative has a negative
/// discriminant), so bisection on `v_raw >= 0` finds the unique root.
pub fn tds_invert(tds: f64, temp: f64, cal: &TdsCalib) -> Result<f64> {
    if !(0.0..=TDS_MAX_PPM).contains(&tds) {
        return Err(Error::TdsRange(tds));
    }
    let k = cal.compensation(temp)?;
    if tds == 0.0 {
        return Ok(0.0);
    }
    let f = |v: f64| cal.cubic(v / k) - tds;

    let mut lo = 0.0;
    let mut hi = k;
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let r = f(mid);
        if r == 0.0 {
            return Ok(mid);
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(if f(lo).abs() <= f(hi).abs() { lo } else { hi })
}

/// Oxygen saturation by whole °C, 0..=40, in µg/L.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DoTable {
    values: [u32; 41],
}

const DEFAULT_DO_TABLE: &str = include_str!("../data/do_table.txt");

impl Default for DoTable {
    fn default() -> Self {
        DEFAULT_DO_TABLE.parse().expect("bundled DO table is valid")
    }
}

impl FromStr for DoTable {
    type Err = Error;

    /// 41 whitespace-separated integers, index 0 = 0 °C.
    fn from_str(s: &str) -> Result<Self> {
        let parsed = s
            .split_whitespace()
            .map(|tok| {
                tok.parse::<u32>()
                    .map_err(|_| Error::DoTable(format!("not an integer: {tok:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        DoTable::new(&parsed)
    }
}

impl DoTable {
    pub fn new(values: &[u32]) -> Result<Self> {
        let values: [u32; 41] = values
            .try_into()
            .map_err(|_| Error::DoTable(format!("expected 41 values, got {}", values.len())))?;
        if values[40] == 0 {
            return Err(Error::DoTable("values must be positive".into()));
        }
        if let Some(i) = values.windows(2).position(|w| w[1] >= w[0]) {
            return Err(Error::DoTable(format!("not strictly decreasing at {} °C", i + 1)));
        }
        Ok(DoTable { values })
    }

    pub fn values(&self) -> &[u32; 41] {
        &self.values
    }

    /// Entry for an integer temperature.
    pub fn at(&self, celsius: usize) -> Option<u32> {
        self.values.get(celsius).copied()
    }

    /// Saturation in µg/L for a measured temperature.
    pub fn lookup(&self, temp: f64, indexing: DoIndexing) -> Result<f64> {
        if !(0.0..=40.0).contains(&temp) {
            return Err(Error::TempRange(temp));
        }
        Ok(match indexing {
            DoIndexing::Nearest => {
                // round half up
                let idx = (temp + 0.5).floor() as usize;
                f64::from(self.values[idx.min(40)])
            }
            DoIndexing::Linear => {
                let lo = temp.floor() as usize;
                let hi = (lo + 1).min(40);
                let frac = temp - lo as f64;
                let a = f64::from(self.values[lo]);
                let b = f64::from(self.values[hi]);
                a + (b - a) * frac
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DoIndexing {
    #[default]
    Nearest,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoCalib {
    /// Calibration voltage, mV.
    pub cal_v: f64,
    /// Calibration temperature, °C.
    pub cal_t: f64,
    /// mV per °C.
    pub slope_coeff: f64,
}

impl Default for DoCalib {
    fn default() -> Self {
        DoCalib {
            cal_v: 190.0,
            cal_t: 25.0,
            slope_coeff: 35.0,
        }
    }
}

impl DoCalib {
    pub fn validate(&self) -> Result<()> {
        if !(self.cal_v > 0.0) {
            return Err(Error::Config(format!("DO cal_v must be positive, got {}", self.cal_v)));
        }
        if !(0.0..=40.0).contains(&self.cal_t) {
            return Err(Error::Config(format!("DO cal_t must be within 0..40, got {}", self.cal_t)));
        }
        Ok(())
    }

    /// Expected sensor voltage at full saturation for `temp`, mV.
    pub fn saturation_mv(&self, temp: f64) -> f64 {
        self.cal_v + self.slope_coeff * temp - self.cal_t * self.slope_coeff
    }
}

/// Dissolved oxygen in mg/L from the galvanic probe voltage.
pub fn do_from_raw(v_mv: f64, temp: f64, table: &DoTable, cal: &DoCalib) -> Result<Bounded> {
    do_from_raw_with(v_mv, temp, table, cal, DoIndexing::Nearest)
}

pub fn do_from_raw_with(
    v_mv: f64,
    temp: f64,
    table: &DoTable,
    cal: &DoCalib,
    indexing: DoIndexing,
) -> Result<Bounded> {
    let saturation = table.lookup(temp, indexing)?;
    let denom = cal.saturation_mv(temp);
    if !(denom > 0.0) {
        return Err(Error::DoDomain(denom));
    }
    let mgl = v_mv * saturation / (denom * 1000.0);
    Ok(Bounded::clamp(mgl, 0.0, f64::INFINITY))
}

/// Reads a 5-point calibration file: one `raw_counts buffer_pH` pair per line.
/// Blank lines and `#` comments are ignored.
pub fn parse_calibration_pairs(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::CalibrationInput(format!("line {}: bad number {s:?}", lineno + 1)))
        };
        match fields.as_slice() {
            [raw, ph] => pairs.push((parse(raw)?, parse(ph)?)),
            _ => {
                return Err(Error::CalibrationInput(format!(
                    "line {}: expected `raw_counts buffer_pH`",
                    lineno + 1
                )))
            }
        }
    }
    if pairs.len() != 5 {
        return Err(Error::CalibrationInput(format!("expected 5 pairs, got {}", pairs.len())));
    }
    Ok(pairs)
}

/// Fits a curve straight from calibration file contents.
pub fn fit_from_pairs(pairs: &[(f64, f64)]) -> Result<CalibrationCurve> {
    let (raw, buffers): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    fit_ph_calibration(&raw, &buffers)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    const RAW: [f64; 5] = [800.0, 680.0, 560.0, 440.0, 320.0];

    #[test]
    fn collinear_fit() {
        let c = fit_ph_calibration(&RAW, &DEFAULT_BUFFERS).unwrap();
        assert!(close(c.slope, -0.0125, 1e-12));
        assert!(close(c.offset, 14.0, 1e-9));
        assert!(c.u_offset < 1e-9);
        assert!(c.u_slope < 1e-12);
        assert_eq!(c.points_used, 5);
    }

    #[test]
    fn degenerate_fit() {
        let err = fit_ph_calibration(&[100.0; 5], &DEFAULT_BUFFERS).unwrap_err();
        assert_eq!(err.code(), "degenerate-calibration");
    }

    #[test]
    fn fit_input_errors() {
        assert_eq!(fit_ph_calibration(&[1.0, 2.0], &[4.0]).unwrap_err().code(), "calibration-input");
        assert_eq!(fit_ph_calibration(&[1.0], &[4.0]).unwrap_err().code(), "calibration-input");
        assert_eq!(
            fit_ph_calibration(&[1.0, 2.0], &[4.0, 15.0]).unwrap_err().code(),
            "calibration-input"
        );
    }

    #[test]
    fn noisy_fit_has_positive_uncertainty() {
        let raw = [801.0, 679.0, 561.0, 440.0, 318.0];
        let c = fit_ph_calibration(&raw, &DEFAULT_BUFFERS).unwrap();
        assert!(c.u_offset > 0.0 && c.u_slope > 0.0);
    }

    #[test]
    fn ph_conversion_examples() {
        let c = fit_ph_calibration(&RAW, &DEFAULT_BUFFERS).unwrap();
        let mid = ph_from_counts(560.0, &c);
        assert!(close(mid.value, 7.0, 1e-9) && !mid.clamped);
        assert!(close(ph_from_counts(320.0, &c).value, 10.0, 1e-9));
        let low = ph_from_counts(1200.0, &c);
        assert_eq!(low.value, 0.0);
        assert!(low.clamped);
        let high = ph_from_counts(-100.0, &c);
        assert_eq!(high.value, 14.0);
        assert!(high.clamped);
    }

    #[test]
    fn uncertainty_examples() {
        let cfg = ChannelConfig::ph();
        let c = CalibrationCurve::from_line(-0.0125, 14.0);
        assert!(close(ph_uncertainty(&c, &cfg), 0.0125 / 12f64.sqrt(), 1e-15));
        assert!(close(ph_uncertainty(&c, &cfg), 0.003608, 1e-6));

        let intercept_only = CalibrationCurve {
            slope: 0.0,
            offset: 7.0,
            u_slope: 0.0,
            u_offset: 0.05,
            points_used: 5,
        };
        assert!(close(ph_uncertainty(&intercept_only, &cfg), 0.05, 1e-15));

        let fitted = fit_ph_calibration(&RAW, &DEFAULT_BUFFERS).unwrap();
        assert!(close(ph_uncertainty(&fitted, &cfg), fitted.slope.abs() / 12f64.sqrt(), 1e-9));

        let volts = ph_uncertainty_with(&c, &cfg, QuantizationUnit::Volts);
        assert!(close(volts, 0.0125 / 12f64.sqrt() * 5.0 / 1024.0, 1e-15));
    }

    #[test]
    fn tds_examples() {
        let cal = TdsCalib::default();
        assert!(close(tds_from_raw(1.0, 25.0, &cal).unwrap().value, 367.475, 1e-9));
        assert!(close(tds_from_raw(1.2, 35.0, &cal).unwrap().value, 367.475, 1e-9));
        assert_eq!(tds_from_raw(0.0, 12.0, &cal).unwrap().value, 0.0);
        let neg = tds_from_raw(-0.1, 25.0, &cal).unwrap();
        assert!(neg.clamped && neg.value == 0.0);
        assert_eq!(tds_from_raw(1.0, -25.0, &cal).unwrap_err().code(), "compensation-domain");
        assert_eq!(tds_from_raw(1.0, -30.0, &cal).unwrap_err().code(), "compensation-domain");
    }

    #[test]
    fn tds_inverse_examples() {
        let cal = TdsCalib::default();
        assert_eq!(tds_invert(0.0, 25.0, &cal).unwrap(), 0.0);
        assert!(close(tds_invert(367.475, 25.0, &cal).unwrap(), 1.0, 1e-9));
        for x in [50.0, 342.0, 500.0, 750.0, 1000.0] {
            let v = tds_invert(x, 25.0, &cal).unwrap();
            assert!(close(tds_from_raw(v, 25.0, &cal).unwrap().value, x, 1e-6));
        }
        assert_eq!(tds_invert(1200.5, 25.0, &cal).unwrap_err().code(), "tds-range");
        assert_eq!(tds_invert(-1.0, 25.0, &cal).unwrap_err().code(), "tds-range");
    }

    #[test]
    fn do_examples() {
        let table = DoTable::default();
        let cal = DoCalib::default();
        assert_eq!(table.at(25), Some(8240));
        assert_eq!(do_from_raw(190.0, 25.0, &table, &cal).unwrap().value, 8.24);
        assert_eq!(do_from_raw(0.0, 31.0, &table, &cal).unwrap().value, 0.0);
        assert!(close(do_from_raw(95.0, 25.0, &table, &cal).unwrap().value, 4.12, 1e-12));
        assert_eq!(do_from_raw(190.0, 41.0, &table, &cal).unwrap_err().code(), "temp-range");
        assert_eq!(do_from_raw(190.0, -0.5, &table, &cal).unwrap_err().code(), "temp-range");
        // (190 + 35*15 - 875) mV is negative below ~19.6 °C with the default constants
        assert_eq!(do_from_raw(190.0, 15.0, &table, &cal).unwrap_err().code(), "do-domain");
    }

    #[test]
    fn do_table_indexing() {
        let table = DoTable::default();
        assert_eq!(table.lookup(24.5, DoIndexing::Nearest).unwrap(), 8240.0);
        assert_eq!(table.lookup(24.49, DoIndexing::Nearest).unwrap(), 8410.0);
        assert_eq!(table.lookup(40.0, DoIndexing::Nearest).unwrap(), 6410.0);
        assert!(close(table.lookup(24.5, DoIndexing::Linear).unwrap(), 8325.0, 1e-9));
        assert_eq!(table.lookup(40.0, DoIndexing::Linear).unwrap(), 6410.0);
    }

    #[test]
    fn do_table_file_rules() {
        let table = DoTable::default();
        let text: String = table.values().iter().map(|v| format!("{v} ")).collect();
        assert_eq!(text.parse::<DoTable>().unwrap(), table);

        let short: String = table.values()[..40].iter().map(|v| format!("{v}\n")).collect();
        assert_eq!(short.parse::<DoTable>().unwrap_err().code(), "do-table");

        let mut flat = *table.values();
        flat[10] = flat[9];
        assert!(DoTable::new(&flat).is_err());
        assert!("14460 abc".parse::<DoTable>().is_err());
    }

    #[test]
    fn calibration_file() {
        let text = "# raw pH\n800 4.0\n680 5.5\n\n560 7.0\n440 8.5\n320 10.0\n";
        let pairs = parse_calibration_pairs(text).unwrap();
        let c = fit_from_pairs(&pairs).unwrap();
        assert!(close(c.slope, -0.0125, 1e-12));
        assert!(parse_calibration_pairs("800 4.0\n").is_err());
        assert!(parse_calibration_pairs("800 4.0 1\n").is_err());
    }
}
