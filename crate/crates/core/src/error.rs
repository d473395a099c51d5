use std::io;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps to a stable short code (see [`Error::code`]) which is
/// what ends up in reports and diagnostics.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-window: cannot reduce an empty sample window")]
    EmptyWindow,
    #[error("adc-range: {counts} counts outside 0..={max}")]
    AdcRange { counts: f64, max: u32 },
    #[error("channel-config: {0}")]
    ChannelConfig(String),
    #[error("degenerate-calibration: all raw readings identical")]
    DegenerateCalibration,
    #[error("calibration-input: {0}")]
    CalibrationInput(String),
    #[error("compensation-domain: temperature factor {k} is not positive")]
    CompensationDomain { k: f64 },
    #[error("tds-range: {0} ppm outside invertible range")]
    TdsRange(f64),
    #[error("do-domain: saturation voltage {0} mV is not positive")]
    DoDomain(f64),
    #[error("temp-range: {0} °C outside table range")]
    TempRange(f64),
    #[error("do-table: {0}")]
    DoTable(String),
    #[error("ultrasonic-range: distance {0} cm outside 2..=400")]
    UltrasonicRange(f64),
    #[error("frame-charset: payload contains a reserved character")]
    FrameCharset,
    #[error("bad-checksum: expected {expected:02X}, got {actual:02X}")]
    BadChecksum { expected: u8, actual: u8 },
    #[error("bad-framing: {0}")]
    BadFraming(String),
    #[error("bad-attempt: attempt numbers start at 1")]
    BadAttempt,
    #[error("dup-seq: seq {seq} for device {device_id} already enqueued")]
    DupSeq { device_id: String, seq: u64 },
    #[error("cache-full: simulated disk full")]
    CacheFull,
    #[error("cache-corrupt: {0}")]
    CacheCorrupt(String),
    #[error("schema: {0}")]
    Schema(String),
    #[error("empty-profile: total duration is zero")]
    EmptyProfile,
    #[error("not-a-day: durations sum to {0} s, expected 86400")]
    NotADay(f64),
    #[error("div-zero: zero denominator")]
    DivZero,
    #[error("incomplete-run: {0}")]
    IncompleteRun(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyWindow => "empty-window",
            Error::AdcRange { .. } => "adc-range",
            Error::ChannelConfig(_) => "channel-config",
            Error::DegenerateCalibration => "degenerate-calibration",
            Error::CalibrationInput(_) => "calibration-input",
            Error::CompensationDomain { .. } => "compensation-domain",
            Error::TdsRange(_) => "tds-range",
            Error::DoDomain(_) => "do-domain",
            Error::TempRange(_) => "temp-range",
            Error::DoTable(_) => "do-table",
            Error::UltrasonicRange(_) => "ultrasonic-range",
            Error::FrameCharset => "frame-charset",
            Error::BadChecksum { .. } => "bad-checksum",
            Error::BadFraming(_) => "bad-framing",
            Error::BadAttempt => "bad-attempt",
            Error::DupSeq { .. } => "dup-seq",
            Error::CacheFull => "cache-full",
            Error::CacheCorrupt(_) => "cache-corrupt",
            Error::Schema(_) => "schema",
            Error::EmptyProfile => "empty-profile",
            Error::NotADay(_) => "not-a-day",
            Error::DivZero => "div-zero",
            Error::IncompleteRun(_) => "incomplete-run",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
