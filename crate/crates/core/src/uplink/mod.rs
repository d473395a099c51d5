//! Store-and-forward uplink to the cloud sink.
//!
//! Records are appended to the durable [`Cache`] first and sent strictly in
//! order. A refused send is retried after `min(60000, 1000 * 2^(n-1))` ms
//! where `n` is the failed attempt number; retries never give up. The sink
//! deduplicates on `(device_id, seq)`, so at-least-once sending yields
//! exactly-once storage.

pub mod cache;
pub mod sink;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::TelemetryRecord;

pub use cache::{Cache, CacheEntry};
pub use sink::{seq_gaps, MockSink, SinkResponse, SinkStats};

pub const BACKOFF_BASE_MS: u64 = 1000;
pub const BACKOFF_CAP_MS: u64 = 60_000;

/// Wait after failed attempt `n` (1-based).
pub fn backoff_delay(n: u32) -> Result<u64> {
    if n < 1 {
        return Err(Error::BadAttempt);
    }
    let delay = 1u64
        .checked_shl(n - 1)
        .and_then(|f| f.checked_mul(BACKOFF_BASE_MS))
        .unwrap_or(u64::MAX);
    Ok(delay.min(BACKOFF_CAP_MS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryState {
    pub attempt_n: u32,
    pub next_delay_ms: u64,
}

impl Default for RetryState {
    fn default() -> Self {
        RetryState {
            attempt_n: 1,
            next_delay_ms: BACKOFF_BASE_MS,
        }
    }
}

impl RetryState {
    /// Records a failed attempt and returns how long to wait before the next.
    pub fn on_failure(&mut self) -> u64 {
        let wait = self.next_delay_ms;
        self.attempt_n = self.attempt_n.saturating_add(1);
        self.next_delay_ms = backoff_delay(self.attempt_n).expect("attempt_n >= 1");
        wait
    }

    pub fn on_success(&mut self) {
        *self = RetryState::default();
    }
}

/// Half-open `[start_ms, end_ms)` windows during which the sink is down.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageSchedule {
    windows: Vec<(u64, u64)>,
}

impl OutageSchedule {
    pub fn new(windows: Vec<(u64, u64)>) -> Result<Self> {
        for &(s, e) in &windows {
            if s >= e {
                return Err(Error::Config(format!("empty outage window [{s}, {e})")));
            }
        }
        if windows.windows(2).any(|w| w[1].0 < w[0].1) {
            return Err(Error::Config("outage windows must be sorted and disjoint".into()));
        }
        Ok(OutageSchedule { windows })
    }

    pub fn windows(&self) -> &[(u64, u64)] {
        &self.windows
    }

    pub fn is_down(&self, t_ms: u64) -> bool {
        let i = self.windows.partition_point(|&(s, _)| s <= t_ms);
        i > 0 && t_ms < self.windows[i - 1].1
    }

    pub fn total_ms(&self) -> u64 {
        self.windows.iter().map(|(s, e)| e - s).sum()
    }

    pub fn last_end(&self) -> u64 {
        self.windows.last().map_or(0, |w| w.1)
    }
}

/// Round-trip time of a successful send: Gaussian, truncated by resampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RttModel {
    pub mean_ms: f64,
    pub sd_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
}

impl Default for RttModel {
    fn default() -> Self {
        RttModel {
            mean_ms: 1750.0,
            sd_ms: 420.0,
            min_ms: 200.0,
            max_ms: 10_000.0,
        }
    }
}

impl RttModel {
    pub fn fixed(ms: f64) -> Self {
        RttModel {
            mean_ms: ms,
            sd_ms: 0.0,
            min_ms: ms,
            max_ms: ms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.sd_ms >= 0.0
            && self.min_ms >= 0.0
            && self.min_ms <= self.max_ms
            && (self.min_ms..=self.max_ms).contains(&self.mean_ms);
        if !ok {
            return Err(Error::Config(format!("inconsistent rtt model {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        if self.sd_ms == 0.0 {
            return self.mean_ms.round() as u64;
        }
        loop {
            let z: f64 = rng.sample(StandardNormal);
            let v = self.mean_ms + z * self.sd_ms;
            if (self.min_ms..=self.max_ms).contains(&v) {
                return v.round() as u64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Delivered { rtt_ms: u64, latency_ms: u64, duplicate: bool },
    Refused { retry_in_ms: u64 },
    Rejected,
}

/// One send attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryEvent {
    pub device_id: String,
    pub seq: u64,
    pub t_ms: u64,
    pub attempt_n: u32,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct UplinkStats {
    pub attempts: u64,
    pub failed_attempts: u64,
    pub delivered: u64,
    /// Records whose very first attempt succeeded.
    pub first_attempt_ok: u64,
    /// Records that had at least one attempt.
    pub records_attempted: u64,
    pub rejected: u64,
    pub latency_sum_ms: f64,
    pub latency_sq_sum_ms: f64,
    pub latency_max_ms: u64,
    pub rtt_sum_ms: f64,
    pub rtt_sq_sum_ms: f64,
    pub rtt_max_ms: u64,
}

impl UplinkStats {
    fn record_delivery(&mut self, rtt: u64, latency: u64) {
        self.delivered += 1;
        let (l, r) = (latency as f64, rtt as f64);
        self.latency_sum_ms += l;
        self.latency_sq_sum_ms += l * l;
        self.latency_max_ms = self.latency_max_ms.max(latency);
        self.rtt_sum_ms += r;
        self.rtt_sq_sum_ms += r * r;
        self.rtt_max_ms = self.rtt_max_ms.max(rtt);
    }

    fn mean_sd(sum: f64, sq: f64, n: u64) -> (f64, f64) {
        if n == 0 {
            return (0.0, 0.0);
        }
        let n = n as f64;
        let mean = sum / n;
        (mean, (sq / n - mean * mean).max(0.0).sqrt())
    }

    /// Mean and population standard deviation of enqueue-to-ack latency, ms.
    pub fn latency_mean_sd_ms(&self) -> (f64, f64) {
        Self::mean_sd(self.latency_sum_ms, self.latency_sq_sum_ms, self.delivered)
    }

    /// Mean and population standard deviation of the send round trip, ms.
    pub fn rtt_mean_sd_ms(&self) -> (f64, f64) {
        Self::mean_sd(self.rtt_sum_ms, self.rtt_sq_sum_ms, self.delivered)
    }
}

/// The flusher: drains the cache into the sink on simulated time.
pub struct Uplink {
    cache: Cache,
    retry: RetryState,
    next_attempt_at: u64,
    head_attempted: bool,
    rtt: RttModel,
    rng: ChaCha8Rng,
    stats: UplinkStats,
    dead_letters: Vec<TelemetryRecord>,
}

impl Uplink {
    pub fn new(cache: Cache, rtt: RttModel, seed: u64) -> Result<Self> {
        rtt.validate()?;
        Ok(Uplink {
            cache,
            retry: RetryState::default(),
            next_attempt_at: 0,
            head_attempted: false,
            rtt,
            rng: ChaCha8Rng::seed_from_u64(seed),
            stats: UplinkStats::default(),
            dead_letters: Vec::new(),
        })
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn into_cache(self) -> Cache {
        self.cache
    }

    pub fn retry_state(&self) -> RetryState {
        self.retry
    }

    pub fn stats(&self) -> UplinkStats {
        self.stats
    }

    /// Records the sink rejected as malformed.
    pub fn dead_letters(&self) -> &[TelemetryRecord] {
        &self.dead_letters
    }

    pub fn pending(&self) -> usize {
        self.cache.pending_len()
    }

    pub fn enqueue(&mut self, record: TelemetryRecord, now_ms: u64) -> Result<()> {
        self.cache.enqueue(record, now_ms)
    }

    /// Time of the next send attempt, if anything is pending.
    pub fn next_attempt_at(&self) -> Option<u64> {
        self.cache
            .head()
            .map(|h| self.next_attempt_at.max(h.enqueued_at))
    }

    /// Makes every attempt due at or before `until_ms`, in order.
    pub fn flush(&mut self, until_ms: u64, sink: &MockSink) -> Result<Vec<DeliveryEvent>> {
        let mut events = Vec::new();
        while let Some(t) = self.next_attempt_at() {
            if t > until_ms {
                break;
            }
            let head = self.cache.head().expect("pending entry exists");
            let (device_id, seq, enqueued_at) = (head.record.device_id.clone(), head.record.seq, head.enqueued_at);
            let wire = head.record.to_json_line();
            let attempt_n = self.retry.attempt_n;
            if !self.head_attempted {
                self.head_attempted = true;
                self.stats.records_attempted += 1;
            }
            self.stats.attempts += 1;

            let outcome = match sink.sink_receive(&wire, t) {
                SinkResponse::Ack { duplicate } => {
                    let rtt_ms = self.rtt.sample(&mut self.rng);
                    let latency_ms = t + rtt_ms - enqueued_at;
                    self.stats.record_delivery(rtt_ms, latency_ms);
                    if attempt_n == 1 {
                        self.stats.first_attempt_ok += 1;
                    }
                    self.cache.mark_head_delivered()?;
                    self.retry.on_success();
                    self.head_attempted = false;
                    self.next_attempt_at = t;
                    Outcome::Delivered {
                        rtt_ms,
                        latency_ms,
                        duplicate,
                    }
                }
                SinkResponse::Refused => {
                    self.stats.failed_attempts += 1;
                    let retry_in_ms = self.retry.on_failure();
                    self.next_attempt_at = t + retry_in_ms;
                    Outcome::Refused { retry_in_ms }
                }
                SinkResponse::Nack(_) => {
                    self.stats.rejected += 1;
                    if let Some(entry) = self.cache.mark_head_delivered()? {
                        self.dead_letters.push(entry.record);
                    }
                    self.retry.on_success();
                    self.head_attempted = false;
                    self.next_attempt_at = t;
                    Outcome::Rejected
                }
            };
            events.push(DeliveryEvent {
                device_id,
                seq,
                t_ms: t,
                attempt_n,
                outcome,
            });
        }
        Ok(events)
    }

    /// Flushes until the cache is empty. Terminates because outage windows
    /// are finite.
    pub fn drain(&mut self, sink: &MockSink) -> Result<Vec<DeliveryEvent>> {
        self.flush(u64::MAX, sink)
    }
}
