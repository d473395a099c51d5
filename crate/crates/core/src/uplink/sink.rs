//! In-process stand-in for the cloud database: validates, deduplicates by
//! `(device_id, seq)` and refuses everything inside outage windows.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::Serialize;

use super::OutageSchedule;
use crate::gateway::TelemetryRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SinkResponse {
    /// Stored, or already stored (`duplicate`).
    Ack { duplicate: bool },
    /// Connection refused; nothing changed.
    Refused,
    /// Malformed record.
    Nack(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SinkStats {
    pub received: u64,
    pub stored: u64,
    pub duplicates: u64,
    pub refused: u64,
    pub rejected: u64,
}

#[derive(Debug, Default)]
struct SinkState {
    store: BTreeMap<(String, u64), String>,
    stats: SinkStats,
}

/// Safe to share between threads; every receive is atomic.
#[derive(Debug, Default)]
pub struct MockSink {
    outages: OutageSchedule,
    state: Mutex<SinkState>,
}

impl MockSink {
    pub fn new(outages: OutageSchedule) -> Self {
        MockSink {
            outages,
            state: Mutex::default(),
        }
    }

    pub fn outages(&self) -> &OutageSchedule {
        &self.outages
    }

    pub fn is_down(&self, now_ms: u64) -> bool {
        self.outages.is_down(now_ms)
    }

    pub fn sink_receive(&self, wire: &str, now_ms: u64) -> SinkResponse {
        let mut state = self.state.lock().expect("sink lock poisoned");
        if self.outages.is_down(now_ms) {
            state.stats.refused += 1;
            return SinkResponse::Refused;
        }
        state.stats.received += 1;
        let record = match TelemetryRecord::from_json_line(wire.trim_end_matches('\n')) {
            Ok(r) => r,
            Err(e) => {
                state.stats.rejected += 1;
                return SinkResponse::Nack(e.to_string());
            }
        };
        let key = (record.device_id.clone(), record.seq);
        if state.store.contains_key(&key) {
            state.stats.duplicates += 1;
            return SinkResponse::Ack { duplicate: true };
        }
        state.store.insert(key, record.to_json_line());
        state.stats.stored += 1;
        SinkResponse::Ack { duplicate: false }
    }

    pub fn stats(&self) -> SinkStats {
        self.state.lock().expect("sink lock poisoned").stats
    }

    pub fn stored_count(&self) -> usize {
        self.state.lock().expect("sink lock poisoned").store.len()
    }

    /// Stored records as NDJSON, sorted by `(device_id, seq)`.
    pub fn dump(&self) -> String {
        let state = self.state.lock().expect("sink lock poisoned");
        let mut out = String::new();
        for line in state.store.values() {
            out.push_str(line);
            out.push('\n');
        }
        out
    }

    pub fn records(&self) -> Vec<TelemetryRecord> {
        let state = self.state.lock().expect("sink lock poisoned");
        state
            .store
            .values()
            .map(|l| TelemetryRecord::from_json_line(l).expect("stored lines were validated"))
            .collect()
    }

    /// Stored seqs for one device, ascending.
    pub fn seqs(&self, device_id: &str) -> Vec<u64> {
        let state = self.state.lock().expect("sink lock poisoned");
        state
            .store
            .keys()
            .filter(|(d, _)| d == device_id)
            .map(|&(_, s)| s)
            .collect()
    }
}

/// Missing seqs between the first and last stored value.
pub fn seq_gaps(seqs: &[u64]) -> Vec<u64> {
    let mut gaps = Vec::new();
    for w in seqs.windows(2) {
        gaps.extend(w[0] + 1..w[1]);
    }
    gaps
}
