//! Durable store-and-forward cache.
//!
//! Two files in the cache directory:
//!
//! * `cache.ndjson`: append-only log, one record JSON object per line.
//! * `cache.wm`: the delivered watermark, i.e. how many leading log lines
//!   have been acknowledged. Fixed width, rewritten in place.
//!
//! Delivery is strictly in log order, so everything past the watermark is
//! pending. Reopening the directory after a crash restores exactly that set.

use std::collections::{HashMap, VecDeque};
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::gateway::TelemetryRecord;

pub const LOG_FILE: &str = "cache.ndjson";
pub const WATERMARK_FILE: &str = "cache.wm";

/// Delivered log lines before the log is truncated once the queue is empty.
const DEFAULT_COMPACT_AFTER: u64 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub record: TelemetryRecord,
    pub enqueued_at: u64,
    pub delivered: bool,
}

#[derive(Debug)]
pub struct Cache {
    dir: PathBuf,
    log: File,
    watermark: File,
    pending: VecDeque<CacheEntry>,
    /// Lines currently in the log file.
    log_lines: u64,
    /// Leading log lines already delivered.
    delivered_lines: u64,
    log_bytes: u64,
    last_seq: HashMap<String, u64>,
    capacity_bytes: Option<u64>,
    compact_after: u64,
    total_enqueued: u64,
}

impl Cache {
    /// Opens or creates the cache in `dir`, reloading any pending records.
    ///
    /// Reloaded entries get their record timestamp as enqueue time.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let log_path = dir.join(LOG_FILE);
        let wm_path = dir.join(WATERMARK_FILE);

        let mut text = String::new();
        if log_path.exists() {
            File::open(&log_path)?.read_to_string(&mut text)?;
        }
        let mut delivered_lines = match fs::read_to_string(&wm_path) {
            Ok(s) => s
                .trim()
                .parse::<u64>()
                .map_err(|_| Error::CacheCorrupt(format!("bad watermark {s:?}")))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };

        let mut records = Vec::new();
        let mut valid_bytes = 0u64;
        for chunk in text.split_inclusive('\n') {
            // an unterminated tail is a torn write whose enqueue never completed
            let Some(line) = chunk.strip_suffix('\n') else {
                break;
            };
            let rec = TelemetryRecord::from_json_line(line)
                .map_err(|e| Error::CacheCorrupt(format!("line {}: {e}", records.len() + 1)))?;
            records.push(rec);
            valid_bytes += chunk.len() as u64;
        }

        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if valid_bytes < text.len() as u64 {
            log.set_len(valid_bytes)?;
        }
        let watermark = OpenOptions::new()
            .create(true)
            .truncate(false)
            .read(true)
            .write(true)
            .open(&wm_path)?;

        let log_lines = records.len() as u64;
        delivered_lines = delivered_lines.min(log_lines);
        let mut last_seq = HashMap::new();
        for rec in &records {
            let e = last_seq.entry(rec.device_id.clone()).or_insert(rec.seq);
            *e = (*e).max(rec.seq);
        }
        let pending = records
            .into_iter()
            .skip(delivered_lines as usize)
            .map(|record| CacheEntry {
                enqueued_at: record.ts_ms,
                record,
                delivered: false,
            })
            .collect();

        let mut cache = Cache {
            dir,
            log,
            watermark,
            pending,
            log_lines,
            delivered_lines,
            log_bytes: valid_bytes,
            last_seq,
            capacity_bytes: None,
            compact_after: DEFAULT_COMPACT_AFTER,
            total_enqueued: 0,
        };
        cache.write_watermark()?;
        Ok(cache)
    }

    /// Simulated disk size; appends beyond it fail with `cache-full`.
    pub fn with_capacity_bytes(mut self, bytes: u64) -> Self {
        self.capacity_bytes = Some(bytes);
        self
    }

    pub fn with_compact_after(mut self, lines: u64) -> Self {
        self.compact_after = lines.max(1);
        self
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Appends `record` to the log before it is ever offered to the sink.
    pub fn enqueue(&mut self, record: TelemetryRecord, now_ms: u64) -> Result<()> {
        if let Some(&last) = self.last_seq.get(&record.device_id) {
            if record.seq <= last {
                return Err(Error::DupSeq {
                    device_id: record.device_id,
                    seq: record.seq,
                });
            }
        }
        let mut line = record.to_json_line();
        line.push('\n');
        if let Some(cap) = self.capacity_bytes {
            if self.log_bytes + line.len() as u64 > cap {
                return Err(Error::CacheFull);
            }
        }
        self.log.write_all(line.as_bytes())?;
        self.log.flush()?;
        self.log_bytes += line.len() as u64;
        self.log_lines += 1;
        self.total_enqueued += 1;
        self.last_seq.insert(record.device_id.clone(), record.seq);
        self.pending.push_back(CacheEntry {
            record,
            enqueued_at: now_ms,
            delivered: false,
        });
        Ok(())
    }

    pub fn head(&self) -> Option<&CacheEntry> {
        self.pending.front()
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn pending(&self) -> impl Iterator<Item = &CacheEntry> {
        self.pending.iter()
    }

    /// Records enqueued through this handle (not counting reloaded ones).
    pub fn total_enqueued(&self) -> u64 {
        self.total_enqueued
    }

    /// Acknowledges the head entry and advances the watermark.
    pub fn mark_head_delivered(&mut self) -> Result<Option<CacheEntry>> {
        let Some(mut entry) = self.pending.pop_front() else {
            return Ok(None);
        };
        entry.delivered = true;
        self.delivered_lines += 1;
        self.write_watermark()?;
        if self.pending.is_empty() && self.delivered_lines >= self.compact_after {
            self.compact()?;
        }
        Ok(Some(entry))
    }

    /// Drops delivered lines. Only valid when nothing is pending.
    ///
    /// The watermark goes to zero before the log is truncated: a crash in
    /// between redelivers old lines (deduplicated downstream) instead of
    /// skipping new ones.
    fn compact(&mut self) -> Result<()> {
        debug_assert!(self.pending.is_empty());
        self.delivered_lines = 0;
        self.write_watermark()?;
        self.log.set_len(0)?;
        self.log_lines = 0;
        self.log_bytes = 0;
        Ok(())
    }

    fn write_watermark(&mut self) -> Result<()> {
        self.watermark.seek(SeekFrom::Start(0))?;
        self.watermark
            .write_all(format!("{:020}\n", self.delivered_lines).as_bytes())?;
        self.watermark.flush()?;
        Ok(())
    }

    /// Pending records as NDJSON.
    pub fn residue(&self) -> String {
        self.pending
            .iter()
            .map(|e| e.record.to_json_line() + "\n")
            .collect()
    }
}
