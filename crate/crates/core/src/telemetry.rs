//! Append-only critical-prompt-event log with query support.
//!
//! One JSON object per line, UTF-8, keys exactly as the field names of
//! [`CpeEvent`]. Telemetry loss never blocks an answer: lossy appends count
//! drops instead of failing the turn.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CpeTag, PipelineVariant};

const EXCERPT_MAX_CHARS: usize = 120;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("event with tag {tag} requires field `{field}`")]
    MissingField { tag: CpeTag, field: &'static str },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One audit-log record of a critical prompt event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpeEvent {
    /// UTC milliseconds, or a logical counter in deterministic mode.
    pub timestamp: u64,
    pub session_id: String,
    pub turn_index: usize,
    pub tag: CpeTag,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rule_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sim: Option<f64>,
    pub variant: PipelineVariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub excerpt: Option<String>,
}

impl CpeEvent {
    /// Validated construction: injection events must name their rule, and
    /// low-relevance events must carry the similarity they measured.
    /// Excerpts truncate to 120 characters.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        timestamp: u64,
        session_id: impl Into<String>,
        turn_index: usize,
        tag: CpeTag,
        rule_id: Option<String>,
        max_sim: Option<f64>,
        variant: PipelineVariant,
        excerpt: Option<String>,
    ) -> Result<CpeEvent, TelemetryError> {
        if tag == CpeTag::CpeInjRegex && rule_id.is_none() {
            return Err(TelemetryError::MissingField { tag, field: "rule_id" });
        }
        if tag == CpeTag::CpeLowRel && max_sim.is_none() {
            return Err(TelemetryError::MissingField { tag, field: "max_sim" });
        }
        Ok(CpeEvent {
            timestamp,
            session_id: session_id.into(),
            turn_index,
            tag,
            rule_id,
            max_sim,
            variant,
            excerpt: excerpt.map(|e| truncate_chars(&e, EXCERPT_MAX_CHARS)),
        })
    }
}

fn truncate_chars(s: &str, max: usize) -> String {
    s.chars().take(max).collect()
}

/// Query filter; unset fields match everything.
#[derive(Debug, Clone, Default)]
pub struct CpeFilter {
    pub session_id: Option<String>,
    pub tag: Option<CpeTag>,
    pub variant: Option<PipelineVariant>,
}

impl CpeFilter {
    pub fn matches(&self, event: &CpeEvent) -> bool {
        self.session_id.as_ref().is_none_or(|s| *s == event.session_id)
            && self.tag.is_none_or(|t| t == event.tag)
            && self.variant.is_none_or(|v| v == event.variant)
    }
}

/// Result of reading a log file back: matching events in file order plus the
/// number of corrupt lines skipped.
#[derive(Debug)]
pub struct QueryOutcome {
    pub events: Vec<CpeEvent>,
    pub corrupt_lines: usize,
}

struct Sink {
    events: Vec<CpeEvent>,
    writer: Option<BufWriter<File>>,
}

/// Single-writer append log. Events are kept in memory for in-process
/// queries and, when a file sink is attached, flushed line-by-line so a
/// crash loses at most the in-flight event.
pub struct CpeLog {
    sink: Mutex<Sink>,
    dropped: AtomicU64,
}

impl CpeLog {
    pub fn in_memory() -> CpeLog {
        CpeLog {
            sink: Mutex::new(Sink {
                events: Vec::new(),
                writer: None,
            }),
            dropped: AtomicU64::new(0),
        }
    }

    /// Open (creating or appending) a log file sink.
    pub fn with_file(path: &Path) -> Result<CpeLog, TelemetryError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(CpeLog {
            sink: Mutex::new(Sink {
                events: Vec::new(),
                writer: Some(BufWriter::new(file)),
            }),
            dropped: AtomicU64::new(0),
        })
    }

    pub fn append(&self, event: CpeEvent) -> Result<(), TelemetryError> {
        let mut sink = self.sink.lock().unwrap();
        if let Some(writer) = sink.writer.as_mut() {
            let line = serde_json::to_string(&event).expect("events always serialize");
            writeln!(writer, "{line}")?;
            writer.flush()?;
        }
        sink.events.push(event);
        Ok(())
    }

    /// Append, counting (instead of surfacing) sink failures so telemetry
    /// loss never blocks an answer.
    pub fn append_lossy(&self, event: CpeEvent) {
        if self.append(event).is_err() {
            self.dropped.fetch_add(1, Ordering::SeqCst);
        }
    }

    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::SeqCst)
    }

    /// All in-memory events matching the filter, in append order.
    pub fn query(&self, filter: &CpeFilter) -> Vec<CpeEvent> {
        self.sink
            .lock()
            .unwrap()
            .events
            .iter()
            .filter(|e| filter.matches(e))
            .cloned()
            .collect()
    }

    pub fn events(&self) -> Vec<CpeEvent> {
        self.query(&CpeFilter::default())
    }
}

/// Read a log file back. Corrupt lines are skipped and counted, never fatal.
pub fn read_log(path: &Path, filter: &CpeFilter) -> Result<QueryOutcome, TelemetryError> {
    let file = File::open(path)?;
    let mut events = Vec::new();
    let mut corrupt_lines = 0;
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CpeEvent>(&line) {
            Ok(event) if filter.matches(&event) => events.push(event),
            Ok(_) => {}
            Err(_) => corrupt_lines += 1,
        }
    }
    Ok(QueryOutcome {
        events,
        corrupt_lines,
    })
}
