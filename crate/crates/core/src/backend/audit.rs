//! Append-only per-attempt audit transcript.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatResponse, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    TransportError,
    Invalid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttemptMeta {
    pub stage: Stage,
    pub fingerprint: String,
    pub attempt: u32,
    pub outcome: AttemptOutcome,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub stage: Stage,
    pub fingerprint: String,
    pub attempt: u32,
    pub outcome: AttemptOutcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub response_chars: Option<usize>,
}

#[derive(Default)]
pub enum AuditSink {
    #[default]
    Disabled,
    Memory(Mutex<Vec<AuditRecord>>),
    Writer(Mutex<Box<dyn Write + Send>>),
}

impl std::fmt::Debug for AuditSink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AuditSink::Disabled => f.write_str("AuditSink::Disabled"),
            AuditSink::Memory(_) => f.write_str("AuditSink::Memory"),
            AuditSink::Writer(_) => f.write_str("AuditSink::Writer"),
        }
    }
}

impl AuditSink {
    pub fn memory() -> Self {
        AuditSink::Memory(Mutex::new(Vec::new()))
    }

    pub fn append_to_file(path: &Path) -> std::io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditSink::Writer(Mutex::new(Box::new(file))))
    }

    pub fn writer(w: impl Write + Send + 'static) -> Self {
        AuditSink::Writer(Mutex::new(Box::new(w)))
    }

    /// Appends one line for an attempt. Write failures are logged, not
    /// propagated.
    pub fn record(&self, meta: &AttemptMeta, response: Option<&ChatResponse>) {
        let rec = AuditRecord {
            stage: meta.stage,
            fingerprint: meta.fingerprint.clone(),
            attempt: meta.attempt,
            outcome: meta.outcome,
            detail: meta.detail.clone(),
            response_chars: response.map(|r| r.text.chars().count()),
        };
        match self {
            AuditSink::Disabled => {}
            AuditSink::Memory(v) => v.lock().unwrap().push(rec),
            AuditSink::Writer(w) => {
                let line = match serde_json::to_string(&rec) {
                    Ok(l) => l,
                    Err(e) => {
                        tracing::warn!("cannot serialize audit record: {e}");
                        return;
                    }
                };
                let mut w = w.lock().unwrap();
                if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                    tracing::warn!("audit sink write failed: {e}");
                }
            }
        }
    }

    /// Records captured by a memory sink; empty for other variants.
    pub fn records(&self) -> Vec<AuditRecord> {
        match self {
            AuditSink::Memory(v) => v.lock().unwrap().clone(),
            _ => Vec::new(),
        }
    }
}
