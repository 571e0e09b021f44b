//! Context-length trace: full-history size against cached-context size at
//! every step where the agent acted.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{EventKind, EventLog, LogError, Origin, PhaseLedger, Sidecar};
use crate::hierarchy::{build_context_as_of, L2Store};
use crate::migration::PromotionRecord;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SIDECAR_FILE: &str = "sidecar.json";
pub const PROMOTIONS_FILE: &str = "promotions.jsonl";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("corrupt run directory {path}: {reason}")]
    CorruptRun { path: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn corrupt(path: &Path, reason: impl ToString) -> TraceError {
    TraceError::CorruptRun {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub phase: usize,
    pub kind: EventKind,
    pub naive_tokens: usize,
    pub hcc_tokens: usize,
}

/// One row per agent event `t`: tokens of `e_0..e_{t-1}` in full, and of the
/// context the hierarchy produced for that step.
pub fn compute_trace(log: &EventLog, ledger: &PhaseLedger, l2: &L2Store) -> Vec<TraceRow> {
    let mut naive = 0;
    let mut rows = Vec::new();
    for e in log.events() {
        if e.origin == Origin::Agent {
            rows.push(TraceRow {
                step: e.index,
                phase: ledger.phase_at(e.index),
                kind: e.kind,
                naive_tokens: naive,
                hcc_tokens: build_context_as_of(log, ledger, l2, e.index).total_tokens,
            });
        }
        naive += e.token_estimate;
    }
    rows
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>, TraceError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TraceSummary {
    pub rows: usize,
    pub naive_peak: usize,
    pub hcc_peak: usize,
}

impl TraceSummary {
    pub fn of(rows: &[TraceRow]) -> Self {
        Self {
            rows: rows.len(),
            naive_peak: rows.iter().map(|r| r.naive_tokens).max().unwrap_or(0),
            hcc_peak: rows.iter().map(|r| r.hcc_tokens).max().unwrap_or(0),
        }
    }

    /// `hcc_peak / naive_peak`, or 1 for an empty trace.
    pub fn peak_ratio(&self) -> f64 {
        if self.naive_peak == 0 {
            1.0
        } else {
            self.hcc_peak as f64 / self.naive_peak as f64
        }
    }
}

/// Log, ledger and L2 as archived in a run directory.
#[derive(Debug, Clone)]
pub struct RunArchive {
    pub log: EventLog,
    pub ledger: PhaseLedger,
    pub l2: L2Store,
    pub promotions: Vec<PromotionRecord>,
}

pub fn load_archive(run_dir: &Path) -> Result<RunArchive, TraceError> {
    let events = run_dir.join(EVENTS_FILE);
    let mut log = EventLog::read_jsonl(&events).map_err(|e| corrupt(&events, e))?;
    let sidecar_path = run_dir.join(SIDECAR_FILE);
    let sidecar = match Sidecar::load(&sidecar_path) {
        Ok(s) => s,
        // A run interrupted before its first sidecar write has no markers.
        Err(LogError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => Sidecar::default(),
        Err(e) => return Err(corrupt(&sidecar_path, e)),
    };
    let ledger = sidecar.restore(&mut log).map_err(|e| corrupt(&sidecar_path, e))?;
    let promotions_path = run_dir.join(PROMOTIONS_FILE);
    let text = fs::read_to_string(&promotions_path).unwrap_or_default();
    let mut l2 = L2Store::new();
    let mut promotions = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let record: PromotionRecord = serde_json::from_str(line)
            .map_err(|e| corrupt(&promotions_path, format!("line {}: {e}", n + 1)))?;
        l2.push(record.knowledge_unit.clone())
            .map_err(|e| corrupt(&promotions_path, e))?;
        promotions.push(record);
    }
    Ok(RunArchive {
        log,
        ledger,
        l2,
        promotions,
    })
}
