//! L1/L2 membership and the hit policy that assembles model context.
//!
//! At step `t` inside phase `p` the working set (L1) is the bootstrap prefix,
//! every plan proposal so far, and the raw events of the active phase. Each
//! completed phase is represented by its knowledge unit (L2), rendered at the
//! first index after the plan that opened the phase. Everything else in a
//! completed phase is skipped.
//!
//! The `*_as_of` variants rebuild the state that held at an earlier step from
//! the final archive: only boundaries reached by `t`, only units of phases
//! closed by `t`, and only evictions inside those phases.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{EventLog, PhaseLedger};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HierarchyError {
    #[error("knowledge unit for phase {phase} is out of order (expected phase {expected})")]
    OutOfOrder { phase: usize, expected: usize },
    #[error("knowledge unit for phase {0} already exists")]
    AlreadyPromoted(usize),
    #[error("knowledge unit for phase {phase} overlaps the previous unit")]
    Overlap { phase: usize },
    #[error("knowledge unit text is empty")]
    EmptySummary,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct L1View {
    pub bootstrap: BTreeSet<usize>,
    pub plans: BTreeSet<usize>,
    pub active: BTreeSet<usize>,
}

impl L1View {
    pub fn contains(&self, k: usize) -> bool {
        self.bootstrap.contains(&k) || self.plans.contains(&k) || self.active.contains(&k)
    }

    pub fn len(&self) -> usize {
        self.bootstrap.len() + self.plans.len() + self.active.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> BTreeSet<usize> {
        self.bootstrap
            .iter()
            .chain(&self.plans)
            .chain(&self.active)
            .copied()
            .collect()
    }
}

/// Compact summary of one completed phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct KnowledgeUnit {
    pub phase: usize,
    /// Inclusive index range between the phase's two boundaries.
    pub covered_range: (usize, usize),
    pub text: String,
    pub token_estimate: usize,
}

impl KnowledgeUnit {
    pub fn covers(&self, k: usize) -> bool {
        self.covered_range.0 <= k && k <= self.covered_range.1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct L2Store {
    units: Vec<KnowledgeUnit>,
}

impl L2Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn units(&self) -> &[KnowledgeUnit] {
        &self.units
    }

    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    pub fn get(&self, phase: usize) -> Option<&KnowledgeUnit> {
        self.units.iter().find(|u| u.phase == phase)
    }

    pub fn contains_phase(&self, phase: usize) -> bool {
        self.get(phase).is_some()
    }

    /// Unit anchored at index `k`, i.e. the unit whose range starts there.
    pub fn anchored_at(&self, k: usize) -> Option<&KnowledgeUnit> {
        self.units.iter().find(|u| u.covered_range.0 == k)
    }

    pub fn push(&mut self, unit: KnowledgeUnit) -> Result<(), HierarchyError> {
        if self.contains_phase(unit.phase) {
            return Err(HierarchyError::AlreadyPromoted(unit.phase));
        }
        let expected = self.units.len() + 1;
        if unit.phase != expected {
            return Err(HierarchyError::OutOfOrder {
                phase: unit.phase,
                expected,
            });
        }
        if unit.text.trim().is_empty() {
            return Err(HierarchyError::EmptySummary);
        }
        if let Some(last) = self.units.last() {
            if unit.covered_range.0 <= last.covered_range.1 {
                return Err(HierarchyError::Overlap { phase: unit.phase });
            }
        }
        self.units.push(unit);
        Ok(())
    }

    pub(crate) fn pop_last(&mut self) -> Option<KnowledgeUnit> {
        self.units.pop()
    }

    /// Units of the phases closed by step `t`.
    pub fn as_of(&self, ledger: &PhaseLedger, t: usize) -> L2Store {
        let closed = ledger.as_of(t).completed_phases();
        L2Store {
            units: self.units.iter().filter(|u| u.phase <= closed).cloned().collect(),
        }
    }
}

/// Outcome of the hit policy for one index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hit<'a> {
    Raw(usize),
    Summary(&'a KnowledgeUnit),
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentSource {
    RawEvent(usize),
    Summary(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment<'a> {
    pub source: SegmentSource,
    /// `Environment`/`Agent` for raw events.
    pub label: String,
    pub text: &'a str,
    pub tokens: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextView<'a> {
    pub segments: Vec<Segment<'a>>,
    pub total_tokens: usize,
}

impl ContextView<'_> {
    /// Raw events as `[{origin}] {payload}`, summaries as
    /// `[PHASE {p} SUMMARY] {text}`, separated by blank lines.
    pub fn render(&self) -> String {
        render_segments(self.segments.iter())
    }
}

pub fn render_segments<'s, 'a: 's>(segments: impl Iterator<Item = &'s Segment<'a>>) -> String {
    let mut out = String::new();
    for (n, segment) in segments.enumerate() {
        if n > 0 {
            out.push_str("\n\n");
        }
        let _ = match segment.source {
            SegmentSource::RawEvent(_) => write!(out, "[{}] {}", segment.label, segment.text),
            SegmentSource::Summary(p) => write!(out, "[PHASE {p} SUMMARY] {}", segment.text),
        };
    }
    out
}

fn l1_from(
    log_len: usize,
    boundaries: &[usize],
    t: usize,
    is_evicted: impl Fn(usize) -> bool,
) -> L1View {
    let upto = t.min(log_len.saturating_sub(1));
    let mut view = L1View::default();
    if log_len == 0 {
        return view;
    }
    let t0 = match boundaries.first() {
        Some(&t0) if t >= t0 => t0,
        _ => {
            view.bootstrap = (0..=upto).collect();
            return view;
        }
    };
    view.bootstrap = (0..t0.min(log_len)).collect();
    let reached: Vec<usize> = boundaries.iter().copied().filter(|&b| b <= t).collect();
    view.plans = reached.iter().copied().filter(|&b| b < log_len).collect();
    let open = *reached.last().expect("t >= t0");
    if open < upto {
        view.active = (open + 1..=upto).filter(|&k| !is_evicted(k)).collect();
    }
    view
}

/// The working set at step `t`, honoring the log's current eviction markers.
pub fn l1_view(log: &EventLog, ledger: &PhaseLedger, t: usize) -> L1View {
    l1_from(log.len(), ledger.boundaries(), t, |k| log.is_evicted(k))
}

/// [`l1_view`] as it stood at step `t`, reconstructed from the archive.
pub fn l1_view_as_of(log: &EventLog, ledger: &PhaseLedger, t: usize) -> L1View {
    let closed = closed_spans(ledger, t);
    l1_from(log.len(), ledger.boundaries(), t, |k| {
        log.is_evicted(k) && closed.iter().any(|&(a, b)| a <= k && k < b)
    })
}

fn closed_spans(ledger: &PhaseLedger, t: usize) -> Vec<(usize, usize)> {
    let reached = ledger.as_of(t);
    (1..=reached.completed_phases())
        .filter_map(|p| reached.phase_span(p))
        .collect()
}

/// Hit policy for index `k < t`.
pub fn hit<'a>(k: usize, _t: usize, l1: &L1View, l2: &'a L2Store) -> Hit<'a> {
    if l1.contains(k) {
        return Hit::Raw(k);
    }
    match l2.anchored_at(k) {
        Some(unit) => Hit::Summary(unit),
        None => Hit::Skip,
    }
}

fn assemble<'a>(
    log: &'a EventLog,
    l1: &L1View,
    l2: &'a L2Store,
    max_phase: usize,
    t: usize,
) -> ContextView<'a> {
    let mut view = ContextView::default();
    for k in 0..t.min(log.len()) {
        let segment = match hit(k, t, l1, l2) {
            Hit::Raw(k) => {
                let e = &log.events()[k];
                Segment {
                    source: SegmentSource::RawEvent(k),
                    label: e.origin.to_string(),
                    text: e.payload.as_str(),
                    tokens: e.token_estimate,
                }
            }
            Hit::Summary(unit) if unit.phase <= max_phase => Segment {
                source: SegmentSource::Summary(unit.phase),
                label: String::new(),
                text: unit.text.as_str(),
                tokens: unit.token_estimate,
            },
            Hit::Summary(_) | Hit::Skip => continue,
        };
        view.total_tokens += segment.tokens;
        view.segments.push(segment);
    }
    view
}

/// Context for producing event `t`: the hit policy over indices `0..t`.
pub fn build_context<'a>(
    log: &'a EventLog,
    ledger: &PhaseLedger,
    l2: &'a L2Store,
    t: usize,
) -> ContextView<'a> {
    let l1 = l1_view(log, ledger, t);
    assemble(log, &l1, l2, usize::MAX, t)
}

/// [`build_context`] as it stood at step `t`, from the final archive.
pub fn build_context_as_of<'a>(
    log: &'a EventLog,
    ledger: &PhaseLedger,
    l2: &'a L2Store,
    t: usize,
) -> ContextView<'a> {
    let l1 = l1_view_as_of(log, ledger, t);
    let closed = ledger.as_of(t).completed_phases();
    assemble(log, &l1, l2, closed, t)
}
