//! Consolidation: task descriptors, phase summaries (P1) and task wisdom (P2).
//!
//! Phase promotion asks the model for a summary first and only evicts the
//! phase's trajectory events once that summary exists, so a failing backend
//! leaves the cache exactly as it was.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{
    EventLog, LogError, PhaseLedger, QuarterCharCounter, Solution, TokenCounter, TrajectoryId,
};
use crate::gateway::{
    render_prompt, Bindings, Completion, Embedder, GatewayError, GenerationRequest, Generator,
    PromptName, ResearchPlan,
};
use crate::hierarchy::{build_context, HierarchyError, KnowledgeUnit, L2Store};
use crate::wisdom::{OverwritePolicy, WisdomEntry, WisdomError, WisdomStore};

pub const DATA_HEADER: &str = "DATA SUMMARY:";
pub const MODEL_HEADER: &str = "MODEL SUMMARY:";
pub const DESCRIPTOR_TOKEN_LIMIT: usize = 250;
pub const NO_SOLUTION: &str = "No valid solution was produced.";

#[derive(Debug, Error)]
pub enum MigrationError {
    #[error("task description is empty")]
    EmptyDescription,
    #[error("{prompt} output still violates its format after {attempts} attempts: {reason}")]
    FormatViolation {
        prompt: PromptName,
        attempts: usize,
        reason: String,
    },
    #[error("phase {0} is already promoted")]
    AlreadyPromoted(usize),
    #[error("phase {phase} is not open in the ledger")]
    UnknownPhase { phase: usize },
    #[error("trajectory {0:?} lies outside its phase")]
    TrajectoryOutOfPhase(TrajectoryId),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error(transparent)]
    Wisdom(#[from] WisdomError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct MigrationConfig {
    /// Extra attempts after a format violation.
    pub format_retries: usize,
    /// Per-event cap, in estimated tokens, on payloads quoted in prompts.
    pub per_event_cap: usize,
    pub request_timeout: Duration,
    pub overwrite: OverwritePolicy,
}

impl Default for MigrationConfig {
    fn default() -> Self {
        Self {
            format_retries: 2,
            per_event_cap: 4000,
            request_timeout: Duration::from_secs(600),
            overwrite: OverwritePolicy::Replace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryOutcome {
    Improved,
    NoImprovement,
    Failed,
}

/// One suggestion's interaction span after the phase merge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Trajectory {
    pub id: TrajectoryId,
    pub start: usize,
    pub end: usize,
    pub outcome: TrajectoryOutcome,
    pub best_metric: Option<f64>,
}

impl Trajectory {
    pub fn indices(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.end
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PromotionRecord {
    pub phase: usize,
    pub evicted_indices: BTreeSet<usize>,
    pub knowledge_unit: KnowledgeUnit,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
}

/// Keeps the last `cap_tokens * 4` characters of `text`.
pub fn truncate_to_cap(text: &str, cap_tokens: usize) -> String {
    let max_chars = cap_tokens.saturating_mul(4);
    let count = text.chars().count();
    if count <= max_chars {
        return text.to_string();
    }
    let kept: String = text.chars().skip(count - max_chars).collect();
    format!("[... {} earlier characters omitted]\n{kept}", count - max_chars)
}

fn ask(
    gen: &dyn Generator,
    prompt: PromptName,
    rendered: &str,
    cfg: &MigrationConfig,
) -> Result<Completion, GatewayError> {
    let request = GenerationRequest::new(prompt, rendered).with_timeout(cfg.request_timeout);
    gen.generate(&request)
}

/// Asks up to `1 + format_retries` times until `check` accepts the output.
fn ask_until_valid<T>(
    gen: &dyn Generator,
    prompt: PromptName,
    rendered: &str,
    cfg: &MigrationConfig,
    usage: &mut (usize, usize),
    check: impl Fn(&str) -> Result<T, String>,
) -> Result<T, MigrationError> {
    let attempts = cfg.format_retries + 1;
    let mut reason = String::new();
    for _ in 0..attempts {
        let c = ask(gen, prompt, rendered, cfg)?;
        usage.0 += c.prompt_tokens;
        usage.1 += c.output_tokens;
        match check(&c.text) {
            Ok(v) => return Ok(v),
            Err(why) => {
                log::warn!("{prompt} output rejected: {why}");
                reason = why;
            }
        }
    }
    Err(MigrationError::FormatViolation {
        prompt,
        attempts,
        reason,
    })
}

fn is_list_line(line: &str) -> bool {
    let t = line.trim_start();
    if ["- ", "* ", "+ ", "• "].iter().any(|m| t.starts_with(m)) || t.starts_with('#') {
        return true;
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    digits > 0 && matches!(t[digits..].chars().next(), Some('.') | Some(')'))
}

/// Accepts a single paragraph without lists, fences or blank lines, below the
/// token limit, and returns it with line breaks folded into spaces.
pub fn validate_descriptor(text: &str) -> Result<String, String> {
    let text = text.trim();
    if text.is_empty() {
        return Err("empty descriptor".into());
    }
    if text.contains("```") {
        return Err("contains a code fence".into());
    }
    let lines: Vec<&str> = text.lines().collect();
    if lines.iter().any(|l| l.trim().is_empty()) {
        return Err("contains blank lines".into());
    }
    if lines.iter().any(|l| is_list_line(l)) {
        return Err("contains list or heading lines".into());
    }
    let joined = lines.iter().map(|l| l.trim()).collect::<Vec<_>>().join(" ");
    let tokens = QuarterCharCounter.count(&joined);
    if tokens > DESCRIPTOR_TOKEN_LIMIT {
        return Err(format!("{tokens} tokens exceeds {DESCRIPTOR_TOKEN_LIMIT}"));
    }
    Ok(joined)
}

pub fn generate_descriptor(
    task_description: &str,
    gen: &dyn Generator,
    cfg: &MigrationConfig,
) -> Result<String, MigrationError> {
    if task_description.trim().is_empty() {
        return Err(MigrationError::EmptyDescription);
    }
    let bindings = Bindings::from([("task_description", task_description.to_string())]);
    let rendered = render_prompt(PromptName::Descriptor, &bindings)?;
    let mut usage = (0, 0);
    ask_until_valid(gen, PromptName::Descriptor, &rendered, cfg, &mut usage, validate_descriptor)
}

/// Inputs of the phase summary that live outside the log.
#[derive(Debug, Clone, Copy)]
pub struct PhaseContext<'a> {
    pub task_description: &'a str,
    /// Earlier plans and their summaries.
    pub memory: &'a str,
    pub plan: &'a ResearchPlan,
}

fn render_results(log: &EventLog, trajectories: &[Trajectory], cap: usize, plan: &ResearchPlan) -> String {
    let mut out = Vec::new();
    for t in trajectories {
        let (title, suggestion) = plan
            .suggestion(t.id.direction, t.id.suggestion)
            .unwrap_or(("(unknown direction)", "(unknown suggestion)"));
        let metric = t.best_metric.map_or("none".to_string(), |m| m.to_string());
        let mut block = format!(
            "## Direction {}, suggestion {}: {title} / {suggestion}\nOutcome: {:?}, best metric: {metric}",
            t.id.direction, t.id.suggestion, t.outcome
        );
        for e in &log.events()[t.start..=t.end] {
            block.push_str(&format!("\n\n[{}] {}", e.origin, truncate_to_cap(&e.payload, cap)));
        }
        out.push(block);
    }
    out.join("\n\n")
}

/// P1: summarizes phase `phase` into a knowledge unit, then evicts every
/// trajectory event of the phase. The unit covers everything after the
/// phase's plan up to the current end of the log.
#[allow(clippy::too_many_arguments)]
pub fn promote_phase(
    phase: usize,
    ctx: PhaseContext<'_>,
    trajectories: &[Trajectory],
    log: &mut EventLog,
    ledger: &PhaseLedger,
    l2: &mut L2Store,
    gen: &dyn Generator,
    cfg: &MigrationConfig,
) -> Result<PromotionRecord, MigrationError> {
    if l2.contains_phase(phase) {
        return Err(MigrationError::AlreadyPromoted(phase));
    }
    let plan_index = ledger
        .plan_index(phase)
        .filter(|_| ledger.boundaries().len() == phase)
        .ok_or(MigrationError::UnknownPhase { phase })?;
    for t in trajectories {
        if t.start <= plan_index || t.end >= log.len() || t.start > t.end || t.id.phase != phase {
            return Err(MigrationError::TrajectoryOutOfPhase(t.id));
        }
    }
    let evicted: BTreeSet<usize> = trajectories.iter().flat_map(Trajectory::indices).collect();

    let bindings = Bindings::from([
        ("task_description", ctx.task_description.to_string()),
        ("memory", ctx.memory.to_string()),
        ("research_plan", ctx.plan.to_json()),
        ("results", render_results(log, trajectories, cfg.per_event_cap, ctx.plan)),
    ]);
    let rendered = render_prompt(PromptName::PromoteP1, &bindings)?;
    let mut usage = (0, 0);
    let text = ask_until_valid(gen, PromptName::PromoteP1, &rendered, cfg, &mut usage, |s| {
        let s = s.trim();
        if s.is_empty() {
            Err("empty summary".to_string())
        } else {
            Ok(s.to_string())
        }
    })?;

    let unit = KnowledgeUnit {
        phase,
        covered_range: (plan_index + 1, log.len().saturating_sub(1).max(plan_index + 1)),
        token_estimate: QuarterCharCounter.count(&text),
        text,
    };
    l2.push(unit.clone())?;
    if let Err(e) = log.mark_evicted(&evicted) {
        l2.pop_last();
        return Err(e.into());
    }
    Ok(PromotionRecord {
        phase,
        evicted_indices: evicted,
        knowledge_unit: unit,
        prompt_tokens: usage.0,
        output_tokens: usage.1,
    })
}

/// Splits P2 output into its data and model sections.
pub fn split_wisdom(text: &str) -> Option<(String, String)> {
    let d = text.find(DATA_HEADER)?;
    let m = text.find(MODEL_HEADER)?;
    if m < d {
        let model = text[m + MODEL_HEADER.len()..d].trim().to_string();
        let data = text[d + DATA_HEADER.len()..].trim().to_string();
        return Some((data, model));
    }
    let data = text[d + DATA_HEADER.len()..m].trim().to_string();
    let model = text[m + MODEL_HEADER.len()..].trim().to_string();
    Some((data, model))
}

fn check_wisdom(text: &str) -> Result<String, String> {
    for header in [DATA_HEADER, MODEL_HEADER] {
        if !text.contains(header) {
            return Err(format!("missing section header {header:?}"));
        }
    }
    Ok(text.trim().to_string())
}

/// Everything P2 reads about the finished task.
#[derive(Debug, Clone, Copy)]
pub struct TaskHistory<'a> {
    pub task_id: &'a str,
    pub descriptor: &'a str,
    pub log: &'a EventLog,
    pub ledger: &'a PhaseLedger,
    pub l2: &'a L2Store,
    pub solution: Option<&'a Solution>,
}

/// P2: distills the task history into wisdom and stores it under the
/// embedded descriptor. Reads the log and L2 but never changes them.
pub fn promote_task(
    history: TaskHistory<'_>,
    gen: &dyn Generator,
    embedder: &dyn Embedder,
    store: &mut WisdomStore,
    cfg: &MigrationConfig,
) -> Result<WisdomEntry, MigrationError> {
    let context = build_context(history.log, history.ledger, history.l2, history.log.len());
    let final_code = match history.solution {
        Some(s) => format!(
            "Final code (validation metric {}):\n```python\n{}\n```",
            s.validation_metric,
            s.code.trim_end()
        ),
        None => NO_SOLUTION.to_string(),
    };
    let bindings = Bindings::from([
        ("task_name", history.task_id.to_string()),
        ("task_description", history.descriptor.to_string()),
        ("trajectories", format!("{}\n\n{final_code}", context.render())),
    ]);
    let rendered = render_prompt(PromptName::PromoteP2, &bindings)?;
    let mut usage = (0, 0);
    let wisdom = ask_until_valid(gen, PromptName::PromoteP2, &rendered, cfg, &mut usage, check_wisdom)?;
    let key = crate::gateway::embed(embedder, history.descriptor)?;
    Ok(store
        .insert(history.task_id, history.descriptor, &key, &wisdom, cfg.overwrite)?
        .clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_rules() {
        assert_eq!(validate_descriptor("  A dense\nparagraph.  ").unwrap(), "A dense paragraph.");
        assert!(validate_descriptor("- task\n- metric").is_err());
        assert!(validate_descriptor("1. task").is_err());
        assert!(validate_descriptor("para\n\npara").is_err());
        assert!(validate_descriptor("```text\nx\n```").is_err());
        assert!(validate_descriptor(&"word ".repeat(201)).is_err());
        assert!(validate_descriptor("Scores use 0.5 thresholds and -1 labels.").is_ok());
    }

    #[test]
    fn wisdom_sections() {
        let (d, m) = split_wisdom("DATA SUMMARY:\nread csv\nMODEL SUMMARY:\nlightgbm").unwrap();
        assert_eq!((d.as_str(), m.as_str()), ("read csv", "lightgbm"));
        assert!(split_wisdom("DATA SUMMARY: only").is_none());
        assert!(check_wisdom("DATA SUMMARY: x").is_err());
    }

    #[test]
    fn truncation_keeps_tail() {
        assert_eq!(truncate_to_cap("abcdefgh", 2), "abcdefgh");
        let t = truncate_to_cap("abcdefghij", 2);
        assert!(t.ends_with("\ncdefghij") && t.starts_with("[... 2 earlier"));
    }
}
