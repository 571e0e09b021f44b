//! The agent loop.
//!
//! A run starts by distilling the task into a descriptor, prefetching prior
//! wisdom for it and placing everything in the first event. The bootstrap
//! then drafts and debugs until one script runs cleanly. After that each
//! phase proposes a research plan, runs one trajectory per suggestion in
//! parallel, merges the trajectory buffers in `(direction, suggestion, step)`
//! order and consolidates the phase into a knowledge unit. The run ends at
//! the step limit, the wall-clock budget, a phase cap or an abort, and then
//! always finalizes: solution extraction, task-level promotion and the
//! context trace.

use std::fs::{self, File, OpenOptions};
use std::io::{self, LineWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::{
    extract_solution, mark_phase_boundary, write_event_line, Event, EventKind, EventLog, LogError,
    MetricDirection, PendingEvent, PhaseLedger, QuarterCharCounter, Sidecar, Solution, ThreadTag,
    TokenCounter, TrajectoryId,
};
use crate::gateway::{
    extract_code_block, parse_research_plan, render_prompt, with_metric_convention, Bindings,
    GatewayError, GenerationRequest, Generator, MultipleBlocksPolicy, PromptName, ResearchPlan,
};
use crate::hierarchy::{build_context, L2Store, SegmentSource};
use crate::journal::Services;
use crate::migration::{
    generate_descriptor, promote_phase, promote_task, split_wisdom, truncate_to_cap,
    MigrationConfig, MigrationError, PhaseContext, PromotionRecord, TaskHistory, Trajectory,
    TrajectoryOutcome,
};
use crate::sandbox::{report_to_event, ExitStatus, Workspace};
use crate::trace::{
    compute_trace, write_trace_csv, TraceError, TraceSummary, EVENTS_FILE, PROMOTIONS_FILE,
    SIDECAR_FILE, TRACE_FILE,
};
use crate::wisdom::{PrefetchConfig, WisdomError, WisdomStore};

pub const RESULT_FILE: &str = "result.json";
const NO_KNOWLEDGE: &str = "No prior knowledge is available for this task.";
const NO_MEMORY: &str = "No research plans have been tried yet.";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid task directory {path}: {reason}")]
    InvalidTask { path: String, reason: String },
    #[error("no working initial code after {attempts} attempts (last run: {last})")]
    BootstrapExhausted { attempts: usize, last: String },
    #[error("no usable research plan after {attempts} attempts: {last}")]
    PlanProposalExhausted { attempts: usize, last: String },
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error(transparent)]
    Migration(#[from] MigrationError),
    #[error(transparent)]
    Wisdom(#[from] WisdomError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TaskSpec {
    pub task_id: String,
    pub task_description: String,
    pub data_dir: PathBuf,
    pub data_preview: String,
    pub user_instructions: String,
    pub metric_direction: MetricDirection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "camelCase", default)]
struct TaskToml {
    metric_direction: Option<MetricDirection>,
    user_instructions: Option<String>,
}

impl TaskSpec {
    /// Reads `description.md`, `data/`, and the optional `preview.md` and
    /// `task.toml` of a task directory. The directory name is the task id.
    pub fn from_dir(dir: &Path) -> Result<Self, OrchestratorError> {
        let invalid = |reason: String| OrchestratorError::InvalidTask {
            path: dir.display().to_string(),
            reason,
        };
        let task_description = fs::read_to_string(dir.join("description.md"))
            .map_err(|e| invalid(format!("description.md: {e}")))?;
        if task_description.trim().is_empty() {
            return Err(invalid("description.md is empty".into()));
        }
        let data_dir = dir.join("data");
        if !data_dir.is_dir() {
            return Err(invalid("data/ is missing".into()));
        }
        let data_preview = fs::read_to_string(dir.join("preview.md")).unwrap_or_default();
        let extra: TaskToml = match fs::read_to_string(dir.join("task.toml")) {
            Ok(text) => toml::from_str(&text).map_err(|e| invalid(format!("task.toml: {e}")))?,
            Err(_) => TaskToml::default(),
        };
        let task_id = dir
            .canonicalize()
            .unwrap_or_else(|_| dir.to_path_buf())
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| invalid("cannot derive a task id".into()))?;
        Ok(Self {
            task_id,
            task_description,
            data_dir,
            data_preview,
            user_instructions: extra.user_instructions.unwrap_or_default(),
            metric_direction: extra.metric_direction.unwrap_or_default(),
        })
    }

    /// Description plus user instructions, as shown to the model.
    pub fn full_description(&self) -> String {
        if self.user_instructions.trim().is_empty() {
            self.task_description.trim_end().to_string()
        } else {
            format!(
                "{}\n\nUser instructions:\n{}",
                self.task_description.trim_end(),
                self.user_instructions.trim()
            )
        }
    }

    fn preview(&self) -> String {
        if self.data_preview.trim().is_empty() {
            "No data preview is available.".to_string()
        } else {
            self.data_preview.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct RunConfig {
    /// Upper bound on the number of events in the log.
    pub step_limit: usize,
    pub wall_clock_budget_sec: Option<f64>,
    pub max_debug_retries: usize,
    pub max_plan_retries: usize,
    pub delta: f64,
    pub max_prefetch: usize,
    pub worker_limit: usize,
    /// Cap, in estimated tokens, on any single payload quoted in a prompt.
    pub per_event_truncation_cap: usize,
    pub format_retries: usize,
    pub max_phases: Option<usize>,
    pub request_timeout_sec: f64,
    pub multiple_blocks: MultipleBlocksPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            step_limit: 500,
            wall_clock_budget_sec: None,
            max_debug_retries: 3,
            max_plan_retries: 3,
            delta: 0.60,
            max_prefetch: 3,
            worker_limit: 4,
            per_event_truncation_cap: 4000,
            format_retries: 2,
            max_phases: None,
            request_timeout_sec: 600.0,
            multiple_blocks: MultipleBlocksPolicy::FirstWins,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |why: &str| Err(OrchestratorError::InvalidConfig(why.to_string()));
        if !(0.0..1.0).contains(&self.delta) {
            return bad("delta must lie in [0, 1)");
        }
        if self.max_prefetch == 0 || self.worker_limit == 0 || self.per_event_truncation_cap == 0 {
            return bad("maxPrefetch, workerLimit and perEventTruncationCap must be positive");
        }
        if self.request_timeout_sec <= 0.0 || self.wall_clock_budget_sec.is_some_and(|b| b < 0.0) {
            return bad("time limits must be positive");
        }
        Ok(())
    }

    pub fn prefetch(&self) -> PrefetchConfig {
        PrefetchConfig {
            delta: self.delta,
            max_prefetch: self.max_prefetch,
        }
    }

    pub fn migration(&self) -> MigrationConfig {
        MigrationConfig {
            format_retries: self.format_retries,
            per_event_cap: self.per_event_truncation_cap,
            request_timeout: self.request_timeout(),
            ..MigrationConfig::default()
        }
    }

    fn request_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.request_timeout_sec)
    }

    /// Events one trajectory may need: sketch plus code/output pairs.
    pub fn trajectory_worst_case(&self) -> usize {
        1 + 2 * (1 + self.max_debug_retries)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunResult {
    pub task_id: String,
    pub descriptor: String,
    pub solution: Option<Solution>,
    pub phases_completed: usize,
    pub peak_context_tokens: usize,
    pub naive_peak_tokens: usize,
    pub event_count: usize,
    pub trace_path: Option<PathBuf>,
    pub wisdom_inserted: bool,
    /// Why the run stopped early, if it did.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhaseStatus {
    Completed,
    /// The budget ran out before every suggestion could run.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PhaseReport {
    pub phase: usize,
    pub trajectories: Vec<Trajectory>,
    pub status: PhaseStatus,
    pub promotion: PromotionRecord,
}

/// Incremental writer for the run directory.
struct RunSink {
    dir: PathBuf,
    events: LineWriter<File>,
}

impl RunSink {
    fn create(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        for stale in [PROMOTIONS_FILE, SIDECAR_FILE, TRACE_FILE, RESULT_FILE] {
            match fs::remove_file(dir.join(stale)) {
                Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
                _ => {}
            }
        }
        let events = File::create(dir.join(EVENTS_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            events: LineWriter::new(events),
        })
    }

    fn event(&mut self, event: &Event) -> io::Result<()> {
        write_event_line(&mut self.events, event)
    }

    fn promotion(&self, record: &PromotionRecord) -> io::Result<()> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(PROMOTIONS_FILE))?;
        let line = serde_json::to_string(record).map_err(io::Error::other)?;
        io::Write::write_all(&mut f, format!("{line}\n").as_bytes())
    }

    fn sidecar(&self, log: &EventLog, ledger: &PhaseLedger) -> Result<(), LogError> {
        Sidecar::capture(log, ledger).save(&self.dir.join(SIDECAR_FILE))
    }
}

/// A trajectory's buffered events before the merge.
#[derive(Debug)]
struct TrajectoryRun {
    id: TrajectoryId,
    events: Vec<PendingEvent>,
    /// Buffer position of each code patch and the script file it ran as.
    scripts: Vec<(usize, String)>,
    workspace: Option<Workspace>,
    best_metric: Option<f64>,
    outcome: TrajectoryOutcome,
    interrupted: bool,
}

/// Read-only inputs shared by the trajectories of a phase.
struct PhaseShared<'a> {
    phase: usize,
    plan: &'a ResearchPlan,
    task: &'a TaskSpec,
    cfg: &'a RunConfig,
    services: &'a Services,
    counter: &'a dyn TokenCounter,
    memory_solution: String,
    baseline: Option<f64>,
}

/// Output of a model call turned into a code patch and its execution.
struct Attempt {
    patch: PendingEvent,
    output: PendingEvent,
    code: String,
    valid: bool,
    metric: Option<f64>,
}

fn execute_response(
    services: &Services,
    ws: &Workspace,
    response: &str,
    script_name: &str,
    policy: MultipleBlocksPolicy,
) -> (PendingEvent, String, bool, Option<f64>) {
    let code = match extract_code_block(response, policy) {
        Ok(code) => code.to_string(),
        Err(e) => {
            let payload = format!("EXECUTION SKIPPED: {e}; nothing was run.");
            return (
                PendingEvent::environment(EventKind::TerminalOutput, payload),
                response.to_string(),
                false,
                None,
            );
        }
    };
    match services.execute(ws, &code, script_name) {
        Ok(report) => {
            let valid = report.exit_status == ExitStatus::Success
                && report.parsed_metric.is_some()
                && report.submission_produced;
            let metric = report.parsed_metric.filter(|_| report.exit_status == ExitStatus::Success);
            (report_to_event(&report), code, valid, metric)
        }
        Err(e) => {
            log::error!("sandbox failure on {}: {e}", ws.thread);
            let payload = format!("EXECUTION FAILED (sandbox error): {e}");
            (PendingEvent::environment(EventKind::TerminalOutput, payload), code, false, None)
        }
    }
}

fn code_request(
    prompt: PromptName,
    bindings: &Bindings<'_>,
    thread: ThreadTag,
    cfg: &RunConfig,
) -> Result<GenerationRequest, GatewayError> {
    let rendered = with_metric_convention(render_prompt(prompt, bindings)?);
    Ok(GenerationRequest::new(prompt, rendered)
        .on(thread)
        .with_timeout(cfg.request_timeout()))
}

#[allow(clippy::too_many_arguments)]
fn attempt(
    services: &Services,
    counter: &dyn TokenCounter,
    cfg: &RunConfig,
    ws: &Workspace,
    prompt: PromptName,
    bindings: &Bindings<'_>,
    script_name: &str,
) -> Result<Attempt, GatewayError> {
    let thread = ws.thread;
    let request = code_request(prompt, bindings, thread, cfg)?;
    let response = services.generate(&request)?.text;
    let patch = PendingEvent::agent(EventKind::CodePatch, response.as_str())
        .on(thread)
        .at(services.now(thread))
        .counted_by(counter);
    let (output, code, valid, metric) =
        execute_response(services, ws, &response, script_name, cfg.multiple_blocks);
    let output = output.on(thread).at(services.now(thread)).counted_by(counter);
    Ok(Attempt {
        patch,
        output,
        code,
        valid,
        metric,
    })
}

fn debug_bindings<'a>(task: &TaskSpec, cfg: &RunConfig, code: &str, output: &str) -> Bindings<'a> {
    Bindings::from([
        ("task_description", task.full_description()),
        ("data_preview", task.preview()),
        ("buggy_code", truncate_to_cap(code, cfg.per_event_truncation_cap)),
        ("terminal_output", truncate_to_cap(output, cfg.per_event_truncation_cap)),
    ])
}

fn run_trajectory(shared: &PhaseShared<'_>, id: TrajectoryId) -> TrajectoryRun {
    let thread = ThreadTag::Trajectory(id);
    let services = shared.services;
    let mut run = TrajectoryRun {
        id,
        events: Vec::new(),
        scripts: Vec::new(),
        workspace: None,
        best_metric: None,
        outcome: TrajectoryOutcome::Failed,
        interrupted: false,
    };
    if services.expired(thread) {
        run.interrupted = true;
        return run;
    }
    let (title, suggestion) = shared
        .plan
        .suggestion(id.direction, id.suggestion)
        .expect("scheduled slots come from the plan");
    let ws = match services.prepare(thread) {
        Ok(ws) => ws,
        Err(e) => {
            log::error!("cannot prepare workspace for {thread}: {e}");
            return run;
        }
    };
    run.events.push(
        PendingEvent::environment(
            EventKind::ImprovementSketch,
            format!("Direction {}: {title}\nSuggestion {}: {suggestion}", id.direction, id.suggestion),
        )
        .on(thread)
        .at(services.now(thread))
        .counted_by(shared.counter),
    );
    let improve = Bindings::from([
        ("task_description", shared.task.full_description()),
        ("data_preview", shared.task.preview()),
        ("previous_memory_solution", shared.memory_solution.clone()),
        ("improve_idea", format!("{title}: {suggestion}")),
    ]);
    let mut prompt = (PromptName::Improve, improve);
    for round in 0..=shared.cfg.max_debug_retries {
        if round > 0 && services.expired(thread) {
            run.interrupted = true;
            break;
        }
        let script = format!("solution_{thread}_{}.py", run.events.len());
        let a = match attempt(services, shared.counter, shared.cfg, &ws, prompt.0, &prompt.1, &script) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("{thread}: {} request failed: {e}", prompt.0);
                break;
            }
        };
        run.scripts.push((run.events.len(), script));
        let output_text = a.output.payload.clone();
        run.events.push(a.patch);
        run.events.push(a.output);
        if a.valid {
            let m = a.metric.expect("valid runs carry a metric");
            run.best_metric = Some(m);
            break;
        }
        prompt = (
            PromptName::Debug,
            debug_bindings(shared.task, shared.cfg, &a.code, &output_text),
        );
    }
    run.outcome = match (run.best_metric, shared.baseline) {
        (None, _) => TrajectoryOutcome::Failed,
        (Some(m), Some(b)) if !shared.task.metric_direction.better(m, b) => TrajectoryOutcome::NoImprovement,
        _ => TrajectoryOutcome::Improved,
    };
    run.workspace = Some(ws);
    run
}

/// State of one task run.
pub struct Agent<'a> {
    task: &'a TaskSpec,
    cfg: &'a RunConfig,
    services: &'a Services,
    counter: &'a dyn TokenCounter,
    pub log: EventLog,
    pub ledger: PhaseLedger,
    pub l2: L2Store,
    pub promotions: Vec<PromotionRecord>,
    descriptor: String,
    /// Prefetched wisdom as `(task id, similarity, wisdom text)`.
    omega: Vec<(String, f64, String)>,
    initial_code: Option<String>,
    plans: Vec<ResearchPlan>,
    sink: Option<RunSink>,
}

impl<'a> Agent<'a> {
    pub fn new(task: &'a TaskSpec, cfg: &'a RunConfig, services: &'a Services, counter: &'a dyn TokenCounter) -> Self {
        Self {
            task,
            cfg,
            services,
            counter,
            log: EventLog::new(),
            ledger: PhaseLedger::new(),
            l2: L2Store::new(),
            promotions: Vec::new(),
            descriptor: String::new(),
            omega: Vec::new(),
            initial_code: None,
            plans: Vec::new(),
            sink: None,
        }
    }

    /// Writes events, promotions and the sidecar into `dir` as they happen.
    pub fn persist_to(&mut self, dir: &Path) -> Result<(), OrchestratorError> {
        self.sink = Some(RunSink::create(dir)?);
        Ok(())
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    /// Task ids and similarities of the prefetched wisdom.
    pub fn prefetched(&self) -> Vec<(String, f64)> {
        self.omega.iter().map(|(id, s, _)| (id.clone(), *s)).collect()
    }

    pub fn plans(&self) -> &[ResearchPlan] {
        &self.plans
    }

    fn append(&mut self, pending: PendingEvent) -> Result<usize, OrchestratorError> {
        let index = self.log.push(pending)?;
        if let Some(sink) = self.sink.as_mut() {
            sink.event(&self.log.events()[index])?;
        }
        Ok(index)
    }

    fn main_event(&self, pending: PendingEvent) -> PendingEvent {
        pending
            .on(ThreadTag::Main)
            .at(self.services.now(ThreadTag::Main))
            .counted_by(self.counter)
    }

    fn initial_payload(&self) -> String {
        let mut out = self.descriptor.clone();
        if !self.task.user_instructions.trim().is_empty() {
            out.push_str("\n\nUser instructions:\n");
            out.push_str(self.task.user_instructions.trim());
        }
        if !self.omega.is_empty() {
            out.push_str("\n\nPrior wisdom:");
            for (id, sim, wisdom) in &self.omega {
                out.push_str(&format!("\n\n[{id}, similarity {sim:.3}]\n{}", wisdom.trim()));
            }
        }
        out
    }

    fn knowledge(&self) -> (String, String) {
        let (mut data, mut model) = (Vec::new(), Vec::new());
        for (_, _, wisdom) in &self.omega {
            if let Some((d, m)) = split_wisdom(wisdom) {
                data.push(d);
                model.push(m);
            }
        }
        let join = |parts: Vec<String>| {
            if parts.is_empty() {
                NO_KNOWLEDGE.to_string()
            } else {
                parts.join("\n\n")
            }
        };
        (join(data), join(model))
    }

    /// Descriptor, prefetch and the first event, then draft and debug until
    /// a script runs cleanly. Marks `t_0` after the first valid run.
    pub fn bootstrap(&mut self, store: &WisdomStore) -> Result<usize, OrchestratorError> {
        let migration = self.cfg.migration();
        self.descriptor = match generate_descriptor(&self.task.task_description, self.services, &migration) {
            Ok(d) => d,
            Err(MigrationError::FormatViolation { reason, .. }) => {
                log::warn!("descriptor rejected ({reason}); using the raw description instead");
                truncate_to_cap(&self.task.task_description.split_whitespace().collect::<Vec<_>>().join(" "), 250)
            }
            Err(e) => return Err(e.into()),
        };
        if !store.is_empty() {
            let query = self.services.embed(&self.descriptor)?;
            self.omega = store
                .prefetch(&query, self.cfg.prefetch())?
                .into_iter()
                .map(|p| (p.entry.task_id.clone(), p.similarity, p.entry.wisdom.clone()))
                .collect();
        }
        let e0 = self.main_event(PendingEvent::environment(EventKind::TaskInit, self.initial_payload()));
        self.append(e0)?;

        let ws = self.services.prepare(ThreadTag::Main).map_err(|e| io::Error::other(e.to_string()))?;
        let (data_knowledge, model_knowledge) = self.knowledge();
        let mut prompt = (
            PromptName::Draft,
            Bindings::from([
                ("task_description", self.task.full_description()),
                ("data_preview", self.task.preview()),
                ("data_knowledge", data_knowledge),
                ("model_knowledge", model_knowledge),
            ]),
        );
        let attempts = self.cfg.max_debug_retries + 1;
        let mut last = String::from("none");
        for _ in 0..attempts {
            let script = format!("solution_{}.py", self.log.len());
            let a = attempt(self.services, self.counter, self.cfg, &ws, prompt.0, &prompt.1, &script)?;
            let patch = a.patch.at(self.services.now(ThreadTag::Main));
            self.append(patch)?;
            last = a.output.payload.lines().next().unwrap_or_default().to_string();
            let output_text = a.output.payload.clone();
            self.append(a.output)?;
            if a.valid {
                self.initial_code = Some(a.code);
                let t0 = self.log.len();
                mark_phase_boundary(&mut self.ledger, &self.log, t0)?;
                if let Some(sink) = &self.sink {
                    sink.sidecar(&self.log, &self.ledger)?;
                }
                return Ok(t0);
            }
            prompt = (PromptName::Debug, debug_bindings(self.task, self.cfg, &a.code, &output_text));
        }
        Err(OrchestratorError::BootstrapExhausted { attempts, last })
    }

    /// Plans and summaries rendered through the hit policy, leaving out the
    /// bootstrap prefix.
    fn memory_at(&self, t: usize) -> String {
        let t0 = self.ledger.t0().unwrap_or(0);
        let ctx = build_context(&self.log, &self.ledger, &self.l2, t);
        let text = crate::hierarchy::render_segments(ctx.segments.iter().filter(|s| match s.source {
            SegmentSource::RawEvent(k) => k >= t0,
            SegmentSource::Summary(_) => true,
        }));
        if text.is_empty() {
            NO_MEMORY.to_string()
        } else {
            text
        }
    }

    fn best_solution(&self) -> Option<Solution> {
        extract_solution(&self.log, self.task.metric_direction).ok()
    }

    /// Asks for a research plan and appends it at the open boundary.
    pub fn propose_plan(&mut self) -> Result<ResearchPlan, OrchestratorError> {
        let initial = self.initial_code.clone().unwrap_or_default();
        let best = self.best_solution().map_or(initial.clone(), |s| s.code);
        let bindings = Bindings::from([
            ("task_description", self.task.full_description()),
            ("data_preview", self.task.preview()),
            ("initial_code", initial),
            ("best_code", best),
            ("memory", self.memory_at(self.log.len())),
        ]);
        let base = render_prompt(PromptName::Plan, &bindings)?;
        let attempts = self.cfg.max_plan_retries + 1;
        let mut last = String::new();
        let mut repair: Option<String> = None;
        for _ in 0..attempts {
            let was_repair = repair.is_some();
            let prompt = match repair.take() {
                Some(err) => format!(
                    "{base}\n\nYour previous answer could not be used: {err}\nAnswer again with only the JSON object."
                ),
                None => base.clone(),
            };
            let request = GenerationRequest::new(PromptName::Plan, prompt).with_timeout(self.cfg.request_timeout());
            let response = match self.services.generate(&request) {
                Ok(c) => c.text,
                Err(e) => {
                    last = e.to_string();
                    continue;
                }
            };
            match parse_research_plan(&response) {
                Ok(plan) => {
                    let event = self.main_event(PendingEvent::agent(EventKind::PlanProposal, plan.to_json()));
                    self.append(event)?;
                    self.plans.push(plan.clone());
                    return Ok(plan);
                }
                Err(e) => {
                    log::warn!("plan rejected: {e}");
                    last = e.to_string();
                    // A failed repair is followed by a fresh ask.
                    if !was_repair {
                        repair = Some(last.clone());
                    }
                }
            }
        }
        Err(OrchestratorError::PlanProposalExhausted { attempts, last })
    }

    fn memory_solution(&self) -> String {
        let mut out = String::new();
        if !self.l2.is_empty() {
            out.push_str("Summaries of earlier research phases:\n\n");
            for u in self.l2.units() {
                out.push_str(&format!("[PHASE {} SUMMARY] {}\n\n", u.phase, u.text));
            }
        }
        match self.best_solution() {
            Some(s) => out.push_str(&format!(
                "Current best solution (validation metric {}):\n```python\n{}\n```",
                s.validation_metric,
                s.code.trim_end()
            )),
            None => out.push_str(&format!(
                "Current solution:\n```python\n{}\n```",
                self.initial_code.as_deref().unwrap_or_default().trim_end()
            )),
        }
        out
    }

    /// Runs the suggestions of the current plan, merges their events,
    /// consolidates the phase and opens the next boundary.
    pub fn run_phase(&mut self, plan: &ResearchPlan) -> Result<PhaseReport, OrchestratorError> {
        let phase = self.ledger.boundaries().len();
        let slots = plan.slots();
        // One event is reserved for the phase-closing note.
        let room = self.cfg.step_limit.saturating_sub(self.log.len() + 1);
        let fit = (room / self.cfg.trajectory_worst_case()).min(slots.len());
        let scheduled: Vec<TrajectoryId> = slots[..fit]
            .iter()
            .map(|&(i, j)| TrajectoryId::new(phase, i, j))
            .collect();
        let shared = PhaseShared {
            phase,
            plan,
            task: self.task,
            cfg: self.cfg,
            services: self.services,
            counter: self.counter,
            memory_solution: self.memory_solution(),
            baseline: self.best_solution().map(|s| s.validation_metric),
        };
        let runs = run_parallel(&shared, &scheduled, self.cfg.worker_limit);
        let mut status = if fit < slots.len() {
            PhaseStatus::Aborted
        } else {
            PhaseStatus::Completed
        };

        let mut trajectories = Vec::new();
        for run in runs {
            if run.interrupted {
                status = PhaseStatus::Aborted;
            }
            if run.events.is_empty() {
                continue;
            }
            let start = self.log.len();
            for pending in run.events {
                self.append(pending)?;
            }
            if let Some(ws) = &run.workspace {
                for (offset, script) in &run.scripts {
                    let from = ws.working().join(script);
                    if from.is_file() {
                        fs::rename(&from, ws.working().join(format!("solution_{}.py", start + offset)))?;
                    }
                }
            }
            trajectories.push(Trajectory {
                id: run.id,
                start,
                end: self.log.len() - 1,
                outcome: run.outcome,
                best_metric: run.best_metric,
            });
        }
        let best = trajectories
            .iter()
            .filter_map(|t| t.best_metric)
            .reduce(|a, b| if self.task.metric_direction.better(b, a) { b } else { a });
        let note = format!(
            "Phase {phase} finished: {} of {} suggestions ran, {} improved the best solution, best metric this phase: {}.",
            trajectories.len(),
            slots.len(),
            trajectories.iter().filter(|t| t.outcome == TrajectoryOutcome::Improved).count(),
            best.map_or("none".to_string(), |m| m.to_string()),
        );
        let note = self.main_event(PendingEvent::environment(EventKind::SummaryNote, note));
        self.append(note)?;

        let plan_index = self.ledger.plan_index(phase).expect("phase is open");
        let memory = self.memory_at(plan_index);
        let ctx = PhaseContext {
            task_description: &self.task.full_description(),
            memory: &memory,
            plan,
        };
        let record = promote_phase(
            phase,
            ctx,
            &trajectories,
            &mut self.log,
            &self.ledger,
            &mut self.l2,
            self.services,
            &self.cfg.migration(),
        )?;
        let boundary = self.log.len();
        mark_phase_boundary(&mut self.ledger, &self.log, boundary)?;
        if let Some(sink) = &self.sink {
            sink.promotion(&record)?;
            sink.sidecar(&self.log, &self.ledger)?;
        }
        self.promotions.push(record.clone());
        Ok(PhaseReport {
            phase,
            trajectories,
            status,
            promotion: record,
        })
    }

    fn room_for_phase(&self) -> bool {
        self.log.len() + 2 + self.cfg.trajectory_worst_case() <= self.cfg.step_limit
    }

    /// Proposes and runs phases until a limit is reached.
    pub fn run_phases(&mut self) -> Result<(), OrchestratorError> {
        loop {
            let done = self.ledger.completed_phases();
            if self.cfg.max_phases.is_some_and(|m| done >= m) || !self.room_for_phase() {
                return Ok(());
            }
            if self.services.expired(ThreadTag::Main) {
                return Ok(());
            }
            let plan = self.propose_plan()?;
            let report = self.run_phase(&plan)?;
            if report.status == PhaseStatus::Aborted {
                return Ok(());
            }
        }
    }
}

fn run_parallel(shared: &PhaseShared<'_>, scheduled: &[TrajectoryId], workers: usize) -> Vec<TrajectoryRun> {
    let next = AtomicUsize::new(0);
    let done: Mutex<Vec<Option<TrajectoryRun>>> = Mutex::new((0..scheduled.len()).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers.min(scheduled.len()) {
            s.spawn(|| loop {
                let n = next.fetch_add(1, Ordering::SeqCst);
                let Some(&id) = scheduled.get(n) else { break };
                let run = run_trajectory(shared, id);
                done.lock().expect("result lock")[n] = Some(run);
            });
        }
    });
    log::debug!("phase {}: {} trajectories finished", shared.phase, scheduled.len());
    done.into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every scheduled trajectory reports"))
        .collect()
}

/// Runs a task end to end and finalizes it. Failures inside the loop end the
/// run early and are reported in [`RunResult::aborted`]; only configuration
/// and run-directory errors are returned as `Err`.
pub fn run_task(
    task: &TaskSpec,
    cfg: &RunConfig,
    store: &mut WisdomStore,
    services: &Services,
    run_dir: Option<&Path>,
) -> Result<RunResult, OrchestratorError> {
    cfg.validate()?;
    let counter = QuarterCharCounter;
    let mut agent = Agent::new(task, cfg, services, &counter);
    if let Some(dir) = run_dir {
        agent.persist_to(dir)?;
    }
    let mut aborted = None;
    match agent.bootstrap(store) {
        Ok(_) => {
            if let Err(e) = agent.run_phases() {
                log::error!("run stopped: {e}");
                aborted = Some(e.to_string());
            }
        }
        Err(e) => {
            log::error!("bootstrap failed: {e}");
            aborted = Some(e.to_string());
        }
    }
    finalize(agent, store, aborted, run_dir)
}

fn finalize(
    agent: Agent<'_>,
    store: &mut WisdomStore,
    aborted: Option<String>,
    run_dir: Option<&Path>,
) -> Result<RunResult, OrchestratorError> {
    let solution = agent.best_solution();
    let mut wisdom_inserted = false;
    if !agent.log.is_empty() {
        let history = TaskHistory {
            task_id: &agent.task.task_id,
            descriptor: &agent.descriptor,
            log: &agent.log,
            ledger: &agent.ledger,
            l2: &agent.l2,
            solution: solution.as_ref(),
        };
        match promote_task(history, agent.services, agent.services, store, &agent.cfg.migration()) {
            Ok(_) => wisdom_inserted = true,
            Err(e) => log::warn!("task wisdom not stored: {e}"),
        }
    }
    let rows = compute_trace(&agent.log, &agent.ledger, &agent.l2);
    let summary = TraceSummary::of(&rows);
    let mut trace_path = None;
    if let Some(dir) = run_dir {
        agent.log.write_jsonl(&dir.join(EVENTS_FILE))?;
        Sidecar::capture(&agent.log, &agent.ledger).save(&dir.join(SIDECAR_FILE))?;
        let path = dir.join(TRACE_FILE);
        write_trace_csv(&path, &rows)?;
        trace_path = Some(path);
    }
    let result = RunResult {
        task_id: agent.task.task_id.clone(),
        descriptor: agent.descriptor.clone(),
        solution,
        phases_completed: agent.ledger.completed_phases(),
        peak_context_tokens: summary.hcc_peak,
        naive_peak_tokens: summary.naive_peak,
        event_count: agent.log.len(),
        trace_path,
        wisdom_inserted,
        aborted,
    };
    if let Some(dir) = run_dir {
        let json = serde_json::to_string_pretty(&result).map_err(io::Error::other)?;
        fs::write(dir.join(RESULT_FILE), json)?;
    }
    Ok(result)
}
