//! Offline run definitions: a scripted model, a mock execution table and a
//! toy task that together drive the whole loop without network or Python.
//!
//! Every scripted answer is pinned to the thread that asks for it, so runs
//! with parallel trajectories are reproducible.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::event_log::{MetricDirection, ThreadTag, TrajectoryId};
use crate::gateway::{Direction, HashingEmbedder, PromptName, ResearchPlan, ScriptRule, ScriptedBackend};
use crate::journal::{FixedClock, Services};
use crate::migration::{DATA_HEADER, MODEL_HEADER};
use crate::orchestrator::{RunConfig, TaskSpec};
use crate::sandbox::{report_to_event, ExecutionReport, MockEnv, MockRow};

pub const EMBEDDING_DIM: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub task_id: String,
    pub description: String,
    pub descriptor: String,
    pub phases: usize,
    pub directions: usize,
    pub suggestions: usize,
    /// Failing drafts before the bootstrap succeeds.
    pub bootstrap_debug_rounds: usize,
    /// Failing attempts per trajectory before it succeeds. A value above
    /// the debug budget makes the trajectory fail outright.
    pub trajectory_debug_rounds: BTreeMap<TrajectoryId, usize>,
    pub max_debug_retries: usize,
    /// Exact length of every terminal output payload; 0 keeps them short.
    pub output_chars: usize,
    /// Exact length of every phase summary.
    pub summary_chars: usize,
    pub wisdom: String,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            task_id: "toy-regression".into(),
            description: "Predict the target column of a small tabular dataset. \
                The evaluation metric is R squared on a hidden test split."
                .into(),
            descriptor: "Tabular regression on a small numeric dataset scored by R squared.".into(),
            phases: 1,
            directions: 3,
            suggestions: 1,
            bootstrap_debug_rounds: 0,
            trajectory_debug_rounds: BTreeMap::new(),
            max_debug_retries: 3,
            output_chars: 0,
            summary_chars: 0,
            wisdom: format!(
                "{DATA_HEADER}\nNumeric features, no missing values.\n\n{MODEL_HEADER}\nGradient boosting beat linear baselines."
            ),
        }
    }
}

fn padded(base: String, len: usize) -> String {
    if len <= base.len() {
        return base;
    }
    let mut s = base;
    let fill = len - s.len();
    s.push_str(&"#".repeat(fill));
    s
}

impl Scenario {
    /// Four phases of six trajectories with 3,000-token outputs and
    /// 500-token summaries.
    pub fn saturation() -> Self {
        Self {
            phases: 4,
            directions: 3,
            suggestions: 2,
            output_chars: 12_000,
            summary_chars: 2_000,
            ..Self::default()
        }
    }

    /// One bootstrap debug round, three phases of three directions with two
    /// suggestions each, and one trajectory that needs a debug round.
    pub fn end_to_end() -> Self {
        let mut s = Self {
            phases: 3,
            directions: 3,
            suggestions: 2,
            bootstrap_debug_rounds: 1,
            ..Self::default()
        };
        s.trajectory_debug_rounds.insert(TrajectoryId::new(2, 2, 1), 1);
        s.trajectory_debug_rounds.insert(TrajectoryId::new(3, 1, 2), 9);
        s
    }

    /// Random shape and random failures.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = Self {
            phases: rng.gen_range(2..=6),
            directions: rng.gen_range(3..=4),
            suggestions: rng.gen_range(1..=2),
            bootstrap_debug_rounds: rng.gen_range(0..=2),
            max_debug_retries: 2,
            ..Self::default()
        };
        for id in s.trajectory_ids() {
            let rounds = rng.gen_range(0..=3);
            if rounds > 0 {
                s.trajectory_debug_rounds.insert(id, rounds);
            }
        }
        s
    }

    pub fn with_task(mut self, task_id: &str, descriptor: &str) -> Self {
        self.task_id = task_id.into();
        self.descriptor = descriptor.into();
        self
    }

    pub fn trajectory_ids(&self) -> Vec<TrajectoryId> {
        let mut ids = Vec::new();
        for p in 1..=self.phases {
            for i in 1..=self.directions {
                for j in 1..=self.suggestions {
                    ids.push(TrajectoryId::new(p, i, j));
                }
            }
        }
        ids
    }

    pub fn plan(&self, phase: usize) -> ResearchPlan {
        ResearchPlan {
            directions: (1..=self.directions)
                .map(|i| Direction {
                    title: format!("Phase {phase} direction {i}"),
                    suggestions: (1..=self.suggestions)
                        .map(|j| format!("Try variant {j} of idea {i} in phase {phase}."))
                        .collect(),
                })
                .collect(),
        }
    }

    fn marker(thread: ThreadTag, attempt: usize) -> String {
        format!("<{thread}#{attempt}>")
    }

    /// Model answer carrying the attempt's marker.
    pub fn patch(thread: ThreadTag, attempt: usize) -> String {
        format!(
            "Here is the script.\n```python\n# {}\nimport pandas as pd\nprint('training')\n```",
            Self::marker(thread, attempt)
        )
    }

    pub fn metric(thread: ThreadTag) -> f64 {
        match thread {
            ThreadTag::Main => 0.5,
            ThreadTag::Trajectory(id) => {
                0.5 + 0.01 * id.phase as f64 + 0.001 * id.direction as f64 + 0.0001 * id.suggestion as f64
            }
        }
    }

    fn row(&self, thread: ThreadTag, attempt: usize, ok: bool) -> MockRow {
        let mut row = if ok {
            MockRow::success(Self::marker(thread, attempt), Self::metric(thread))
        } else {
            MockRow::failure(
                Self::marker(thread, attempt),
                "Traceback (most recent call last):\nValueError: could not convert string to float",
            )
        };
        if self.output_chars > 0 {
            let report = ExecutionReport {
                exit_status: row.status,
                exit_code: Some(if ok { 0 } else { 1 }),
                stdout_tail: row.stdout.clone(),
                stderr_tail: row.stderr.clone(),
                parsed_metric: None,
                submission_produced: row.submission,
                duration_sec: row.duration_sec,
            };
            let mut probe = report.clone();
            probe.parsed_metric = ok.then(|| Self::metric(thread));
            let base = report_to_event(&probe).payload.len();
            let fill = self.output_chars.saturating_sub(base + 1);
            row.stdout = format!("{}\n{}", row.stdout, "#".repeat(fill));
        }
        row
    }

    /// Attempts each thread makes, and whether the last one succeeds.
    fn attempts(&self, thread: ThreadTag) -> (usize, bool) {
        let rounds = match thread {
            ThreadTag::Main => self.bootstrap_debug_rounds,
            ThreadTag::Trajectory(id) => self.trajectory_debug_rounds.get(&id).copied().unwrap_or(0),
        };
        if rounds > self.max_debug_retries {
            (self.max_debug_retries + 1, false)
        } else {
            (rounds + 1, true)
        }
    }

    fn threads(&self) -> Vec<ThreadTag> {
        std::iter::once(ThreadTag::Main)
            .chain(self.trajectory_ids().into_iter().map(ThreadTag::Trajectory))
            .collect()
    }

    pub fn rules(&self) -> Vec<ScriptRule> {
        let mut rules = vec![ScriptRule::respond(PromptName::Descriptor, &self.descriptor).on(ThreadTag::Main)];
        for thread in self.threads() {
            let (n, _) = self.attempts(thread);
            let first = match thread {
                ThreadTag::Main => PromptName::Draft,
                ThreadTag::Trajectory(_) => PromptName::Improve,
            };
            rules.push(ScriptRule::respond(first, Self::patch(thread, 0)).on(thread));
            for k in 1..n {
                rules.push(ScriptRule::respond(PromptName::Debug, Self::patch(thread, k)).on(thread));
            }
        }
        for p in 1..=self.phases {
            rules.push(ScriptRule::respond(PromptName::Plan, self.plan(p).to_json()).on(ThreadTag::Main));
            rules.push(ScriptRule::respond(PromptName::PromoteP1, self.summary(p)).on(ThreadTag::Main));
        }
        rules.push(ScriptRule::respond(PromptName::PromoteP2, &self.wisdom).on(ThreadTag::Main));
        rules
    }

    pub fn summary(&self, phase: usize) -> String {
        padded(
            format!("Phase {phase} summary: variants were tried and the best metric improved slightly."),
            self.summary_chars,
        )
    }

    pub fn mock_rows(&self) -> Vec<MockRow> {
        let mut rows = Vec::new();
        for thread in self.threads() {
            let (n, ok) = self.attempts(thread);
            for k in 0..n {
                rows.push(self.row(thread, k, ok && k + 1 == n));
            }
        }
        rows
    }

    pub fn task(&self, data_dir: &Path) -> TaskSpec {
        TaskSpec {
            task_id: self.task_id.clone(),
            task_description: self.description.clone(),
            data_dir: data_dir.to_path_buf(),
            data_preview: "train.csv: 3 columns (x1, x2, target), 4 rows".into(),
            user_instructions: String::new(),
            metric_direction: MetricDirection::HigherIsBetter,
        }
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            step_limit: 10_000,
            max_phases: Some(self.phases),
            max_debug_retries: self.max_debug_retries,
            ..RunConfig::default()
        }
    }

    pub fn backend(&self) -> ScriptedBackend {
        ScriptedBackend::new(self.rules())
    }

    pub fn services(&self, seed: u64) -> Services {
        Services::new(
            Box::new(self.backend()),
            Box::new(HashingEmbedder::new(EMBEDDING_DIM, seed)),
            Box::new(MockEnv::new(self.mock_rows())),
            Box::new(FixedClock::from_seed(seed)),
        )
    }

    /// Writes a task directory with its own `script.json` and `mock.json`.
    pub fn write(&self, root: &Path) -> io::Result<PathBuf> {
        let dir = root.join(&self.task_id);
        fs::create_dir_all(dir.join("data"))?;
        fs::write(dir.join("description.md"), &self.description)?;
        fs::write(dir.join("preview.md"), "train.csv: 3 columns (x1, x2, target), 4 rows")?;
        fs::write(dir.join("data/train.csv"), "x1,x2,target\n1,2,3\n2,3,5\n3,4,7\n4,5,9\n")?;
        let json = |v: serde_json::Result<String>| v.map_err(io::Error::other);
        fs::write(dir.join("script.json"), json(serde_json::to_string_pretty(&self.rules()))?)?;
        fs::write(dir.join("mock.json"), json(serde_json::to_string_pretty(&self.mock_rows()))?)?;
        Ok(dir)
    }

    /// Configuration for running written scenarios offline.
    pub fn config_toml(&self, seed: u64) -> String {
        format!(
            "seed = {seed}\nclock = \"fixed\"\n\n[generation]\nbackend = \"scripted\"\n\n\
             [embedding]\nbackend = \"hashing\"\ndimension = {EMBEDDING_DIM}\n\n\
             [sandbox]\nkind = \"mock\"\n\n\
             [run]\nstepLimit = 10000\nmaxPhases = {}\nmaxDebugRetries = {}\n",
            self.phases, self.max_debug_retries
        )
    }
}
