//! Random runs driven directly against the log, the ledger and promotion,
//! plus a brute-force evaluator of the context-building rule.

#![allow(dead_code)]

use std::collections::BTreeSet;

use hcc::event_log::{
    mark_phase_boundary, EventKind, EventLog, PendingEvent, PhaseLedger, QuarterCharCounter, ThreadTag,
    TrajectoryId,
};
use hcc::gateway::{Direction, PromptName, ResearchPlan, ScriptOutcome, ScriptRule, ScriptedBackend};
use hcc::hierarchy::{build_context, build_context_as_of, l1_view, KnowledgeUnit, L2Store};
use hcc::migration::{promote_phase, MigrationConfig, PhaseContext, Trajectory, TrajectoryOutcome};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Context for step `t` straight from the definition: raw if the index is
/// in the bootstrap prefix, is a plan, or lies in the active phase, and is
/// not evicted; otherwise the summary anchored there; otherwise nothing.
pub fn oracle(log: &EventLog, boundaries: &[usize], units: &[KnowledgeUnit], t: usize) -> (String, usize) {
    let mut parts = Vec::new();
    let mut total = 0;
    let last = boundaries.iter().copied().filter(|&b| b <= t).max();
    for k in 0..t {
        let in_l1 = match boundaries.first() {
            None => true,
            Some(&t0) => k < t0 || boundaries.contains(&k) || last.is_some_and(|b| k >= b),
        };
        let e = &log.events()[k];
        if in_l1 && !log.evicted().contains(&k) {
            parts.push(format!("[{}] {}", e.origin, e.payload));
            total += e.token_estimate;
        } else if let Some(u) = units.iter().find(|u| u.covered_range.0 == k) {
            parts.push(format!("[PHASE {} SUMMARY] {}", u.phase, u.text));
            total += u.token_estimate;
        }
    }
    (parts.join("\n\n"), total)
}

pub fn words(rng: &mut ChaCha8Rng, max: usize) -> String {
    const W: [&str; 8] = ["loss", "fold", "train", "feature", "metric", "epoch", "seed", "tree"];
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| W[rng.gen_range(0..W.len())]).collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Injection {
    None,
    /// Some promotions fail first (backend error, timeout or unusable
    /// output) and are then retried.
    Failures,
}

#[derive(Debug, Default)]
pub struct Stats {
    pub steps_checked: usize,
    pub promotions: usize,
    pub failed_promotions: usize,
    pub phases: usize,
}

pub struct Driver {
    pub rng: ChaCha8Rng,
    pub log: EventLog,
    pub ledger: PhaseLedger,
    pub l2: L2Store,
    pub stats: Stats,
    /// Rendered context at each step, as it was seen live.
    pub seen: Vec<(usize, String, usize)>,
}

impl Driver {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: EventLog::new(),
            ledger: PhaseLedger::new(),
            l2: L2Store::new(),
            stats: Stats::default(),
            seen: Vec::new(),
        }
    }

    /// Compares the live context for the next step with the oracle, then
    /// appends.
    fn step(&mut self, pending: PendingEvent) -> Result<usize, String> {
        let t = self.log.len();
        let ctx = build_context(&self.log, &self.ledger, &self.l2, t);
        let (want, tokens) = oracle(&self.log, self.ledger.boundaries(), self.l2.units(), t);
        let got = ctx.render();
        if got != want || ctx.total_tokens != tokens {
            return Err(format!("step {t}: context differs from the oracle\n got: {got:?}\nwant: {want:?}"));
        }
        self.seen.push((t, got, tokens));
        self.stats.steps_checked += 1;
        self.log.push(pending.counted_by(&QuarterCharCounter)).map_err(|e| e.to_string())
    }

    fn env(&mut self, kind: EventKind, thread: ThreadTag) -> Result<usize, String> {
        let text = words(&mut self.rng, 40);
        self.step(PendingEvent::environment(kind, text).on(thread))
    }

    fn agent(&mut self, kind: EventKind, thread: ThreadTag) -> Result<usize, String> {
        let text = words(&mut self.rng, 40);
        self.step(PendingEvent::agent(kind, text).on(thread))
    }

    fn check_lifecycle(&self, phase: usize, sigma: &BTreeSet<usize>, unit: &KnowledgeUnit) -> Result<(), String> {
        if self.l2.get(phase) != Some(unit) {
            return Err(format!("phase {phase}: summary missing from L2"));
        }
        for t in [self.log.len(), self.log.len().saturating_sub(1)] {
            let l1 = l1_view(&self.log, &self.ledger, t).indices();
            if let Some(k) = l1.intersection(sigma).next() {
                return Err(format!("phase {phase}: trajectory index {k} still in L1 at t={t}"));
            }
            let t0 = self.ledger.t0().expect("bootstrapped");
            for k in (0..t0).chain(self.ledger.boundaries().iter().copied()) {
                if k < t && (self.log.is_evicted(k) || !l1.contains(&k)) {
                    return Err(format!("phase {phase}: bootstrap or plan index {k} not raw at t={t}"));
                }
            }
        }
        Ok(())
    }

    fn promote(&mut self, phase: usize, plan: &ResearchPlan, trajectories: &[Trajectory], inject: Injection) -> Result<bool, String> {
        let cfg = MigrationConfig {
            format_retries: 1,
            ..MigrationConfig::default()
        };
        let text = words(&mut self.rng, 60);
        let summary = ScriptRule::respond(PromptName::PromoteP1, text.clone());
        let failing: Option<Vec<ScriptRule>> = (inject == Injection::Failures && self.rng.gen_bool(0.4)).then(|| {
            match self.rng.gen_range(0..3) {
                0 => vec![ScriptRule::with_outcome(
                    PromptName::PromoteP1,
                    ScriptOutcome::Failure { message: "overloaded".into(), retry_after: None },
                )],
                1 => vec![ScriptRule::with_outcome(PromptName::PromoteP1, ScriptOutcome::Timeout)],
                _ => vec![ScriptRule::respond(PromptName::PromoteP1, "  "); 2],
            }
        });
        let sigma: BTreeSet<usize> = trajectories.iter().flat_map(Trajectory::indices).collect();
        if let Some(rules) = failing {
            let evicted_before = self.log.evicted().clone();
            let units_before = self.l2.units().to_vec();
            let backend = ScriptedBackend::new(rules);
            let ctx = PhaseContext { task_description: "task", memory: "", plan };
            let r = promote_phase(phase, ctx, trajectories, &mut self.log, &self.ledger, &mut self.l2, &backend, &cfg);
            if r.is_ok() {
                return Err(format!("phase {phase}: injected failure did not fail"));
            }
            if self.log.evicted() != &evicted_before || self.l2.units() != units_before.as_slice() {
                return Err(format!("phase {phase}: state changed by a failed promotion"));
            }
            self.stats.failed_promotions += 1;
        }
        let backend = ScriptedBackend::new(vec![summary]);
        let ctx = PhaseContext { task_description: "task", memory: "", plan };
        let record = promote_phase(phase, ctx, trajectories, &mut self.log, &self.ledger, &mut self.l2, &backend, &cfg)
            .map_err(|e| format!("phase {phase}: promotion failed: {e}"))?;
        if record.evicted_indices != sigma || record.knowledge_unit.text != text.trim() {
            return Err(format!("phase {phase}: unexpected promotion record"));
        }
        self.stats.promotions += 1;
        self.check_lifecycle(phase, &sigma, &record.knowledge_unit)?;
        let boundary = self.log.len();
        mark_phase_boundary(&mut self.ledger, &self.log, boundary).map_err(|e| e.to_string())?;
        self.check_lifecycle(phase, &sigma, &record.knowledge_unit)?;
        Ok(true)
    }

    /// 2 to 6 phases of 1 to 4 trajectories each.
    pub fn run(&mut self, inject: Injection) -> Result<(), String> {
        self.env(EventKind::TaskInit, ThreadTag::Main)?;
        for _ in 0..self.rng.gen_range(1..=3) {
            self.agent(EventKind::CodePatch, ThreadTag::Main)?;
            self.env(EventKind::TerminalOutput, ThreadTag::Main)?;
        }
        let t0 = self.log.len();
        mark_phase_boundary(&mut self.ledger, &self.log, t0).map_err(|e| e.to_string())?;
        let plan = ResearchPlan {
            directions: (1..=4)
                .map(|i| Direction { title: format!("d{i}"), suggestions: vec![format!("s{i}")] })
                .collect(),
        };
        let phases = self.rng.gen_range(2..=6);
        for p in 1..=phases {
            self.agent(EventKind::PlanProposal, ThreadTag::Main)?;
            let mut trajectories = Vec::new();
            for i in 1..=self.rng.gen_range(1..=4) {
                let id = TrajectoryId::new(p, i, 1);
                let thread = ThreadTag::Trajectory(id);
                let start = self.log.len();
                self.env(EventKind::ImprovementSketch, thread)?;
                for _ in 0..self.rng.gen_range(1..=3) {
                    self.agent(EventKind::CodePatch, thread)?;
                    self.env(EventKind::TerminalOutput, thread)?;
                }
                trajectories.push(Trajectory {
                    id,
                    start,
                    end: self.log.len() - 1,
                    outcome: TrajectoryOutcome::NoImprovement,
                    best_metric: None,
                });
            }
            self.env(EventKind::SummaryNote, ThreadTag::Main)?;
            self.promote(p, &plan, &trajectories, inject)?;
            self.stats.phases += 1;
        }
        // One more plan so the last phase's summary is read at least once.
        self.agent(EventKind::PlanProposal, ThreadTag::Main)?;
        self.check_archive()
    }

    /// The context rebuilt from the finished run for any past step equals
    /// the one seen live.
    pub fn check_archive(&self) -> Result<(), String> {
        for (t, text, tokens) in &self.seen {
            let ctx = build_context_as_of(&self.log, &self.ledger, &self.l2, *t);
            if &ctx.render() != text || ctx.total_tokens != *tokens {
                return Err(format!("step {t}: archived context differs from the live one"));
            }
        }
        Ok(())
    }
}
