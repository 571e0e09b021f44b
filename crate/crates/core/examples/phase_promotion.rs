//! Closing a phase: the trajectories are summarized into a knowledge unit
//! and their events leave the working set.
//!
//! cargo run --example phase_promotion

use hcc::event_log::{mark_phase_boundary, EventKind, EventLog, PendingEvent, PhaseLedger, ThreadTag, TrajectoryId};
use hcc::gateway::{Direction, PromptName, ResearchPlan, ScriptRule, ScriptedBackend};
use hcc::hierarchy::{build_context, L2Store};
use hcc::migration::{promote_phase, MigrationConfig, PhaseContext, Trajectory, TrajectoryOutcome};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut log = EventLog::new();
    let mut ledger = PhaseLedger::new();
    let mut l2 = L2Store::new();
    log.push(PendingEvent::environment(EventKind::TaskInit, "Predict churn."))?;
    log.push(PendingEvent::agent(EventKind::CodePatch, "baseline"))?;
    log.push(PendingEvent::environment(EventKind::TerminalOutput, "Validation metric: 0.61"))?;
    mark_phase_boundary(&mut ledger, &log, log.len())?;

    let plan = ResearchPlan {
        directions: ["features", "models", "tuning"]
            .iter()
            .map(|t| Direction { title: t.to_string(), suggestions: vec![format!("try better {t}")] })
            .collect(),
    };
    log.push(PendingEvent::agent(EventKind::PlanProposal, plan.to_json()))?;

    let mut trajectories = Vec::new();
    for (i, metric) in [(1, 0.66), (2, 0.59)] {
        let id = TrajectoryId::new(1, i, 1);
        let thread = ThreadTag::Trajectory(id);
        let start = log.len();
        log.push(PendingEvent::environment(EventKind::ImprovementSketch, format!("Direction {i}")).on(thread))?;
        log.push(PendingEvent::agent(EventKind::CodePatch, "code").on(thread))?;
        log.push(PendingEvent::environment(EventKind::TerminalOutput, format!("Validation metric: {metric}")).on(thread))?;
        let outcome = if metric > 0.61 { TrajectoryOutcome::Improved } else { TrajectoryOutcome::NoImprovement };
        trajectories.push(Trajectory { id, start, end: log.len() - 1, outcome, best_metric: Some(metric) });
    }
    log.push(PendingEvent::environment(EventKind::SummaryNote, "phase 1 finished"))?;

    let backend = ScriptedBackend::new(vec![ScriptRule::respond(
        PromptName::PromoteP1,
        "Target-encoded features lifted AUC to 0.66; a deeper model overfit.",
    )]);
    let ctx = PhaseContext { task_description: "Predict churn.", memory: "", plan: &plan };
    let before = build_context(&log, &ledger, &l2, log.len()).total_tokens;
    let record = promote_phase(1, ctx, &trajectories, &mut log, &ledger, &mut l2, &backend, &MigrationConfig::default())?;
    mark_phase_boundary(&mut ledger, &log, log.len())?;
    let after = build_context(&log, &ledger, &l2, log.len());

    println!("evicted {:?}", record.evicted_indices);
    println!("summary covers {:?}: {}", record.knowledge_unit.covered_range, record.knowledge_unit.text);
    println!("context tokens {before} -> {}", after.total_tokens);
    println!("{}", after.render());
    Ok(())
}
