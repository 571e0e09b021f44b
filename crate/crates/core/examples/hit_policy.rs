//! The context the hierarchy builds for each step of a tiny two-phase run.
//! Raw events stay while they are in the bootstrap prefix, are plans, or
//! belong to the open phase; a closed phase shows up as its summary.
//!
//! cargo run --example hit_policy

use std::collections::BTreeSet;

use hcc::event_log::{mark_phase_boundary, EventKind, EventLog, PendingEvent, PhaseLedger, ThreadTag, TrajectoryId};
use hcc::hierarchy::{build_context, build_context_as_of, l1_view, KnowledgeUnit, L2Store};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut log = EventLog::new();
    let mut ledger = PhaseLedger::new();
    let mut l2 = L2Store::new();

    log.push(PendingEvent::environment(EventKind::TaskInit, "task"))?;
    log.push(PendingEvent::agent(EventKind::CodePatch, "draft"))?;
    log.push(PendingEvent::environment(EventKind::TerminalOutput, "draft ran"))?;
    mark_phase_boundary(&mut ledger, &log, log.len())?;

    log.push(PendingEvent::agent(EventKind::PlanProposal, "plan 1"))?;
    let tid = ThreadTag::Trajectory(TrajectoryId::new(1, 1, 1));
    log.push(PendingEvent::environment(EventKind::ImprovementSketch, "sketch").on(tid))?;
    log.push(PendingEvent::agent(EventKind::CodePatch, "improved").on(tid))?;
    log.push(PendingEvent::environment(EventKind::TerminalOutput, "improved ran").on(tid))?;
    log.push(PendingEvent::environment(EventKind::SummaryNote, "phase 1 done"))?;

    let before = build_context(&log, &ledger, &l2, log.len()).render();
    println!("before promotion:\n{before}\n");

    l2.push(KnowledgeUnit {
        phase: 1,
        covered_range: (4, log.len() - 1),
        text: "the improvement helped".into(),
        token_estimate: 6,
    })?;
    log.mark_evicted(&BTreeSet::from([4, 5, 6]))?;
    mark_phase_boundary(&mut ledger, &log, log.len())?;
    log.push(PendingEvent::agent(EventKind::PlanProposal, "plan 2"))?;

    let t = log.len();
    println!("L1 at t={t}: {:?}", l1_view(&log, &ledger, t).indices());
    println!("after promotion:\n{}\n", build_context(&log, &ledger, &l2, t).render());

    // Past steps are rebuilt from the archive exactly as they were seen.
    let again = build_context_as_of(&log, &ledger, &l2, 8);
    assert_eq!(again.render(), before);
    println!("context at t=8 rebuilt from the archive matches");
    Ok(())
}
