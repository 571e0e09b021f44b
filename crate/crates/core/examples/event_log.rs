//! Appending to the event log, the per-thread alternation rule, and a
//! JSONL round trip with eviction markers kept in the sidecar.
//!
//! cargo run --example event_log

use std::collections::BTreeSet;

use hcc::event_log::{
    mark_phase_boundary, EventKind, EventLog, PendingEvent, PhaseLedger, QuarterCharCounter, Sidecar, ThreadTag,
    TrajectoryId,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let counter = QuarterCharCounter;
    let mut log = EventLog::new();
    log.push(PendingEvent::environment(EventKind::TaskInit, "Predict house prices.").counted_by(&counter))?;
    log.push(PendingEvent::agent(EventKind::CodePatch, "print('Validation metric: 0.71')").counted_by(&counter))?;
    log.push(
        PendingEvent::environment(EventKind::TerminalOutput, "Validation metric: 0.71")
            .with_result(Some(0.71), true)
            .counted_by(&counter),
    )?;

    // Two agent events in a row on the same thread are refused.
    let err = log.push(PendingEvent::environment(EventKind::TerminalOutput, "again")).unwrap_err();
    println!("refused: {err}");

    let mut ledger = PhaseLedger::new();
    mark_phase_boundary(&mut ledger, &log, log.len())?;
    log.push(PendingEvent::agent(EventKind::PlanProposal, "{\"a\": {\"1\": \"x\"}}"))?;

    // Trajectory threads alternate on their own.
    let tid = ThreadTag::Trajectory(TrajectoryId::new(1, 1, 1));
    log.push(PendingEvent::environment(EventKind::ImprovementSketch, "Direction 1: a").on(tid))?;
    log.push(PendingEvent::agent(EventKind::CodePatch, "print(1)").on(tid))?;
    log.mark_evicted(&BTreeSet::from([4, 5]))?;

    for e in log.events() {
        println!("{:>2} {:<11} {:<17?} {:>3} tok  evicted={}", e.index, e.thread, e.kind, e.token_estimate, log.is_evicted(e.index));
    }

    let dir = tempfile::tempdir()?;
    let events = dir.path().join("events.jsonl");
    let sidecar = dir.path().join("sidecar.json");
    log.write_jsonl(&events)?;
    Sidecar::capture(&log, &ledger).save(&sidecar)?;

    let mut back = EventLog::read_jsonl(&events)?;
    let ledger_back = Sidecar::load(&sidecar)?.restore(&mut back)?;
    assert_eq!(back.events(), log.events());
    assert_eq!(back.evicted(), log.evicted());
    assert_eq!(ledger_back.boundaries(), ledger.boundaries());
    println!("round trip ok: {} events, boundaries {:?}", back.len(), ledger_back.boundaries());
    Ok(())
}
