//! A complete run against a scripted model and a table-driven sandbox:
//! bootstrap, three phases of parallel trajectories, task-level promotion.
//!
//! cargo run --example scripted_run

use std::path::Path;

use hcc::orchestrator::run_task;
use hcc::scenario::{Scenario, EMBEDDING_DIM};
use hcc::wisdom::WisdomStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenario = Scenario::end_to_end();
    let out = tempfile::tempdir()?;
    let mut store = WisdomStore::new(EMBEDDING_DIM);
    let result = run_task(
        &scenario.task(Path::new("data")),
        &scenario.run_config(),
        &mut store,
        &scenario.services(1),
        Some(out.path()),
    )?;

    println!("descriptor: {}", result.descriptor);
    println!("phases: {}, events: {}", result.phases_completed, result.event_count);
    if let Some(s) = &result.solution {
        println!("best metric {} from event {}", s.validation_metric, s.source_event_index);
    }
    println!("peak context {} tokens vs {} for the full history", result.peak_context_tokens, result.naive_peak_tokens);
    println!("wisdom stored: {}", store.get(&result.task_id).map_or("none", |e| e.wisdom.as_str()));
    for f in std::fs::read_dir(out.path())? {
        println!("  wrote {}", f?.file_name().to_string_lossy());
    }
    Ok(())
}
