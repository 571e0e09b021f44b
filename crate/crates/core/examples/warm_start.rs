//! Cross-task transfer: two finished tasks leave wisdom behind, and a third
//! similar task starts with the closest entry in its first event.
//!
//! cargo run --example warm_start

use std::path::Path;

use hcc::orchestrator::run_task;
use hcc::scenario::{Scenario, EMBEDDING_DIM};
use hcc::wisdom::WisdomStore;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 5;
    let mut store = WisdomStore::new(EMBEDDING_DIM);
    let tasks = [
        ("digits", "Image classification of handwritten digits scored by accuracy."),
        ("sales", "Forecasting weekly retail sales for many stores scored by RMSE."),
        ("sales-regional", "Forecasting weekly retail sales for many stores and regions scored by RMSE."),
    ];
    for (id, descriptor) in tasks {
        let s = Scenario::default().with_task(id, descriptor);
        let out = tempfile::tempdir()?;
        let r = run_task(&s.task(Path::new("data")), &s.run_config(), &mut store, &s.services(seed), Some(out.path()))?;
        let log = hcc::event_log::EventLog::read_jsonl(&out.path().join(hcc::trace::EVENTS_FILE))?;
        println!("== {id}: store now {} entries, wisdom inserted {}", store.len(), r.wisdom_inserted);
        println!("{}\n", log.events()[0].payload);
    }
    Ok(())
}
