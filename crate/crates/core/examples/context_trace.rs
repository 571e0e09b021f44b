//! Context size per agent step for a long run, cached versus the full
//! history, drawn as a coarse text chart.
//!
//! cargo run --example context_trace

use std::path::Path;

use hcc::orchestrator::run_task;
use hcc::scenario::{Scenario, EMBEDDING_DIM};
use hcc::trace::{read_trace_csv, TraceSummary, TRACE_FILE};
use hcc::wisdom::WisdomStore;

fn bar(tokens: usize, peak: usize) -> String {
    "#".repeat(tokens * 50 / peak.max(1))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let s = Scenario::saturation();
    let out = tempfile::tempdir()?;
    let mut store = WisdomStore::new(EMBEDDING_DIM);
    run_task(&s.task(Path::new("data")), &s.run_config(), &mut store, &s.services(3), Some(out.path()))?;

    let rows = read_trace_csv(&out.path().join(TRACE_FILE))?;
    let summary = TraceSummary::of(&rows);
    for r in &rows {
        println!("{:>4} p{} {:<6} {}", r.step, r.phase, r.hcc_tokens, bar(r.hcc_tokens, summary.naive_peak));
        println!("{:>4}    {:<6} {}", "", r.naive_tokens, bar(r.naive_tokens, summary.naive_peak).replace('#', "."));
    }
    println!("peak {} vs {} tokens, ratio {:.4}", summary.hcc_peak, summary.naive_peak, summary.peak_ratio());
    Ok(())
}
