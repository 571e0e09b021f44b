//! Command-line driver. Exit codes: 0 success, 1 aborted run or replay
//! divergence, 2 usage, configuration or I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::AppConfig;
use crate::gateway::{embed, Embedder, HashingEmbedder};
use crate::journal::{JournalError, JournalMode, Recordings};
use crate::orchestrator::{run_task, RunResult, TaskSpec};
use crate::trace::{compute_trace, load_archive, write_trace_csv, TraceSummary, EVENTS_FILE, TRACE_FILE};
use crate::wisdom::{cosine, WisdomError, WisdomStore};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const USAGE_FILE: &str = "usage.jsonl";
pub const STORE_SNAPSHOT_DIR: &str = "store.snapshot";

#[derive(Debug, Parser)]
#[command(name = "hcc", version, about = "Run and inspect agents with a hierarchical context cache")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Wisdom store directory.
    #[arg(long, default_value = "hcc-store")]
    pub store: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Journal every model, clock and execution result for replay.
    #[arg(long)]
    pub record: bool,
    #[arg(long)]
    pub budget_sec: Option<f64>,
    #[arg(long)]
    pub step_limit: Option<usize>,
    /// Prefetch similarity threshold.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Parallel trajectory workers.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one task directory (description.md, data/, optional preview.md).
    Run {
        task_dir: PathBuf,
        /// Run directory; defaults to runs/<task id>.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fill the wisdom store from a directory of task directories.
    Warm {
        corpus_dir: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Recompute trace.csv for a run directory and print the peak ratio.
    Trace { run_dir: PathBuf },
    /// Inspect or edit a wisdom store.
    Store {
        #[command(subcommand)]
        action: StoreAction,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a recorded run from its journal and compare the outputs.
    Replay {
        run_dir: PathBuf,
        /// Output directory; defaults to <run_dir>/replay.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum StoreAction {
    List,
    Show {
        task_id: Option<String>,
        /// Rank entries by cosine similarity to this text.
        #[arg(long)]
        query: Option<String>,
    },
    Delete {
        task_id: String,
        #[arg(long)]
        yes: bool,
    },
}

/// Inputs a recorded run needs to be replayed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Manifest {
    pub task: TaskSpec,
    pub config: AppConfig,
}

struct Failure(i32, String);

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure(2, e.to_string())
    }
}

pub fn main_with(cli: Cli) -> i32 {
    let outcome = match cli.command {
        Command::Run { task_dir, out, common } => cmd_run(&task_dir, out.as_deref(), &common),
        Command::Warm { corpus_dir, common } => cmd_warm(&corpus_dir, &common),
        Command::Trace { run_dir } => cmd_trace(&run_dir),
        Command::Store { action, common } => cmd_store(action, &common),
        Command::Replay { run_dir, out } => cmd_replay(&run_dir, out.as_deref()),
    };
    match outcome {
        Ok(code) => code,
        Err(Failure(code, message)) => {
            eprintln!("error: {message}");
            code
        }
    }
}

fn load_config(common: &Common) -> Result<AppConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = common.budget_sec {
        cfg.run.wall_clock_budget_sec = Some(b);
    }
    if let Some(n) = common.step_limit {
        cfg.run.step_limit = n;
    }
    if let Some(d) = common.delta {
        cfg.run.delta = d;
    }
    if let Some(w) = common.workers {
        cfg.run.worker_limit = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Per-task `script.json` and `mock.json` replace the configured ones.
fn for_task(cfg: &AppConfig, task_dir: &Path) -> AppConfig {
    let mut cfg = cfg.clone();
    let script = task_dir.join("script.json");
    if script.is_file() {
        cfg.generation.script = Some(script);
    }
    let mock = task_dir.join("mock.json");
    if mock.is_file() {
        cfg.sandbox.mock_table = Some(mock);
    }
    cfg
}

fn cancel_slot() -> &'static Mutex<Option<Arc<AtomicBool>>> {
    static SLOT: OnceLock<Mutex<Option<Arc<AtomicBool>>>> = OnceLock::new();
    SLOT.get_or_init(|| {
        let installed = ctrlc::set_handler(|| {
            eprintln!("interrupted; finishing the current step and finalizing");
            if let Some(flag) = cancel_slot().lock().expect("cancel slot").as_ref() {
                flag.store(true, Ordering::SeqCst);
            }
        });
        if let Err(e) = installed {
            log::warn!("cannot install the Ctrl-C handler: {e}");
        }
        Mutex::new(None)
    })
}

fn execute_run(cfg: &AppConfig, task: &TaskSpec, store: &mut WisdomStore, run_dir: &Path, record: bool) -> Result<RunResult, Failure> {
    fs::create_dir_all(run_dir)?;
    let usage = run_dir.join(USAGE_FILE);
    if usage.exists() {
        fs::remove_file(&usage)?;
    }
    let mode = if record {
        let manifest = Manifest {
            task: task.clone(),
            config: cfg.clone(),
        };
        fs::write(run_dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        store.save(&run_dir.join(STORE_SNAPSHOT_DIR))?;
        JournalMode::Record
    } else {
        JournalMode::Off
    };
    let services = cfg.services(task, run_dir, mode, &usage)?;
    *cancel_slot().lock().expect("cancel slot") = Some(services.deadline.cancel_flag());
    let result = run_task(task, &cfg.run, store, &services, Some(run_dir));
    *cancel_slot().lock().expect("cancel slot") = None;
    Ok(result?)
}

fn print_result(r: &RunResult, run_dir: &Path) {
    let metric = r
        .solution
        .as_ref()
        .map_or("none".to_string(), |s| s.validation_metric.to_string());
    println!(
        "{}: {} phases, {} events, best metric {metric}, peak context {} tokens (full history {})",
        r.task_id, r.phases_completed, r.event_count, r.peak_context_tokens, r.naive_peak_tokens
    );
    if let Some(why) = &r.aborted {
        println!("aborted: {why}");
    }
    println!("run directory: {}", run_dir.display());
}

fn cmd_run(task_dir: &Path, out: Option<&Path>, common: &Common) -> Result<i32, Failure> {
    let cfg = for_task(&load_config(common)?, task_dir);
    let task = TaskSpec::from_dir(task_dir)?;
    let mut store = WisdomStore::open_or_create(&common.store, cfg.embedding.dimension)?;
    let run_dir = out.map_or_else(|| Path::new("runs").join(&task.task_id), Path::to_path_buf);
    let result = execute_run(&cfg, &task, &mut store, &run_dir, common.record)?;
    store.save(&common.store)?;
    print_result(&result, &run_dir);
    Ok(if result.aborted.is_some() { 1 } else { 0 })
}

fn cmd_warm(corpus: &Path, common: &Common) -> Result<i32, Failure> {
    let base = load_config(common)?;
    let mut store = WisdomStore::open_or_create(&common.store, base.embedding.dimension)?;
    let mut dirs: Vec<PathBuf> = fs::read_dir(corpus)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("description.md").is_file())
        .collect();
    dirs.sort();
    let (mut added, mut skipped, mut failed) = (0, 0, 0);
    for dir in dirs {
        let task = match TaskSpec::from_dir(&dir) {
            Ok(t) => t,
            Err(e) => {
                log::warn!("skipping {}: {e}", dir.display());
                failed += 1;
                continue;
            }
        };
        if store.contains(&task.task_id) {
            skipped += 1;
            continue;
        }
        let mut cfg = for_task(&base, &dir);
        if cfg.warm.fast_mode {
            cfg.run.max_phases = Some(0);
        }
        let run_dir = common.store.join("runs").join(&task.task_id);
        match execute_run(&cfg, &task, &mut store, &run_dir, common.record) {
            Ok(r) if r.wisdom_inserted => added += 1,
            Ok(_) => {
                log::warn!("{}: no wisdom stored", task.task_id);
                failed += 1;
            }
            Err(Failure(_, why)) => {
                log::warn!("{}: {why}", task.task_id);
                failed += 1;
            }
        }
        store.save(&common.store)?;
    }
    store.save(&common.store)?;
    println!("added {added}, skipped {skipped}, failed {failed}; store holds {} entries", store.len());
    Ok(0)
}

fn cmd_trace(run_dir: &Path) -> Result<i32, Failure> {
    let archive = load_archive(run_dir)?;
    let rows = compute_trace(&archive.log, &archive.ledger, &archive.l2);
    write_trace_csv(&run_dir.join(TRACE_FILE), &rows)?;
    let s = TraceSummary::of(&rows);
    println!(
        "{} rows, peak full history {} tokens, peak cached context {} tokens, peak ratio {:.4}",
        s.rows,
        s.naive_peak,
        s.hcc_peak,
        s.peak_ratio()
    );
    Ok(0)
}

fn store_embedder(common: &Common, store: &WisdomStore) -> Result<Box<dyn Embedder>, Failure> {
    match &common.config {
        Some(_) => Ok(load_config(common)?.embedder()?),
        None => Ok(Box::new(HashingEmbedder::new(store.dimension(), common.seed.unwrap_or(0)))),
    }
}

fn cmd_store(action: StoreAction, common: &Common) -> Result<i32, Failure> {
    let mut store = WisdomStore::load(&common.store)?;
    match action {
        StoreAction::List => {
            for e in store.entries() {
                let first = e.descriptor.chars().take(80).collect::<String>();
                println!("{}\t{first}", e.task_id);
            }
        }
        StoreAction::Show { task_id, query } => {
            let query = match query {
                Some(q) => Some(embed(store_embedder(common, &store)?.as_ref(), &q)?),
                None => None,
            };
            let mut shown = Vec::new();
            for e in store.entries() {
                if task_id.as_deref().is_some_and(|id| id != e.task_id) {
                    continue;
                }
                let sim = match &query {
                    Some(q) => Some(cosine(q, &e.embedding)?),
                    None => None,
                };
                shown.push((sim, e));
            }
            if let Some(id) = &task_id {
                if shown.is_empty() {
                    return Err(WisdomError::UnknownTask(id.clone()).into());
                }
            }
            if query.is_some() {
                shown.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarities"));
                println!("cosine\ttask");
            }
            for (sim, e) in shown {
                match sim {
                    Some(s) => println!("{s:.4}\t{}", e.task_id),
                    None => println!("== {} ==\n{}\n\n{}\n", e.task_id, e.descriptor, e.wisdom),
                }
            }
        }
        StoreAction::Delete { task_id, yes } => {
            if !store.contains(&task_id) {
                return Err(WisdomError::UnknownTask(task_id).into());
            }
            if !yes {
                return Err(Failure(2, format!("refusing to delete {task_id} without --yes")));
            }
            store.remove(&task_id)?;
            store.save(&common.store)?;
            println!("deleted {task_id}");
        }
    }
    Ok(0)
}

fn first_difference(a: &str, b: &str) -> Option<usize> {
    let (mut x, mut y) = (a.lines(), b.lines());
    for n in 0.. {
        match (x.next(), y.next()) {
            (None, None) => return None,
            (l, r) if l != r => return Some(n),
            _ => {}
        }
    }
    unreachable!()
}

fn cmd_replay(run_dir: &Path, out: Option<&Path>) -> Result<i32, Failure> {
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let recordings = match Recordings::load(&run_dir.join(USAGE_FILE)) {
        Ok(r) if manifest_path.is_file() => r,
        Ok(_) => return Err(Failure(2, format!("{} has no manifest; record the run with --record", run_dir.display()))),
        Err(e @ JournalError::NoRecordings(_)) => return Err(Failure(2, e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let mut store = match WisdomStore::load(&run_dir.join(STORE_SNAPSHOT_DIR)) {
        Ok(s) => s,
        Err(_) => WisdomStore::new(manifest.config.embedding.dimension),
    };
    let out = out.map_or_else(|| run_dir.join("replay"), Path::to_path_buf);
    fs::create_dir_all(&out)?;
    let usage = out.join(USAGE_FILE);
    if usage.exists() {
        fs::remove_file(&usage)?;
    }
    let services = manifest
        .config
        .replay_services(JournalMode::Replay(Arc::new(recordings)), &usage)?;
    let result = run_task(&manifest.task, &manifest.config.run, &mut store, &services, Some(&out))?;
    for file in [EVENTS_FILE, TRACE_FILE] {
        let original = fs::read_to_string(run_dir.join(file))?;
        let replayed = fs::read_to_string(out.join(file))?;
        if let Some(n) = first_difference(&original, &replayed) {
            let what = if file == EVENTS_FILE { "event" } else { "trace row" };
            println!("ReplayDivergence: {file} differs at {what} {n}");
            return Ok(1);
        }
    }
    println!("replay identical: {} events", result.event_count);
    Ok(0)
}
