//! Acceptance suite: one PASS/FAIL line per criterion. Tolerances and time
//! limits are pinned below.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hcc::event_log::{EventKind, EventLog, QuarterCharCounter, ThreadTag, TokenCounter, TrajectoryId};
use hcc::gateway::{embed, parse_research_plan, template, GatewayError, HashingEmbedder, PromptName};
use hcc::orchestrator::run_task;
use hcc::sandbox::{execute, prepare_workspace, Environment, ExitStatus, SandboxConfig, SubprocessEnv};
use hcc::scenario::{Scenario, EMBEDDING_DIM};
use hcc::trace::{read_trace_csv, TraceSummary, EVENTS_FILE, TRACE_FILE};
use hcc::wisdom::{OverwritePolicy, PrefetchConfig, WisdomStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use common::{Driver, Injection};

const ORACLE_RUNS: u64 = 200;
const PROMOTION_RUNS: u64 = 100;
const PREFETCH_STORES: u64 = 100;
const PREFETCH_MAX_ENTRIES: usize = 500;
const SIMILARITY_TOLERANCE: f64 = 1e-9;
const SATURATION_MAX_RATIO: f64 = 0.5;
const SANDBOX_TIMEOUT_SEC: f64 = 1.0;
const SANDBOX_TIMEOUT_SLACK_SEC: f64 = 2.0;
const DETERMINISM_SEED: u64 = 42;

type Outcome = Result<String, String>;

fn criterion(n: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let elapsed = start.elapsed();
    let result = result.and_then(|d| {
        if elapsed > limit {
            Err(format!("{d}; took {elapsed:.1?}, limit {limit:?}"))
        } else {
            Ok(d)
        }
    });
    let line = match &result {
        Ok(detail) => format!("criterion {n} PASS [{elapsed:.2?}] {name}: {detail}"),
        Err(why) => format!("criterion {n} FAIL [{elapsed:.2?}] {name}: {why}"),
    };
    // Straight to the process stdout so the lines show without --nocapture.
    let _ = writeln!(std::io::stdout().lock(), "{line}");
    result.is_ok()
}

fn ensure(cond: bool, why: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(why())
    }
}

fn context_oracle() -> Outcome {
    let (mut steps, mut phases) = (0, 0);
    for seed in 0..ORACLE_RUNS {
        let mut d = Driver::new(seed);
        d.run(Injection::None).map_err(|e| format!("seed {seed}: {e}"))?;
        steps += d.stats.steps_checked;
        phases += d.stats.phases;
    }
    Ok(format!("{ORACLE_RUNS} runs, {phases} phases, {steps} steps equal to the oracle"))
}

fn promotion_lifecycle() -> Outcome {
    let (mut ok, mut failed) = (0, 0);
    for seed in 0..PROMOTION_RUNS {
        let mut d = Driver::new(10_000 + seed);
        d.run(Injection::Failures).map_err(|e| format!("seed {seed}: {e}"))?;
        ok += d.stats.promotions;
        failed += d.stats.failed_promotions;
    }
    ensure(failed > 0, || "no failure was injected".into())?;
    Ok(format!("{ok} promotions checked, {failed} injected failures left no trace"))
}

fn tokens(text: &str) -> usize {
    QuarterCharCounter.count(text)
}

fn saturation() -> Outcome {
    let s = Scenario::saturation();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let services = s.services(1);
    let mut store = WisdomStore::new(EMBEDDING_DIM);
    let r = run_task(&s.task(Path::new("data")), &s.run_config(), &mut store, &services, Some(dir.path()))
        .map_err(|e| e.to_string())?;
    ensure(r.aborted.is_none() && r.phases_completed == 4, || format!("run ended early: {r:?}"))?;
    let rows = read_trace_csv(&dir.path().join(TRACE_FILE)).map_err(|e| e.to_string())?;
    let summary = TraceSummary::of(&rows);

    // Closed form from the workload: the widest context is read by the last
    // code patch of the last phase. It holds the bootstrap prefix, all four
    // plans, three 500-token summaries, five finished trajectories and the
    // sketch of the sixth.
    const OUTPUT: usize = 3_000;
    const SUMMARY: usize = 500;
    let main = ThreadTag::Main;
    let bootstrap = tokens(&s.descriptor) + tokens(&Scenario::patch(main, 0)) + OUTPUT;
    let plans: usize = (1..=4).map(|p| tokens(&s.plan(p).to_json())).sum();
    let sketch = |i: usize, j: usize| {
        let plan = s.plan(4);
        let d = &plan.directions[i - 1];
        tokens(&format!("Direction {i}: {}\nSuggestion {j}: {}", d.title, d.suggestions[j - 1]))
    };
    let slots: Vec<(usize, usize)> = (1..=3).flat_map(|i| (1..=2).map(move |j| (i, j))).collect();
    let finished: usize = slots[..5]
        .iter()
        .map(|&(i, j)| sketch(i, j) + tokens(&Scenario::patch(ThreadTag::Trajectory(TrajectoryId::new(4, i, j)), 0)) + OUTPUT)
        .sum();
    let expected = bootstrap + plans + 3 * SUMMARY + finished + sketch(3, 2);

    ensure(summary.hcc_peak == expected, || {
        format!("peak cached context {} tokens, closed form {expected}", summary.hcc_peak)
    })?;
    ensure(r.peak_context_tokens == expected, || "result peak differs from the trace".into())?;
    let ratio = summary.peak_ratio();
    ensure(ratio <= SATURATION_MAX_RATIO, || format!("peak ratio {ratio:.4}"))?;
    Ok(format!(
        "peak {} of {} tokens (ratio {ratio:.4}), equal to the closed form",
        summary.hcc_peak, summary.naive_peak
    ))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn prefetch() -> Outcome {
    let mut checked = 0;
    for seed in 0..PREFETCH_STORES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..EMBEDDING_DIM).map(|_| rng.sample(StandardNormal)).collect() };
        let query = gauss(&mut rng);
        let n = rng.gen_range(1..=PREFETCH_MAX_ENTRIES);
        let mut store = WisdomStore::new(EMBEDDING_DIM);
        let mut raw = Vec::new();
        for k in 0..n {
            // Mixtures of the query and noise spread similarities over (-1, 1).
            let a: f64 = rng.gen_range(-1.0..1.0);
            let v: Vec<f64> = query.iter().zip(gauss(&mut rng)).map(|(q, e)| a * 4.0 * q + e).collect();
            let id = format!("t{k}");
            store.insert(&id, "d", &v, "w", OverwritePolicy::Reject).map_err(|e| e.to_string())?;
            raw.push((id, v));
        }
        let cfg = PrefetchConfig {
            delta: rng.gen_range(0.0..0.95),
            max_prefetch: rng.gen_range(1..=5),
        };
        let q = unit(&query);
        let mut brute: Vec<(String, f64)> = raw
            .iter()
            .map(|(id, v)| (id.clone(), unit(v).iter().zip(&q).map(|(a, b)| a * b).sum::<f64>()))
            .filter(|(_, s)| *s > cfg.delta)
            .collect();
        brute.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
        brute.truncate(cfg.max_prefetch);
        let got = store.prefetch(&query, cfg).map_err(|e| e.to_string())?;
        ensure(got.len() == brute.len(), || format!("store {seed}: {} hits, brute force {}", got.len(), brute.len()))?;
        for (g, (id, s)) in got.iter().zip(&brute) {
            ensure(&g.entry.task_id == id && (g.similarity - s).abs() <= SIMILARITY_TOLERANCE, || {
                format!("store {seed}: got {} {}, want {id} {s}", g.entry.task_id, g.similarity)
            })?;
        }

        // An entry sitting exactly on the threshold is excluded.
        let all = store.similarities(&query).map_err(|e| e.to_string())?;
        let pick = &all[rng.gen_range(0..all.len())];
        let edge = PrefetchConfig { delta: pick.similarity, max_prefetch: PREFETCH_MAX_ENTRIES };
        let hits = store.prefetch(&query, edge).map_err(|e| e.to_string())?;
        ensure(hits.iter().all(|h| h.entry.task_id != pick.entry.task_id), || {
            format!("store {seed}: entry at exactly delta was returned")
        })?;
        let above = all.iter().filter(|p| p.similarity > pick.similarity).count();
        ensure(hits.len() == above, || format!("store {seed}: {} hits above delta, want {above}", hits.len()))?;
        checked += 1;
    }
    Ok(format!("{checked} stores equal to brute force within {SIMILARITY_TOLERANCE:e}, threshold strict"))
}

fn hcc_bin(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_hcc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn determinism() -> Outcome {
    let s = Scenario::end_to_end();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let services = s.services(DETERMINISM_SEED);
        let mut store = WisdomStore::new(EMBEDDING_DIM);
        let r = run_task(&s.task(Path::new("data")), &s.run_config(), &mut store, &services, Some(&out))
            .map_err(|e| e.to_string())?;
        ensure(r.aborted.is_none() && r.phases_completed == 3, || format!("run ended early: {r:?}"))?;
        let solution = r.solution.ok_or("no solution")?;
        let log = EventLog::read_jsonl(&out.join(EVENTS_FILE)).map_err(|e| e.to_string())?;
        let valid = log.events().iter().any(|e| {
            e.kind == EventKind::TerminalOutput && e.metric == Some(solution.validation_metric) && e.submission_produced
        });
        ensure(valid, || "solution does not come from a valid run".into())?;
        let bootstrap_debug = log
            .events()
            .iter()
            .filter(|e| e.thread == ThreadTag::Main && e.kind == EventKind::CodePatch)
            .count();
        ensure(bootstrap_debug == 2, || format!("{bootstrap_debug} bootstrap attempts, want 2"))?;
        outputs.push((fs::read(out.join(EVENTS_FILE)).unwrap(), fs::read(out.join(TRACE_FILE)).unwrap()));
    }
    ensure(outputs[0] == outputs[1], || "repeated runs differ".into())?;

    s.write(&dir.path().join("tasks")).map_err(|e| e.to_string())?;
    fs::write(dir.path().join("hcc.toml"), s.config_toml(DETERMINISM_SEED)).map_err(|e| e.to_string())?;
    let o = hcc_bin(
        &["run", "tasks/toy-regression", "--config", "hcc.toml", "--out", "rec", "--record", "--store", "store"],
        dir.path(),
    );
    ensure(o.status.success(), || format!("recorded run failed: {}", String::from_utf8_lossy(&o.stderr)))?;
    let o = hcc_bin(&["replay", "rec"], dir.path());
    ensure(o.status.code() == Some(0), || format!("replay exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stdout)))?;
    Ok(format!("{} event bytes identical across runs; replay exit 0", outputs[0].0.len()))
}

/// Appendix typesetting to plain text: drop line-final `\\`, unescape
/// `\{ \} \_ \# \% \& \$`, strip trailing blanks.
fn untex(tex: &str) -> String {
    let lines: Vec<String> = tex
        .lines()
        .map(|l| {
            let l = l.trim_end();
            let l = l.strip_suffix("\\\\").unwrap_or(l);
            let mut out = String::new();
            let mut chars = l.chars().peekable();
            while let Some(c) = chars.next() {
                if c == '\\' && chars.peek().is_some_and(|n| "{}_#%&$".contains(*n)) {
                    continue;
                }
                out.push(c);
            }
            out
        })
        .collect();
    format!("{}\n", lines.join("\n").trim_end())
}

fn prompt_fidelity() -> Outcome {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    for name in PromptName::ALL {
        let stem = match name {
            PromptName::PromoteP1 => "promote_p1".to_string(),
            PromptName::PromoteP2 => "promote_p2".to_string(),
            other => other.to_string().to_lowercase(),
        };
        let file = golden.join(format!("{stem}.tex"));
        let tex = fs::read_to_string(&file).map_err(|e| format!("{}: {e}", file.display()))?;
        let want = untex(&tex);
        ensure(template(name) == want, || {
            let line = template(name).lines().zip(want.lines()).position(|(a, b)| a != b);
            format!("{name} differs from the golden text (first differing line {line:?})")
        })?;
    }
    let plan_text = untex(&fs::read_to_string(golden.join("plan.tex")).unwrap());
    let example = &plan_text[plan_text.find("Below is an example:").ok_or("no example in the plan prompt")?..];
    let plan = parse_research_plan(example).map_err(|e| format!("example rejected: {e}"))?;
    let shape: Vec<usize> = plan.directions.iter().map(|d| d.suggestions.len()).collect();
    ensure(shape == vec![2, 2, 2], || format!("example parsed as {shape:?}"))?;
    let cut = example.find("\"major direction 3\"").ok_or("no third direction")?;
    let two = format!("{}}}", example[..cut].trim_end().trim_end_matches(','));
    ensure(parse_research_plan(&two) == Err(GatewayError::TooFewDirections(2)), || {
        format!("two-direction plan not rejected: {two}")
    })?;
    Ok(format!("{} templates match; example plan parsed as 3x2; m = 2 rejected", PromptName::ALL.len()))
}

fn tree_hash(dir: &Path) -> String {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(dir).unwrap().to_string_lossy().as_bytes());
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn sandbox_contracts() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = tmp.path().join("data");
    fs::create_dir_all(data.join("images")).unwrap();
    fs::write(data.join("train.csv"), "x,y\n1,2\n").unwrap();
    fs::write(data.join("images/a.txt"), "pixels").unwrap();
    let cfg = SandboxConfig { timeout_sec: SANDBOX_TIMEOUT_SEC, ..SandboxConfig::default() };
    let ws = prepare_workspace(&data, &tmp.path().join("ws")).map_err(|e| e.to_string())?;

    let r = execute(&ws, "print('Validation metric: 0.1')\nprint('noise')\nprint('Validation metric: 0.8731')\n", "m.py", &cfg)
        .map_err(|e| e.to_string())?;
    ensure(r.exit_status == ExitStatus::Success && r.parsed_metric == Some(0.8731), || format!("metric run: {r:?}"))?;
    let r = execute(&ws, "print('done')\n", "none.py", &cfg).map_err(|e| e.to_string())?;
    ensure(r.parsed_metric.is_none() && !r.submission_produced, || format!("no-metric run: {r:?}"))?;

    let r = execute(&ws, "import time\nprint('Validation metric: 1', flush=True)\ntime.sleep(30)\n", "slow.py", &cfg)
        .map_err(|e| e.to_string())?;
    ensure(r.exit_status == ExitStatus::Timeout, || format!("sleeper not stopped: {r:?}"))?;
    ensure(r.duration_sec <= SANDBOX_TIMEOUT_SEC + SANDBOX_TIMEOUT_SLACK_SEC, || format!("timeout took {:.2}s", r.duration_sec))?;

    let env = SubprocessEnv::new(data.clone(), tmp.path().join("envs"), cfg.clone(), 1);
    let ws = env.prepare(ThreadTag::Main).map_err(|e| e.to_string())?;
    let before = tree_hash(&ws.input());
    let vandal = "import os\n\
        for p in ['input/train.csv', 'input/images/a.txt']:\n    try:\n        open(p, 'a').write('junk')\n    except OSError as e:\n        print(e)\n\
        try:\n    os.remove('input/train.csv')\nexcept OSError as e:\n    print(e)\n\
        open('input/extra.csv', 'w').write('x')\n\
        os.makedirs('submission', exist_ok=True)\nopen('submission/submission.csv', 'w').write('id\\n')\n";
    let r = env.execute(&ws, vandal, "vandal.py").map_err(|e| e.to_string())?;
    let after = tree_hash(&ws.input());
    ensure(before == after, || "input/ changed".into())?;
    ensure(r.submission_produced, || "submission not detected".into())?;
    ensure(tree_hash(&data) == tree_hash(&ws.input()), || "input/ differs from the data".into())?;
    Ok("metric, timeout, input hash and submission checks hold".into())
}

fn warm_start() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = dir.path().join("corpus");
    let tasks = [
        ("alpha", "Image classification of handwritten digits scored by accuracy."),
        ("beta", "Forecasting weekly retail sales for many stores scored by RMSE."),
        ("gamma", "Sentiment classification of movie review text scored by F1."),
    ];
    for (id, d) in tasks {
        Scenario::default().with_task(id, d).write(&corpus).map_err(|e| e.to_string())?;
    }
    let probe_descriptor = "Forecasting weekly retail sales for many stores and regions scored by RMSE.";
    let probe = Scenario::default().with_task("delta", probe_descriptor);
    probe.write(&dir.path().join("new")).map_err(|e| e.to_string())?;
    let seed = 5;
    fs::write(dir.path().join("hcc.toml"), Scenario::default().config_toml(seed)).unwrap();

    let o = hcc_bin(&["warm", "corpus", "--config", "hcc.toml", "--store", "store"], dir.path());
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into())?;
    let store = WisdomStore::load(&dir.path().join("store")).map_err(|e| e.to_string())?;
    ensure(store.len() == 3, || format!("store holds {}", store.len()))?;

    let delta = hcc::orchestrator::RunConfig::default().delta;
    let embedder = HashingEmbedder::new(EMBEDDING_DIM, seed);
    let q = embed(&embedder, probe_descriptor).map_err(|e| e.to_string())?;
    let sims: BTreeMap<String, f64> = store
        .similarities(&q)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|p| (p.entry.task_id.clone(), p.similarity))
        .collect();
    ensure(sims["beta"] > delta && sims["alpha"] <= delta && sims["gamma"] <= delta, || format!("similarities {sims:?}"))?;

    let o = hcc_bin(&["run", "new/delta", "--config", "hcc.toml", "--store", "store", "--out", "run"], dir.path());
    ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into())?;
    let log = EventLog::read_jsonl(&dir.path().join("run").join(EVENTS_FILE)).map_err(|e| e.to_string())?;
    let e0 = &log.events()[0].payload;
    let beta = store.get("beta").unwrap();
    let section = e0.split("Prior wisdom:").nth(1).ok_or("no wisdom in the first event")?;
    ensure(section.contains("[beta, similarity") && section.contains(beta.wisdom.trim()), || format!("first event: {e0}"))?;
    ensure(!section.contains("[alpha") && !section.contains("[gamma"), || format!("extra entries in: {e0}"))?;
    let after = WisdomStore::load(&dir.path().join("store")).map_err(|e| e.to_string())?;
    ensure(after.len() == 4, || format!("store holds {} after the fourth task", after.len()))?;
    Ok(format!("3-entry store; fourth task got only beta (similarity {:.3})", sims["beta"]))
}

#[test]
fn acceptance() {
    let results = [
        criterion(1, "context equals the brute-force oracle", Duration::from_secs(30), context_oracle),
        criterion(2, "promotion lifecycle", Duration::from_secs(10), promotion_lifecycle),
        criterion(3, "context saturation", Duration::from_secs(10), saturation),
        criterion(4, "prefetch correctness", Duration::from_secs(10), prefetch),
        criterion(5, "end-to-end determinism", Duration::from_secs(60), determinism),
        criterion(6, "prompt fidelity", Duration::from_secs(10), prompt_fidelity),
        criterion(7, "sandbox contracts", Duration::from_secs(60), sandbox_contracts),
        criterion(8, "warm-start round trip", Duration::from_secs(60), warm_start),
    ];
    let failed: Vec<usize> = results.iter().enumerate().filter(|(_, ok)| !**ok).map(|(n, _)| n + 1).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
