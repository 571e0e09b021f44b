//! Execution environment: isolated workspaces and script runs.
//!
//! A workspace has three directories. `input/` holds a read-only copy of the
//! task data, `working/` receives the script and scratch files, and a run
//! counts as producing a submission when `submission/submission.csv` exists
//! afterwards. Scripts run with the workspace root as working directory, in
//! their own process group so a timeout kills every child they spawned.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, OnceLock};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::event_log::{EventKind, PendingEvent, ThreadTag};
use crate::limit::Semaphore;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("i/o failure at {path}: {source}")]
    IoFailure { path: PathBuf, source: io::Error },
    #[error("could not run the script: {0}")]
    SandboxFailure(String),
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> SandboxError + '_ {
    move |source| SandboxError::IoFailure {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
    /// Thread the workspace serves.
    pub thread: ThreadTag,
}

impl Workspace {
    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            thread: ThreadTag::Main,
        }
    }

    pub fn for_thread(mut self, thread: ThreadTag) -> Self {
        self.thread = thread;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn input(&self) -> PathBuf {
        self.root.join("input")
    }

    pub fn working(&self) -> PathBuf {
        self.root.join("working")
    }

    pub fn submission(&self) -> PathBuf {
        self.root.join("submission")
    }

    pub fn submission_file(&self) -> PathBuf {
        self.submission().join("submission.csv")
    }
}

fn copy_tree(from: &Path, to: &Path) -> Result<(), SandboxError> {
    fs::create_dir_all(to).map_err(io_at(to))?;
    for entry in fs::read_dir(from).map_err(io_at(from))? {
        let entry = entry.map_err(io_at(from))?;
        let target = to.join(entry.file_name());
        if entry.file_type().map_err(io_at(&entry.path()))?.is_dir() {
            copy_tree(&entry.path(), &target)?;
        } else {
            fs::copy(entry.path(), &target).map_err(io_at(&target))?;
            let mut perms = fs::metadata(&target).map_err(io_at(&target))?.permissions();
            perms.set_readonly(true);
            fs::set_permissions(&target, perms).map_err(io_at(&target))?;
        }
    }
    Ok(())
}

fn reset_dir(dir: &Path) -> Result<(), SandboxError> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::create_dir_all(dir).map_err(io_at(dir))
}

/// Creates (or resets) the workspace at `root` for the data in `data_dir`.
/// `working/` and `submission/` are emptied; an existing `input/` is kept.
pub fn prepare_workspace(data_dir: &Path, root: &Path) -> Result<Workspace, SandboxError> {
    if !data_dir.is_dir() {
        return Err(SandboxError::IoFailure {
            path: data_dir.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "task data directory does not exist"),
        });
    }
    let ws = Workspace::at(root);
    if !ws.input().is_dir() {
        copy_tree(data_dir, &ws.input())?;
    }
    reset_dir(&ws.working())?;
    reset_dir(&ws.submission())?;
    Ok(ws)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitStatus {
    Success,
    NonzeroExit,
    Timeout,
    Crashed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ExecutionReport {
    pub exit_status: ExitStatus,
    pub exit_code: Option<i32>,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub parsed_metric: Option<f64>,
    pub submission_produced: bool,
    pub duration_sec: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", default)]
pub struct SandboxConfig {
    pub interpreter: String,
    pub timeout_sec: f64,
    pub tail_lines: usize,
    pub tail_chars: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: "python3".into(),
            timeout_sec: 3600.0,
            tail_lines: 200,
            tail_chars: 16_000,
        }
    }
}

fn metric_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"Validation metric:\s*(-?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)").expect("valid regex")
    })
}

/// Score from the last line that reports one.
pub fn parse_metric(stdout: &str) -> Option<f64> {
    stdout
        .lines()
        .rev()
        .find_map(|line| metric_re().captures(line))
        .and_then(|c| c[1].parse().ok())
}

/// Last `max_lines` lines, then at most the last `max_chars` characters.
pub fn tail(text: &str, max_lines: usize, max_chars: usize) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let kept = lines[lines.len().saturating_sub(max_lines)..].join("\n");
    let count = kept.chars().count();
    if count <= max_chars {
        return kept;
    }
    kept.chars().skip(count - max_chars).collect()
}

fn read_all(mut pipe: impl Read + Send + 'static) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = pipe.read_to_end(&mut buf);
        String::from_utf8_lossy(&buf).into_owned()
    })
}

/// Writes `code` to `working/{script_name}` and runs it.
///
/// A script that fails is a report, not an error; only a failure to start
/// the interpreter is an error.
pub fn execute(
    ws: &Workspace,
    code: &str,
    script_name: &str,
    cfg: &SandboxConfig,
) -> Result<ExecutionReport, SandboxError> {
    let script = ws.working().join(script_name);
    fs::write(&script, code).map_err(io_at(&script))?;
    let submission = ws.submission_file();
    if submission.exists() {
        fs::remove_file(&submission).map_err(io_at(&submission))?;
    }
    let started = Instant::now();
    let mut child = Command::new(&cfg.interpreter)
        .arg(Path::new("working").join(script_name))
        .current_dir(ws.root())
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0)
        .spawn()
        .map_err(|e| SandboxError::SandboxFailure(format!("{}: {e}", cfg.interpreter)))?;
    let stdout = read_all(child.stdout.take().expect("piped stdout"));
    let stderr = read_all(child.stderr.take().expect("piped stderr"));
    let limit = Duration::from_secs_f64(cfg.timeout_sec.max(0.0));
    let waited = child
        .wait_timeout(limit)
        .map_err(|e| SandboxError::SandboxFailure(e.to_string()))?;
    let (exit_status, exit_code) = match waited {
        None => {
            // SAFETY: killpg only sends a signal to the child's own group.
            unsafe {
                libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
            }
            let _ = child.wait();
            (ExitStatus::Timeout, None)
        }
        Some(status) if status.success() => (ExitStatus::Success, Some(0)),
        Some(status) => match status.code() {
            Some(code) => (ExitStatus::NonzeroExit, Some(code)),
            None => (ExitStatus::Crashed, status.signal().map(|s| -s)),
        },
    };
    let duration_sec = started.elapsed().as_secs_f64();
    let stdout = stdout.join().unwrap_or_default();
    let stderr = stderr.join().unwrap_or_default();
    Ok(ExecutionReport {
        exit_status,
        exit_code,
        parsed_metric: parse_metric(&stdout),
        stdout_tail: tail(&stdout, cfg.tail_lines, cfg.tail_chars),
        stderr_tail: tail(&stderr, cfg.tail_lines, cfg.tail_chars),
        submission_produced: submission.is_file(),
        duration_sec,
    })
}

/// Environment event for a finished run. The metric is copied onto the event
/// only for successful runs.
pub fn report_to_event(report: &ExecutionReport) -> PendingEvent {
    let head = match report.exit_status {
        ExitStatus::Success => "EXECUTION SUCCEEDED".to_string(),
        ExitStatus::NonzeroExit => match report.exit_code {
            Some(code) => format!("EXECUTION FAILED (exit code {code})"),
            None => "EXECUTION FAILED".to_string(),
        },
        ExitStatus::Timeout => "EXECUTION TIMED OUT".to_string(),
        ExitStatus::Crashed => "EXECUTION CRASHED".to_string(),
    };
    let metric = match report.parsed_metric {
        Some(m) => format!("Validation metric: {m}"),
        None => "Validation metric: none".to_string(),
    };
    let submission = if report.submission_produced {
        "produced"
    } else {
        "missing"
    };
    let payload = format!(
        "{head} after {:.2}s\n{metric}\nSubmission: {submission}\n--- stdout (tail) ---\n{}\n--- stderr (tail) ---\n{}",
        report.duration_sec, report.stdout_tail, report.stderr_tail
    );
    let success = report.exit_status == ExitStatus::Success;
    PendingEvent::environment(EventKind::TerminalOutput, payload).with_result(
        report.parsed_metric.filter(|_| success),
        report.submission_produced,
    )
}

/// Where and how candidate scripts run.
pub trait Environment: Send + Sync {
    fn prepare(&self, thread: ThreadTag) -> Result<Workspace, SandboxError>;
    fn execute(&self, ws: &Workspace, code: &str, script_name: &str) -> Result<ExecutionReport, SandboxError>;
}

/// Size and modification time of every file under `input/`.
pub type InputFingerprint = BTreeMap<PathBuf, (u64, Option<SystemTime>)>;

fn walk_files(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> Result<(), SandboxError> {
    for entry in fs::read_dir(dir).map_err(io_at(dir))? {
        let path = entry.map_err(io_at(dir))?.path();
        if path.is_dir() {
            walk_files(&path, base, out)?;
        } else {
            out.push(path.strip_prefix(base).expect("under base").to_path_buf());
        }
    }
    Ok(())
}

pub fn fingerprint_input(ws: &Workspace) -> Result<InputFingerprint, SandboxError> {
    let input = ws.input();
    let mut files = Vec::new();
    walk_files(&input, &input, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let path = input.join(&rel);
            let meta = fs::symlink_metadata(&path).map_err(io_at(&path))?;
            Ok((rel, (meta.len(), meta.modified().ok())))
        })
        .collect()
}

/// Puts `input/` back the way `before` saw it: files the script added are
/// removed and changed or deleted files are copied again from `data_dir`.
/// Returns whether anything had to be repaired. Permissions alone do not
/// stop a script running as root.
pub fn restore_input(ws: &Workspace, data_dir: &Path, before: &InputFingerprint) -> Result<bool, SandboxError> {
    let after = fingerprint_input(ws)?;
    if &after == before {
        return Ok(false);
    }
    let input = ws.input();
    for rel in after.keys().filter(|k| !before.contains_key(*k)) {
        let path = input.join(rel);
        fs::remove_file(&path).map_err(io_at(&path))?;
    }
    for (rel, fp) in before {
        if after.get(rel) != Some(fp) {
            let target = input.join(rel);
            if target.exists() {
                fs::remove_file(&target).map_err(io_at(&target))?;
            }
            if let Some(parent) = target.parent() {
                fs::create_dir_all(parent).map_err(io_at(parent))?;
            }
            fs::copy(data_dir.join(rel), &target).map_err(io_at(&target))?;
            let mut perms = fs::metadata(&target).map_err(io_at(&target))?.permissions();
            perms.set_readonly(true);
            fs::set_permissions(&target, perms).map_err(io_at(&target))?;
        }
    }
    Ok(true)
}

/// Real subprocess execution, one workspace directory per thread.
#[derive(Debug, Clone)]
pub struct SubprocessEnv {
    pub data_dir: PathBuf,
    pub workspaces: PathBuf,
    pub config: SandboxConfig,
    limit: Arc<Semaphore>,
}

impl SubprocessEnv {
    pub fn new(data_dir: PathBuf, workspaces: PathBuf, config: SandboxConfig, max_concurrent: usize) -> Self {
        Self {
            data_dir,
            workspaces,
            config,
            limit: Arc::new(Semaphore::new(max_concurrent)),
        }
    }
}

impl Environment for SubprocessEnv {
    fn prepare(&self, thread: ThreadTag) -> Result<Workspace, SandboxError> {
        Ok(prepare_workspace(&self.data_dir, &self.workspaces.join(thread.to_string()))?.for_thread(thread))
    }

    fn execute(&self, ws: &Workspace, code: &str, script_name: &str) -> Result<ExecutionReport, SandboxError> {
        let _permit = self.limit.acquire();
        let before = fingerprint_input(ws)?;
        let mut report = execute(ws, code, script_name, &self.config)?;
        if restore_input(ws, &self.data_dir, &before)? {
            log::warn!("{}: script modified input/; restored", ws.thread);
            report
                .stderr_tail
                .push_str("\n[sandbox] the script modified input/; the original files were restored");
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct MockRow {
    /// Matches when the code contains this text.
    pub marker: String,
    pub status: ExitStatus,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
    #[serde(default)]
    pub submission: bool,
    #[serde(default)]
    pub duration_sec: f64,
}

impl MockRow {
    pub fn success(marker: impl Into<String>, metric: f64) -> Self {
        Self {
            marker: marker.into(),
            status: ExitStatus::Success,
            stdout: format!("Validation metric: {metric}"),
            stderr: String::new(),
            submission: true,
            duration_sec: 1.0,
        }
    }

    pub fn failure(marker: impl Into<String>, stderr: impl Into<String>) -> Self {
        Self {
            marker: marker.into(),
            status: ExitStatus::NonzeroExit,
            stdout: String::new(),
            stderr: stderr.into(),
            submission: false,
            duration_sec: 1.0,
        }
    }
}

/// Table-driven environment: the first row whose marker occurs in the code
/// decides the report. Nothing touches the disk.
#[derive(Debug, Clone, Default)]
pub struct MockEnv {
    pub rows: Vec<MockRow>,
}

impl MockEnv {
    pub fn new(rows: Vec<MockRow>) -> Self {
        Self { rows }
    }
}

impl Environment for MockEnv {
    fn prepare(&self, thread: ThreadTag) -> Result<Workspace, SandboxError> {
        Ok(Workspace::at(Path::new("mock").join(thread.to_string())).for_thread(thread))
    }

    fn execute(&self, _ws: &Workspace, code: &str, _script_name: &str) -> Result<ExecutionReport, SandboxError> {
        let row = self
            .rows
            .iter()
            .find(|r| code.contains(&r.marker))
            .ok_or_else(|| SandboxError::SandboxFailure("no mock row matches the code".into()))?;
        Ok(ExecutionReport {
            exit_status: row.status,
            exit_code: match row.status {
                ExitStatus::Success => Some(0),
                ExitStatus::NonzeroExit => Some(1),
                _ => None,
            },
            stdout_tail: row.stdout.clone(),
            stderr_tail: row.stderr.clone(),
            parsed_metric: parse_metric(&row.stdout),
            submission_produced: row.submission,
            duration_sec: row.duration_sec,
        })
    }
}
