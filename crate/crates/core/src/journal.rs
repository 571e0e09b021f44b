//! Single choke point for every nondeterministic input of a run.
//!
//! Model completions, embeddings, execution reports, timestamps and budget
//! checks all pass through [`Services`]. Each call is keyed by its channel,
//! its thread and a per-thread sequence number, which stays stable however
//! the parallel trajectories interleave. Every call leaves a usage line in
//! `usage.jsonl`; in record mode the line also carries the returned value,
//! and a replay answers each call from those values instead of the backends.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, LineWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, TimeZone, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event_log::ThreadTag;
use crate::gateway::{self, Completion, Embedder, GatewayError, GenerationRequest, Generator, PromptName};
use crate::limit::Semaphore;
use crate::sandbox::{Environment, ExecutionReport, SandboxError, Workspace};

#[derive(Debug, Error)]
pub enum JournalError {
    #[error("{0} holds no recorded responses")]
    NoRecordings(String),
    #[error("corrupt journal at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Channel {
    Generation,
    Embedding,
    Execution,
    Clock,
    Deadline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct Entry {
    channel: Channel,
    thread: String,
    seq: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prompt_name: Option<PromptName>,
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    output_tokens: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<serde_json::Value>,
}

type Key = (Channel, String, usize);

/// Values captured by a recording run.
#[derive(Debug, Clone, Default)]
pub struct Recordings {
    values: HashMap<Key, serde_json::Value>,
}

impl Recordings {
    pub fn load(path: &Path) -> Result<Self, JournalError> {
        let text = match fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(JournalError::NoRecordings(path.display().to_string()))
            }
            Err(e) => return Err(e.into()),
        };
        let mut values = HashMap::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let entry: Entry = serde_json::from_str(line).map_err(|e| JournalError::Corrupt {
                line: n + 1,
                reason: e.to_string(),
            })?;
            if let Some(value) = entry.value {
                values.insert((entry.channel, entry.thread, entry.seq), value);
            }
        }
        if values.is_empty() {
            return Err(JournalError::NoRecordings(path.display().to_string()));
        }
        Ok(Self { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub enum JournalMode {
    #[default]
    Off,
    Record,
    Replay(Arc<Recordings>),
}

/// Sequencing and persistence of journal lines.
#[derive(Debug)]
pub struct Journal {
    mode: JournalMode,
    sink: Option<Mutex<LineWriter<File>>>,
    counters: Mutex<HashMap<(Channel, ThreadTag), usize>>,
}

impl Journal {
    /// A journal that keeps no file.
    pub fn detached(mode: JournalMode) -> Self {
        Self {
            mode,
            sink: None,
            counters: Mutex::new(HashMap::new()),
        }
    }

    /// Appends usage lines to `path`.
    pub fn to_file(mode: JournalMode, path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            sink: Some(Mutex::new(LineWriter::new(file))),
            ..Self::detached(mode)
        })
    }

    pub fn mode(&self) -> &JournalMode {
        &self.mode
    }

    fn next_seq(&self, channel: Channel, thread: ThreadTag) -> usize {
        let mut counters = self.counters.lock().expect("journal lock");
        let slot = counters.entry((channel, thread)).or_insert(0);
        *slot += 1;
        *slot - 1
    }

    fn write(&self, entry: &Entry) {
        if let Some(sink) = &self.sink {
            let line = serde_json::to_string(entry).expect("journal entries serialize");
            let mut sink = sink.lock().expect("journal lock");
            if let Err(e) = writeln!(sink, "{line}") {
                log::warn!("could not write usage line: {e}");
            }
        }
    }

    /// Runs `live` unless replaying, and journals the outcome.
    fn call<T, E>(
        &self,
        channel: Channel,
        thread: ThreadTag,
        prompt_name: Option<PromptName>,
        live: impl FnOnce() -> Result<T, E>,
        missing: impl FnOnce(String) -> E,
        usage: impl Fn(&T) -> (usize, usize),
    ) -> Result<T, E>
    where
        T: Serialize + DeserializeOwned,
        E: Serialize + DeserializeOwned + ToString,
    {
        let seq = self.next_seq(channel, thread);
        let key = (channel, thread.to_string(), seq);
        let result = match &self.mode {
            JournalMode::Replay(rec) => match rec.values.get(&key) {
                Some(v) => serde_json::from_value::<Result<T, E>>(v.clone())
                    .unwrap_or_else(|e| Err(missing(format!("unreadable recording: {e}")))),
                None => Err(missing(format!(
                    "no recording for {channel:?} call {seq} on thread {thread}"
                ))),
            },
            _ => live(),
        };
        let (prompt_tokens, output_tokens) = result.as_ref().map(&usage).unwrap_or((0, 0));
        let value = match self.mode {
            JournalMode::Record => serde_json::to_value(&result).ok(),
            _ => None,
        };
        self.write(&Entry {
            channel,
            thread: key.1,
            seq,
            prompt_name,
            prompt_tokens,
            output_tokens,
            error: result.as_ref().err().map(ToString::to_string),
            value,
        });
        result
    }
}

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Always reports the same instant.
#[derive(Debug, Clone, Copy)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    /// An instant in 2024 derived from `seed`, so runs with different seeds
    /// are told apart by their timestamps.
    pub fn from_seed(seed: u64) -> Self {
        let base = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).single().expect("valid date");
        Self(base + chrono::Duration::seconds((seed % 31_536_000) as i64))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

/// Wall-clock budget plus an external cancel flag.
#[derive(Debug, Clone)]
pub struct Deadline {
    started: Instant,
    budget: Option<Duration>,
    cancel: Arc<AtomicBool>,
}

impl Deadline {
    pub fn new(budget: Option<Duration>) -> Self {
        Self {
            started: Instant::now(),
            budget,
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(None)
    }

    pub fn cancel_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.cancel)
    }

    pub fn cancel(&self) {
        self.cancel.store(true, Ordering::SeqCst);
    }

    pub fn expired(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
            || self.budget.is_some_and(|b| self.started.elapsed() >= b)
    }
}

/// Backend that refuses every call; stands in for the real backends while
/// replaying.
#[derive(Debug, Clone, Copy, Default)]
pub struct Offline {
    pub dimension: usize,
}

impl Generator for Offline {
    fn generate(&self, _: &GenerationRequest) -> Result<Completion, GatewayError> {
        Err(GatewayError::failure("no generation backend"))
    }
}

impl Embedder for Offline {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_raw(&self, _: &str) -> Result<Vec<f64>, GatewayError> {
        Err(GatewayError::failure("no embedding backend"))
    }
}

impl Environment for Offline {
    fn prepare(&self, thread: ThreadTag) -> Result<Workspace, SandboxError> {
        Ok(Workspace::at(Path::new("offline").join(thread.to_string())).for_thread(thread))
    }

    fn execute(&self, _: &Workspace, _: &str, _: &str) -> Result<ExecutionReport, SandboxError> {
        Err(SandboxError::SandboxFailure("no execution backend".into()))
    }
}

/// Everything a run talks to, behind the journal.
pub struct Services {
    generator: Box<dyn Generator>,
    embedder: Box<dyn Embedder>,
    env: Box<dyn Environment>,
    clock: Box<dyn Clock>,
    pub deadline: Deadline,
    journal: Journal,
    requests: Semaphore,
}

impl Services {
    pub fn new(
        generator: Box<dyn Generator>,
        embedder: Box<dyn Embedder>,
        env: Box<dyn Environment>,
        clock: Box<dyn Clock>,
    ) -> Self {
        Self {
            generator,
            embedder,
            env,
            clock,
            deadline: Deadline::unlimited(),
            journal: Journal::detached(JournalMode::Off),
            requests: Semaphore::new(8),
        }
    }

    pub fn with_journal(mut self, journal: Journal) -> Self {
        self.journal = journal;
        self
    }

    pub fn with_deadline(mut self, deadline: Deadline) -> Self {
        self.deadline = deadline;
        self
    }

    pub fn with_request_limit(mut self, permits: usize) -> Self {
        self.requests = Semaphore::new(permits);
        self
    }

    pub fn journal(&self) -> &Journal {
        &self.journal
    }

    pub fn prepare(&self, thread: ThreadTag) -> Result<Workspace, SandboxError> {
        self.env.prepare(thread)
    }

    pub fn execute(&self, ws: &Workspace, code: &str, script_name: &str) -> Result<ExecutionReport, SandboxError> {
        self.journal.call(
            Channel::Execution,
            ws.thread,
            None,
            || self.env.execute(ws, code, script_name).map_err(|e| e.to_string()),
            |why| why,
            |_| (0, 0),
        )
        .map_err(SandboxError::SandboxFailure)
    }

    pub fn now(&self, thread: ThreadTag) -> DateTime<Utc> {
        let clock = &self.clock;
        self.journal
            .call::<DateTime<Utc>, String>(Channel::Clock, thread, None, || Ok(clock.now()), |why| why, |_| (0, 0))
            .unwrap_or_else(|why| {
                log::warn!("{why}");
                DateTime::<Utc>::UNIX_EPOCH
            })
    }

    pub fn expired(&self, thread: ThreadTag) -> bool {
        self.journal
            .call::<bool, String>(Channel::Deadline, thread, None, || Ok(self.deadline.expired()), |why| why, |_| (0, 0))
            .unwrap_or(true)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.journal.call(
            Channel::Embedding,
            ThreadTag::Main,
            None,
            || gateway::embed(self.embedder.as_ref(), text),
            GatewayError::failure,
            |_| (0, 0),
        )
    }
}

impl Generator for Services {
    fn generate(&self, request: &GenerationRequest) -> Result<Completion, GatewayError> {
        self.journal.call(
            Channel::Generation,
            request.thread,
            Some(request.prompt_name),
            || {
                let _permit = self.requests.acquire();
                gateway::generate(self.generator.as_ref(), request)
            },
            GatewayError::failure,
            |c: &Completion| (c.prompt_tokens, c.output_tokens),
        )
    }
}

impl Embedder for Services {
    fn dimension(&self) -> usize {
        self.embedder.dimension()
    }

    fn embed_raw(&self, text: &str) -> Result<Vec<f64>, GatewayError> {
        self.embed(text)
    }
}
