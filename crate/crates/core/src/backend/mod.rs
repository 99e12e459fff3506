//! Task backend: leases tasks to workers so no two test the same task at
//! once. State is an append-only JSONL event log replayed at startup.

pub mod client;
pub mod http;

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::GeneratorConfig;
use crate::surface::ApiRef;

pub use client::BackendClient;
pub use http::BackendServer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    VulnHunt,
    PermMap,
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Open,
    Claimed,
    Done,
    Failed,
}

impl std::str::FromStr for TaskStatus {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Other(format!("unknown task status `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub client_id: String,
    pub worker_id: String,
    /// Milliseconds since the Unix epoch.
    pub granted_at: u64,
    pub ttl_s: f64,
}

impl Lease {
    pub fn expiry_ms(&self) -> u64 {
        self.granted_at + (self.ttl_s * 1000.0).round() as u64
    }
}

/// What ingest accepts: a task without status or lease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub api_refs: Vec<ApiRef>,
    pub analysis: Analysis,
    pub budget_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    /// Replay tasks: input log to replay.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: String,
    pub api_refs: Vec<ApiRef>,
    pub analysis: Analysis,
    pub budget_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<String>,
    pub status: TaskStatus,
    pub lease: Option<Lease>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_ref: Option<String>,
}

impl Task {
    pub fn from_spec(s: TaskSpec) -> Self {
        Task {
            task_id: s.task_id,
            api_refs: s.api_refs,
            analysis: s.analysis,
            budget_s: s.budget_s,
            generator: s.generator,
            inputs: s.inputs,
            status: TaskStatus::Open,
            lease: None,
            report_ref: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskFile {
    pub tasks: Vec<TaskSpec>,
}

impl TaskFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        if text.trim().is_empty() {
            return Ok(TaskFile { tasks: Vec::new() });
        }
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn validate_specs(specs: &[TaskSpec]) -> Result<()> {
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for s in specs {
        if s.task_id.is_empty() {
            problems.push("empty task_id".to_string());
        }
        if !seen.insert(s.task_id.as_str()) {
            problems.push(format!("duplicate task_id `{}`", s.task_id));
        }
        if s.api_refs.is_empty() {
            problems.push(format!("task `{}` has no api_refs", s.task_id));
        }
        if s.budget_s.is_nan() || s.budget_s < 0.0 {
            problems.push(format!("task `{}` has budget_s {}", s.task_id, s.budget_s));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        crate::target::log::now_us() / 1000
    }
}

/// Settable clock for tests.
#[derive(Clone, Default)]
pub struct ManualClock(Arc<AtomicU64>);

impl ManualClock {
    pub fn new(ms: u64) -> Self {
        ManualClock(Arc::new(AtomicU64::new(ms)))
    }
    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    Ingest {
        task: TaskSpec,
    },
    Claim {
        task_id: String,
        lease: Lease,
    },
    Renew {
        task_id: String,
        worker_id: String,
        granted_at: u64,
        ttl_s: f64,
    },
    Complete {
        task_id: String,
        worker_id: String,
        status: TaskStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        report_ref: Option<String>,
    },
    Expire {
        task_id: String,
        worker_id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub ts: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

pub fn load_events(path: &Path) -> Result<Vec<Event>> {
    let f = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(Error::file(path, e)),
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::file(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Event>(&line) {
            Ok(ev) => out.push(ev),
            // A torn final line from a crash mid-write is dropped.
            Err(e) => log::warn!("{}:{}: skipping unreadable event: {e}", path.display(), i + 1),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct StoreConfig {
    /// Lease TTL as a multiple of the task budget.
    pub ttl_factor: f64,
    pub min_ttl_s: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            ttl_factor: 2.0,
            min_ttl_s: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    task: Task,
    /// Worker whose lease ran out while the task was claimed.
    expired_from: Option<String>,
}

/// Task state plus its event log. Not thread-safe by design: the HTTP
/// layer funnels every call through one writer thread.
pub struct TaskStore {
    order: Vec<String>,
    tasks: BTreeMap<String, Entry>,
    log_path: Option<PathBuf>,
    log: Option<File>,
    clock: Arc<dyn Clock>,
    cfg: StoreConfig,
    seq: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    pub open: usize,
    pub claimed: usize,
    pub done: usize,
    pub failed: usize,
}

impl TaskStore {
    pub fn in_memory(clock: Arc<dyn Clock>, cfg: StoreConfig) -> Self {
        TaskStore {
            order: Vec::new(),
            tasks: BTreeMap::new(),
            log_path: None,
            log: None,
            clock,
            cfg,
            seq: 0,
        }
    }

    /// Opens (or creates) the event log at `path` and replays it.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, cfg: StoreConfig) -> Result<Self> {
        let events = load_events(path)?;
        let mut s = Self::in_memory(clock, cfg);
        for ev in &events {
            s.apply(&ev.kind);
            s.seq = s.seq.max(ev.seq);
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::file(path, e))?;
        s.log = Some(f);
        s.log_path = Some(path.to_path_buf());
        Ok(s)
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    fn apply(&mut self, kind: &EventKind) {
        match kind {
            EventKind::Ingest { task } => {
                self.order.push(task.task_id.clone());
                self.tasks.insert(
                    task.task_id.clone(),
                    Entry {
                        task: Task::from_spec(task.clone()),
                        expired_from: None,
                    },
                );
            }
            EventKind::Claim { task_id, lease } => {
                if let Some(e) = self.tasks.get_mut(task_id) {
                    e.task.status = TaskStatus::Claimed;
                    e.task.lease = Some(lease.clone());
                    e.expired_from = None;
                }
            }
            EventKind::Renew {
                task_id,
                granted_at,
                ttl_s,
                ..
            } => {
                if let Some(l) = self.tasks.get_mut(task_id).and_then(|e| e.task.lease.as_mut()) {
                    l.granted_at = *granted_at;
                    l.ttl_s = *ttl_s;
                }
            }
            EventKind::Complete {
                task_id,
                status,
                report_ref,
                ..
            } => {
                if let Some(e) = self.tasks.get_mut(task_id) {
                    e.task.status = *status;
                    e.task.lease = None;
                    e.task.report_ref = report_ref.clone();
                }
            }
            EventKind::Expire { task_id, worker_id } => {
                if let Some(e) = self.tasks.get_mut(task_id) {
                    e.task.status = TaskStatus::Open;
                    e.task.lease = None;
                    e.expired_from = Some(worker_id.clone());
                }
            }
        }
    }

    fn record(&mut self, kind: EventKind) -> Result<()> {
        self.seq += 1;
        let ev = Event {
            seq: self.seq,
            ts: self.clock.now_ms(),
            kind,
        };
        if let Some(f) = &mut self.log {
            let mut line = serde_json::to_vec(&ev)?;
            line.push(b'\n');
            f.write_all(&line)?;
        }
        self.apply(&ev.kind);
        Ok(())
    }

    /// Returns expired leases to Open, logging an expire event for each.
    pub fn sweep(&mut self) -> Result<usize> {
        let now = self.clock.now_ms();
        let due: Vec<(String, String)> = self
            .tasks
            .values()
            .filter(|e| e.task.status == TaskStatus::Claimed)
            .filter_map(|e| {
                let l = e.task.lease.as_ref()?;
                (now >= l.expiry_ms()).then(|| (e.task.task_id.clone(), l.worker_id.clone()))
            })
            .collect();
        for (task_id, worker_id) in &due {
            self.record(EventKind::Expire {
                task_id: task_id.clone(),
                worker_id: worker_id.clone(),
            })?;
        }
        Ok(due.len())
    }

    /// All-or-nothing: any invalid or already-known id rejects the file.
    pub fn ingest(&mut self, specs: Vec<TaskSpec>) -> Result<usize> {
        validate_specs(&specs)?;
        let clash: Vec<String> = specs
            .iter()
            .filter(|s| self.tasks.contains_key(&s.task_id))
            .map(|s| format!("duplicate task_id `{}` (already ingested)", s.task_id))
            .collect();
        if !clash.is_empty() {
            return Err(Error::Validation(clash));
        }
        let n = specs.len();
        for task in specs {
            self.record(EventKind::Ingest { task })?;
        }
        Ok(n)
    }

    /// First Open task in ingest order matching the filter, leased to
    /// `worker_id`.
    pub fn claim(
        &mut self,
        client_id: &str,
        worker_id: &str,
        analysis: Option<Analysis>,
    ) -> Result<Option<Task>> {
        self.sweep()?;
        let pick = self.order.iter().find(|id| {
            let t = &self.tasks[*id].task;
            t.status == TaskStatus::Open && analysis.is_none_or(|a| a == t.analysis)
        });
        let Some(task_id) = pick.cloned() else {
            return Ok(None);
        };
        let budget = self.tasks[&task_id].task.budget_s;
        let lease = Lease {
            client_id: client_id.to_string(),
            worker_id: worker_id.to_string(),
            granted_at: self.clock.now_ms(),
            ttl_s: (budget * self.cfg.ttl_factor).max(self.cfg.min_ttl_s),
        };
        self.record(EventKind::Claim {
            task_id: task_id.clone(),
            lease,
        })?;
        Ok(Some(self.tasks[&task_id].task.clone()))
    }

    fn check_holder(&mut self, task_id: &str, worker_id: &str) -> Result<()> {
        self.sweep()?;
        let e = self
            .tasks
            .get(task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))?;
        match (&e.task.status, &e.task.lease) {
            (TaskStatus::Claimed, Some(l)) if l.worker_id == worker_id => Ok(()),
            (TaskStatus::Claimed, Some(l)) => Err(Error::LeaseMismatch {
                task_id: task_id.to_string(),
                holder: l.worker_id.clone(),
                worker_id: worker_id.to_string(),
            }),
            (TaskStatus::Open, _) if e.expired_from.as_deref() == Some(worker_id) => {
                Err(Error::LeaseExpired(task_id.to_string()))
            }
            _ => Err(Error::NotClaimed(task_id.to_string())),
        }
    }

    /// Extends a live lease by a fresh TTL from now.
    pub fn renew(&mut self, task_id: &str, worker_id: &str) -> Result<Task> {
        self.check_holder(task_id, worker_id)?;
        let budget = self.tasks[task_id].task.budget_s;
        self.record(EventKind::Renew {
            task_id: task_id.to_string(),
            worker_id: worker_id.to_string(),
            granted_at: self.clock.now_ms(),
            ttl_s: (budget * self.cfg.ttl_factor).max(self.cfg.min_ttl_s),
        })?;
        Ok(self.tasks[task_id].task.clone())
    }

    pub fn complete(
        &mut self,
        task_id: &str,
        worker_id: &str,
        status: TaskStatus,
        report_ref: Option<String>,
    ) -> Result<Task> {
        if !matches!(status, TaskStatus::Done | TaskStatus::Failed) {
            return Err(Error::Other(format!(
                "complete needs status done or failed, got {status:?}"
            )));
        }
        self.check_holder(task_id, worker_id)?;
        self.record(EventKind::Complete {
            task_id: task_id.to_string(),
            worker_id: worker_id.to_string(),
            status,
            report_ref,
        })?;
        Ok(self.tasks[task_id].task.clone())
    }

    pub fn list(&mut self, status: Option<TaskStatus>) -> Result<Vec<Task>> {
        self.sweep()?;
        Ok(self
            .order
            .iter()
            .map(|id| &self.tasks[id].task)
            .filter(|t| status.is_none_or(|s| s == t.status))
            .cloned()
            .collect())
    }

    pub fn get(&self, task_id: &str) -> Option<&Task> {
        self.tasks.get(task_id).map(|e| &e.task)
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts {
            total: self.tasks.len(),
            ..Counts::default()
        };
        for e in self.tasks.values() {
            match e.task.status {
                TaskStatus::Open => c.open += 1,
                TaskStatus::Claimed => c.claimed += 1,
                TaskStatus::Done => c.done += 1,
                TaskStatus::Failed => c.failed += 1,
            }
        }
        c
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub events: usize,
    pub claims: usize,
    /// Claims granted while another lease on the task was unexpired.
    pub double_leases: Vec<String>,
    /// Claims of tasks already Done or Failed.
    pub reissued_final: Vec<String>,
    /// Completions not backed by a live lease of the completing worker.
    pub bad_completions: Vec<String>,
    pub expiries: usize,
}

impl Audit {
    pub fn is_clean(&self) -> bool {
        self.double_leases.is_empty()
            && self.reissued_final.is_empty()
            && self.bad_completions.is_empty()
    }
}

/// Re-derives lease history from the log alone and flags every safety
/// violation.
pub fn audit(events: &[Event]) -> Audit {
    #[derive(Default)]
    struct S {
        lease: Option<(String, u64)>,
        final_: bool,
    }
    let mut st: BTreeMap<&str, S> = BTreeMap::new();
    let mut a = Audit {
        events: events.len(),
        ..Audit::default()
    };
    for ev in events {
        match &ev.kind {
            EventKind::Ingest { task } => {
                st.entry(task.task_id.as_str()).or_default();
            }
            EventKind::Claim { task_id, lease } => {
                a.claims += 1;
                let s = st.entry(task_id.as_str()).or_default();
                if s.final_ {
                    a.reissued_final.push(format!("seq {}: {task_id}", ev.seq));
                }
                if let Some((holder, expiry)) = &s.lease {
                    if ev.ts < *expiry {
                        a.double_leases.push(format!(
                            "seq {}: {task_id} leased to {} while {holder} held it",
                            ev.seq, lease.worker_id
                        ));
                    }
                }
                s.lease = Some((lease.worker_id.clone(), lease.expiry_ms()));
            }
            EventKind::Renew {
                task_id,
                worker_id,
                granted_at,
                ttl_s,
            } => {
                let s = st.entry(task_id.as_str()).or_default();
                if let Some((holder, expiry)) = &mut s.lease {
                    if holder == worker_id {
                        *expiry = granted_at + (ttl_s * 1000.0).round() as u64;
                    }
                }
            }
            EventKind::Complete {
                task_id, worker_id, ..
            } => {
                let s = st.entry(task_id.as_str()).or_default();
                let live = matches!(&s.lease, Some((h, exp)) if h == worker_id && ev.ts < *exp);
                if !live || s.final_ {
                    a.bad_completions.push(format!("seq {}: {task_id} by {worker_id}", ev.seq));
                }
                s.lease = None;
                s.final_ = true;
            }
            EventKind::Expire { task_id, .. } => {
                a.expiries += 1;
                st.entry(task_id.as_str()).or_default().lease = None;
            }
        }
    }
    a
}
