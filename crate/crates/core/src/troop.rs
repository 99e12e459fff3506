//! Per-client supervisor: claims tasks from the backend, runs each in a
//! worker child process, watches heartbeats, renews leases, archives
//! artifact directories and serves a status view.
//!
//! Workers are started as `{worker_binary} worker run --config C
//! --artifacts DIR --worker-id W --heartbeat FILE` with the task JSON on
//! stdin. Exit 0 completes the task as done, exit 1 as failed; any other
//! exit marks the worker dead and leaves its lease to expire.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::extract::State;
use axum::response::Html;
use axum::routing::get;
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::backend::client::BackendClient;
use crate::backend::{Analysis, Task, TaskStatus};
use crate::error::{Error, Result};
use crate::target::log::now_us;
use crate::worker::{Heartbeat, WorkerState, HEARTBEAT_FILE};

pub const SESSIONS_DIR: &str = "sessions";
pub const WORK_DIR: &str = "work";
/// Archive of runs whose completion the backend refused.
pub const ORPHANED_DIR: &str = "orphaned";

fn d_stale() -> f64 {
    30.0
}
fn d_poll() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TroopConfig {
    pub backend_url: String,
    pub workers: usize,
    pub worker_binary: PathBuf,
    /// Passed to every worker as `--config`.
    pub worker_config: PathBuf,
    pub artifact_root: PathBuf,
    #[serde(default = "d_stale")]
    pub stale_after_s: f64,
    /// Claim only tasks of this kind.
    #[serde(default)]
    pub analysis: Option<Analysis>,
    #[serde(default)]
    pub status_bind: Option<String>,
    #[serde(default)]
    pub client_id: Option<String>,
    /// Return once the backend has no open or claimed task left.
    #[serde(default)]
    pub exit_when_idle: bool,
    #[serde(default = "d_poll")]
    pub poll_ms: u64,
}

impl TroopConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.workers == 0 {
            errs.push("workers: must be at least 1".to_string());
        }
        if !(self.stale_after_s > 0.0) {
            errs.push("stale_after_s: must be positive".to_string());
        }
        if self.backend_url.is_empty() {
            errs.push("backend_url: empty".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub worker_id: String,
    pub state: WorkerState,
    pub current_task: Option<String>,
    pub heartbeat_at: u64,
    pub execs_done: u64,
    pub instance_generation: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tasks_done: u64,
    pub tasks_failed: u64,
    pub workers_died: u64,
    pub execs_done: u64,
    pub backend_errors: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub workers: Vec<WorkerStatus>,
    pub aggregate: Aggregate,
}

/// Published snapshot; readers clone the `Arc` and never wait on the
/// supervisor.
#[derive(Clone, Default)]
pub struct StatusBoard(Arc<RwLock<Arc<Snapshot>>>);

impl StatusBoard {
    pub fn get(&self) -> Arc<Snapshot> {
        self.0.read().unwrap().clone()
    }

    fn publish(&self, s: Snapshot) {
        *self.0.write().unwrap() = Arc::new(s);
    }
}

const STATUS_PAGE: &str = r#"<!doctype html>
<html><head><meta charset="utf-8"><title>troop</title>
<style>body{font-family:monospace}td,th{padding:2px 10px;text-align:left}</style></head>
<body><h3>workers</h3><table id="w"></table><pre id="a"></pre>
<script>
async function tick(){
  const r = await fetch('status'); const ws = await r.json();
  const rows = ws.map(w => `<tr><td>${w.worker_id}</td><td>${w.state}</td><td>${w.current_task ?? ''}</td>`
    + `<td>${w.execs_done}</td><td>${w.instance_generation}</td><td>${new Date(w.heartbeat_at/1000).toISOString()}</td></tr>`);
  document.getElementById('w').innerHTML =
    '<tr><th>worker</th><th>state</th><th>task</th><th>execs</th><th>instances</th><th>heartbeat</th></tr>' + rows.join('');
  const a = await fetch('status/aggregate'); document.getElementById('a').textContent = JSON.stringify(await a.json(), null, 1);
}
tick(); setInterval(tick, 2000);
</script></body></html>
"#;

pub struct StatusServer {
    addr: SocketAddr,
    stop: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl StatusServer {
    pub fn start(board: StatusBoard, bind: &str) -> Result<Self> {
        let listener = std::net::TcpListener::bind(bind).map_err(|e| Error::Other(format!("bind {bind}: {e}")))?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let app = Router::new()
            .route("/", get(|| async { Html(STATUS_PAGE) }))
            .route(
                "/status",
                get(|State(b): State<StatusBoard>| async move { Json(b.get().workers.clone()) }),
            )
            .route(
                "/status/aggregate",
                get(|State(b): State<StatusBoard>| async move { Json(b.get().aggregate.clone()) }),
            )
            .with_state(board);
        let rt = tokio::runtime::Builder::new_current_thread().enable_io().build()?;
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let thread = std::thread::spawn(move || {
            rt.block_on(async move {
                let Ok(l) = tokio::net::TcpListener::from_std(listener) else {
                    return;
                };
                let _ = axum::serve(l, app)
                    .with_graceful_shutdown(async move {
                        let _ = rx.await;
                    })
                    .await;
            })
        });
        Ok(StatusServer {
            addr,
            stop: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for StatusServer {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

struct Running {
    child: Child,
    task: Task,
    dir: PathBuf,
    started: Instant,
    last_renew: Instant,
}

struct Slot {
    index: usize,
    respawns: u32,
    status: WorkerStatus,
    run: Option<Running>,
    /// Dead slots come back after this instant.
    respawn_at: Option<Instant>,
}

impl Slot {
    fn worker_id(client: &str, index: usize, respawns: u32) -> String {
        format!("{client}-w{index}.{respawns}")
    }
}

pub struct Troop {
    cfg: TroopConfig,
    client_id: String,
    backend: BackendClient,
    slots: Vec<Slot>,
    board: StatusBoard,
    aggregate: Aggregate,
    backoff: Duration,
    next_claim: Instant,
    retired_execs: u64,
}

impl Troop {
    pub fn new(cfg: TroopConfig) -> Result<Self> {
        cfg.validate()?;
        let client_id = cfg
            .client_id
            .clone()
            .unwrap_or_else(|| format!("troop{:x}", std::process::id()));
        for d in [SESSIONS_DIR, WORK_DIR] {
            let p = cfg.artifact_root.join(d);
            std::fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
        }
        let now = now_us();
        let slots = (0..cfg.workers)
            .map(|i| Slot {
                index: i,
                respawns: 0,
                status: WorkerStatus {
                    worker_id: Slot::worker_id(&client_id, i, 0),
                    state: WorkerState::Idle,
                    current_task: None,
                    heartbeat_at: now,
                    execs_done: 0,
                    instance_generation: 0,
                },
                run: None,
                respawn_at: None,
            })
            .collect();
        let t = Troop {
            backend: BackendClient::new(&cfg.backend_url),
            cfg,
            client_id,
            slots,
            board: StatusBoard::default(),
            aggregate: Aggregate::default(),
            backoff: Duration::ZERO,
            next_claim: Instant::now(),
            retired_execs: 0,
        };
        t.publish();
        Ok(t)
    }

    pub fn board(&self) -> StatusBoard {
        self.board.clone()
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    fn publish(&self) {
        self.board.publish(Snapshot {
            workers: self.slots.iter().map(|s| s.status.clone()).collect(),
            aggregate: self.aggregate.clone(),
        });
    }

    /// Supervises until `stop` is set or, with `exit_when_idle`, the
    /// backend runs dry.
    pub fn run(&mut self, stop: &AtomicBool) -> Result<()> {
        let poll = Duration::from_millis(self.cfg.poll_ms.max(10));
        while !stop.load(Ordering::Acquire) {
            self.tick();
            self.publish();
            if self.cfg.exit_when_idle && self.all_idle() && self.backend_drained() {
                break;
            }
            std::thread::sleep(poll);
        }
        self.shutdown();
        self.publish();
        Ok(())
    }

    fn all_idle(&self) -> bool {
        self.slots.iter().all(|s| s.run.is_none())
    }

    fn backend_drained(&mut self) -> bool {
        match self.backend.health() {
            Ok(c) => c.open == 0 && c.claimed == 0,
            Err(_) => false,
        }
    }

    /// Kills running workers; their leases expire on the backend.
    pub fn shutdown(&mut self) {
        for s in &mut self.slots {
            if let Some(mut r) = s.run.take() {
                let _ = r.child.kill();
                let _ = r.child.wait();
                s.status.state = WorkerState::Dead;
                s.status.current_task = None;
            }
        }
    }

    /// One supervision round.
    pub fn tick(&mut self) {
        for i in 0..self.slots.len() {
            self.check_slot(i);
        }
        for i in 0..self.slots.len() {
            self.fill_slot(i);
        }
        self.aggregate.execs_done =
            self.retired_execs + self.slots.iter().filter(|s| s.run.is_some()).map(|s| s.status.execs_done).sum::<u64>();
    }

    fn worker_dir(&self, worker_id: &str) -> PathBuf {
        self.cfg.artifact_root.join(WORK_DIR).join(worker_id)
    }

    fn check_slot(&mut self, i: usize) {
        let stale_us = (self.cfg.stale_after_s * 1e6) as u64;
        let now = Instant::now();
        let slot = &mut self.slots[i];
        if let Some(at) = slot.respawn_at {
            if now >= at {
                slot.respawns += 1;
                slot.respawn_at = None;
                slot.status = WorkerStatus {
                    worker_id: Slot::worker_id(&self.client_id, slot.index, slot.respawns),
                    state: WorkerState::Idle,
                    current_task: None,
                    heartbeat_at: now_us(),
                    execs_done: 0,
                    instance_generation: 0,
                };
                log::info!("respawned slot {} as {}", slot.index, slot.status.worker_id);
            }
            return;
        }
        let Some(run) = slot.run.as_mut() else {
            return;
        };
        let hb_path = self.cfg.artifact_root.join(WORK_DIR).join(&slot.status.worker_id).join(HEARTBEAT_FILE);
        if let Some(hb) = Heartbeat::read(&hb_path) {
            if hb.heartbeat_at > slot.status.heartbeat_at && hb.current_task.as_deref() == Some(run.task.task_id.as_str()) {
                slot.status.state = hb.state;
                slot.status.heartbeat_at = hb.heartbeat_at;
                slot.status.execs_done = hb.execs_done;
                slot.status.instance_generation = hb.instance_generation;
            }
        }
        match run.child.try_wait() {
            Ok(Some(st)) => {
                let code = st.code();
                self.finish(i, code);
            }
            Ok(None) => {
                let age = now_us().saturating_sub(slot.status.heartbeat_at);
                if age > stale_us {
                    log::warn!(
                        "{}: heartbeat stale for {:.1} s, killing",
                        slot.status.worker_id,
                        age as f64 / 1e6
                    );
                    let _ = run.child.kill();
                    let _ = run.child.wait();
                    self.finish(i, None);
                    return;
                }
                let ttl = run.task.lease.as_ref().map(|l| l.ttl_s).unwrap_or(60.0);
                let every = Duration::from_secs_f64((ttl / 3.0).max(0.5));
                if run.last_renew.elapsed() >= every {
                    run.last_renew = Instant::now();
                    if let Err(e) = self.backend.renew(&run.task.task_id, &slot.status.worker_id) {
                        log::warn!("{}: lease renewal of {} failed: {e}", slot.status.worker_id, run.task.task_id);
                    }
                }
            }
            Err(e) => {
                log::error!("{}: wait failed: {e}", slot.status.worker_id);
                self.finish(i, None);
            }
        }
    }

    fn archive(&self, from: &Path, base: &str, name: &str) -> PathBuf {
        let root = self.cfg.artifact_root.join(base);
        let _ = std::fs::create_dir_all(&root);
        let mut to = root.join(name);
        let mut n = 1;
        while to.exists() {
            to = root.join(format!("{name}.{n}"));
            n += 1;
        }
        if let Err(e) = std::fs::rename(from, &to) {
            log::error!("archiving {} failed: {e}", from.display());
        }
        to
    }

    /// Handles a worker exit. `None` means killed or unknown.
    fn finish(&mut self, i: usize, code: Option<i32>) {
        let Some(run) = self.slots[i].run.take() else {
            return;
        };
        let worker_id = self.slots[i].status.worker_id.clone();
        let task_id = run.task.task_id.clone();
        self.retired_execs += self.slots[i].status.execs_done;
        let status = match code {
            Some(0) => Some(TaskStatus::Done),
            Some(1) => Some(TaskStatus::Failed),
            _ => None,
        };
        match status {
            Some(st) => {
                let report_ref = format!("{SESSIONS_DIR}/{task_id}");
                match self.backend.complete(&task_id, &worker_id, st, Some(report_ref)) {
                    Ok(_) => {
                        let to = self.archive(&run.dir, SESSIONS_DIR, &task_id);
                        log::info!(
                            "{worker_id}: {task_id} {} after {:.1} s, archived to {}",
                            if st == TaskStatus::Done { "done" } else { "failed" },
                            run.started.elapsed().as_secs_f64(),
                            to.display()
                        );
                        if st == TaskStatus::Done {
                            self.aggregate.tasks_done += 1;
                        } else {
                            self.aggregate.tasks_failed += 1;
                        }
                    }
                    Err(e) => {
                        log::warn!("{worker_id}: completion of {task_id} refused: {e}");
                        self.archive(&run.dir, ORPHANED_DIR, &format!("{task_id}-{worker_id}"));
                    }
                }
                let s = &mut self.slots[i].status;
                s.state = WorkerState::Idle;
                s.current_task = None;
            }
            None => {
                log::warn!("{worker_id}: died on {task_id} (exit {code:?}); lease left to expire");
                self.archive(&run.dir, ORPHANED_DIR, &format!("{task_id}-{worker_id}"));
                self.aggregate.workers_died += 1;
                let slot = &mut self.slots[i];
                slot.status.state = WorkerState::Dead;
                slot.status.current_task = None;
                slot.respawn_at = Some(Instant::now() + Duration::from_secs(1));
            }
        }
    }

    fn fill_slot(&mut self, i: usize) {
        if self.slots[i].run.is_some() || self.slots[i].respawn_at.is_some() || Instant::now() < self.next_claim {
            return;
        }
        let worker_id = self.slots[i].status.worker_id.clone();
        let task = match self.backend.claim(&self.client_id, &worker_id, self.cfg.analysis) {
            Ok(Some(t)) => {
                self.backoff = Duration::ZERO;
                t
            }
            Ok(None) => {
                self.backoff = Duration::ZERO;
                return;
            }
            Err(e) => {
                self.aggregate.backend_errors += 1;
                self.backoff = (self.backoff * 2).clamp(Duration::from_millis(500), Duration::from_secs(30));
                self.next_claim = Instant::now() + self.backoff;
                log::warn!("claim failed, retrying in {:?}: {e}", self.backoff);
                return;
            }
        };
        let wdir = self.worker_dir(&worker_id);
        let dir = wdir.join(&task.task_id);
        match self.spawn(&task, &worker_id, &wdir, &dir) {
            Ok(child) => {
                let s = &mut self.slots[i];
                s.status.state = WorkerState::Starting;
                s.status.current_task = Some(task.task_id.clone());
                s.status.heartbeat_at = now_us();
                s.status.execs_done = 0;
                s.status.instance_generation = 0;
                s.run = Some(Running {
                    child,
                    task,
                    dir,
                    started: Instant::now(),
                    last_renew: Instant::now(),
                });
            }
            Err(e) => {
                log::error!("{worker_id}: cannot start worker for {}: {e}", task.task_id);
                self.aggregate.tasks_failed += 1;
                let _ = self.backend.complete(&task.task_id, &worker_id, TaskStatus::Failed, None);
            }
        }
    }

    fn spawn(&self, task: &Task, worker_id: &str, wdir: &Path, dir: &Path) -> Result<Child> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let hb = wdir.join(HEARTBEAT_FILE);
        let _ = std::fs::remove_file(&hb);
        let log_path = dir.join("worker.log");
        let stderr = std::fs::File::create(&log_path).map_err(|e| Error::file(&log_path, e))?;
        let mut child = Command::new(&self.cfg.worker_binary)
            .args(["worker", "run", "--config"])
            .arg(&self.cfg.worker_config)
            .arg("--artifacts")
            .arg(dir)
            .arg("--worker-id")
            .arg(worker_id)
            .arg("--heartbeat")
            .arg(&hb)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(stderr)
            .spawn()
            .map_err(|e| Error::Other(format!("spawn {}: {e}", self.cfg.worker_binary.display())))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let body = serde_json::to_vec(task)?;
        if let Err(e) = stdin.write_all(&body) {
            let _ = child.kill();
            let _ = child.wait();
            return Err(e.into());
        }
        Ok(child)
    }
}

impl Drop for Troop {
    fn drop(&mut self) {
        self.shutdown();
    }
}
