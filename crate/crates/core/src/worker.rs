//! One task end to end: fresh instrumented target per API, generator loop
//! with a concurrent monitor poller and heartbeat emitter, verification of
//! candidates on vanilla targets, artifacts and report.
//!
//! Artifact directory of a task:
//!
//! ```text
//! inputs.jsonl        every input, persisted before it was sent
//! target.log          logs of all instrumented instances, appended
//! coverage.bin        cumulative bucketed coverage map (65536 bytes)
//! findings/<n>/       report.json, repro.jsonl, expected.json, replay.sh
//! verify/             logs of the verification instances
//! report.json         the task report
//! ```

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::backend::{Analysis, Task, TaskStatus};
use crate::coverage::{fnv1a32, mix64, SessionMap};
use crate::error::{Error, Result};
use crate::generators::harness::{Delivery, Harness, HarnessConfig};
use crate::generators::{build, GeneratorConfig, GeneratorKind};
use crate::instance::{fresh_instance, Flavor, InstanceConfig, InstanceHandle, Launcher};
use crate::manifest::Manifest;
use crate::monitors::{
    probe_liveness, ClassifyOptions, Classifier, CrashReport, Evidence, Health, Liveness, LogTail,
    PatternTable,
};
use crate::records::{finalize, load_inputs, InputLog, InputRecord, INPUTS_FILE};
use crate::surface::{surface_of, ApiRef, Surface};
use crate::target::log::now_us;
use crate::verify::{
    minify, replay, reproduces, verify, write_bundle, Expected, InProcessCheck, Observed,
    ReplayOptions, ReproOutcome, ReproResult, VerifyOptions,
};

pub const TARGET_LOG: &str = "target.log";
pub const COVERAGE_FILE: &str = "coverage.bin";
pub const REPORT_FILE: &str = "report.json";
pub const FINDINGS_DIR: &str = "findings";
pub const VERIFY_DIR: &str = "verify";
pub const HEARTBEAT_FILE: &str = "heartbeat.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerState {
    Starting,
    Booting,
    Fuzzing,
    Snapshotting,
    Verifying,
    Reporting,
    Idle,
    Dead,
}

/// One line of `heartbeat.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub worker_id: String,
    pub state: WorkerState,
    pub current_task: Option<String>,
    /// Microseconds since the Unix epoch.
    pub heartbeat_at: u64,
    pub execs_done: u64,
    pub instance_generation: u64,
}

impl Heartbeat {
    pub fn read(path: &Path) -> Option<Heartbeat> {
        let text = std::fs::read_to_string(path).ok()?;
        serde_json::from_str(text.lines().next()?).ok()
    }

    /// Replaces the file atomically so readers never see a torn line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        let mut line = serde_json::to_vec(self)?;
        line.push(b'\n');
        std::fs::write(&tmp, line).map_err(|e| Error::file(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::file(path, e))
    }
}

/// Pipeline steps of a task run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Launch,
    Generate,
    Monitor,
    Pull,
    VerifyLaunch,
    Replay,
    Decide,
    Close,
    Report,
}

/// When to replace the instrumented instance.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum Refresh {
    #[default]
    PerApi,
    PerTime {
        seconds: f64,
    },
}

fn d_watchdog() -> u64 {
    10_000
}
fn d_kills() -> u32 {
    3
}
fn d_window() -> u64 {
    120_000
}
fn d_attempts() -> u32 {
    3
}
fn d_true() -> bool {
    true
}
fn d_minify_limit() -> usize {
    2048
}
fn d_health() -> u64 {
    1000
}
fn d_snapshot() -> u64 {
    10_000
}
fn d_heartbeat() -> u64 {
    1000
}
fn d_vuln_principal() -> u32 {
    1000
}
fn d_boot() -> u64 {
    15_000
}
fn d_retries() -> u32 {
    2
}

/// Worker configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSettings {
    pub manifest: PathBuf,
    /// Launch targets as `{binary} target serve`; in-process when absent.
    #[serde(default)]
    pub target_binary: Option<PathBuf>,
    #[serde(default = "d_watchdog")]
    pub watchdog_ms: u64,
    #[serde(default = "d_kills")]
    pub bootloop_kills: u32,
    #[serde(default = "d_window")]
    pub bootloop_window_ms: u64,
    #[serde(default = "d_boot")]
    pub boot_timeout_ms: u64,
    #[serde(default = "d_retries")]
    pub boot_retries: u32,
    /// Used when the task names no generator.
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    /// Seed of the targets' probabilistic faults.
    #[serde(default)]
    pub target_seed: Option<u64>,
    #[serde(default = "d_attempts")]
    pub verify_attempts: u32,
    #[serde(default = "d_true")]
    pub minify: bool,
    /// Larger reproducers are kept unminified.
    #[serde(default = "d_minify_limit")]
    pub minify_limit: usize,
    #[serde(default)]
    pub refresh: Refresh,
    #[serde(default)]
    pub patterns: Option<PathBuf>,
    #[serde(default)]
    pub reconnect_each_exec: bool,
    #[serde(default = "d_health")]
    pub health_ms: u64,
    #[serde(default = "d_snapshot")]
    pub snapshot_ms: u64,
    #[serde(default = "d_heartbeat")]
    pub heartbeat_ms: u64,
    #[serde(default = "d_vuln_principal")]
    pub vulnhunt_principal: u32,
    #[serde(default)]
    pub permmap_principal: u32,
    /// Stop each API session after this many executions.
    #[serde(default)]
    pub max_execs: Option<u64>,
}

impl WorkerSettings {
    pub fn new(manifest: PathBuf) -> Self {
        serde_json::from_value(serde_json::json!({ "manifest": manifest })).expect("defaults")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut s: WorkerSettings = crate::config::load_json(path)?;
        s.manifest = crate::config::resolve(path, &s.manifest);
        Ok(s)
    }
}

/// Resolved worker configuration.
#[derive(Clone)]
pub struct WorkerConfig {
    pub worker_id: String,
    pub settings: WorkerSettings,
    pub manifest: Arc<Manifest>,
    pub surface: Arc<Surface>,
    pub table: PatternTable,
    pub instance: InstanceConfig,
    /// Where the heartbeat goes; none disables the emitter.
    pub heartbeat: Option<PathBuf>,
}

impl WorkerConfig {
    pub fn from_settings(settings: WorkerSettings, worker_id: &str) -> Result<Self> {
        let manifest = Arc::new(Manifest::load(&settings.manifest)?);
        let table = match &settings.patterns {
            Some(p) => PatternTable::load(p)?,
            None => PatternTable::builtin(),
        };
        Ok(Self::with_manifest(settings, manifest, table, worker_id))
    }

    pub fn with_manifest(
        settings: WorkerSettings,
        manifest: Arc<Manifest>,
        table: PatternTable,
        worker_id: &str,
    ) -> Self {
        let launcher = match &settings.target_binary {
            Some(b) => Launcher::Process { binary: b.clone() },
            None => Launcher::InThread,
        };
        let mut icfg = InstanceConfig::new(manifest.clone(), Some(settings.manifest.clone()), launcher);
        icfg.watchdog = Duration::from_millis(settings.watchdog_ms);
        icfg.bootloop_kills = settings.bootloop_kills;
        icfg.bootloop_window = Duration::from_millis(settings.bootloop_window_ms);
        icfg.boot_timeout = Duration::from_millis(settings.boot_timeout_ms);
        icfg.retries = settings.boot_retries;
        icfg.seed = settings.target_seed;
        WorkerConfig {
            worker_id: worker_id.to_string(),
            surface: Arc::new(surface_of(&manifest)),
            manifest,
            table,
            instance: icfg,
            heartbeat: None,
            settings,
        }
    }
}

/// Why an API session stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionEnd {
    Budget,
    ExecLimit,
    Finding,
    TargetDeath,
    GeneratorDeath,
    Skipped,
    BootFailure,
}

/// One instrumented instance driven against one API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub api: ApiRef,
    /// `service.method`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorKind>,
    pub principal: u32,
    /// Inclusive sequence range; none when nothing was sent.
    pub seqs: Option<(u64, u64)>,
    pub execs: u64,
    pub started_at: u64,
    pub ended_at: u64,
    pub end: SessionEnd,
    pub blocks_hit: u32,
    pub block_universe: Option<u32>,
    pub corpus_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Minimization {
    pub from: usize,
    pub to: usize,
    pub checks: usize,
    /// The minimized list reproduced on a real vanilla instance.
    pub confirmed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub id: usize,
    pub api: ApiRef,
    #[serde(flatten)]
    pub crash: CrashReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verification: Option<ReproResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimization: Option<Minimization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub task_id: String,
    pub worker_id: String,
    pub analysis: Analysis,
    pub status: TaskStatus,
    pub budget_s: f64,
    pub started_at: u64,
    pub finished_at: u64,
    pub execs: u64,
    pub instances: u64,
    pub sessions: Vec<SessionReport>,
    pub findings: Vec<Finding>,
    /// Replay tasks only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replay: Option<Observed>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Report {
    pub fn load(path: &Path) -> Result<Report> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone)]
pub struct TaskRun {
    pub task: Task,
    pub phase: Phase,
    pub inputs_path: PathBuf,
    pub findings: Vec<Finding>,
    pub report: Report,
}

/// The task-run state cell shared by the generator driver, the monitor
/// poller and the heartbeat emitter.
struct Cell {
    state: WorkerState,
    phase: Phase,
    task: Option<String>,
    execs: u64,
    generation: u64,
    stop: bool,
}

type Shared = Arc<(Mutex<Cell>, Condvar)>;

fn update(shared: &Shared, f: impl FnOnce(&mut Cell)) {
    let mut c = shared.0.lock().unwrap();
    f(&mut c);
    shared.1.notify_all();
}

fn heartbeat_of(cell: &Cell, worker_id: &str) -> Heartbeat {
    Heartbeat {
        worker_id: worker_id.to_string(),
        state: cell.state,
        current_task: cell.task.clone(),
        heartbeat_at: now_us(),
        execs_done: cell.execs,
        instance_generation: cell.generation,
    }
}

fn spawn_heartbeat(shared: Shared, path: PathBuf, worker_id: String, every: Duration) -> JoinHandle<()> {
    std::thread::spawn(move || {
        let (lock, cv) = &*shared;
        let mut cell = lock.lock().unwrap();
        loop {
            let hb = heartbeat_of(&cell, &worker_id);
            if let Err(e) = hb.write(&path) {
                log::warn!("heartbeat: {e}");
            }
            if cell.stop {
                return;
            }
            cell = cv.wait_timeout(cell, every).unwrap().0;
        }
    })
}

struct MonitorOut {
    clf: Classifier,
    tail: LogTail,
    probes: Vec<Liveness>,
}

/// Polls the target log and probes liveness every `every` until `stop`.
/// Raises `alarm` on a crash candidate or a dead dispatcher.
fn spawn_monitor(
    endpoint: String,
    mut tail: LogTail,
    mut clf: Classifier,
    every: Duration,
    stop: Arc<AtomicBool>,
    alarm: Arc<AtomicBool>,
) -> JoinHandle<MonitorOut> {
    std::thread::spawn(move || {
        let table = clf.table().clone();
        let mut probes = Vec::new();
        let mut next = Instant::now() + every;
        while !stop.load(Ordering::Acquire) {
            let now = Instant::now();
            if now < next {
                std::thread::sleep((next - now).min(Duration::from_millis(20)));
                continue;
            }
            next = now + every;
            for ev in tail.poll(&table) {
                clf.feed_event(&ev);
            }
            if tail.degraded() {
                clf.set_degraded();
            }
            let p = probe_liveness(&endpoint, Duration::from_secs(1), None);
            clf.feed_probe(&p);
            let dead = p.dispatcher == Health::Dead;
            probes.push(p);
            if clf.has_crash() || dead {
                alarm.store(true, Ordering::Release);
            }
        }
        MonitorOut { clf, tail, probes }
    })
}

struct Ctx<'a> {
    cfg: &'a WorkerConfig,
    dir: &'a Path,
    shared: Shared,
    coverage: SessionMap,
    findings: Vec<Finding>,
    sessions: Vec<SessionReport>,
    instances: u64,
    execs: u64,
    seq: u64,
    last_snapshot: Instant,
}

impl Ctx<'_> {
    fn set(&self, state: WorkerState, phase: Phase) {
        update(&self.shared, |c| {
            c.state = state;
            c.phase = phase;
        });
    }

    fn snapshot(&mut self, log: Option<&mut InputLog>) -> Result<()> {
        let prev = self.shared.0.lock().unwrap().state;
        update(&self.shared, |c| c.state = WorkerState::Snapshotting);
        if let Some(l) = log {
            l.flush()?;
        }
        let path = self.dir.join(COVERAGE_FILE);
        std::fs::write(&path, self.coverage.as_bytes()).map_err(|e| Error::file(&path, e))?;
        self.last_snapshot = Instant::now();
        update(&self.shared, |c| c.state = prev);
        Ok(())
    }
}

fn principal_for(cfg: &WorkerConfig, analysis: Analysis) -> u32 {
    match analysis {
        Analysis::PermMap => cfg.settings.permmap_principal,
        _ => cfg.settings.vulnhunt_principal,
    }
}

/// Per-API generator seed: stable, and distinct across APIs.
fn api_seed(base: u64, api: &ApiRef) -> u64 {
    mix64(base ^ fnv1a32(api.to_string().as_bytes()) as u64)
}

fn generator_for(task: &Task, cfg: &WorkerConfig, api: &ApiRef) -> GeneratorConfig {
    let mut g = task
        .generator
        .clone()
        .or_else(|| cfg.settings.generator.clone())
        .unwrap_or_else(|| GeneratorConfig::new(GeneratorKind::RandFuzz, 0));
    g.seed = api_seed(g.seed, api);
    g
}

/// Runs `task` into the artifact directory `dir`. Infrastructure errors
/// are returned; everything else ends in the report.
pub fn run_task(task: &Task, cfg: &WorkerConfig, dir: &Path) -> Result<TaskRun> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let shared: Shared = Arc::new((
        Mutex::new(Cell {
            state: WorkerState::Starting,
            phase: Phase::Launch,
            task: Some(task.task_id.clone()),
            execs: 0,
            generation: 0,
            stop: false,
        }),
        Condvar::new(),
    ));
    let hb = cfg.heartbeat.clone().map(|p| {
        spawn_heartbeat(
            shared.clone(),
            p,
            cfg.worker_id.clone(),
            Duration::from_millis(cfg.settings.heartbeat_ms.max(10)),
        )
    });
    let started_at = now_us();
    let mut ctx = Ctx {
        cfg,
        dir,
        shared: shared.clone(),
        coverage: SessionMap::new(),
        findings: Vec::new(),
        sessions: Vec::new(),
        instances: 0,
        execs: 0,
        seq: 0,
        last_snapshot: Instant::now(),
    };
    let result = match task.analysis {
        Analysis::Replay => run_replay(task, &mut ctx).map(Some),
        _ => run_fuzz(task, &mut ctx).map(|_| None),
    };
    ctx.set(WorkerState::Reporting, Phase::Report);
    let (status, replay_obs, error) = match result {
        Ok(obs) => (TaskStatus::Done, obs, None),
        Err(e) => {
            log::error!("task {} failed: {e}", task.task_id);
            (TaskStatus::Failed, None, Some(e.to_string()))
        }
    };
    // Snapshot completeness: every artifact exists even after a failure.
    let inputs_path = dir.join(INPUTS_FILE);
    if !inputs_path.exists() {
        std::fs::write(&inputs_path, b"").map_err(|e| Error::file(&inputs_path, e))?;
    }
    finalize(dir)?;
    let log_path = dir.join(TARGET_LOG);
    if !log_path.exists() {
        std::fs::write(&log_path, b"").map_err(|e| Error::file(&log_path, e))?;
    }
    ctx.snapshot(None)?;
    let report = Report {
        task_id: task.task_id.clone(),
        worker_id: cfg.worker_id.clone(),
        analysis: task.analysis,
        status,
        budget_s: task.budget_s,
        started_at,
        finished_at: now_us(),
        execs: ctx.execs,
        instances: ctx.instances,
        sessions: std::mem::take(&mut ctx.sessions),
        findings: ctx.findings.clone(),
        replay: replay_obs,
        error,
    };
    let rp = dir.join(REPORT_FILE);
    std::fs::write(&rp, serde_json::to_string_pretty(&report)?).map_err(|e| Error::file(&rp, e))?;
    update(&shared, |c| {
        c.state = WorkerState::Idle;
        c.task = None;
        c.stop = true;
    });
    if let Some(h) = hb {
        let _ = h.join();
    }
    Ok(TaskRun {
        task: task.clone(),
        phase: Phase::Report,
        inputs_path,
        findings: ctx.findings,
        report,
    })
}

fn run_fuzz(task: &Task, ctx: &mut Ctx) -> Result<()> {
    if task.budget_s <= 0.0 {
        return Ok(());
    }
    let mut log = Some(InputLog::open(ctx.dir)?);
    for api in &task.api_refs {
        let Some(desc) = ctx.cfg.surface.find(api).cloned() else {
            return Err(Error::Validation(vec![format!("{api}: not on the target surface")]));
        };
        let gcfg = generator_for(task, ctx.cfg, api);
        let principal = principal_for(ctx.cfg, task.analysis);
        let deadline = Instant::now() + Duration::from_secs_f64(task.budget_s);
        loop {
            let ended = run_session(ctx, &mut log, &desc, &gcfg, principal, deadline)?;
            let again = matches!(ctx.cfg.settings.refresh, Refresh::PerTime { .. })
                && ended == SessionEnd::Budget
                && Instant::now() < deadline;
            if !again {
                break;
            }
        }
    }
    if let Some(l) = log.as_mut() {
        l.flush()?;
    }
    Ok(())
}

/// Sets the flag when dropped, so early returns still stop the monitor.
struct StopOnDrop(Arc<AtomicBool>);

impl Drop for StopOnDrop {
    fn drop(&mut self) {
        self.0.store(true, Ordering::Release);
    }
}

fn run_session(
    ctx: &mut Ctx,
    log: &mut Option<InputLog>,
    desc: &crate::surface::ApiDescriptor,
    gcfg: &GeneratorConfig,
    principal: u32,
    deadline: Instant,
) -> Result<SessionEnd> {
    let api = desc.api_ref();
    let started_at = now_us();
    let mut report = SessionReport {
        api: api.clone(),
        method: Some(desc.method_key()),
        instance_id: None,
        generator: Some(gcfg.kind),
        principal,
        seqs: None,
        execs: 0,
        started_at,
        ended_at: started_at,
        end: SessionEnd::Skipped,
        blocks_hit: 0,
        block_universe: None,
        corpus_len: 0,
        note: None,
    };
    let mut gen = match build(gcfg, desc) {
        Ok(g) => g,
        Err(e) => {
            report.note = Some(e.to_string());
            ctx.sessions.push(report);
            return Ok(SessionEnd::Skipped);
        }
    };
    let settings = &ctx.cfg.settings;
    let seg_deadline = match settings.refresh {
        Refresh::PerApi => deadline,
        Refresh::PerTime { seconds } => deadline.min(Instant::now() + Duration::from_secs_f64(seconds.max(0.001))),
    };

    ctx.set(WorkerState::Booting, Phase::Launch);
    let log_path = ctx.dir.join(TARGET_LOG);
    let tail = LogTail::from_end(&log_path);
    let mut inst = match fresh_instance(&ctx.cfg.instance, Flavor::Instrumented, &log_path) {
        Ok(i) => i,
        Err(e) => {
            report.end = SessionEnd::BootFailure;
            report.note = Some(e.to_string());
            ctx.sessions.push(report);
            return Err(e);
        }
    };
    ctx.instances += 1;
    let generation = ctx.instances;
    update(&ctx.shared, |c| c.generation = generation);
    report.instance_id = Some(inst.instance_id.clone());

    let mut hcfg = HarnessConfig::new(&inst.endpoint, inst.feedback_endpoint.as_deref(), principal);
    hcfg.reconnect_each_exec = settings.reconnect_each_exec || gcfg.kind.fresh_harness_per_exec();
    let session_log = match log.take() {
        Some(l) => l,
        None => InputLog::open(ctx.dir)?,
    };
    let mut harness = Harness::new(hcfg, session_log)?.starting_at(ctx.seq);

    let stop = Arc::new(AtomicBool::new(false));
    let alarm = Arc::new(AtomicBool::new(false));
    let _guard = StopOnDrop(stop.clone());
    let clf = Classifier::new(ctx.cfg.table.clone(), ClassifyOptions::default());
    let monitor = spawn_monitor(
        inst.endpoint.clone(),
        tail,
        clf,
        Duration::from_millis(settings.health_ms.max(10)),
        stop.clone(),
        alarm.clone(),
    );

    ctx.set(WorkerState::Fuzzing, Phase::Generate);
    let mut sent: Vec<(u64, u64)> = Vec::new();
    let snapshot_every = Duration::from_millis(settings.snapshot_ms.max(10));
    let end = loop {
        if alarm.load(Ordering::Acquire) {
            break SessionEnd::Finding;
        }
        if Instant::now() >= seg_deadline {
            break SessionEnd::Budget;
        }
        if settings.max_execs.is_some_and(|m| report.execs >= m) {
            break SessionEnd::ExecLimit;
        }
        let proposal = match catch_unwind(AssertUnwindSafe(|| gen.propose())) {
            Ok(p) => p,
            Err(panic) => {
                report.note = Some(format!("generator death: {}", panic_text(&panic)));
                break SessionEnd::GeneratorDeath;
            }
        };
        let exec = harness.send(&api, proposal.payload, proposal.decoded.as_deref())?;
        sent.push((exec.seq, exec.ts));
        report.execs += 1;
        ctx.execs += 1;
        if let Some(fb) = &exec.feedback {
            ctx.coverage.accumulate(fb);
            report.blocks_hit = report.blocks_hit.max(fb.blocks_hit);
            report.block_universe = Some(fb.block_universe);
        }
        update(&ctx.shared, |c| c.execs += 1);
        if let Err(panic) = catch_unwind(AssertUnwindSafe(|| gen.observe(exec.feedback.as_ref()))) {
            report.note = Some(format!("generator death: {}", panic_text(&panic)));
            break SessionEnd::GeneratorDeath;
        }
        if matches!(exec.delivery, Delivery::TargetDeath(_)) {
            break SessionEnd::TargetDeath;
        }
        if ctx.last_snapshot.elapsed() >= snapshot_every {
            ctx.snapshot(Some(harness.log_mut()))?;
        }
    };
    report.corpus_len = gen.corpus_len();
    ctx.seq = harness.last_seq();
    let mut session_log = harness.into_log();
    session_log.flush()?;

    ctx.set(WorkerState::Fuzzing, Phase::Monitor);
    stop.store(true, Ordering::Release);
    let MonitorOut {
        mut clf,
        mut tail,
        mut probes,
    } = monitor.join().map_err(|_| Error::Other("monitor thread panicked".into()))?;
    let ropts = ReplayOptions::for_watchdog(ctx.cfg.instance.watchdog);
    if matches!(end, SessionEnd::Finding | SessionEnd::TargetDeath) || clf.has_crash() {
        crate::verify::settle(&mut inst, &mut tail, &mut clf, &mut probes, &ropts);
    } else {
        for ev in tail.poll(&ctx.cfg.table) {
            clf.feed_event(&ev);
        }
    }

    ctx.set(WorkerState::Snapshotting, Phase::Pull);
    inst.kill();
    drop(inst);
    ctx.snapshot(Some(&mut session_log))?;
    *log = Some(session_log);
    let candidates = clf.finish(&sent);
    report.seqs = sent.first().zip(sent.last()).map(|(a, b)| (a.0, b.0));
    report.end = if end == SessionEnd::TargetDeath && !candidates.is_empty() {
        SessionEnd::Finding
    } else {
        end
    };
    report.ended_at = now_us();
    let seqs = report.seqs;
    let end = report.end;
    ctx.sessions.push(report);

    if !candidates.is_empty() {
        let records: Vec<InputRecord> = match seqs {
            Some((a, b)) => load_inputs(&ctx.dir.join(INPUTS_FILE))?
                .into_iter()
                .filter(|r| r.seq >= a && r.seq <= b)
                .collect(),
            None => Vec::new(),
        };
        for cand in candidates {
            let f = check_candidate(ctx, &api, cand, &records)?;
            ctx.findings.push(f);
        }
    }
    ctx.set(WorkerState::Fuzzing, Phase::Close);
    Ok(end)
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "panic".to_string())
}

fn pattern_of(c: &CrashReport) -> Option<String> {
    match &c.first_evidence {
        Evidence::Log(ev) => ev.matched_pattern.clone(),
        Evidence::Probe(_) => None,
    }
}

/// Verifies one candidate, minifies a reproduced one, writes its bundle.
fn check_candidate(ctx: &mut Ctx, api: &ApiRef, mut cand: CrashReport, records: &[InputRecord]) -> Result<Finding> {
    let id = ctx.findings.len();
    let cfg = ctx.cfg;
    ctx.set(WorkerState::Verifying, Phase::VerifyLaunch);
    let vopts = VerifyOptions {
        attempts: cfg.settings.verify_attempts.max(1),
        replay: ReplayOptions::for_watchdog(cfg.instance.watchdog),
        work_dir: ctx.dir.join(VERIFY_DIR).join(id.to_string()),
        fallback_full: true,
    };
    ctx.set(WorkerState::Verifying, Phase::Replay);
    let mut res = verify(&cand, records, &cfg.instance, &cfg.table, &vopts)?;
    ctx.set(WorkerState::Verifying, Phase::Decide);
    let mut repro: Vec<InputRecord> = records
        .iter()
        .filter(|r| res.reproducer.binary_search(&r.seq).is_ok())
        .cloned()
        .collect();
    let mut minimization = None;
    if res.outcome == ReproOutcome::Reproduced && cfg.settings.minify && repro.len() <= cfg.settings.minify_limit {
        let check = InProcessCheck::new(cfg.manifest.clone(), cfg.table.clone(), &cfg.instance);
        match minify(&repro, cand.class, &check) {
            Ok(m) => {
                let confirmed = m.items.len() == repro.len() || {
                    let once = VerifyOptions {
                        attempts: 1,
                        ..vopts.clone()
                    };
                    reproduces(cand.class, &m.items, &cfg.instance, &cfg.table, &once, "min")?
                        == ReproOutcome::Reproduced
                };
                minimization = Some(Minimization {
                    from: repro.len(),
                    to: m.items.len(),
                    checks: m.checks,
                    confirmed,
                });
                if confirmed {
                    res.minimal_reproducer = Some(m.items.iter().map(|r| r.seq).collect());
                    repro = m.items;
                }
            }
            Err(Error::NotReproducible) => log::info!("{api}: in-process check misses {}", cand.class),
            Err(e) => return Err(e),
        }
    }
    cand.verified = res.outcome == ReproOutcome::Reproduced;
    if matches!(res.outcome, ReproOutcome::Reproduced | ReproOutcome::Flaky) {
        let rel = format!("{FINDINGS_DIR}/{id}");
        let bdir = ctx.dir.join(&rel);
        let markers: Vec<String> = res.markers.clone();
        write_bundle(
            &bdir,
            &repro,
            &Expected {
                class: cand.class,
                pattern: pattern_of(&cand),
                markers,
            },
        )?;
        cand.reproducer = Some(format!("{rel}/{}", crate::verify::REPRO_FILE));
    }
    let finding = Finding {
        id,
        api: api.clone(),
        crash: cand,
        verification: Some(res),
        minimization,
    };
    if finding.crash.reproducer.is_some() {
        let p = ctx.dir.join(FINDINGS_DIR).join(id.to_string()).join(REPORT_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(&finding)?).map_err(|e| Error::file(&p, e))?;
    }
    Ok(finding)
}

/// Replays `task.inputs` on a fresh vanilla instance.
fn run_replay(task: &Task, ctx: &mut Ctx) -> Result<Observed> {
    let src = task
        .inputs
        .as_ref()
        .ok_or_else(|| Error::Validation(vec![format!("{}: replay task without inputs", task.task_id)]))?;
    let records = load_inputs(Path::new(src))?;
    crate::records::write_inputs(&ctx.dir.join(INPUTS_FILE), &records)?;
    ctx.set(WorkerState::Booting, Phase::VerifyLaunch);
    let mut inst: InstanceHandle = fresh_instance(&ctx.cfg.instance, Flavor::Vanilla, &ctx.dir.join(TARGET_LOG))?;
    ctx.instances += 1;
    let generation = ctx.instances;
    update(&ctx.shared, |c| c.generation = generation);
    ctx.set(WorkerState::Verifying, Phase::Replay);
    let obs = replay(
        &records,
        &mut inst,
        &ctx.cfg.table,
        &ReplayOptions::for_watchdog(ctx.cfg.instance.watchdog),
    )?;
    ctx.execs += obs.sent as u64;
    update(&ctx.shared, |c| c.execs += obs.sent as u64);
    inst.kill();
    Ok(obs)
}
