use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use mfuz_core::analyzer::{
    self, build_permission_map, coverage_stats, diff_permission_map, render_coverage, render_diff,
    render_permmap, render_scan, render_throughput, scan_loaded, throughput_stats, PermissionMap,
};
use mfuz_core::backend::{BackendClient, BackendServer, StoreConfig, SystemClock, Task, TaskFile, TaskStatus, TaskStore};
use mfuz_core::campaign::{self, Campaign};
use mfuz_core::config::{load_json, resolve};
use mfuz_core::generators::harness::{Delivery, Harness, HarnessConfig};
use mfuz_core::generators::{self, GeneratorConfig, GeneratorKind};
use mfuz_core::instance::{fresh_instance, Flavor, InstanceConfig, Launcher, ReadyFile};
use mfuz_core::manifest::Manifest;
use mfuz_core::monitors::{CrashClass, PatternTable};
use mfuz_core::records::{finalize, load_inputs, write_inputs, InputLog};
use mfuz_core::surface::{map_dynamic, map_static, partition, ApiRef, Surface};
use mfuz_core::target::{ExitMode, ServerConfig, SimCore, SimOptions, TargetLog, TargetServer};
use mfuz_core::troop::{StatusServer, Troop, TroopConfig};
use mfuz_core::verify::{self, InProcessCheck, ReplayOptions};
use mfuz_core::worker::{run_task, WorkerConfig, WorkerSettings};
use mfuz_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_CHECK: u8 = 3;
const EXIT_INFRA: u8 = 4;

#[derive(Parser)]
#[command(name = "mfuz", version, about = "Distributed fuzzing of RPC middleware services")]
struct Cli {
    /// Human-readable logs instead of JSON lines.
    #[arg(long, global = true)]
    human: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Task backend.
    #[command(subcommand)]
    Backend(BackendCmd),
    /// Per-host worker supervisor.
    #[command(subcommand)]
    Troop(TroopCmd),
    /// A single worker; reads one task as JSON on stdin.
    #[command(subcommand)]
    Worker(WorkerCmd),
    /// Reference target.
    #[command(subcommand)]
    Target(TargetCmd),
    /// Attack-surface enumeration.
    #[command(subcommand)]
    Surface(SurfaceCmd),
    #[command(subcommand)]
    Tasks(TasksCmd),
    /// Run one generator against a running target.
    Generate(GenerateArgs),
    /// Replay an input log on a fresh vanilla target.
    Replay(ReplayArgs),
    /// Shrink an input log to a 1-minimal reproducer.
    Minify(MinifyArgs),
    /// Offline analysis of an artifact tree.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Backend, troop, workers and analysis in one go.
    #[command(subcommand)]
    Campaign(CampaignCmd),
}

#[derive(Subcommand)]
enum BackendCmd {
    Serve {
        #[arg(long, default_value = "127.0.0.1:7420")]
        bind: String,
        /// Event log; replayed on start.
        #[arg(long)]
        events: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        ttl_factor: f64,
        #[arg(long, default_value_t = 1.0)]
        min_ttl_s: f64,
    },
}

#[derive(Subcommand)]
enum TroopCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum WorkerCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long, default_value = "w0")]
        worker_id: String,
        #[arg(long)]
        heartbeat: Option<PathBuf>,
        /// Read the task from this file instead of stdin.
        #[arg(long)]
        task: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TargetCmd {
    Serve(TargetServeArgs),
}

#[derive(Args)]
struct TargetServeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    log: PathBuf,
    #[arg(long, default_value = "127.0.0.1:0")]
    bind: String,
    #[arg(long, default_value = "127.0.0.1:0")]
    feedback_bind: String,
    /// Written once both ports listen.
    #[arg(long)]
    ready_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    watchdog_ms: u64,
    #[arg(long, default_value_t = 3)]
    bootloop_kills: u32,
    #[arg(long, default_value_t = 120_000)]
    bootloop_window_ms: u64,
    /// No coverage channel.
    #[arg(long)]
    vanilla: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum SurfaceCmd {
    Map {
        /// From a manifest file.
        #[arg(long = "static", conflicts_with = "dynamic")]
        static_: Option<PathBuf>,
        /// From a running target.
        #[arg(long)]
        dynamic: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TasksCmd {
    Ingest {
        #[arg(long)]
        backend: String,
        /// `{"tasks": [...]}`
        #[arg(long)]
        file: PathBuf,
    },
    List {
        #[arg(long)]
        backend: String,
        #[arg(long)]
        status: Option<TaskStatus>,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    kind: GeneratorKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 60.0)]
    budget_s: f64,
    #[arg(long)]
    api: ApiRef,
    #[arg(long)]
    endpoint: String,
    #[arg(long)]
    feedback_endpoint: Option<String>,
    /// Where inputs.jsonl goes.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    principal: u32,
    #[arg(long)]
    max_execs: Option<u64>,
    #[arg(long, default_value_t = 4096)]
    max_payload: usize,
}

#[derive(Args)]
struct TargetOpts {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    watchdog_ms: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    patterns: Option<PathBuf>,
}

impl TargetOpts {
    fn load(&self) -> Result<(InstanceConfig, PatternTable), Error> {
        let manifest = Arc::new(Manifest::load(&self.manifest)?);
        let mut icfg = InstanceConfig::new(manifest, Some(self.manifest.clone()), Launcher::InThread);
        icfg.watchdog = Duration::from_millis(self.watchdog_ms);
        icfg.seed = self.seed;
        let table = match &self.patterns {
            Some(p) => PatternTable::load(p)?,
            None => PatternTable::builtin(),
        };
        Ok((icfg, table))
    }
}

#[derive(Args)]
struct ReplayArgs {
    #[command(flatten)]
    target: TargetOpts,
    #[arg(long)]
    inputs: PathBuf,
    /// Fail unless this crash class is observed.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MinifyArgs {
    #[command(flatten)]
    target: TargetOpts,
    #[arg(long)]
    inputs: PathBuf,
    #[arg(long)]
    class: String,
    #[arg(long)]
    out: PathBuf,
    /// Skip the confirming replay on a real instance.
    #[arg(long)]
    no_confirm: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    artifacts: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    patterns: Option<PathBuf>,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    Scan(AnalyzeArgs),
    Throughput(AnalyzeArgs),
    Coverage(AnalyzeArgs),
    Permmap(AnalyzeArgs),
    Diff {
        #[command(flatten)]
        common: AnalyzeArgs,
        /// Map file or manifest.
        #[arg(long)]
        reference: PathBuf,
    },
}

#[derive(Subcommand)]
enum CampaignCmd {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to this executable.
        #[arg(long)]
        worker_binary: Option<PathBuf>,
        #[arg(long)]
        artifacts: Option<PathBuf>,
    },
}

/// A failure with its exit status.
struct Fail(u8, String);

impl From<serde_json::Error> for Fail {
    fn from(e: serde_json::Error) -> Self {
        Fail(EXIT_INFRA, e.to_string())
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config { .. } | Error::Validation(_) => EXIT_CONFIG,
            _ => EXIT_INFRA,
        };
        Fail(code, e.to_string())
    }
}

type Outcome = Result<u8, Fail>;

fn init_logging(human: bool) {
    let mut b = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if !human {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "ts": std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_micros() as u64)
                    .unwrap_or(0),
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    b.init();
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<(), Error> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d).map_err(|e| Error::file(d, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::file(path, e))
}

fn parse_class(s: &str) -> Result<CrashClass, Fail> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
        let names: Vec<_> = CrashClass::ALL.iter().map(|c| c.name()).collect();
        Fail(EXIT_CONFIG, format!("unknown crash class `{s}`; one of {}", names.join(", ")))
    })
}

fn backend_serve(bind: &str, events: &Path, ttl_factor: f64, min_ttl_s: f64) -> Outcome {
    let store = TaskStore::open(events, Arc::new(SystemClock), StoreConfig { ttl_factor, min_ttl_s })?;
    let server = BackendServer::start(store, bind)?;
    log::info!("backend listening on {}", server.url());
    server.join();
    Ok(0)
}

fn troop_run(config: &Path) -> Outcome {
    let mut cfg: TroopConfig = load_json(config)?;
    cfg.worker_binary = resolve(config, &cfg.worker_binary);
    cfg.worker_config = resolve(config, &cfg.worker_config);
    cfg.artifact_root = resolve(config, &cfg.artifact_root);
    let mut troop = Troop::new(cfg.clone())?;
    let _status = match &cfg.status_bind {
        Some(b) => {
            let s = StatusServer::start(troop.board(), b)?;
            log::info!("status on http://{}/", s.addr());
            Some(s)
        }
        None => None,
    };
    troop.run(&AtomicBool::new(false))?;
    Ok(0)
}

fn worker_run(config: &Path, artifacts: &Path, worker_id: &str, heartbeat: Option<PathBuf>, task: Option<&Path>) -> Outcome {
    let settings = WorkerSettings::load(config)?;
    let mut cfg = WorkerConfig::from_settings(settings, worker_id)?;
    cfg.heartbeat = heartbeat;
    let text = match task {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::file(p, e))?,
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).map_err(Error::Io)?;
            s
        }
    };
    let task: Task = mfuz_core::config::from_json_str(&text, "task")?;
    let run = run_task(&task, &cfg, artifacts)?;
    log::info!(
        "task {} {:?}: {} execs, {} findings",
        task.task_id,
        run.report.status,
        run.report.execs,
        run.findings.len()
    );
    Ok(match run.report.status {
        TaskStatus::Done => 0,
        _ => 1,
    })
}

fn target_serve(a: &TargetServeArgs) -> Outcome {
    let manifest = Arc::new(Manifest::load(&a.manifest)?);
    let log = Arc::new(TargetLog::file(&a.log)?);
    let opts = SimOptions {
        instrumented: !a.vanilla,
        bootloop_kills: a.bootloop_kills,
        bootloop_window_ms: a.bootloop_window_ms,
        seed: a.seed,
    };
    let watchdog = Duration::from_millis(a.watchdog_ms);
    let scfg = ServerConfig {
        bind: a.bind.clone(),
        feedback_bind: a.feedback_bind.clone(),
        watchdog,
        watchdog_tick: ServerConfig::default().watchdog_tick.min(watchdog / 4).max(Duration::from_millis(10)),
        ..ServerConfig::default()
    };
    let server = TargetServer::start(SimCore::new(manifest, opts, log), scfg, ExitMode::Process)?;
    let ready = ReadyFile {
        endpoint: server.endpoint().to_string(),
        feedback_endpoint: server.feedback_endpoint().map(str::to_string),
        pid: std::process::id(),
    };
    match &a.ready_file {
        Some(p) => {
            let tmp = p.with_extension("tmp");
            write_json(&tmp, &serde_json::to_value(&ready)?)?;
            std::fs::rename(&tmp, p).map_err(|e| Error::file(p, e))?;
        }
        None => println!("{}", serde_json::to_string(&ready).map_err(Error::Json)?),
    }
    log::info!("target serving on {}", ready.endpoint);
    let code = server.wait();
    Ok(code.clamp(0, 255) as u8)
}

fn print_surface(s: &Surface) {
    let (prim, complex) = partition(s);
    println!(
        "{} services, {} apis ({} primitive, {} complex)",
        s.services().len(),
        s.apis.len(),
        prim.len(),
        complex.len()
    );
}

fn surface_map(stat: Option<&Path>, dynamic: Option<&str>, out: Option<&Path>) -> Outcome {
    let s = match (stat, dynamic) {
        (Some(p), None) => map_static(p)?,
        (None, Some(ep)) => map_dynamic(ep)?,
        _ => return Err(Fail(EXIT_CONFIG, "give one of --static or --dynamic".into())),
    };
    match out {
        Some(p) => std::fs::write(p, s.to_json()?).map_err(|e| Error::file(p, e))?,
        None => println!("{}", s.to_json()?),
    }
    print_surface(&s);
    Ok(0)
}

fn tasks_cmd(cmd: TasksCmd) -> Outcome {
    match cmd {
        TasksCmd::Ingest { backend, file } => {
            let tf = TaskFile::load(&file).map_err(|e| match e {
                Error::Json(j) => Fail(EXIT_CONFIG, format!("{}: {j}", file.display())),
                e => e.into(),
            })?;
            let n = BackendClient::new(&backend).ingest(tf.tasks)?;
            println!("ingested {n} tasks");
        }
        TasksCmd::List { backend, status } => {
            for t in BackendClient::new(&backend).list(status)? {
                println!("{}", serde_json::to_string(&t).map_err(Error::Json)?);
            }
        }
    }
    Ok(0)
}

fn generate(a: &GenerateArgs) -> Outcome {
    let surface = map_dynamic(&a.endpoint)?;
    let desc = surface
        .find(&a.api)
        .ok_or_else(|| Fail(EXIT_CONFIG, format!("{} is not on the target surface", a.api)))?;
    let mut gcfg = GeneratorConfig::new(a.kind, a.seed);
    gcfg.budget_s = a.budget_s;
    gcfg.max_payload = a.max_payload;
    let mut gen = generators::build(&gcfg, desc)?;
    let hcfg = HarnessConfig::new(&a.endpoint, a.feedback_endpoint.as_deref(), a.principal);
    let mut h = Harness::new(hcfg, InputLog::open(&a.out)?)?;
    let deadline = Instant::now() + Duration::from_secs_f64(a.budget_s.max(0.0));
    let mut execs = 0u64;
    let mut died = false;
    while Instant::now() < deadline && a.max_execs.is_none_or(|m| execs < m) {
        let p = gen.propose();
        let exec = h.send(&a.api, p.payload, p.decoded.as_deref())?;
        execs += 1;
        gen.observe(exec.feedback.as_ref());
        if let Delivery::TargetDeath(reason) = exec.delivery {
            log::warn!("target died after input {}: {reason}", exec.seq);
            died = true;
            break;
        }
    }
    h.log_mut().flush()?;
    drop(h);
    finalize(&a.out)?;
    println!("{execs} execs, corpus {}, target {}", gen.corpus_len(), if died { "died" } else { "alive" });
    Ok(0)
}

fn replay_cmd(a: &ReplayArgs) -> Outcome {
    let (icfg, table) = a.target.load()?;
    let expect = a.expect.as_deref().map(parse_class).transpose()?;
    let records = load_inputs(&a.inputs)?;
    let dir = tempdir_for("replay")?;
    let mut inst = fresh_instance(&icfg, Flavor::Vanilla, &dir.join("target.log"))?;
    let obs = verify::replay(&records, &mut inst, &table, &ReplayOptions::for_watchdog(icfg.watchdog))?;
    drop(inst);
    let _ = std::fs::remove_dir_all(&dir);
    if let Some(p) = &a.out {
        write_json(p, &serde_json::to_value(&obs)?)?;
    }
    let classes: Vec<String> = obs.classes().iter().map(|c| c.to_string()).collect();
    println!(
        "sent {}/{} inputs; observed: {}",
        obs.sent,
        records.len(),
        if classes.is_empty() { "nothing".to_string() } else { classes.join(", ") }
    );
    Ok(match expect {
        Some(c) if !obs.classes().contains(&c) => {
            println!("expected {c}: not reproduced");
            EXIT_CHECK
        }
        _ => 0,
    })
}

fn tempdir_for(tag: &str) -> Result<PathBuf, Error> {
    let d = std::env::temp_dir().join(format!("mfuz-{tag}-{}-{:08x}", std::process::id(), rand_u32()));
    std::fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))?;
    Ok(d)
}

fn rand_u32() -> u32 {
    let t = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.subsec_nanos())
        .unwrap_or(0);
    t ^ std::process::id().rotate_left(16)
}

fn minify_cmd(a: &MinifyArgs) -> Outcome {
    let (icfg, table) = a.target.load()?;
    let class = parse_class(&a.class)?;
    let records = load_inputs(&a.inputs)?;
    let check = InProcessCheck::new(icfg.manifest.clone(), table.clone(), &icfg);
    let m = match verify::minify(&records, class, &check) {
        Err(Error::NotReproducible) => {
            println!("{class} does not reproduce on the full log; nothing to minify");
            return Ok(EXIT_CHECK);
        }
        r => r?,
    };
    write_inputs(&a.out, &m.items)?;
    println!(
        "{} -> {} inputs in {} checks (bound {})",
        records.len(),
        m.items.len(),
        m.checks,
        verify::ddmin_bound(records.len())
    );
    if a.no_confirm {
        return Ok(0);
    }
    let dir = tempdir_for("minify")?;
    let opts = verify::VerifyOptions {
        attempts: 1,
        replay: ReplayOptions::for_watchdog(icfg.watchdog),
        work_dir: dir.clone(),
        fallback_full: false,
    };
    let out = verify::reproduces(class, &m.items, &icfg, &table, &opts, "min")?;
    let _ = std::fs::remove_dir_all(&dir);
    println!("confirming replay: {out:?}");
    Ok(if out == verify::ReproOutcome::Reproduced { 0 } else { EXIT_CHECK })
}

enum Report {
    Scan,
    Throughput,
    Coverage,
    Permmap,
    Diff(PathBuf),
}

fn analyze_cmd(cmd: AnalyzeCmd) -> Outcome {
    let (common, kind) = match cmd {
        AnalyzeCmd::Scan(c) => (c, Report::Scan),
        AnalyzeCmd::Throughput(c) => (c, Report::Throughput),
        AnalyzeCmd::Coverage(c) => (c, Report::Coverage),
        AnalyzeCmd::Permmap(c) => (c, Report::Permmap),
        AnalyzeCmd::Diff { common, reference } => (common, Report::Diff(reference)),
    };
    let table = match &common.patterns {
        Some(p) => PatternTable::load(p)?,
        None => PatternTable::builtin(),
    };
    let loaded = analyzer::load(&common.artifacts);
    let (json, text) = match kind {
        Report::Scan => {
            let inv = scan_loaded(&loaded, &table);
            (serde_json::to_value(&inv), render_scan(&inv))
        }
        Report::Throughput => {
            let s = throughput_stats(&loaded.sessions);
            (serde_json::to_value(&s), render_throughput(&s))
        }
        Report::Coverage => {
            let s = coverage_stats(&loaded.sessions);
            (serde_json::to_value(&s), render_coverage(&s))
        }
        Report::Permmap => {
            let m = build_permission_map(&loaded.sessions);
            (serde_json::to_value(&m), render_permmap(&m))
        }
        Report::Diff(r) => {
            let reference = PermissionMap::load(&r)?;
            let d = diff_permission_map(&build_permission_map(&loaded.sessions), &reference);
            (serde_json::to_value(&d), render_diff(&d))
        }
    };
    let json = json.map_err(Error::Json)?;
    if let Some(p) = &common.out {
        write_json(p, &json)?;
    }
    print!("{text}");
    Ok(0)
}

fn campaign_run(config: &Path, worker_binary: Option<PathBuf>, artifacts: Option<PathBuf>) -> Outcome {
    let mut c = Campaign::load(config)?;
    if artifacts.is_some() {
        c.config.artifact_root = artifacts;
    }
    let bin = match worker_binary {
        Some(b) => b,
        None => std::env::current_exe().map_err(Error::Io)?,
    };
    for s in &c.skipped {
        log::info!("skipped {s}");
    }
    let out = campaign::run(&c, &bin, &AtomicBool::new(false))?;
    print!("{}", campaign::render(&out.report));
    println!("artifacts: {}", out.root.display());
    if out.missing.is_empty() {
        Ok(0)
    } else {
        for m in &out.missing {
            println!("missing: {m}");
        }
        Ok(EXIT_CHECK)
    }
}

fn dispatch(cmd: Cmd) -> Outcome {
    match cmd {
        Cmd::Backend(BackendCmd::Serve { bind, events, ttl_factor, min_ttl_s }) => {
            backend_serve(&bind, &events, ttl_factor, min_ttl_s)
        }
        Cmd::Troop(TroopCmd::Run { config }) => troop_run(&config),
        Cmd::Worker(WorkerCmd::Run { config, artifacts, worker_id, heartbeat, task }) => {
            worker_run(&config, &artifacts, &worker_id, heartbeat, task.as_deref())
        }
        Cmd::Target(TargetCmd::Serve(a)) => target_serve(&a),
        Cmd::Surface(SurfaceCmd::Map { static_, dynamic, out }) => {
            surface_map(static_.as_deref(), dynamic.as_deref(), out.as_deref())
        }
        Cmd::Tasks(t) => tasks_cmd(t),
        Cmd::Generate(a) => generate(&a),
        Cmd::Replay(a) => replay_cmd(&a),
        Cmd::Minify(a) => minify_cmd(&a),
        Cmd::Analyze(a) => analyze_cmd(a),
        Cmd::Campaign(CampaignCmd::Run { config, worker_binary, artifacts }) => {
            campaign_run(&config, worker_binary, artifacts)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.human);
    match dispatch(cli.cmd) {
        Ok(code) => ExitCode::from(code),
        Err(Fail(code, msg)) => {
            log::error!("{msg}");
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
