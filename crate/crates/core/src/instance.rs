//! Launching fresh target instances, as OS processes or as in-process
//! servers.

use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::TargetClient;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::target::log::now_us;
use crate::target::{ExitMode, ServerConfig, SimCore, SimOptions, TargetLog, TargetServer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Instrumented,
    Vanilla,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Launcher {
    /// `{binary} target serve ...` as a child process.
    Process { binary: PathBuf },
    /// A [`TargetServer`] inside this process. Fatal target exits stop the
    /// server instead of the host.
    InThread,
}

/// Written by `target serve` once both ports listen.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadyFile {
    pub endpoint: String,
    #[serde(default)]
    pub feedback_endpoint: Option<String>,
    pub pid: u32,
}

#[derive(Debug, Clone)]
pub struct InstanceConfig {
    pub manifest: Arc<Manifest>,
    /// Needed by the process launcher.
    pub manifest_path: Option<PathBuf>,
    pub launcher: Launcher,
    pub watchdog: Duration,
    pub bootloop_kills: u32,
    pub bootloop_window: Duration,
    pub boot_timeout: Duration,
    pub retries: u32,
    /// Seed for probabilistic faults; random when absent.
    pub seed: Option<u64>,
}

impl InstanceConfig {
    pub fn new(manifest: Arc<Manifest>, manifest_path: Option<PathBuf>, launcher: Launcher) -> Self {
        let d = SimOptions::default();
        InstanceConfig {
            manifest,
            manifest_path,
            launcher,
            watchdog: ServerConfig::default().watchdog,
            bootloop_kills: d.bootloop_kills,
            bootloop_window: Duration::from_millis(d.bootloop_window_ms),
            boot_timeout: Duration::from_secs(15),
            retries: 2,
            seed: None,
        }
    }
}

enum Host {
    Process(Child),
    Thread(TargetServer),
}

pub struct InstanceHandle {
    pub instance_id: String,
    pub endpoint: String,
    pub feedback_endpoint: Option<String>,
    pub flavor: Flavor,
    pub booted_at: u64,
    pub log_path: PathBuf,
    host: Host,
    exit: Option<i32>,
}

impl std::fmt::Debug for InstanceHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InstanceHandle")
            .field("instance_id", &self.instance_id)
            .field("endpoint", &self.endpoint)
            .field("flavor", &self.flavor)
            .finish()
    }
}

impl InstanceHandle {
    /// Exit status once the target has stopped.
    pub fn exit_code(&mut self) -> Option<i32> {
        if self.exit.is_none() {
            self.exit = match &mut self.host {
                Host::Process(c) => match c.try_wait() {
                    Ok(Some(s)) => Some(exit_status_code(s)),
                    _ => None,
                },
                Host::Thread(s) => s.exit_code(),
            };
        }
        self.exit
    }

    pub fn is_running(&mut self) -> bool {
        self.exit_code().is_none()
    }

    /// Waits up to `timeout` for the target to stop by itself.
    pub fn wait_exit(&mut self, timeout: Duration) -> Option<i32> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(c) = self.exit_code() {
                return Some(c);
            }
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            match &self.host {
                Host::Thread(s) => {
                    s.wait_timeout(deadline - now);
                }
                Host::Process(_) => std::thread::sleep((deadline - now).min(Duration::from_millis(20))),
            }
        }
    }

    /// External kill; the status records a kill, not a target exit.
    pub fn kill(&mut self) {
        match &mut self.host {
            Host::Process(c) => {
                let _ = c.kill();
                if let Ok(s) = c.wait() {
                    self.exit.get_or_insert(exit_status_code(s));
                }
            }
            Host::Thread(s) => {
                let prior = s.exit_code();
                s.shutdown();
                // Same status a SIGKILLed process reports.
                self.exit.get_or_insert(prior.unwrap_or(128 + 9));
            }
        }
    }

    pub fn client(&self, timeout: Duration) -> Result<TargetClient> {
        TargetClient::connect_timeout(&self.endpoint, timeout)
    }
}

impl Drop for InstanceHandle {
    fn drop(&mut self) {
        if self.exit.is_none() {
            self.kill();
        }
    }
}

#[cfg(unix)]
fn exit_status_code(s: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    s.code().unwrap_or_else(|| 128 + s.signal().unwrap_or(0))
}

#[cfg(not(unix))]
fn exit_status_code(s: std::process::ExitStatus) -> i32 {
    s.code().unwrap_or(-1)
}

fn instance_id() -> String {
    format!("i{:x}-{:08x}", now_us(), rand::random::<u32>())
}

fn wait_healthy(endpoint: &str, deadline: Instant) -> Result<()> {
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        let attempt = TargetClient::connect_timeout(endpoint, left.max(Duration::from_millis(50)))
            .and_then(|mut c| c.ping());
        match attempt {
            Ok(()) => return Ok(()),
            Err(e) if Instant::now() >= deadline => {
                return Err(Error::Boot(format!("{endpoint} not healthy: {e}")))
            }
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn launch_thread(cfg: &InstanceConfig, flavor: Flavor, log_path: &Path) -> Result<InstanceHandle> {
    let log = Arc::new(TargetLog::file(log_path)?);
    let opts = SimOptions {
        instrumented: flavor == Flavor::Instrumented,
        bootloop_kills: cfg.bootloop_kills,
        bootloop_window_ms: cfg.bootloop_window.as_millis() as u64,
        seed: cfg.seed,
    };
    let core = SimCore::new(cfg.manifest.clone(), opts, log);
    let scfg = ServerConfig {
        watchdog: cfg.watchdog,
        watchdog_tick: ServerConfig::default().watchdog_tick.min(cfg.watchdog / 4).max(Duration::from_millis(10)),
        ..ServerConfig::default()
    };
    let server = TargetServer::start(core, scfg, ExitMode::Thread)?;
    let booted_at = now_us();
    wait_healthy(server.endpoint(), Instant::now() + cfg.boot_timeout)?;
    Ok(InstanceHandle {
        instance_id: instance_id(),
        endpoint: server.endpoint().to_string(),
        feedback_endpoint: server.feedback_endpoint().map(str::to_string),
        flavor,
        booted_at,
        log_path: log_path.to_path_buf(),
        host: Host::Thread(server),
        exit: None,
    })
}

fn launch_process(
    cfg: &InstanceConfig,
    binary: &Path,
    flavor: Flavor,
    log_path: &Path,
) -> Result<InstanceHandle> {
    let manifest = cfg
        .manifest_path
        .as_ref()
        .ok_or_else(|| Error::Boot("process launcher needs a manifest path".into()))?;
    let ready = log_path.with_file_name(format!(
        ".ready-{}.json",
        rand::random::<u32>()
    ));
    let _ = std::fs::remove_file(&ready);
    let mut cmd = Command::new(binary);
    cmd.args(["target", "serve", "--manifest"])
        .arg(manifest)
        .arg("--log")
        .arg(log_path)
        .arg("--ready-file")
        .arg(&ready)
        .arg("--watchdog-ms")
        .arg(cfg.watchdog.as_millis().to_string())
        .arg("--bootloop-kills")
        .arg(cfg.bootloop_kills.to_string())
        .arg("--bootloop-window-ms")
        .arg(cfg.bootloop_window.as_millis().to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null());
    if flavor == Flavor::Vanilla {
        cmd.arg("--vanilla");
    }
    if let Some(seed) = cfg.seed {
        cmd.arg("--seed").arg(seed.to_string());
    }
    let mut child = cmd
        .spawn()
        .map_err(|e| Error::Boot(format!("spawn {}: {e}", binary.display())))?;
    let booted_at = now_us();
    let deadline = Instant::now() + cfg.boot_timeout;
    let info: ReadyFile = loop {
        if let Ok(text) = std::fs::read_to_string(&ready) {
            if let Ok(info) = serde_json::from_str(&text) {
                break info;
            }
        }
        if let Ok(Some(s)) = child.try_wait() {
            return Err(Error::Boot(format!("target exited during boot ({s})")));
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            let _ = child.wait();
            return Err(Error::Boot(format!(
                "no ready file within {:?}",
                cfg.boot_timeout
            )));
        }
        std::thread::sleep(Duration::from_millis(10));
    };
    let _ = std::fs::remove_file(&ready);
    let mut handle = InstanceHandle {
        instance_id: instance_id(),
        endpoint: info.endpoint,
        feedback_endpoint: info.feedback_endpoint,
        flavor,
        booted_at,
        log_path: log_path.to_path_buf(),
        host: Host::Process(child),
        exit: None,
    };
    if let Err(e) = wait_healthy(&handle.endpoint, deadline) {
        handle.kill();
        return Err(e);
    }
    Ok(handle)
}

/// Boots a new target from pristine manifest state, appending its log to
/// `log_path`. Retries failed boots `cfg.retries` times.
pub fn fresh_instance(cfg: &InstanceConfig, flavor: Flavor, log_path: &Path) -> Result<InstanceHandle> {
    let mut last = None;
    for _ in 0..=cfg.retries {
        let r = match &cfg.launcher {
            Launcher::InThread => launch_thread(cfg, flavor, log_path),
            Launcher::Process { binary } => launch_process(cfg, binary, flavor, log_path),
        };
        match r {
            Ok(h) => return Ok(h),
            Err(e) => {
                log::warn!("instance boot failed: {e}");
                last = Some(e);
            }
        }
    }
    Err(last.unwrap_or_else(|| Error::Boot("no attempt made".into())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> InstanceConfig {
        InstanceConfig::new(Arc::new(Manifest::reference()), None, Launcher::InThread)
    }

    #[test]
    fn sequential_instances_are_distinct_and_healthy() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg();
        let a = fresh_instance(&c, Flavor::Instrumented, &dir.path().join("a.log")).unwrap();
        let b = fresh_instance(&c, Flavor::Vanilla, &dir.path().join("b.log")).unwrap();
        assert_ne!(a.instance_id, b.instance_id);
        assert!(a.feedback_endpoint.is_some());
        assert!(b.feedback_endpoint.is_none());
        a.client(Duration::from_secs(1)).unwrap().ping().unwrap();
        b.client(Duration::from_secs(1)).unwrap().ping().unwrap();
    }

    #[test]
    fn kill_stops_thread_instance() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = fresh_instance(&cfg(), Flavor::Vanilla, &dir.path().join("a.log")).unwrap();
        assert!(a.is_running());
        a.kill();
        assert!(!a.is_running());
        assert!(a.client(Duration::from_millis(200)).and_then(|mut c| c.ping()).is_err());
    }
}
