//! Replay of persisted inputs on fresh vanilla targets, verification of
//! crash candidates, and ddmin minification of reproducers.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::{fresh_instance, Flavor, InstanceConfig, InstanceHandle};
use crate::manifest::Manifest;
use crate::monitors::{
    probe_liveness, ClassifyOptions, Classifier, CrashClass, CrashReport, Health, Liveness,
    LogEvent, LogTail, PatternTable, LIVENESS_GRACE,
};
use crate::records::InputRecord;
use crate::target::core::{Effect, KillOutcome};
use crate::target::{SimCore, SimOptions, TargetLog};
use crate::wire::Request;

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub response_timeout: Duration,
    pub probe_timeout: Duration,
    /// A healthy target must stay up this long after the last input.
    pub quiet: Duration,
    /// Upper bound on waiting for a dying target to finish dying.
    pub settle_deadline: Duration,
    pub grace: Duration,
}

impl ReplayOptions {
    /// Settling waits long enough for three watchdog kills of window `w`.
    pub fn for_watchdog(w: Duration) -> Self {
        ReplayOptions {
            response_timeout: Duration::from_secs(2),
            probe_timeout: Duration::from_secs(1),
            quiet: Duration::from_millis(300),
            settle_deadline: w * 3 + Duration::from_secs(5),
            grace: LIVENESS_GRACE,
        }
    }
}

/// Watches a target after input delivery stopped until it exits, proves
/// healthy, or the deadline passes. Probes go to `probes`.
pub fn settle(
    instance: &mut InstanceHandle,
    tail: &mut LogTail,
    clf: &mut Classifier,
    probes: &mut Vec<Liveness>,
    opts: &ReplayOptions,
) {
    let start = Instant::now();
    let table = clf.table().clone();
    let drain = |tail: &mut LogTail, clf: &mut Classifier| {
        for ev in tail.poll(&table) {
            clf.feed_event(&ev);
        }
        if tail.degraded() {
            clf.set_degraded();
        }
    };
    loop {
        drain(tail, clf);
        if instance.exit_code().is_some() {
            drain(tail, clf);
            if !clf.has_crash() {
                // Silent exit: probe across the grace period.
                let p = probe_liveness(&instance.endpoint, opts.probe_timeout, None);
                clf.feed_probe(&p);
                probes.push(p);
                std::thread::sleep(opts.grace);
                drain(tail, clf);
                let p = probe_liveness(&instance.endpoint, opts.probe_timeout, None);
                clf.feed_probe(&p);
                probes.push(p);
            }
            return;
        }
        let p = probe_liveness(&instance.endpoint, opts.probe_timeout, None);
        clf.feed_probe(&p);
        let healthy = p.dispatcher == Health::Healthy;
        let dead = p.dispatcher == Health::Dead;
        probes.push(p);
        if healthy && start.elapsed() >= opts.quiet {
            drain(tail, clf);
            return;
        }
        if dead && clf.has_crash() && start.elapsed() >= opts.grace {
            return;
        }
        if start.elapsed() >= opts.settle_deadline {
            drain(tail, clf);
            return;
        }
        std::thread::sleep(Duration::from_millis(100));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observed {
    pub candidates: Vec<CrashReport>,
    pub sent: usize,
    /// Delivery stopped early because the target stopped answering.
    pub died: bool,
    pub exit_code: Option<i32>,
}

impl Observed {
    pub fn classes(&self) -> Vec<CrashClass> {
        self.candidates.iter().map(|c| c.class).collect()
    }
}

/// Sends every record's request in order at full speed, then settles and
/// classifies. The instance must be vanilla and is left for the caller to
/// drop.
pub fn replay(
    records: &[InputRecord],
    instance: &mut InstanceHandle,
    table: &PatternTable,
    opts: &ReplayOptions,
) -> Result<Observed> {
    if instance.flavor != Flavor::Vanilla {
        return Err(Error::Other(
            "replay runs on vanilla instances only".to_string(),
        ));
    }
    let requests = records
        .iter()
        .map(|r| r.request().map(|q| (r.seq, q.encode())))
        .collect::<Result<Vec<_>>>()?;
    let mut clf = Classifier::new(
        table.clone(),
        ClassifyOptions {
            include_heuristic: false,
            grace: opts.grace,
        },
    );
    let mut tail = LogTail::new(&instance.log_path);
    let mut sent_at = Vec::with_capacity(requests.len());
    let mut died = false;
    if !requests.is_empty() {
        match instance.client(opts.response_timeout) {
            Err(_) => died = true,
            Ok(mut conn) => {
                for (seq, body) in &requests {
                    sent_at.push((*seq, crate::target::log::now_us()));
                    if conn.send_body(body).and_then(|_| conn.recv()).is_err() {
                        died = true;
                        break;
                    }
                }
            }
        }
    }
    let mut probes = Vec::new();
    settle(instance, &mut tail, &mut clf, &mut probes, opts);
    Ok(Observed {
        candidates: clf.finish(&sent_at),
        sent: sent_at.len(),
        died,
        exit_code: instance.exit_code(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReproOutcome {
    Reproduced,
    FalsePositive,
    Flaky,
    /// Instances failed to boot; says nothing about the candidate.
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    Window,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproResult {
    pub candidate_class: CrashClass,
    pub outcome: ReproOutcome,
    pub attempts: u32,
    pub reproduced_in: u32,
    pub matched_class: Option<CrashClass>,
    pub slice: SliceKind,
    /// Sequence numbers of the replayed inputs.
    pub reproducer: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub minimal_reproducer: Option<Vec<u64>>,
    /// Marker pattern ids seen in reproducing attempts.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub attempts: u32,
    pub replay: ReplayOptions,
    /// Attempt logs go here.
    pub work_dir: PathBuf,
    /// Replay the whole log when the window does not reproduce.
    pub fallback_full: bool,
}

pub fn window_slice<'a>(records: &'a [InputRecord], window: Option<(u64, u64)>) -> &'a [InputRecord] {
    let Some((a, b)) = window else {
        return records;
    };
    let start = records.partition_point(|r| r.seq < a);
    let end = records.partition_point(|r| r.seq <= b);
    &records[start..end]
}

fn run_attempts(
    class: CrashClass,
    slice: &[InputRecord],
    icfg: &InstanceConfig,
    table: &PatternTable,
    opts: &VerifyOptions,
    tag: &str,
) -> Result<(ReproOutcome, u32, Vec<String>)> {
    std::fs::create_dir_all(&opts.work_dir).map_err(|e| Error::file(&opts.work_dir, e))?;
    let mut hits = 0;
    let mut markers = Vec::new();
    for attempt in 0..opts.attempts {
        let mut cfg = icfg.clone();
        cfg.seed = icfg.seed.map(|s| s.wrapping_add(attempt as u64));
        let log_path = opts.work_dir.join(format!("verify-{tag}-{attempt}.log"));
        let _ = std::fs::remove_file(&log_path);
        let mut inst = match fresh_instance(&cfg, Flavor::Vanilla, &log_path) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("verification attempt {attempt}: {e}");
                return Ok((ReproOutcome::Inconclusive, hits, markers));
            }
        };
        let obs = replay(slice, &mut inst, table, &opts.replay)?;
        inst.kill();
        if let Some(c) = obs.candidates.iter().find(|c| c.class == class) {
            hits += 1;
            for m in &c.markers {
                if let Some(id) = &m.matched_pattern {
                    if !markers.contains(id) {
                        markers.push(id.clone());
                    }
                }
            }
        }
    }
    let outcome = match hits {
        0 => ReproOutcome::FalsePositive,
        h if h == opts.attempts => ReproOutcome::Reproduced,
        _ => ReproOutcome::Flaky,
    };
    Ok((outcome, hits, markers))
}

/// Replays `slice` on fresh vanilla instances `opts.attempts` times.
pub fn reproduces(
    class: CrashClass,
    slice: &[InputRecord],
    icfg: &InstanceConfig,
    table: &PatternTable,
    opts: &VerifyOptions,
    tag: &str,
) -> Result<ReproOutcome> {
    Ok(run_attempts(class, slice, icfg, table, opts, tag)?.0)
}

/// Replays the candidate's window up to `opts.attempts` times on fresh
/// vanilla instances. A window that never reproduces is retried as the
/// full log.
pub fn verify(
    candidate: &CrashReport,
    records: &[InputRecord],
    icfg: &InstanceConfig,
    table: &PatternTable,
    opts: &VerifyOptions,
) -> Result<ReproResult> {
    let window = window_slice(records, candidate.window);
    let mut slice = window;
    let mut kind = if window.len() == records.len() {
        SliceKind::Full
    } else {
        SliceKind::Window
    };
    let (mut outcome, mut hits, mut markers) =
        run_attempts(candidate.class, slice, icfg, table, opts, "window")?;
    if outcome == ReproOutcome::FalsePositive && kind == SliceKind::Window && opts.fallback_full {
        slice = records;
        kind = SliceKind::Full;
        (outcome, hits, markers) = run_attempts(candidate.class, slice, icfg, table, opts, "full")?;
    }
    Ok(ReproResult {
        candidate_class: candidate.class,
        outcome,
        attempts: opts.attempts,
        reproduced_in: hits,
        matched_class: (hits > 0).then_some(candidate.class),
        slice: kind,
        reproducer: slice.iter().map(|r| r.seq).collect(),
        minimal_reproducer: None,
        markers,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minified<T> {
    pub items: Vec<T>,
    pub checks: usize,
}

/// Worst-case check count of [`ddmin`] on `n` items.
pub fn ddmin_bound(n: usize) -> usize {
    n * n + 3 * n + 1
}

fn chunks(len: usize, n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .map(|i| (i * len / n, (i + 1) * len / n))
        .filter(|(a, b)| a < b)
        .collect()
}

/// Delta debugging: a 1-minimal sublist of `items`, order kept, on which
/// `check` still holds. Granularity starts at 2 and doubles; after a
/// complement succeeds, scanning resumes at the same chunk index. At the
/// finest granularity full passes repeat until one removes nothing.
pub fn ddmin<T: Clone>(items: &[T], mut check: impl FnMut(&[T]) -> bool) -> Result<Minified<T>> {
    let mut checks = 1;
    if !check(items) {
        return Err(Error::NotReproducible);
    }
    let mut c: Vec<T> = items.to_vec();
    let mut n = 2usize;
    while c.len() >= 2 {
        n = n.min(c.len());
        let parts = chunks(c.len(), n);
        // Subsets first.
        let mut reduced = false;
        for (a, b) in &parts {
            checks += 1;
            if check(&c[*a..*b]) {
                c = c[*a..*b].to_vec();
                n = 2;
                reduced = true;
                break;
            }
        }
        if reduced {
            continue;
        }
        if n == 2 {
            // Complements of two halves are the halves themselves.
            if c.len() == 2 {
                break;
            }
            n = 4.min(c.len());
            continue;
        }
        // Complements, resuming after each removal.
        let mut i = 0;
        let mut removed_any = false;
        while n >= 2 && c.len() >= 2 {
            let parts = chunks(c.len(), n);
            if i >= parts.len() {
                break;
            }
            let (a, b) = parts[i];
            let comp: Vec<T> = c[..a].iter().chain(c[b..].iter()).cloned().collect();
            checks += 1;
            if check(&comp) {
                c = comp;
                n = (n - 1).max(2);
                removed_any = true;
            } else {
                i += 1;
            }
        }
        if c.len() < 2 {
            break;
        }
        if n >= c.len() {
            if !removed_any {
                break;
            }
            // Finest granularity removed something: another full pass.
            n = c.len();
            continue;
        }
        if !removed_any {
            n = (2 * n).min(c.len());
        }
    }
    Ok(Minified { items: c, checks })
}

/// Replays requests on an in-process vanilla core: quick enough for the
/// many checks minification needs. A wedge is followed by watchdog kills
/// until the core restarts cleanly or bootloops.
pub struct InProcessCheck {
    manifest: Arc<Manifest>,
    table: PatternTable,
    opts: SimOptions,
    watchdog_ms: u64,
}

impl InProcessCheck {
    pub fn new(manifest: Arc<Manifest>, table: PatternTable, icfg: &InstanceConfig) -> Self {
        InProcessCheck {
            manifest,
            table,
            opts: SimOptions {
                instrumented: false,
                bootloop_kills: icfg.bootloop_kills,
                bootloop_window_ms: icfg.bootloop_window.as_millis() as u64,
                seed: icfg.seed,
            },
            watchdog_ms: icfg.watchdog.as_millis() as u64,
        }
    }

    /// Crash classes the request sequence produces.
    pub fn observe(&self, reqs: &[Request]) -> Vec<CrashClass> {
        let log = Arc::new(TargetLog::memory());
        let mut core = SimCore::new(self.manifest.clone(), self.opts.clone(), log.clone());
        let mut aborted = false;
        for r in reqs {
            match core.dispatch(r).effect {
                Effect::None => continue,
                Effect::SoftReboot => break,
                Effect::Abort(_) => {
                    aborted = true;
                    break;
                }
                Effect::Wedge => {
                    for _ in 0..64 {
                        match core.watchdog_kill(self.watchdog_ms) {
                            KillOutcome::Restarted { wedged: true } => continue,
                            KillOutcome::Restarted { wedged: false } => break,
                            KillOutcome::Bootloop => {
                                aborted = true;
                                break;
                            }
                        }
                    }
                    break;
                }
            }
        }
        let mut clf = Classifier::new(self.table.clone(), ClassifyOptions::default());
        for line in log.lines() {
            if let Some(ev) = LogEvent::parse(&line, &self.table) {
                clf.feed_event(&ev);
            }
        }
        let mut out: Vec<CrashClass> = clf.finish(&[]).into_iter().map(|c| c.class).collect();
        if aborted && out.is_empty() {
            out.push(CrashClass::LivenessLoss);
        }
        out
    }

    pub fn check(&self, reqs: &[Request], class: CrashClass) -> bool {
        self.observe(reqs).contains(&class)
    }
}

/// Minifies a record list against the in-process check for `class`.
pub fn minify(
    records: &[InputRecord],
    class: CrashClass,
    check: &InProcessCheck,
) -> Result<Minified<InputRecord>> {
    let reqs = records
        .iter()
        .map(InputRecord::request)
        .collect::<Result<Vec<_>>>()?;
    let idx: Vec<usize> = (0..records.len()).collect();
    let m = ddmin(&idx, |sub| {
        let rs: Vec<Request> = sub.iter().map(|i| reqs[*i].clone()).collect();
        check.check(&rs, class)
    })?;
    Ok(Minified {
        items: m.items.iter().map(|i| records[*i].clone()).collect(),
        checks: m.checks,
    })
}

/// Files of a reproducer bundle.
pub const REPRO_FILE: &str = "repro.jsonl";
pub const EXPECTED_FILE: &str = "expected.json";
pub const REPLAY_SCRIPT: &str = "replay.sh";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expected {
    pub class: CrashClass,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<String>,
}

/// Writes `repro.jsonl`, `expected.json` and `replay.sh` into `dir`.
pub fn write_bundle(dir: &Path, inputs: &[InputRecord], expected: &Expected) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    crate::records::write_inputs(&dir.join(REPRO_FILE), inputs)?;
    let exp = dir.join(EXPECTED_FILE);
    std::fs::write(&exp, serde_json::to_string_pretty(expected)?).map_err(|e| Error::file(&exp, e))?;
    let script = dir.join(REPLAY_SCRIPT);
    let body = format!(
        "#!/bin/sh\n# Replays the reproducer on a fresh vanilla target and checks for `{}`.\n\
         # Usage: replay.sh MANIFEST\nset -e\ncd \"$(dirname \"$0\")\"\n\
         exec \"${{MFUZ:-mfuz}}\" replay --manifest \"${{1:?manifest path}}\" --inputs {REPRO_FILE} --expect {}\n",
        expected.class, expected.class
    );
    std::fs::write(&script, body).map_err(|e| Error::file(&script, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        let _ = std::fs::set_permissions(&script, std::fs::Permissions::from_mode(0o755));
    }
    Ok(())
}
