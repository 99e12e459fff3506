//! Offline analysis of worker artifact trees: finding inventory,
//! throughput and coverage statistics, permission maps and their diffs.
//! Every function here is a pure function of the files it reads.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backend::Analysis;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::monitors::{CrashClass, LogEvent, PatternTable};
use crate::records::{InputRecord, Outcome, INPUTS_FILE};
use crate::surface::ApiRef;
use crate::worker::{Finding, Report, REPORT_FILE, TARGET_LOG};

/// Directories under a task that never hold another task.
const SKIP_DIRS: [&str; 4] = ["findings", "verify", "work", "orphaned"];

/// One API session with its input records.
#[derive(Debug, Clone)]
pub struct Session {
    pub task_id: String,
    /// Task directory relative to the scanned root.
    pub path: String,
    pub analysis: Analysis,
    pub generator: Option<String>,
    pub api: ApiRef,
    pub method: Option<String>,
    pub principal: u32,
    pub execs: u64,
    pub records: Vec<InputRecord>,
}

impl Session {
    pub fn generator_label(&self) -> String {
        self.generator.clone().unwrap_or_else(|| "unknown".into())
    }

    /// `service.method` when known, else `service:txn`.
    pub fn api_key(&self) -> String {
        self.method.clone().unwrap_or_else(|| self.api.to_string())
    }
}

#[derive(Debug, Clone)]
pub struct TaskArtifacts {
    pub path: String,
    pub dir: PathBuf,
    pub report: Report,
    pub records: Vec<InputRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Malformed {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Loaded {
    pub tasks: Vec<TaskArtifacts>,
    pub sessions: Vec<Session>,
    pub malformed: Vec<Malformed>,
}

fn rel(root: &Path, p: &Path) -> String {
    let r = p.strip_prefix(root).unwrap_or(p).to_string_lossy().to_string();
    if r.is_empty() {
        ".".into()
    } else {
        r
    }
}

fn task_dirs(root: &Path, out: &mut Vec<PathBuf>, bad: &mut Vec<Malformed>, top: &Path) {
    if root.join(REPORT_FILE).is_file() {
        out.push(root.to_path_buf());
        return;
    }
    let entries = match std::fs::read_dir(root) {
        Ok(e) => e,
        Err(e) => {
            bad.push(Malformed {
                path: rel(top, root),
                reason: e.to_string(),
            });
            return;
        }
    };
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter(|p| {
            let n = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            !SKIP_DIRS.contains(&n)
        })
        .collect();
    dirs.sort();
    for d in dirs {
        task_dirs(&d, out, bad, top);
    }
}

/// Reads input records, skipping (and counting) unparsable lines.
fn read_records(path: &Path) -> std::io::Result<(Vec<InputRecord>, usize)> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    let mut bad = 0;
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<InputRecord>(&line) {
            Ok(r) => out.push(r),
            Err(_) => bad += 1,
        }
    }
    out.sort_by_key(|r| r.seq);
    Ok((out, bad))
}

/// Loads every task directory below `root` (or `root` itself).
pub fn load(root: &Path) -> Loaded {
    let mut dirs = Vec::new();
    let mut loaded = Loaded::default();
    if !root.is_dir() {
        loaded.malformed.push(Malformed {
            path: root.display().to_string(),
            reason: "not a directory".into(),
        });
        return loaded;
    }
    task_dirs(root, &mut dirs, &mut loaded.malformed, root);
    for dir in dirs {
        let path = rel(root, &dir);
        let report: Report = match std::fs::read_to_string(dir.join(REPORT_FILE))
            .map_err(Error::from)
            .and_then(|t| serde_json::from_str(&t).map_err(Error::from))
        {
            Ok(r) => r,
            Err(e) => {
                loaded.malformed.push(Malformed {
                    path: format!("{path}/{REPORT_FILE}"),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let records = match read_records(&dir.join(INPUTS_FILE)) {
            Ok((r, 0)) => r,
            Ok((r, bad)) => {
                loaded.malformed.push(Malformed {
                    path: format!("{path}/{INPUTS_FILE}"),
                    reason: format!("{bad} unparsable lines skipped"),
                });
                r
            }
            Err(e) => {
                loaded.malformed.push(Malformed {
                    path: format!("{path}/{INPUTS_FILE}"),
                    reason: e.to_string(),
                });
                Vec::new()
            }
        };
        if report.analysis != Analysis::Replay {
            for s in &report.sessions {
                let recs: Vec<InputRecord> = match s.seqs {
                    Some((a, b)) => records
                        .iter()
                        .filter(|r| r.seq >= a && r.seq <= b)
                        .cloned()
                        .collect(),
                    None => Vec::new(),
                };
                loaded.sessions.push(Session {
                    task_id: report.task_id.clone(),
                    path: path.clone(),
                    analysis: report.analysis,
                    generator: s.generator.map(|g| g.name().to_string()),
                    api: s.api.clone(),
                    method: s.method.clone(),
                    principal: s.principal,
                    execs: s.execs,
                    records: recs,
                });
            }
        }
        loaded.tasks.push(TaskArtifacts {
            path,
            dir,
            report,
            records,
        });
    }
    loaded
}

// ---------------------------------------------------------------- scan

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub task_id: String,
    pub path: String,
    pub analysis: Analysis,
    pub generator: Option<String>,
    pub api: String,
    pub execs: u64,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FindingEntry {
    pub class: CrashClass,
    pub api: String,
    pub task_id: String,
    pub window: Option<(u64, u64)>,
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducer_len: Option<usize>,
    /// `task_id#finding_id` of every merged report.
    pub merged: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicFinding {
    pub class: CrashClass,
    pub pattern: String,
    pub task_id: String,
    /// API of the last input sent before the line.
    pub api: Option<String>,
    pub ts: u64,
    pub occurrences: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Inventory {
    pub sessions: Vec<SessionIndex>,
    pub findings: Vec<FindingEntry>,
    pub unverified: Vec<FindingEntry>,
    pub heuristic: Vec<HeuristicFinding>,
    pub malformed: Vec<Malformed>,
}

impl Inventory {
    pub fn classes(&self) -> BTreeSet<CrashClass> {
        self.findings.iter().map(|f| f.class).collect()
    }
}

fn windows_overlap(a: Option<(u64, u64)>, b: Option<(u64, u64)>) -> bool {
    match (a, b) {
        (Some((a0, a1)), Some((b0, b1))) => a0 <= b1 && b0 <= a1,
        _ => true,
    }
}

/// Classes that may describe one episode: equal, or a freeze and the
/// liveness loss it causes.
fn compatible(a: CrashClass, b: CrashClass) -> bool {
    use CrashClass::*;
    a == b || matches!((a, b), (Freeze, LivenessLoss) | (LivenessLoss, Freeze))
}

fn entry_of(task: &TaskArtifacts, f: &Finding) -> FindingEntry {
    let mut markers: Vec<String> = f
        .crash
        .markers
        .iter()
        .filter_map(|m| m.matched_pattern.clone())
        .chain(f.verification.iter().flat_map(|v| v.markers.clone()))
        .collect();
    markers.sort();
    markers.dedup();
    let reproducer = f.crash.reproducer.as_ref().map(|r| format!("{}/{r}", task.path));
    let reproducer_len = f
        .crash
        .reproducer
        .as_ref()
        .and_then(|r| read_records(&task.dir.join(r)).ok())
        .map(|(r, _)| r.len());
    FindingEntry {
        class: f.crash.class,
        api: f.api.to_string(),
        task_id: task.report.task_id.clone(),
        window: f.crash.window,
        verified: f.crash.verified,
        markers,
        reproducer,
        reproducer_len,
        merged: vec![format!("{}#{}", task.report.task_id, f.id)],
    }
}

/// Merges findings of one task and API whose windows overlap and whose
/// classes are compatible. A freeze absorbs a liveness loss.
pub fn dedup(mut entries: Vec<FindingEntry>) -> Vec<FindingEntry> {
    entries.sort_by(|a, b| {
        (&a.task_id, &a.api, a.window.map(|w| w.0), a.class)
            .cmp(&(&b.task_id, &b.api, b.window.map(|w| w.0), b.class))
    });
    let mut out: Vec<FindingEntry> = Vec::new();
    for e in entries {
        let hit = out.iter_mut().find(|o| {
            o.task_id == e.task_id && o.api == e.api && compatible(o.class, e.class) && windows_overlap(o.window, e.window)
        });
        match hit {
            Some(o) => {
                if e.class == CrashClass::Freeze {
                    o.class = CrashClass::Freeze;
                }
                o.window = match (o.window, e.window) {
                    (Some(a), Some(b)) => Some((a.0.min(b.0), a.1.max(b.1))),
                    (a, b) => a.or(b),
                };
                o.verified |= e.verified;
                if o.reproducer.is_none() {
                    o.reproducer = e.reproducer;
                    o.reproducer_len = e.reproducer_len;
                }
                o.markers.extend(e.markers);
                o.markers.sort();
                o.markers.dedup();
                o.merged.extend(e.merged);
            }
            None => out.push(e),
        }
    }
    out
}

/// Heuristic pattern pass over each task's `target.log`.
pub fn heuristic_pass(loaded: &Loaded, table: &PatternTable) -> (Vec<HeuristicFinding>, Vec<Malformed>) {
    let mut out: BTreeMap<(String, Option<String>, CrashClass, String), HeuristicFinding> = BTreeMap::new();
    let mut bad = Vec::new();
    for t in &loaded.tasks {
        let p = t.dir.join(TARGET_LOG);
        let text = match std::fs::read(&p) {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) => {
                bad.push(Malformed {
                    path: format!("{}/{TARGET_LOG}", t.path),
                    reason: e.to_string(),
                });
                continue;
            }
        };
        for line in text.lines() {
            let Some(ev) = LogEvent::parse(line, table) else {
                continue;
            };
            let Some(pat) = ev.matched_pattern.as_ref().and_then(|id| table.get(id)) else {
                continue;
            };
            if !pat.heuristic {
                continue;
            }
            let idx = t.records.partition_point(|r| r.ts <= ev.ts);
            let api = idx.checked_sub(1).map(|i| t.records[i].api_ref().to_string());
            let key = (t.report.task_id.clone(), api.clone(), pat.class, pat.id.clone());
            out.entry(key)
                .and_modify(|h| h.occurrences += 1)
                .or_insert(HeuristicFinding {
                    class: pat.class,
                    pattern: pat.id.clone(),
                    task_id: t.report.task_id.clone(),
                    api,
                    ts: ev.ts,
                    occurrences: 1,
                });
        }
    }
    (out.into_values().collect(), bad)
}

pub fn scan(root: &Path, table: &PatternTable) -> Inventory {
    let loaded = load(root);
    scan_loaded(&loaded, table)
}

pub fn scan_loaded(loaded: &Loaded, table: &PatternTable) -> Inventory {
    let sessions = loaded
        .sessions
        .iter()
        .map(|s| SessionIndex {
            task_id: s.task_id.clone(),
            path: s.path.clone(),
            analysis: s.analysis,
            generator: s.generator.clone(),
            api: s.api.to_string(),
            execs: s.execs,
            records: s.records.len(),
        })
        .collect();
    let mut verified = Vec::new();
    let mut unverified = Vec::new();
    for t in &loaded.tasks {
        for f in &t.report.findings {
            let e = entry_of(t, f);
            if e.verified {
                verified.push(e);
            } else {
                unverified.push(e);
            }
        }
    }
    let (heuristic, bad) = heuristic_pass(loaded, table);
    let mut malformed = loaded.malformed.clone();
    malformed.extend(bad);
    malformed.sort();
    Inventory {
        sessions,
        findings: dedup(verified),
        unverified: dedup(unverified),
        heuristic,
        malformed,
    }
}

// ---------------------------------------------------------- statistics

/// Arithmetic mean, summed left to right; 0 for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean after dropping `floor(frac * n)` values from each end.
pub fn trimmed_mean(xs: &[f64], frac: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let k = (frac * v.len() as f64).floor() as usize;
    if v.len() <= 2 * k {
        return mean(&v);
    }
    mean(&v[k..v.len() - k])
}

pub const TRIM: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiThroughput {
    pub mean_ms: f64,
    pub median_ms: f64,
    /// 5% trimmed mean, a secondary statistic.
    pub trimmed_mean_ms: f64,
    pub deltas: usize,
    pub coverage_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub mean_of_means: f64,
    pub median_of_means: f64,
    pub mean_of_medians: f64,
    pub median_of_medians: f64,
    pub mean_of_trimmed_means: f64,
}

impl Aggregates {
    fn of(means: &[f64], medians: &[f64], trimmed: &[f64]) -> Self {
        Aggregates {
            mean_of_means: mean(means),
            median_of_means: median(means),
            mean_of_medians: mean(medians),
            median_of_medians: median(medians),
            mean_of_trimmed_means: mean(trimmed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatSummary {
    pub generator: String,
    pub per_api: BTreeMap<String, ApiThroughput>,
    pub aggregate: Aggregates,
    /// APIs with fewer than two records.
    pub excluded: Vec<String>,
}

/// Inter-execution times in milliseconds of one session, in send order.
pub fn session_deltas(records: &[InputRecord]) -> Vec<f64> {
    records
        .windows(2)
        .map(|w| w[1].ts.saturating_sub(w[0].ts) as f64 / 1000.0)
        .collect()
}

fn by_generator(sessions: &[Session]) -> BTreeMap<String, Vec<&Session>> {
    let mut m: BTreeMap<String, Vec<&Session>> = BTreeMap::new();
    for s in sessions.iter().filter(|s| s.analysis != Analysis::Replay) {
        m.entry(s.generator_label()).or_default().push(s);
    }
    m
}

/// Per-API and aggregate inter-execution statistics, one summary per
/// generator. Deltas never span two sessions.
pub fn throughput_stats(sessions: &[Session]) -> Vec<StatSummary> {
    let cov = coverage_stats(sessions);
    by_generator(sessions)
        .into_iter()
        .map(|(gen, ss)| {
            let mut deltas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for s in &ss {
                deltas.entry(s.api_key()).or_default().extend(session_deltas(&s.records));
            }
            let cov_g = cov.iter().find(|c| c.generator == gen);
            let mut per_api = BTreeMap::new();
            let mut excluded = Vec::new();
            for (api, d) in deltas {
                if d.is_empty() {
                    excluded.push(api);
                    continue;
                }
                per_api.insert(
                    api.clone(),
                    ApiThroughput {
                        mean_ms: mean(&d),
                        median_ms: median(&d),
                        trimmed_mean_ms: trimmed_mean(&d, TRIM),
                        deltas: d.len(),
                        coverage_fraction: cov_g.and_then(|c| c.per_api.get(&api)).map(|p| p / 100.0),
                    },
                );
            }
            let means: Vec<f64> = per_api.values().map(|a| a.mean_ms).collect();
            let medians: Vec<f64> = per_api.values().map(|a| a.median_ms).collect();
            let trimmed: Vec<f64> = per_api.values().map(|a| a.trimmed_mean_ms).collect();
            StatSummary {
                generator: gen,
                aggregate: Aggregates::of(&means, &medians, &trimmed),
                per_api,
                excluded,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageSummary {
    pub generator: String,
    /// Percent of the API's blocks hit, best session.
    pub per_api: BTreeMap<String, f64>,
    pub mean_pct: f64,
    pub median_pct: f64,
    /// APIs that ran but published no block universe.
    pub excluded: Vec<String>,
}

/// Coverage of one session: `Some(0)` without executions, `None` when
/// executions carried no universe.
pub fn session_coverage(s: &Session) -> Option<f64> {
    if s.records.is_empty() {
        return Some(0.0);
    }
    let fb: Vec<_> = s.records.iter().filter_map(|r| r.feedback).collect();
    let universe = fb.iter().map(|f| f.block_universe).max()?;
    if universe == 0 {
        return None;
    }
    let hit = fb.iter().map(|f| f.blocks_hit).max().unwrap_or(0);
    Some((hit as f64 / universe as f64).min(1.0) * 100.0)
}

pub fn coverage_stats(sessions: &[Session]) -> Vec<CoverageSummary> {
    by_generator(sessions)
        .into_iter()
        .map(|(gen, ss)| {
            let mut best: BTreeMap<String, Option<f64>> = BTreeMap::new();
            for s in ss {
                let c = session_coverage(s);
                let e = best.entry(s.api_key()).or_insert(None);
                *e = match (*e, c) {
                    (Some(a), Some(b)) => Some(a.max(b)),
                    (a, b) => a.or(b),
                };
            }
            let mut per_api = BTreeMap::new();
            let mut excluded = Vec::new();
            for (api, c) in best {
                match c {
                    Some(p) => {
                        per_api.insert(api, p);
                    }
                    None => excluded.push(api),
                }
            }
            let vals: Vec<f64> = per_api.values().copied().collect();
            CoverageSummary {
                generator: gen,
                mean_pct: mean(&vals),
                median_pct: median(&vals),
                per_api,
                excluded,
            }
        })
        .collect()
}

// ---------------------------------------------------- permission maps

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PermissionMap {
    #[serde(default)]
    pub name: String,
    /// `service.method` → permission names.
    pub entries: BTreeMap<String, BTreeSet<String>>,
    /// APIs executed at least once. Empty for reference maps.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub tested: BTreeSet<String>,
}

impl PermissionMap {
    pub fn pairs(&self) -> BTreeSet<(String, String)> {
        self.entries
            .iter()
            .flat_map(|(k, ps)| ps.iter().map(move |p| (k.clone(), p.clone())))
            .collect()
    }

    /// A map file, or a manifest whose ground truth becomes the map.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        if v.get("services").is_some() {
            let m = Manifest::from_json(&text)?;
            return Ok(PermissionMap {
                name: format!("ground-truth:{}", m.build),
                entries: m.permission_ground_truth(),
                tested: BTreeSet::new(),
            });
        }
        let mut map: PermissionMap = serde_json::from_value(v)?;
        if map.name.is_empty() {
            map.name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        }
        Ok(map)
    }
}

/// Union of the permissions named in denials, per API, over sessions run
/// for permission mapping.
pub fn build_permission_map(sessions: &[Session]) -> PermissionMap {
    let mut map = PermissionMap {
        name: "observed".into(),
        ..Default::default()
    };
    for s in sessions.iter().filter(|s| s.analysis == Analysis::PermMap) {
        let key = s.api_key();
        if !s.records.is_empty() {
            map.tested.insert(key.clone());
        }
        for r in &s.records {
            if let Some(Outcome::PermissionDenied { permission }) = &r.outcome {
                map.entries.entry(key.clone()).or_default().insert(permission.clone());
            }
        }
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counted {
    pub count: usize,
    /// `service.method permission`.
    pub list: Vec<String>,
}

impl Counted {
    fn of(set: &BTreeSet<(String, String)>) -> Self {
        Counted {
            count: set.len(),
            list: set.iter().map(|(a, p)| format!("{a} {p}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapDiff {
    pub reference: String,
    pub new: Counted,
    pub confirmed: Counted,
    /// Confirmed over reference entries of tested APIs.
    pub confirmed_fraction: f64,
    /// Confirmed over all reference entries.
    pub confirmed_fraction_unrestricted: f64,
    pub reference_entries_tested: usize,
    pub reference_entries_total: usize,
    pub unconfirmed_reference: Vec<String>,
}

/// `tested` restricts the denominator; when empty every observed API
/// counts as tested.
pub fn diff_permission_map(observed: &PermissionMap, reference: &PermissionMap) -> MapDiff {
    let obs = observed.pairs();
    let refp = reference.pairs();
    let tested: BTreeSet<String> = if observed.tested.is_empty() {
        observed.entries.keys().cloned().collect()
    } else {
        observed.tested.clone()
    };
    let new: BTreeSet<_> = obs.difference(&refp).cloned().collect();
    let confirmed: BTreeSet<_> = obs.intersection(&refp).cloned().collect();
    let ref_tested: BTreeSet<_> = refp.iter().filter(|(a, _)| tested.contains(a)).cloned().collect();
    let frac = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    MapDiff {
        reference: reference.name.clone(),
        confirmed_fraction: frac(confirmed.len(), ref_tested.len()),
        confirmed_fraction_unrestricted: frac(confirmed.len(), refp.len()),
        reference_entries_tested: ref_tested.len(),
        reference_entries_total: refp.len(),
        unconfirmed_reference: ref_tested
            .difference(&confirmed)
            .map(|(a, p)| format!("{a} {p}"))
            .collect(),
        new: Counted::of(&new),
        confirmed: Counted::of(&confirmed),
    }
}

// ------------------------------------------------------------- tables

pub fn render_scan(inv: &Inventory) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "sessions: {}  malformed: {}", inv.sessions.len(), inv.malformed.len());
    let tw = inv
        .findings
        .iter()
        .map(|f| f.task_id.len())
        .chain(inv.heuristic.iter().map(|h| h.task_id.len()))
        .max()
        .unwrap_or(0)
        .max(4);
    let _ = writeln!(s, "{:<20} {:<14} {:<tw$} {:>12}  {}", "class", "api", "task", "window", "markers");
    for f in &inv.findings {
        let w = f.window.map(|(a, b)| format!("{a}-{b}")).unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:<20} {:<14} {:<tw$} {:>12}  {}",
            f.class.name(),
            f.api,
            f.task_id,
            w,
            f.markers.join(",")
        );
    }
    if !inv.unverified.is_empty() {
        let _ = writeln!(s, "unverified: {}", inv.unverified.len());
    }
    if !inv.heuristic.is_empty() {
        let _ = writeln!(s, "heuristic:");
    }
    for h in &inv.heuristic {
        let _ = writeln!(
            s,
            "{:<20} {:<14} {:<tw$} {:>12}",
            h.class.name(),
            h.api.as_deref().unwrap_or("-"),
            h.task_id,
            format!("x{}", h.occurrences)
        );
    }
    for m in &inv.malformed {
        let _ = writeln!(s, "malformed {}: {}", m.path, m.reason);
    }
    s
}

pub fn render_throughput(stats: &[StatSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "time between executions [ms]");
    let _ = writeln!(
        s,
        "{:<14} {:>12} {:>12} {:>12} {:>12} {:>18} {:>5}",
        "generator", "mean(mean)", "median(mean)", "mean(median)", "median(median)", "trimmed 5% (aux)", "apis"
    );
    for st in stats {
        let a = &st.aggregate;
        let _ = writeln!(
            s,
            "{:<14} {:>12.4} {:>12.4} {:>12.4} {:>12.4} {:>18.4} {:>5}",
            st.generator,
            a.mean_of_means,
            a.median_of_means,
            a.mean_of_medians,
            a.median_of_medians,
            a.mean_of_trimmed_means,
            st.per_api.len()
        );
    }
    s
}

pub fn render_coverage(stats: &[CoverageSummary]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<14} {:>10} {:>10} {:>5} {:>9}", "generator", "mean %", "median %", "apis", "excluded");
    for c in stats {
        let _ = writeln!(
            s,
            "{:<14} {:>10.2} {:>10.2} {:>5} {:>9}",
            c.generator,
            c.mean_pct,
            c.median_pct,
            c.per_api.len(),
            c.excluded.len()
        );
    }
    s
}

pub fn render_permmap(map: &PermissionMap) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "tested apis: {}  apis with permissions: {}", map.tested.len(), map.entries.len());
    for (api, ps) in &map.entries {
        let _ = writeln!(s, "{api:<36} {}", ps.iter().cloned().collect::<Vec<_>>().join(", "));
    }
    s
}

pub fn render_diff(d: &MapDiff) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<28} {:>5} {:>10} {:>12} {:>14}",
        "reference", "new", "confirmed", "% (tested)", "% (all)"
    );
    let _ = writeln!(
        s,
        "{:<28} {:>5} {:>10} {:>12.1} {:>14.1}",
        d.reference,
        d.new.count,
        d.confirmed.count,
        d.confirmed_fraction * 100.0,
        d.confirmed_fraction_unrestricted * 100.0
    );
    s
}
