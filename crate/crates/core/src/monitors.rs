//! Crash monitors: target log parsing, liveness probes, and classification
//! of both into crash candidates.

use std::fs::File;
use std::io::{ErrorKind, Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{TargetClient, INTROSPECT, IS_STATUS};
use crate::error::{Error, Result};
use crate::manifest::FaultClass;
use crate::target::log::now_us;
use crate::wire::{Request, Response};

const BUILTIN_PATTERNS: &str = include_str!("../data/patterns.json");

/// Inputs sent this long before the anchor input belong to the window.
pub const WINDOW_SPAN_US: u64 = 5_000_000;
/// A dead dispatcher with a silent log becomes a liveness loss after this.
pub const LIVENESS_GRACE: Duration = Duration::from_secs(3);
/// Companion heartbeats older than this mark it degraded.
pub const COMPANION_STALE_MS: u64 = 2_000;
/// Extra evidence lines kept per candidate.
const MAX_MARKERS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrashClass {
    UncaughtException,
    Freeze,
    ResourceExhaustion,
    ParseCrash,
    CollateralCrash,
    LivenessLoss,
}

impl CrashClass {
    pub const ALL: [CrashClass; 6] = [
        CrashClass::UncaughtException,
        CrashClass::Freeze,
        CrashClass::ResourceExhaustion,
        CrashClass::ParseCrash,
        CrashClass::CollateralCrash,
        CrashClass::LivenessLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CrashClass::UncaughtException => "uncaught_exception",
            CrashClass::Freeze => "freeze",
            CrashClass::ResourceExhaustion => "resource_exhaustion",
            CrashClass::ParseCrash => "parse_crash",
            CrashClass::CollateralCrash => "collateral_crash",
            CrashClass::LivenessLoss => "liveness_loss",
        }
    }
}

impl std::fmt::Display for CrashClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl From<FaultClass> for CrashClass {
    fn from(c: FaultClass) -> Self {
        match c {
            FaultClass::UncaughtException => CrashClass::UncaughtException,
            FaultClass::Freeze => CrashClass::Freeze,
            FaultClass::ResourceExhaustion => CrashClass::ResourceExhaustion,
            FaultClass::ParseCrash => CrashClass::ParseCrash,
            FaultClass::CollateralCrash => CrashClass::CollateralCrash,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pattern {
    pub id: String,
    /// Substring searched in `TAG: message`.
    pub contains: String,
    pub class: CrashClass,
    /// Adds evidence to a candidate; creates one only if none exists.
    #[serde(default)]
    pub marker: bool,
    /// Not a crash of the target itself. Only the offline pass reports it.
    #[serde(default)]
    pub heuristic: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternTable {
    pub patterns: Vec<Pattern>,
}

impl PatternTable {
    pub fn builtin() -> Self {
        Self::from_json(BUILTIN_PATTERNS).expect("builtin pattern table parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: PatternTable = serde_json::from_str(text)?;
        let mut problems = Vec::new();
        for (i, p) in t.patterns.iter().enumerate() {
            if p.contains.is_empty() {
                problems.push(format!("pattern {i} (`{}`) has an empty needle", p.id));
            }
            if t.patterns[..i].iter().any(|q| q.id == p.id) {
                problems.push(format!("duplicate pattern id `{}`", p.id));
            }
        }
        if problems.is_empty() {
            Ok(t)
        } else {
            Err(Error::Validation(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    /// First match wins.
    pub fn match_text(&self, text: &str) -> Option<&Pattern> {
        self.patterns.iter().find(|p| text.contains(&p.contains))
    }

    pub fn get(&self, id: &str) -> Option<&Pattern> {
        self.patterns.iter().find(|p| p.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub ts: u64,
    pub level: String,
    pub tag: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matched_pattern: Option<String>,
}

impl LogEvent {
    /// Parses `{ts_us} {LEVEL} {TAG}: {message}`. `None` for anything else.
    pub fn parse(line: &str, table: &PatternTable) -> Option<LogEvent> {
        let line = line.trim_end_matches(['\r', '\n']);
        let (ts, rest) = line.split_once(' ')?;
        let ts: u64 = ts.parse().ok()?;
        let (level, rest) = rest.split_once(' ')?;
        if level.len() != 1 || !level.chars().all(|c| c.is_ascii_uppercase()) {
            return None;
        }
        let (tag, message) = rest.split_once(": ")?;
        if tag.is_empty() || tag.contains(' ') {
            return None;
        }
        Some(LogEvent {
            ts,
            level: level.to_string(),
            tag: tag.to_string(),
            message: message.to_string(),
            matched_pattern: table.match_text(rest).map(|p| p.id.clone()),
        })
    }
}

pub fn parse_log(text: &str, table: &PatternTable) -> Vec<LogEvent> {
    text.lines()
        .filter_map(|l| LogEvent::parse(l, table))
        .collect()
}

/// Follows a growing log file by offset.
pub struct LogTail {
    path: PathBuf,
    offset: u64,
    partial: Vec<u8>,
    degraded: bool,
}

impl LogTail {
    pub fn new(path: &Path) -> Self {
        LogTail {
            path: path.to_path_buf(),
            offset: 0,
            partial: Vec::new(),
            degraded: false,
        }
    }

    /// Starts after the file's current content.
    pub fn from_end(path: &Path) -> Self {
        let mut t = Self::new(path);
        t.offset = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        t
    }

    /// Set once the file vanished, shrank or failed to read.
    pub fn degraded(&self) -> bool {
        self.degraded
    }

    /// Complete lines appended since the last poll.
    pub fn poll(&mut self, table: &PatternTable) -> Vec<LogEvent> {
        let mut f = match File::open(&self.path) {
            Ok(f) => f,
            Err(_) => {
                if self.offset > 0 {
                    self.degraded = true;
                }
                return Vec::new();
            }
        };
        let len = f.metadata().map(|m| m.len()).unwrap_or(0);
        if len < self.offset {
            // Rotated or truncated: lines in between are lost.
            self.degraded = true;
            self.offset = 0;
            self.partial.clear();
        }
        let mut buf = Vec::new();
        if f.seek(SeekFrom::Start(self.offset)).is_err() || f.read_to_end(&mut buf).is_err() {
            self.degraded = true;
            return Vec::new();
        }
        self.offset += buf.len() as u64;
        self.partial.extend_from_slice(&buf);
        let Some(last_nl) = self.partial.iter().rposition(|b| *b == b'\n') else {
            return Vec::new();
        };
        let rest = self.partial.split_off(last_nl + 1);
        let complete = std::mem::replace(&mut self.partial, rest);
        String::from_utf8_lossy(&complete)
            .lines()
            .filter_map(|l| LogEvent::parse(l, table))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Degraded,
    Dead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Liveness {
    pub ts: u64,
    pub dispatcher: Health,
    pub companion: Health,
    /// `None` for targets without a feedback channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<Health>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl Liveness {
    pub fn all_healthy(&self) -> bool {
        self.dispatcher == Health::Healthy
            && self.companion == Health::Healthy
            && self.feedback.is_none_or(|f| f == Health::Healthy)
    }
}

/// Dispatcher: the status meta call answers within `timeout` (healthy),
/// connects but stalls (degraded), or cannot connect (dead). Companion:
/// alive with a heartbeat younger than [`COMPANION_STALE_MS`] (healthy),
/// alive but stale (degraded), exited (dead). Feedback health is observed
/// by whoever consumes the channel and passed through.
pub fn probe_liveness(endpoint: &str, timeout: Duration, feedback: Option<Health>) -> Liveness {
    let ts = now_us();
    let mut client = match TargetClient::connect_timeout(endpoint, timeout) {
        Ok(c) => c,
        Err(e) => {
            return Liveness {
                ts,
                dispatcher: Health::Dead,
                companion: Health::Dead,
                feedback: feedback.map(|_| Health::Dead),
                detail: Some(e.to_string()),
            }
        }
    };
    let req = Request::new(INTROSPECT, IS_STATUS, 0, Vec::new());
    let reply = client.send_body(&req.encode()).and_then(|_| client.recv());
    let failed = |h: Health, detail: String| Liveness {
        ts,
        dispatcher: h,
        companion: h,
        feedback: feedback.map(|f| if h == Health::Dead { Health::Dead } else { f }),
        detail: Some(detail),
    };
    match reply {
        Ok(Response::Ok(bytes)) => {
            let status: serde_json::Value = serde_json::from_slice(&bytes).unwrap_or_default();
            let alive = status["companion"]["alive"].as_bool().unwrap_or(false);
            let ago = status["companion"]["last_beat_ms_ago"].as_u64().unwrap_or(u64::MAX);
            let companion = match (alive, ago <= COMPANION_STALE_MS) {
                (false, _) => Health::Dead,
                (true, true) => Health::Healthy,
                (true, false) => Health::Degraded,
            };
            Liveness {
                ts,
                dispatcher: Health::Healthy,
                companion,
                feedback,
                detail: None,
            }
        }
        Ok(other) => failed(Health::Degraded, format!("status answered {}", other.status_name())),
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            failed(Health::Degraded, format!("status timed out: {e}"))
        }
        Err(e) => failed(Health::Dead, e.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    Log(LogEvent),
    Probe(Liveness),
}

impl Evidence {
    pub fn ts(&self) -> u64 {
        match self {
            Evidence::Log(e) => e.ts,
            Evidence::Probe(p) => p.ts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashReport {
    pub class: CrashClass,
    pub first_evidence: Evidence,
    /// Later matching lines of the same episode, e.g. the bootloop marker.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<LogEvent>,
    /// Inclusive `(first_seq, last_seq)`; `None` when no input was sent.
    pub window: Option<(u64, u64)>,
    /// The window could not be anchored and covers every input.
    #[serde(default)]
    pub window_fallback: bool,
    /// Log unreadable at some point; evidence may be incomplete.
    #[serde(default)]
    pub evidence_degraded: bool,
    #[serde(default)]
    pub heuristic: bool,
    #[serde(default)]
    pub verified: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reproducer: Option<String>,
}

impl CrashReport {
    pub fn has_marker(&self, pattern_id: &str) -> bool {
        let hit = |e: &LogEvent| e.matched_pattern.as_deref() == Some(pattern_id);
        matches!(&self.first_evidence, Evidence::Log(e) if hit(e)) || self.markers.iter().any(hit)
    }
}

/// Inputs sent within [`WINDOW_SPAN_US`] before the anchor, the last input
/// sent at or before `evidence_ts`. `inputs` holds `(seq, ts)` in send
/// order. Falls back to every input when nothing precedes the evidence.
pub fn suspicion_window(inputs: &[(u64, u64)], evidence_ts: u64) -> Option<((u64, u64), bool)> {
    let first = inputs.first()?;
    let last = inputs.last()?;
    let Some(anchor) = inputs.iter().rev().find(|(_, ts)| *ts <= evidence_ts) else {
        return Some(((first.0, last.0), true));
    };
    let from = anchor.1.saturating_sub(WINDOW_SPAN_US);
    let start = inputs
        .iter()
        .find(|(_, ts)| *ts >= from)
        .map(|(s, _)| *s)
        .unwrap_or(anchor.0);
    Some(((start, anchor.0), false))
}

#[derive(Debug, Clone)]
pub struct ClassifyOptions {
    pub include_heuristic: bool,
    pub grace: Duration,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            include_heuristic: false,
            grace: LIVENESS_GRACE,
        }
    }
}

/// Incremental classifier. Same-class evidence joins the existing
/// candidate, so one fault episode yields one candidate.
pub struct Classifier {
    table: PatternTable,
    opts: ClassifyOptions,
    candidates: Vec<CrashReport>,
    dead_since: Option<u64>,
    degraded: bool,
}

impl Classifier {
    pub fn new(table: PatternTable, opts: ClassifyOptions) -> Self {
        Classifier {
            table,
            opts,
            candidates: Vec::new(),
            dead_since: None,
            degraded: false,
        }
    }

    pub fn table(&self) -> &PatternTable {
        &self.table
    }

    pub fn set_degraded(&mut self) {
        self.degraded = true;
    }

    pub fn candidates(&self) -> &[CrashReport] {
        &self.candidates
    }

    fn new_candidate(&mut self, class: CrashClass, evidence: Evidence, heuristic: bool) {
        self.candidates.push(CrashReport {
            class,
            first_evidence: evidence,
            markers: Vec::new(),
            window: None,
            window_fallback: false,
            evidence_degraded: false,
            heuristic,
            verified: false,
            reproducer: None,
        });
    }

    /// Returns true when a new candidate was opened.
    pub fn feed_event(&mut self, ev: &LogEvent) -> bool {
        let Some(pid) = &ev.matched_pattern else {
            return false;
        };
        let Some(p) = self.table.get(pid) else {
            return false;
        };
        if p.heuristic && !self.opts.include_heuristic {
            return false;
        }
        let (class, heuristic) = (p.class, p.heuristic);
        if let Some(c) = self.candidates.iter_mut().rev().find(|c| c.class == class) {
            if c.markers.len() < MAX_MARKERS {
                c.markers.push(ev.clone());
            }
            return false;
        }
        self.new_candidate(class, Evidence::Log(ev.clone()), heuristic);
        true
    }

    /// A dispatcher dead for the grace period with no crash line in the
    /// log becomes a liveness loss.
    pub fn feed_probe(&mut self, probe: &Liveness) -> bool {
        if probe.dispatcher != Health::Dead {
            self.dead_since = None;
            return false;
        }
        let since = *self.dead_since.get_or_insert(probe.ts);
        let explained = self.candidates.iter().any(|c| !c.heuristic);
        if explained || probe.ts.saturating_sub(since) < self.opts.grace.as_micros() as u64 {
            return false;
        }
        self.new_candidate(CrashClass::LivenessLoss, Evidence::Probe(probe.clone()), false);
        true
    }

    pub fn has_crash(&self) -> bool {
        self.candidates.iter().any(|c| !c.heuristic)
    }

    /// Attaches windows over `inputs` (`(seq, ts)` in send order).
    pub fn finish(self, inputs: &[(u64, u64)]) -> Vec<CrashReport> {
        let degraded = self.degraded;
        self.candidates
            .into_iter()
            .map(|mut c| {
                if let Some((w, fallback)) = suspicion_window(inputs, c.first_evidence.ts()) {
                    c.window = Some(w);
                    c.window_fallback = fallback;
                }
                c.evidence_degraded = degraded;
                c
            })
            .collect()
    }
}

/// Classifies a recorded log stream plus liveness probes, merged in time
/// order (log lines first on ties).
pub fn classify(
    events: &[LogEvent],
    probes: &[Liveness],
    inputs: &[(u64, u64)],
    table: &PatternTable,
    opts: ClassifyOptions,
) -> Vec<CrashReport> {
    let mut c = Classifier::new(table.clone(), opts);
    let (mut i, mut j) = (0, 0);
    while i < events.len() || j < probes.len() {
        if j >= probes.len() || (i < events.len() && events[i].ts <= probes[j].ts) {
            c.feed_event(&events[i]);
            i += 1;
        } else {
            c.feed_probe(&probes[j]);
            j += 1;
        }
    }
    c.finish(inputs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(table: &PatternTable, line: &str) -> LogEvent {
        LogEvent::parse(line, table).unwrap()
    }

    fn probe(ts: u64, d: Health) -> Liveness {
        Liveness {
            ts,
            dispatcher: d,
            companion: d,
            feedback: None,
            detail: None,
        }
    }

    #[test]
    fn parses_target_lines() {
        let t = PatternTable::builtin();
        let e = ev(&t, "1700000000000000 W Watchdog: *** WATCHDOG KILLING SYSTEM PROCESS: Blocked in monitor x");
        assert_eq!(e.level, "W");
        assert_eq!(e.tag, "Watchdog");
        assert_eq!(e.matched_pattern.as_deref(), Some("watchdog-kill"));
        let plain = ev(&t, "5 I SystemServer: boot complete build=x");
        assert_eq!(plain.matched_pattern, None);
        assert!(LogEvent::parse("garbage", &t).is_none());
        assert!(LogEvent::parse("12 info Tag: msg", &t).is_none());
    }

    #[test]
    fn first_match_wins() {
        let t = PatternTable::from_json(
            r#"{"patterns":[{"id":"a","contains":"X","class":"freeze"},{"id":"b","contains":"XY","class":"parse_crash"}]}"#,
        )
        .unwrap();
        assert_eq!(t.match_text("XY").unwrap().id, "a");
    }

    #[test]
    fn pattern_table_rejects_duplicates() {
        let r = PatternTable::from_json(
            r#"{"patterns":[{"id":"a","contains":"X","class":"freeze"},{"id":"a","contains":"Y","class":"freeze"}]}"#,
        );
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn each_class_line_yields_its_class() {
        let t = PatternTable::builtin();
        let cases = [
            ("W Watchdog: *** WATCHDOG KILLING SYSTEM PROCESS: Blocked", CrashClass::Freeze),
            ("E AndroidRuntime: *** FATAL EXCEPTION IN SYSTEM PROCESS: binder:a", CrashClass::UncaughtException),
            ("F ResourceTable: too many open resources (1024/1024) held by a", CrashClass::ResourceExhaustion),
            ("F CheckParcel: CheckParcel: null dereference while forwarding a", CrashClass::ParseCrash),
        ];
        for (line, class) in cases {
            let events = vec![ev(&t, &format!("10 {line}"))];
            let out = classify(&events, &[], &[(1, 5)], &t, ClassifyOptions::default());
            assert_eq!(out.len(), 1, "{line}");
            assert_eq!(out[0].class, class);
            assert_eq!(out[0].window, Some((1, 1)));
        }
    }

    #[test]
    fn collateral_only_in_heuristic_pass() {
        let t = PatternTable::builtin();
        let events = vec![ev(&t, "10 I ActivityManager: Process ui has died: companion exited (signal 11)")];
        assert!(classify(&events, &[], &[], &t, ClassifyOptions::default()).is_empty());
        let opts = ClassifyOptions {
            include_heuristic: true,
            ..Default::default()
        };
        let out = classify(&events, &[], &[], &t, opts);
        assert_eq!(out[0].class, CrashClass::CollateralCrash);
        assert!(out[0].heuristic);
    }

    #[test]
    fn watchdog_episode_is_one_candidate_with_bootloop_marker() {
        let t = PatternTable::builtin();
        let events: Vec<_> = [
            "100 W Watchdog: *** WATCHDOG KILLING SYSTEM PROCESS: Blocked in monitor a",
            "200 W Watchdog: *** WATCHDOG KILLING SYSTEM PROCESS: Blocked in monitor a",
            "300 F Watchdog: BOOTLOOP: 3 watchdog kills within 120 s, refusing restart",
        ]
        .iter()
        .map(|l| ev(&t, l))
        .collect();
        let out = classify(&events, &[], &[], &t, ClassifyOptions::default());
        assert_eq!(out.len(), 1);
        assert!(out[0].has_marker("bootloop"));
        assert_eq!(out[0].window, None);
    }

    #[test]
    fn clean_run_no_candidates() {
        let t = PatternTable::builtin();
        let events = vec![ev(&t, "1 I SystemServer: boot complete")];
        let probes: Vec<_> = (0..10).map(|i| probe(i * 1_000_000, Health::Healthy)).collect();
        assert!(classify(&events, &probes, &[(1, 1)], &t, ClassifyOptions::default()).is_empty());
    }

    #[test]
    fn silent_death_after_grace_is_liveness_loss() {
        let t = PatternTable::builtin();
        let probes = vec![
            probe(0, Health::Healthy),
            probe(1_000_000, Health::Dead),
            probe(2_000_000, Health::Dead),
            probe(4_000_000, Health::Dead),
        ];
        let out = classify(&[], &probes, &[(1, 500_000)], &t, ClassifyOptions::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class, CrashClass::LivenessLoss);
        // Shorter than the grace period: nothing.
        let out = classify(&[], &probes[..3], &[], &t, ClassifyOptions::default());
        assert!(out.is_empty());
    }

    #[test]
    fn death_explained_by_log_is_not_liveness_loss() {
        let t = PatternTable::builtin();
        let events = vec![ev(&t, "500000 F CheckParcel: CheckParcel: null dereference")];
        let probes = vec![probe(1_000_000, Health::Dead), probe(9_000_000, Health::Dead)];
        let out = classify(&events, &probes, &[], &t, ClassifyOptions::default());
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].class, CrashClass::ParseCrash);
    }

    #[test]
    fn window_anchors_on_last_input_before_evidence() {
        let s = 1_000_000;
        let inputs = [(1, 0), (2, 2 * s), (3, 7 * s), (4, 8 * s), (5, 20 * s)];
        assert_eq!(suspicion_window(&inputs, 9 * s), Some(((3, 4), false)));
        assert_eq!(suspicion_window(&inputs, 8 * s), Some(((3, 4), false)));
        assert_eq!(suspicion_window(&inputs, 6 * s), Some(((1, 2), false)));
        assert_eq!(suspicion_window(&inputs, 0), Some(((1, 1), false)));
        assert_eq!(suspicion_window(&[(7, 10)], 5), Some(((7, 7), true)));
        assert_eq!(suspicion_window(&[], 5), None);
    }

    #[test]
    fn tail_follows_appends_and_flags_truncation() {
        use std::io::Write;
        let t = PatternTable::builtin();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("target.log");
        let mut tail = LogTail::new(&path);
        assert!(tail.poll(&t).is_empty());
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).unwrap();
        write!(f, "1 I A: one\n2 I A: tw").unwrap();
        assert_eq!(tail.poll(&t).len(), 1);
        writeln!(f, "o").unwrap();
        let got = tail.poll(&t);
        assert_eq!(got[0].message, "two");
        assert!(!tail.degraded());
        std::fs::write(&path, "").unwrap();
        tail.poll(&t);
        assert!(tail.degraded());
    }
}
