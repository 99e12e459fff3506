//! One-shot campaigns: backend, task set, troop of worker processes,
//! analysis and an expectation check, all under one artifact root.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::analyzer::{
    build_permission_map, coverage_stats, diff_permission_map, load, render_coverage, render_diff,
    render_scan, render_throughput, scan_loaded, throughput_stats, CoverageSummary, Inventory,
    MapDiff, PermissionMap, StatSummary,
};
use crate::backend::http::BackendServer;
use crate::backend::client::BackendClient;
use crate::backend::{Analysis, StoreConfig, SystemClock, TaskSpec, TaskStore};
use crate::config::{load_json, resolve};
use crate::error::{Error, Result};
use crate::generators::GeneratorConfig;
use crate::manifest::Manifest;
use crate::monitors::{CrashClass, PatternTable};
use crate::surface::{surface_of, ApiRef};
use crate::troop::{StatusServer, Troop, TroopConfig, SESSIONS_DIR};
use crate::worker::WorkerSettings;

pub const ANALYSIS_FILE: &str = "analysis.json";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const WORKER_CONFIG_FILE: &str = "worker.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    /// Classes that need at least one verified finding.
    #[serde(default)]
    pub classes: Vec<CrashClass>,
    /// Classes the heuristic log pass must report.
    #[serde(default)]
    pub heuristic_classes: Vec<CrashClass>,
    /// Marker patterns some verified finding must carry.
    #[serde(default)]
    pub markers: Vec<String>,
    #[serde(default)]
    pub min_findings: usize,
}

fn d_analysis() -> Analysis {
    Analysis::VulnHunt
}
fn d_workers() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub manifest: PathBuf,
    #[serde(default = "d_analysis")]
    pub analysis: Analysis,
    pub generators: Vec<GeneratorConfig>,
    #[serde(default = "d_workers")]
    pub workers: usize,
    /// Budget of each API task, seconds.
    pub budget_s: f64,
    /// Defaults to every API of the manifest. Entries are `"service:txn"`
    /// or `{"service", "txn_id"}`.
    #[serde(default, deserialize_with = "api_list")]
    pub apis: Option<Vec<ApiRef>>,
    /// A fresh temporary directory when absent.
    #[serde(default)]
    pub artifact_root: Option<PathBuf>,
    /// Use a running backend instead of booting one.
    #[serde(default)]
    pub backend_url: Option<String>,
    #[serde(default)]
    pub backend_bind: Option<String>,
    /// Reference permission map; the manifest ground truth when absent.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    /// Worker settings besides `manifest`.
    #[serde(default)]
    pub worker: serde_json::Map<String, serde_json::Value>,
    /// Seeds generators and targets.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub expect: Option<Expect>,
    #[serde(default)]
    pub status_bind: Option<String>,
    #[serde(default)]
    pub stale_after_s: Option<f64>,
}

fn api_list<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<ApiRef>>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Entry {
        Text(String),
        Full(ApiRef),
    }
    let list: Option<Vec<Entry>> = Option::deserialize(d)?;
    list.map(|l| {
        l.into_iter()
            .map(|e| match e {
                Entry::Text(s) => s.parse().map_err(serde::de::Error::custom),
                Entry::Full(a) => Ok(a),
            })
            .collect()
    })
    .transpose()
}

fn cfg_err(path: &str, field: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// A validated campaign.
#[derive(Debug, Clone)]
pub struct Campaign {
    pub config: CampaignConfig,
    pub origin: String,
    pub manifest: Arc<Manifest>,
    pub worker: WorkerSettings,
    pub tasks: Vec<TaskSpec>,
    /// Generator and API pairs without a task, with the reason.
    pub skipped: Vec<String>,
    pub reference: PermissionMap,
}

impl Campaign {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: CampaignConfig = load_json(path)?;
        cfg.manifest = resolve(path, &cfg.manifest);
        cfg.artifact_root = cfg.artifact_root.map(|p| resolve(path, &p));
        cfg.reference = cfg.reference.map(|p| resolve(path, &p));
        Self::new(cfg, &path.display().to_string())
    }

    /// Checks everything before anything starts.
    pub fn new(cfg: CampaignConfig, origin: &str) -> Result<Self> {
        if cfg.generators.is_empty() {
            return Err(cfg_err(origin, "generators", "at least one generator"));
        }
        if cfg.workers == 0 {
            return Err(cfg_err(origin, "workers", "must be at least 1"));
        }
        if !(cfg.budget_s >= 0.0) || !cfg.budget_s.is_finite() {
            return Err(cfg_err(origin, "budget_s", "must be a finite non-negative number"));
        }
        let manifest = Arc::new(
            Manifest::load(&cfg.manifest).map_err(|e| cfg_err(origin, "manifest", e.to_string()))?,
        );
        let surface = surface_of(&manifest);
        let apis: Vec<ApiRef> = match &cfg.apis {
            Some(list) => {
                for (i, a) in list.iter().enumerate() {
                    if surface.find(a).is_none() {
                        return Err(cfg_err(origin, &format!("apis[{i}]"), format!("{a} is not on the target surface")));
                    }
                }
                list.clone()
            }
            None => surface.apis.iter().map(|d| d.api_ref()).collect(),
        };
        let mut wobj = cfg.worker.clone();
        if wobj.contains_key("manifest") {
            return Err(cfg_err(origin, "worker.manifest", "set by the campaign"));
        }
        wobj.insert("manifest".into(), serde_json::json!(cfg.manifest));
        if let Some(seed) = cfg.seed {
            wobj.entry("target_seed").or_insert(serde_json::json!(seed));
        }
        let worker: WorkerSettings = crate::config::from_json_str(&serde_json::Value::Object(wobj).to_string(), origin)
            .map_err(|e| match e {
                Error::Config { path, field, reason } => Error::Config {
                    path,
                    field: format!("worker.{field}"),
                    reason,
                },
                e => e,
            })?;
        if let Some(p) = &worker.patterns {
            PatternTable::load(p).map_err(|e| cfg_err(origin, "worker.patterns", e.to_string()))?;
        }
        let reference = match &cfg.reference {
            Some(p) => PermissionMap::load(p).map_err(|e| cfg_err(origin, "reference", e.to_string()))?,
            None => PermissionMap {
                name: format!("ground-truth:{}", manifest.build),
                entries: manifest.permission_ground_truth(),
                tested: BTreeSet::new(),
            },
        };
        let mut tasks = Vec::new();
        let mut skipped = Vec::new();
        for (gi, g) in cfg.generators.iter().enumerate() {
            let mut g = g.clone();
            if let Some(seed) = cfg.seed {
                g.seed = seed.wrapping_add(gi as u64);
            }
            g.budget_s = cfg.budget_s;
            for a in &apis {
                let desc = surface.find(a).expect("checked above");
                if !g.kind.supports(desc) {
                    skipped.push(format!("{} {a}: parameters ({}) not supported", g.kind, desc.signature()));
                    continue;
                }
                tasks.push(TaskSpec {
                    task_id: format!("g{gi}-{}-{}-{}", g.kind, a.service, a.txn_id),
                    api_refs: vec![a.clone()],
                    analysis: cfg.analysis,
                    budget_s: cfg.budget_s,
                    generator: Some(g.clone()),
                    inputs: None,
                });
            }
        }
        Ok(Campaign {
            config: cfg,
            origin: origin.to_string(),
            manifest,
            worker,
            tasks,
            skipped,
            reference,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub inventory: Inventory,
    pub throughput: Vec<StatSummary>,
    pub coverage: Vec<CoverageSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub permission_map: Option<PermissionMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diff: Option<MapDiff>,
}

/// Full analysis of an artifact tree.
pub fn analyze(root: &Path, table: &PatternTable, reference: Option<&PermissionMap>) -> AnalysisReport {
    let loaded = load(root);
    let inventory = scan_loaded(&loaded, table);
    let has_permmap = loaded.sessions.iter().any(|s| s.analysis == Analysis::PermMap);
    let permission_map = has_permmap.then(|| build_permission_map(&loaded.sessions));
    let diff = permission_map
        .as_ref()
        .zip(reference)
        .map(|(m, r)| diff_permission_map(m, r));
    AnalysisReport {
        throughput: throughput_stats(&loaded.sessions),
        coverage: coverage_stats(&loaded.sessions),
        inventory,
        permission_map,
        diff,
    }
}

pub fn render(report: &AnalysisReport) -> String {
    let mut s = render_scan(&report.inventory);
    s.push('\n');
    s.push_str(&render_throughput(&report.throughput));
    s.push('\n');
    s.push_str(&render_coverage(&report.coverage));
    if let Some(d) = &report.diff {
        s.push('\n');
        s.push_str(&render_diff(d));
    }
    s
}

/// Expectations not met by `report`.
pub fn check_expect(expect: &Expect, report: &AnalysisReport) -> Vec<String> {
    let inv = &report.inventory;
    let mut missing = Vec::new();
    let classes = inv.classes();
    for c in &expect.classes {
        if !classes.contains(c) {
            missing.push(format!("no verified {c} finding"));
        }
    }
    let heur: BTreeSet<CrashClass> = inv.heuristic.iter().map(|h| h.class).collect();
    for c in &expect.heuristic_classes {
        if !heur.contains(c) {
            missing.push(format!("heuristic pass found no {c}"));
        }
    }
    for m in &expect.markers {
        if !inv.findings.iter().any(|f| f.markers.contains(m)) {
            missing.push(format!("no verified finding carries marker {m}"));
        }
    }
    if inv.findings.len() < expect.min_findings {
        missing.push(format!(
            "{} verified findings, expected at least {}",
            inv.findings.len(),
            expect.min_findings
        ));
    }
    missing
}

#[derive(Debug, Clone)]
pub struct CampaignOutcome {
    pub root: PathBuf,
    pub tasks: usize,
    pub report: AnalysisReport,
    pub missing: Vec<String>,
}

/// Runs the campaign to task exhaustion. `worker_binary` must provide
/// `worker run`.
pub fn run(c: &Campaign, worker_binary: &Path, stop: &AtomicBool) -> Result<CampaignOutcome> {
    let cfg = &c.config;
    let root = match &cfg.artifact_root {
        Some(p) => p.clone(),
        None => std::env::temp_dir().join(format!("mfuz-campaign-{:08x}", rand::random::<u32>())),
    };
    std::fs::create_dir_all(&root).map_err(|e| Error::file(&root, e))?;
    // Bind before spawning anything so a taken port fails early.
    let (_server, url) = match &cfg.backend_url {
        Some(u) => (None, u.clone()),
        None => {
            let store = TaskStore::open(&root.join("backend-events.jsonl"), Arc::new(SystemClock), StoreConfig::default())?;
            let bind = cfg.backend_bind.clone().unwrap_or_else(|| "127.0.0.1:0".into());
            let s = BackendServer::start(store, &bind)?;
            let url = s.url();
            (Some(s), url)
        }
    };
    let wcfg = root.join(WORKER_CONFIG_FILE);
    std::fs::write(&wcfg, serde_json::to_string_pretty(&c.worker)?).map_err(|e| Error::file(&wcfg, e))?;
    let client = BackendClient::new(&url);
    client.ingest(c.tasks.clone())?;
    log::info!(
        "campaign: {} tasks ({} skipped) on {} workers, artifacts in {}",
        c.tasks.len(),
        c.skipped.len(),
        cfg.workers,
        root.display()
    );
    let tcfg = TroopConfig {
        backend_url: url,
        workers: cfg.workers,
        worker_binary: worker_binary.to_path_buf(),
        worker_config: wcfg,
        artifact_root: root.clone(),
        stale_after_s: cfg.stale_after_s.unwrap_or(30.0),
        analysis: Some(cfg.analysis),
        status_bind: cfg.status_bind.clone(),
        client_id: Some("campaign".into()),
        exit_when_idle: true,
        poll_ms: 100,
    };
    let mut troop = Troop::new(tcfg)?;
    let _status = match &cfg.status_bind {
        Some(b) => Some(StatusServer::start(troop.board(), b)?),
        None => None,
    };
    troop.run(stop)?;
    drop(troop);

    let table = match &c.worker.patterns {
        Some(p) => PatternTable::load(p)?,
        None => PatternTable::builtin(),
    };
    let report = analyze(&root.join(SESSIONS_DIR), &table, Some(&c.reference));
    let ap = root.join(ANALYSIS_FILE);
    std::fs::write(&ap, serde_json::to_string_pretty(&report)?).map_err(|e| Error::file(&ap, e))?;
    let sp = root.join(SUMMARY_FILE);
    std::fs::write(&sp, render(&report)).map_err(|e| Error::file(&sp, e))?;
    let missing = cfg
        .expect
        .as_ref()
        .map(|e| check_expect(e, &report))
        .unwrap_or_default();
    Ok(CampaignOutcome {
        root,
        tasks: c.tasks.len(),
        report,
        missing,
    })
}
