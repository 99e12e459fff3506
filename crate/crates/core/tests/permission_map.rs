use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use mfuz_core::analyzer::{self, build_permission_map, diff_permission_map, PermissionMap};
use mfuz_core::backend::{Analysis, Task, TaskSpec};
use mfuz_core::generators::{GeneratorConfig, GeneratorKind};
use mfuz_core::manifest::{CheckPosition, Manifest};
use mfuz_core::monitors::PatternTable;
use mfuz_core::surface::surface_of;
use mfuz_core::worker::{run_task, WorkerConfig, WorkerSettings};

#[test]
fn zero_permission_campaign_recovers_entry_checks_only() {
    let m = Arc::new(Manifest::reference());
    let mut s = WorkerSettings::new(PathBuf::from("reference"));
    s.watchdog_ms = 400;
    s.target_seed = Some(7);
    s.max_execs = Some(20);
    let cfg = WorkerConfig::with_manifest(s, m.clone(), PatternTable::builtin(), "w-perm");
    assert_eq!(cfg.settings.permmap_principal, 0);
    assert!(m.principal(0).unwrap().permissions.is_empty());

    let root = tempfile::tempdir().unwrap();
    let surface = surface_of(&m);
    for (i, api) in surface.apis.iter().enumerate() {
        let task = Task::from_spec(TaskSpec {
            task_id: format!("perm-{i:02}"),
            api_refs: vec![api.api_ref()],
            analysis: Analysis::PermMap,
            budget_s: 30.0,
            generator: Some(GeneratorConfig::new(GeneratorKind::EvoFuzzBB, i as u64)),
            inputs: None,
        });
        let run = run_task(&task, &cfg, &root.path().join(&task.task_id)).unwrap();
        assert_eq!(run.report.execs, 20, "{}", api.api_ref());
    }

    let loaded = analyzer::load(root.path());
    assert!(loaded.malformed.is_empty(), "{:?}", loaded.malformed);
    let observed = build_permission_map(&loaded.sessions);
    assert_eq!(observed.tested.len(), 64);

    let pairs = |pos: CheckPosition| -> BTreeSet<(String, String)> {
        PermissionMap { entries: m.permission_entries(|c| c.position == pos), ..Default::default() }.pairs()
    };
    let (entry, deep) = (pairs(CheckPosition::Entry), pairs(CheckPosition::Deep));
    let got = observed.pairs();
    assert_eq!(got, entry, "observed map must be exactly the entry checks");
    assert!(got.is_disjoint(&deep));

    let reference = PermissionMap::load(concat!(env!("CARGO_MANIFEST_DIR"), "/data/reference_manifest.json").as_ref()).unwrap();
    let d = diff_permission_map(&observed, &reference);
    let total = entry.len() + deep.len();
    assert_eq!(d.reference_entries_tested, total);
    assert_eq!(d.new.count, 0);
    // Confirmed fraction equals the entry share, to within two entries.
    let want = entry.len() as f64 / total as f64;
    assert!((d.confirmed_fraction - want).abs() * total as f64 <= 2.0, "{} vs {want}", d.confirmed_fraction);
    assert_eq!(d.unconfirmed_reference.len(), deep.len());
    println!("entry {} deep {} confirmed {:.3}", entry.len(), deep.len(), d.confirmed_fraction);
}
