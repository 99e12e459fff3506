use std::collections::BTreeMap;
use std::path::Path;

use mfuz_core::analyzer::{self, coverage_stats, throughput_stats};
use proptest::prelude::*;
use serde_json::{json, Value};

/// Deltas in microseconds; multiples of 125 so the millisecond values are
/// exact binary fractions.
const DELTAS: [u64; 8] = [0, 125, 1000, 1375, 2500, 40_000, 125_000, 3_000_125];
const GENERATORS: [&str; 3] = ["randfuzz", "bytefuzz-evo", "evofuzz-bb"];
const APIS: [(&str, u32, &str); 4] = [
    ("clipboard", 1, "clipboard.setPrimaryClip"),
    ("clipboard", 2, "clipboard.getPrimaryClip"),
    ("power", 3, "power.isScreenOn"),
    ("input", 2, "input.setPointerSpeed"),
];

#[derive(Debug, Clone)]
struct Rec {
    delta: u64,
    feedback: Option<(u32, u32)>,
}

#[derive(Debug, Clone)]
struct Sess {
    generator: usize,
    api: usize,
    named: bool,
    recs: Vec<Rec>,
}

#[derive(Debug, Clone)]
struct TaskModel {
    perm_map: bool,
    sessions: Vec<Sess>,
}

impl Sess {
    fn key(&self) -> String {
        let (svc, txn, method) = APIS[self.api];
        if self.named {
            method.to_string()
        } else {
            format!("{svc}:{txn}")
        }
    }
}

fn write_tree(root: &Path, tasks: &[TaskModel]) {
    for (ti, t) in tasks.iter().enumerate() {
        let dir = root.join(format!("t{ti:02}"));
        std::fs::create_dir_all(&dir).unwrap();
        let mut seq = 0u64;
        let mut ts = 1_700_000_000_000_000u64;
        let mut lines = String::new();
        let mut sessions = Vec::new();
        for s in &t.sessions {
            let (svc, txn, method) = APIS[s.api];
            let first = seq + 1;
            for r in &s.recs {
                seq += 1;
                ts += r.delta;
                let mut rec = json!({"seq": seq, "ts": ts, "service": svc, "txn_id": txn, "principal": 0, "raw_hex": "", "outcome": {"status": "ok"}});
                if let Some((hit, universe)) = r.feedback {
                    rec["feedback"] = json!({"blocks_hit": hit, "block_universe": universe});
                }
                lines.push_str(&rec.to_string());
                lines.push('\n');
            }
            let mut sr = json!({
                "api": {"service": svc, "txn_id": txn},
                "generator": GENERATORS[s.generator],
                "principal": 0,
                "seqs": if s.recs.is_empty() { Value::Null } else { json!([first, seq]) },
                "execs": s.recs.len(),
                "started_at": 0, "ended_at": 0, "end": "budget",
                "blocks_hit": 0, "block_universe": null, "corpus_len": 1
            });
            if s.named {
                sr["method"] = json!(method);
            }
            sessions.push(sr);
            // Sessions are separated by a gap that must never count.
            ts += 77_777_000;
        }
        let report = json!({
            "task_id": format!("t{ti:02}"), "worker_id": "w", "analysis": if t.perm_map { "perm_map" } else { "vuln_hunt" },
            "status": "done", "budget_s": 1.0, "started_at": 0, "finished_at": 0,
            "execs": seq, "instances": t.sessions.len(), "sessions": sessions, "findings": []
        });
        std::fs::write(dir.join("report.json"), report.to_string()).unwrap();
        std::fs::write(dir.join("inputs.jsonl"), lines).unwrap();
    }
}

fn o_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    if xs.is_empty() { 0.0 } else { s / xs.len() as f64 }
}

fn o_median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

struct Oracle {
    /// generator → api → (mean, median, n)
    thr: BTreeMap<String, BTreeMap<String, (f64, f64, usize)>>,
    /// generator → api → best coverage percent (None: no universe)
    cov: BTreeMap<String, BTreeMap<String, Option<f64>>>,
}

fn oracle(tasks: &[TaskModel]) -> Oracle {
    let mut deltas: BTreeMap<String, BTreeMap<String, Vec<f64>>> = BTreeMap::new();
    let mut cov: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
    for t in tasks {
        for s in &t.sessions {
            let g = GENERATORS[s.generator].to_string();
            let d = deltas.entry(g.clone()).or_default().entry(s.key()).or_default();
            for r in s.recs.iter().skip(1) {
                d.push(r.delta as f64 / 1000.0);
            }
            let c = if s.recs.is_empty() {
                Some(0.0)
            } else {
                let fbs: Vec<(u32, u32)> = s.recs.iter().filter_map(|r| r.feedback).collect();
                let u = fbs.iter().map(|f| f.1).max();
                match u {
                    None | Some(0) => None,
                    Some(u) => {
                        let h = fbs.iter().map(|f| f.0).max().unwrap();
                        Some(f64::min(h as f64 / u as f64, 1.0) * 100.0)
                    }
                }
            };
            let slot = cov.entry(g).or_default().entry(s.key()).or_insert(None);
            *slot = match (*slot, c) {
                (Some(a), Some(b)) => Some(if b > a { b } else { a }),
                (a, b) => a.or(b),
            };
        }
    }
    let thr = deltas
        .into_iter()
        .map(|(g, apis)| {
            let per = apis
                .into_iter()
                .filter(|(_, d)| !d.is_empty())
                .map(|(k, d)| (k, (o_mean(&d), o_median(&d), d.len())))
                .collect();
            (g, per)
        })
        .collect();
    Oracle { thr, cov }
}

fn check(tasks: &[TaskModel]) -> Result<(), TestCaseError> {
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), tasks);
    let loaded = analyzer::load(dir.path());
    prop_assert!(loaded.malformed.is_empty(), "{:?}", loaded.malformed);
    let want = oracle(tasks);

    let thr = throughput_stats(&loaded.sessions);
    prop_assert_eq!(thr.iter().map(|s| s.generator.clone()).collect::<Vec<_>>(), want.thr.keys().cloned().collect::<Vec<_>>());
    for s in &thr {
        let w = &want.thr[&s.generator];
        prop_assert_eq!(s.per_api.len(), w.len());
        for (api, a) in &s.per_api {
            let (mean, median, n) = w[api];
            prop_assert_eq!(a.mean_ms.to_bits(), mean.to_bits(), "{} {} mean", s.generator, api);
            prop_assert_eq!(a.median_ms.to_bits(), median.to_bits(), "{} {} median", s.generator, api);
            prop_assert_eq!(a.deltas, n);
            let c = want.cov[&s.generator][api].map(|p| p / 100.0);
            prop_assert_eq!(a.coverage_fraction.map(f64::to_bits), c.map(f64::to_bits));
        }
        let means: Vec<f64> = w.values().map(|v| v.0).collect();
        let medians: Vec<f64> = w.values().map(|v| v.1).collect();
        prop_assert_eq!(s.aggregate.mean_of_means.to_bits(), o_mean(&means).to_bits());
        prop_assert_eq!(s.aggregate.median_of_means.to_bits(), o_median(&means).to_bits());
        prop_assert_eq!(s.aggregate.mean_of_medians.to_bits(), o_mean(&medians).to_bits());
        prop_assert_eq!(s.aggregate.median_of_medians.to_bits(), o_median(&medians).to_bits());
    }

    let cov = coverage_stats(&loaded.sessions);
    prop_assert_eq!(cov.len(), want.cov.len());
    for c in &cov {
        let w = &want.cov[&c.generator];
        let have: Vec<f64> = w.values().filter_map(|v| *v).collect();
        prop_assert_eq!(c.per_api.len(), have.len());
        for (api, p) in &c.per_api {
            prop_assert_eq!(Some(p.to_bits()), w[api].map(f64::to_bits));
        }
        prop_assert_eq!(c.excluded.len(), w.len() - have.len());
        prop_assert_eq!(c.mean_pct.to_bits(), o_mean(&have).to_bits());
        prop_assert_eq!(c.median_pct.to_bits(), o_median(&have).to_bits());
    }
    Ok(())
}

fn rec() -> impl Strategy<Value = Rec> {
    let fb = prop_oneof![
        1 => Just(None),
        4 => (0u32..40, prop::sample::select(vec![0u32, 6, 10, 37])).prop_map(Some),
    ];
    (0..DELTAS.len(), fb).prop_map(|(i, feedback)| Rec { delta: DELTAS[i], feedback })
}

fn sess() -> impl Strategy<Value = Sess> {
    (0..GENERATORS.len(), 0..APIS.len(), any::<bool>(), prop::collection::vec(rec(), 0..14))
        .prop_map(|(generator, api, named, recs)| Sess { generator, api, named, recs })
}

fn tasks() -> impl Strategy<Value = Vec<TaskModel>> {
    prop::collection::vec(
        (any::<bool>(), prop::collection::vec(sess(), 1..4)).prop_map(|(perm_map, sessions)| TaskModel { perm_map, sessions }),
        1..6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn statistics_match_brute_force(t in tasks()) {
        check(&t)?;
    }
}

#[test]
fn hand_computed_tree() {
    let r = |delta, fb| Rec { delta, feedback: fb };
    let tasks = vec![
        TaskModel {
            perm_map: false,
            sessions: vec![
                // deltas 1, 2.5, 40 ms
                Sess { generator: 0, api: 0, named: true, recs: vec![r(0, Some((3, 10))), r(1000, None), r(2500, Some((5, 10))), r(40_000, None)] },
                // deltas 0.125 ms
                Sess { generator: 0, api: 1, named: true, recs: vec![r(5, Some((1, 4))), r(125, Some((4, 4)))] },
            ],
        },
        TaskModel {
            perm_map: true,
            // one more delta for api 0: 1.375 ms; worse coverage than before
            sessions: vec![Sess { generator: 0, api: 0, named: true, recs: vec![r(0, Some((1, 10))), r(1375, None)] }],
        },
    ];
    check(&tasks).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_tree(dir.path(), &tasks);
    let loaded = analyzer::load(dir.path());
    let s = &throughput_stats(&loaded.sessions)[0];
    let a = &s.per_api["clipboard.setPrimaryClip"];
    assert_eq!((a.mean_ms, a.median_ms, a.deltas), ((1.0 + 2.5 + 40.0 + 1.375) / 4.0, (1.375 + 2.5) / 2.0, 4));
    assert_eq!(a.coverage_fraction, Some(0.5));
    let b = &s.per_api["clipboard.getPrimaryClip"];
    assert_eq!((b.mean_ms, b.median_ms, b.coverage_fraction), (0.125, 0.125, Some(1.0)));
    assert_eq!(s.aggregate.mean_of_means, (11.21875 + 0.125) / 2.0);
    assert_eq!(s.aggregate.median_of_medians, (1.9375 + 0.125) / 2.0);
    let c = &coverage_stats(&loaded.sessions)[0];
    assert_eq!((c.mean_pct, c.median_pct), (75.0, 75.0));
}
