mod common;

use std::sync::Arc;

use common::*;
use mfuz_core::generators::decode::{decode, encode};
use mfuz_core::generators::evofuzz::{gen_value, INT32_BOUNDARY};
use mfuz_core::generators::harness::{Delivery, Harness, HarnessConfig};
use mfuz_core::generators::randfuzz::randfuzz_next;
use mfuz_core::generators::{build, GeneratorConfig, GeneratorKind};
use mfuz_core::instance::{fresh_instance, Flavor};
use mfuz_core::manifest::Manifest;
use mfuz_core::records::{load_inputs, InputLog, Outcome, INPUTS_FILE};
use mfuz_core::surface::{surface_of, ApiRef, ParamType};
use mfuz_core::target::body::gate_depth;
use mfuz_core::target::{SimCore, SimOptions, TargetLog};
use mfuz_core::wire::{decode_values, Request, Response, TypedValue};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn randfuzz_bytes_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut bins = [0u64; 256];
    for _ in 0..10_000 {
        for b in randfuzz_next(&mut rng, 64) {
            bins[b as usize] += 1;
        }
    }
    let n: u64 = bins.iter().sum();
    let e = n as f64 / 256.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - e).powi(2) / e).sum();
    // Upper 0.1% point of chi-square with 255 degrees of freedom.
    assert!(chi2 < 330.5, "chi2 = {chi2:.1} over {n} bytes");
    // Lengths are uniform on [0, 64] too; each of 65 values shows up.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut lens = [0u32; 65];
    for _ in 0..10_000 {
        lens[randfuzz_next(&mut rng, 64).len()] += 1;
    }
    assert!(lens.iter().all(|&c| c > 80 && c < 240), "{lens:?}");
}

#[test]
fn randfuzz_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!((0..100).all(|_| randfuzz_next(&mut rng, 0).is_empty()));
    let lens = |seed| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..3).map(|_| randfuzz_next(&mut r, 4096).len()).collect::<Vec<_>>()
    };
    assert_eq!(lens(0), lens(0));
    assert_ne!(lens(0), lens(1));
}

#[test]
fn black_box_sequences_are_a_function_of_seed_and_descriptor() {
    let surface = surface_of(&Manifest::reference());
    for api in surface.apis.iter().filter(|a| !a.params.is_empty()) {
        for kind in [GeneratorKind::RandFuzz, GeneratorKind::EvoFuzzBB, GeneratorKind::ByteFuzzBB] {
            if !kind.supports(api) {
                continue;
            }
            let run = |seed| {
                let mut g = build(&GeneratorConfig::new(kind, seed), api).unwrap();
                (0..50).map(|_| g.propose().payload).collect::<Vec<_>>()
            };
            assert_eq!(run(3), run(3), "{kind} {}", api.api_ref());
            assert_ne!(run(3), run(4), "{kind} {}", api.api_ref());
        }
    }
}

#[test]
fn boundary_ints_show_up_early() {
    // With a 20% boundary weight, P(no boundary in 200 draws) = 0.8^200.
    let mut misses = 0;
    for seed in 0..500 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hit = (0..200).any(|_| match gen_value(&ParamType::I32, &mut rng) {
            TypedValue::I32(v) => INT32_BOUNDARY.contains(&v),
            _ => unreachable!(),
        });
        misses += (!hit) as u32;
    }
    assert!(misses <= 5, "{misses}/500 seeds saw no boundary value");
}

fn param_type() -> impl Strategy<Value = ParamType> {
    let leaf = prop_oneof![
        Just(ParamType::Bool),
        Just(ParamType::I32),
        Just(ParamType::I64),
        Just(ParamType::F32),
        Just(ParamType::F64),
        Just(ParamType::Str),
    ];
    leaf
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn decode_encode_decode_is_decode(bytes in proptest::collection::vec(any::<u8>(), 0..300), params in proptest::collection::vec(param_type(), 0..6)) {
        let d = decode(&bytes, &params);
        prop_assert_eq!(d.len(), params.len());
        prop_assert_eq!(decode(&encode(&d), &params), d);
    }

    /// Decoded vectors are valid arguments: they survive the wire codec.
    #[test]
    fn decoded_values_roundtrip_through_wire(bytes in proptest::collection::vec(any::<u8>(), 0..120), params in proptest::collection::vec(param_type(), 1..5)) {
        let d = decode(&bytes, &params);
        let wire = mfuz_core::wire::encode_values(&d);
        prop_assert_eq!(decode_values(&wire, &params).unwrap(), d);
    }
}

#[test]
fn harness_persists_before_sending() {
    let icfg = icfg(400);
    let dir = tempfile::tempdir().unwrap();
    let inst = fresh_instance(&icfg, Flavor::Instrumented, &dir.path().join("t.log")).unwrap();
    let hcfg = HarnessConfig::new(&inst.endpoint, inst.feedback_endpoint.as_deref(), SYSTEM);
    let logdir = dir.path().join("s");
    let mut h = Harness::new(hcfg, InputLog::open(&logdir).unwrap()).unwrap();

    let e = h.send_typed(&ApiRef::new("clipboard", 1), &[TypedValue::Str("7".into())]).unwrap();
    assert!(matches!(e.delivery, Delivery::Response(Response::Ok(_))));
    let e = h.send(&ApiRef::new("clipboard", 99), vec![], None).unwrap();
    assert_eq!(e.delivery, Delivery::Response(Response::NoSuchTxn));
    let on_disk = load_inputs(&logdir.join(INPUTS_FILE)).unwrap();
    assert_eq!(on_disk.iter().map(|r| r.seq).collect::<Vec<_>>(), [1, 2]);
    assert_eq!((on_disk[1].service.as_str(), on_disk[1].txn_id), ("clipboard", 99));

    // The soft reboot drops the connection; the fatal input is already on disk.
    let e = h.send_typed(&ApiRef::new("package", 1), &[TypedValue::I32(15)]).unwrap();
    assert!(matches!(e.delivery, Delivery::TargetDeath(_)), "{:?}", e.delivery);
    let on_disk = load_inputs(&logdir.join(INPUTS_FILE)).unwrap();
    assert_eq!(on_disk.last().unwrap().seq, 3);
    assert_eq!(on_disk.last().unwrap().service, "package");
    drop(h);
    mfuz_core::records::finalize(&logdir).unwrap();
    let done = load_inputs(&logdir.join(INPUTS_FILE)).unwrap();
    assert_eq!(done[1].outcome, Some(Outcome::NoSuchTxn));
    assert!(matches!(done[2].outcome, Some(Outcome::TargetDeath { .. })));
}

/// Runs ByteFuzz on the gated API in-process until the first argument
/// carries the full gate prefix. Returns the exec count, if reached.
fn gate_search(kind: GeneratorKind, seed: u64, budget: usize) -> Option<usize> {
    let m = Arc::new(Manifest::reference());
    let surface = surface_of(&m);
    let api = surface.find(&ApiRef::new("telephony", 5)).unwrap();
    let mut g = build(&GeneratorConfig::new(kind, seed), api).unwrap();
    let mut core = SimCore::new(m, SimOptions { seed: Some(1), ..SimOptions::default() }, Arc::new(TargetLog::null()));
    for i in 0..budget {
        let p = g.propose();
        let vals = decode_values(&p.payload, &api.params).unwrap();
        if gate_depth(&vals, &[0x4D, 0x46]) == 2 {
            return Some(i + 1);
        }
        let d = core.dispatch(&Request::new("telephony", 5, SYSTEM, p.payload));
        g.observe(d.feedback.as_ref());
    }
    None
}

#[test]
fn evolutionary_bytefuzz_opens_the_gate() {
    // About 20 s of target time at the measured exec rate.
    let budget = 200_000;
    let evo: Vec<_> = (0..10).map(|s| gate_search(GeneratorKind::ByteFuzzEvo, s, budget)).collect();
    let bb: Vec<_> = (0..10).map(|s| gate_search(GeneratorKind::ByteFuzzBB, s, budget)).collect();
    let evo_ok = evo.iter().filter(|r| r.is_some()).count();
    let bb_ok = bb.iter().filter(|r| r.is_some()).count();
    println!("evo {evo:?}\nbb  {bb:?}");
    assert!(evo_ok >= 9, "evolutionary mode opened the gate on {evo_ok}/10 seeds");
    assert!(bb_ok < evo_ok, "black-box {bb_ok}/10 vs evolutionary {evo_ok}/10");
}
