#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use mfuz_core::instance::{InstanceConfig, Launcher};
use mfuz_core::manifest::Manifest;
use mfuz_core::records::InputRecord;
use mfuz_core::wire::{encode_values, TypedValue};

pub const SYSTEM: u32 = 1000;

pub fn reference() -> Arc<Manifest> {
    Arc::new(Manifest::reference())
}

pub fn icfg_for(manifest: Arc<Manifest>, watchdog_ms: u64) -> InstanceConfig {
    let mut c = InstanceConfig::new(manifest, None, Launcher::InThread);
    c.watchdog = Duration::from_millis(watchdog_ms);
    c.seed = Some(7);
    c
}

pub fn icfg(watchdog_ms: u64) -> InstanceConfig {
    icfg_for(reference(), watchdog_ms)
}

pub fn rec(seq: u64, service: &str, txn_id: u32, principal: u32, values: &[TypedValue]) -> InputRecord {
    InputRecord {
        seq,
        ts: seq,
        service: service.into(),
        txn_id,
        principal,
        raw_hex: hex_encode(&encode_values(values)),
        decoded: None,
        outcome: None,
        feedback: None,
    }
}

pub fn raw(seq: u64, service: &str, txn_id: u32, principal: u32, payload: &[u8]) -> InputRecord {
    let mut r = rec(seq, service, txn_id, principal, &[]);
    r.raw_hex = hex_encode(payload);
    r
}

pub fn hex_encode(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

/// Harmless calls: clipboard stores and lookups, settings reads.
pub fn noise(seq: u64) -> InputRecord {
    match seq % 3 {
        0 => rec(seq, "clipboard", 1, SYSTEM, &[TypedValue::Str(format!("n{seq}"))]),
        1 => rec(seq, "clipboard", 2, SYSTEM, &[TypedValue::Str(format!("n{seq}"))]),
        _ => rec(seq, "settings", 2, SYSTEM, &[TypedValue::Str("k".into())]),
    }
}

/// Renumbers `records` 1..=n.
pub fn numbered(mut records: Vec<InputRecord>) -> Vec<InputRecord> {
    for (i, r) in records.iter_mut().enumerate() {
        r.seq = i as u64 + 1;
        r.ts = r.seq;
    }
    records
}
