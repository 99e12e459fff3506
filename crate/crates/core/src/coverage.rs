//! Edge coverage: block hashing, the bucketed hit-count map, virgin-bit
//! tracking and the per-execution feedback message.
//!
//! Feedback frame (after the usual `u32` length prefix):
//!
//! ```text
//! u64 exec_seq
//! u32 edge_count
//! edge_count × (u32 edge_index, u32 raw_count)
//! u32 blocks_hit
//! u32 block_universe
//! ```
//!
//! `blocks_hit` counts the distinct blocks of the executed API hit since the
//! instance booted, so it never decreases over a session.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAP_SIZE: usize = 1 << 16;

/// Id of the pseudo-block every execution starts from.
pub const ENTRY_BLOCK: u64 = 0;

/// SplitMix64 finalizer. Fixed so maps are stable across runs and builds.
pub fn mix64(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// 32-bit FNV-1a.
pub fn fnv1a32(bytes: &[u8]) -> u32 {
    let mut h: u32 = 0x811c_9dc5;
    for b in bytes {
        h ^= *b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    h
}

/// Global id of a method's local block (`local >= 1`).
pub fn block_id(service: &str, txn_id: u32, local: u32) -> u64 {
    ((fnv1a32(service.as_bytes()) as u64) << 32) | ((txn_id as u64 & 0xF_FFFF) << 12) | (local as u64 & 0xFFF)
}

pub fn edge_index(prev_block: u64, cur_block: u64) -> usize {
    (((mix64(prev_block) >> 1) ^ mix64(cur_block)) % MAP_SIZE as u64) as usize
}

/// Bucket class of a raw hit count: 0, 1, 2, 3, 4–7, 8–15, 16–31, 32–127, 128+.
pub fn bucket(count: u32) -> u8 {
    match count {
        0 => 0,
        1 => 1,
        2 => 2,
        3 => 4,
        4..=7 => 8,
        8..=15 => 16,
        16..=31 => 32,
        32..=127 => 64,
        _ => 128,
    }
}

/// Raw per-cell hit counters, saturating at 255.
#[derive(Clone, PartialEq, Eq)]
pub struct CoverageMap {
    bytes: Vec<u8>,
}

impl std::fmt::Debug for CoverageMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nz = self.bytes.iter().filter(|b| **b != 0).count();
        write!(f, "CoverageMap({nz} nonzero cells)")
    }
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        CoverageMap {
            bytes: vec![0; MAP_SIZE],
        }
    }

    pub fn with_size(size: usize) -> Self {
        CoverageMap {
            bytes: vec![0; size],
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        CoverageMap { bytes }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn clear(&mut self) {
        self.bytes.iter_mut().for_each(|b| *b = 0);
    }

    pub fn record_edge(&mut self, prev_block: u64, cur_block: u64) {
        let idx = edge_index(prev_block, cur_block) % self.bytes.len();
        self.bytes[idx] = self.bytes[idx].saturating_add(1);
    }

    /// Trace map of one execution.
    pub fn from_feedback(fb: &ExecFeedback) -> Self {
        let mut map = CoverageMap::new();
        map.load_feedback(fb);
        map
    }

    pub fn load_feedback(&mut self, fb: &ExecFeedback) {
        for &(idx, count) in &fb.edges {
            if let Some(cell) = self.bytes.get_mut(idx as usize) {
                *cell = count.min(255) as u8;
            }
        }
    }

    pub fn nonzero(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.bytes
            .iter()
            .enumerate()
            .filter(|(_, b)| **b != 0)
            .map(|(i, b)| (i, *b))
    }
}

/// Bitmask of bucket classes not yet observed, initially all ones.
#[derive(Clone, PartialEq, Eq)]
pub struct VirginMap {
    bits: Vec<u8>,
}

impl std::fmt::Debug for VirginMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VirginMap({} bits seen)", self.seen_bits())
    }
}

impl Default for VirginMap {
    fn default() -> Self {
        Self::new()
    }
}

impl VirginMap {
    pub fn new() -> Self {
        VirginMap {
            bits: vec![0xFF; MAP_SIZE],
        }
    }

    pub fn with_size(size: usize) -> Self {
        VirginMap {
            bits: vec![0xFF; size],
        }
    }

    pub fn seen_bits(&self) -> u32 {
        self.bits.iter().map(|b| (!b).count_ones()).sum()
    }

    /// Bucketed coverage observed so far (complement of the virgin bits).
    pub fn covered(&self) -> Vec<u8> {
        self.bits.iter().map(|b| !b).collect()
    }
}

/// True iff some cell of `map` lands in a bucket class still set in
/// `virgin`; clears those bits.
pub fn has_new_bits(map: &CoverageMap, virgin: &mut VirginMap) -> Result<bool> {
    Ok(new_bits(map, virgin)? > 0)
}

/// Number of virgin bits cleared by `map`.
pub fn new_bits(map: &CoverageMap, virgin: &mut VirginMap) -> Result<u32> {
    if map.bytes.len() != virgin.bits.len() {
        return Err(Error::MapSize {
            left: map.bytes.len(),
            right: virgin.bits.len(),
        });
    }
    let mut fresh = 0;
    for (count, v) in map.bytes.iter().zip(virgin.bits.iter_mut()) {
        if *count == 0 {
            continue;
        }
        let b = bucket(*count as u32);
        if b & *v != 0 {
            fresh += (b & *v).count_ones();
            *v &= !b;
        }
    }
    Ok(fresh)
}

/// Sparse variant of [`new_bits`] working directly on a feedback message.
pub fn new_bits_sparse(fb: &ExecFeedback, virgin: &mut VirginMap) -> u32 {
    let mut fresh = 0;
    for &(idx, count) in &fb.edges {
        if let Some(v) = virgin.bits.get_mut(idx as usize) {
            let b = bucket(count.min(255));
            if b & *v != 0 {
                fresh += (b & *v).count_ones();
                *v &= !b;
            }
        }
    }
    fresh
}

/// Cumulative bucketed coverage of a session: OR of every execution's
/// bucketed trace. Persisted as `coverage.bin`.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionMap {
    bits: Vec<u8>,
}

impl std::fmt::Debug for SessionMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let nz = self.bits.iter().filter(|b| **b != 0).count();
        write!(f, "SessionMap({nz} nonzero cells)")
    }
}

impl Default for SessionMap {
    fn default() -> Self {
        Self::new()
    }
}

impl SessionMap {
    pub fn new() -> Self {
        SessionMap {
            bits: vec![0; MAP_SIZE],
        }
    }

    pub fn accumulate(&mut self, fb: &ExecFeedback) {
        for &(idx, count) in &fb.edges {
            if let Some(cell) = self.bits.get_mut(idx as usize) {
                *cell |= bucket(count.min(255));
            }
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() != MAP_SIZE {
            return Err(Error::MapSize {
                left: bytes.len(),
                right: MAP_SIZE,
            });
        }
        Ok(SessionMap { bits: bytes })
    }

    pub fn nonzero_cells(&self) -> usize {
        self.bits.iter().filter(|b| **b != 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecFeedback {
    pub exec_seq: u64,
    /// Deduplicated `(edge_index, raw_count)` pairs.
    pub edges: Vec<(u32, u32)>,
    pub blocks_hit: u32,
    pub block_universe: u32,
}

impl ExecFeedback {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.edges.len() * 8);
        out.extend_from_slice(&self.exec_seq.to_le_bytes());
        out.extend_from_slice(&(self.edges.len() as u32).to_le_bytes());
        for (idx, count) in &self.edges {
            out.extend_from_slice(&idx.to_le_bytes());
            out.extend_from_slice(&count.to_le_bytes());
        }
        out.extend_from_slice(&self.blocks_hit.to_le_bytes());
        out.extend_from_slice(&self.block_universe.to_le_bytes());
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let bad = || Error::Wire(format!("feedback frame of {} bytes is malformed", body.len()));
        let u32_at = |at: usize| -> Result<u32> {
            body.get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(bad)
        };
        let exec_seq = body
            .get(0..8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(bad)?;
        let n = u32_at(8)? as usize;
        if body.len() != 12 + n * 8 + 8 {
            return Err(bad());
        }
        let edges = (0..n)
            .map(|i| Ok((u32_at(12 + i * 8)?, u32_at(16 + i * 8)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ExecFeedback {
            exec_seq,
            edges,
            blocks_hit: u32_at(12 + n * 8)?,
            block_universe: u32_at(16 + n * 8)?,
        })
    }
}

/// Fraction of an API's blocks hit over a feedback stream. `None` when the
/// API publishes no block universe.
pub fn coverage_percent(stream: &[ExecFeedback]) -> Option<f64> {
    let Some(universe) = stream.iter().map(|f| f.block_universe).max() else {
        return Some(0.0);
    };
    if universe == 0 {
        return None;
    }
    let hit = stream.iter().map(|f| f.blocks_hit).max().unwrap_or(0);
    Some((hit as f64 / universe as f64).min(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_edge_from_entry() {
        let mut map = CoverageMap::new();
        map.record_edge(ENTRY_BLOCK, block_id("svc", 1, 1));
        let nz: Vec<_> = map.nonzero().collect();
        assert_eq!(nz.len(), 1);
        assert_eq!(nz[0].1, 1);
    }

    #[test]
    fn counter_saturates() {
        let mut map = CoverageMap::new();
        let (a, b) = (block_id("s", 1, 1), block_id("s", 1, 2));
        for _ in 0..200 {
            map.record_edge(a, b);
        }
        assert_eq!(map.as_bytes()[edge_index(a, b)], 200);
        for _ in 0..100 {
            map.record_edge(a, b);
        }
        assert_eq!(map.as_bytes()[edge_index(a, b)], 255);
    }

    #[test]
    fn edge_direction_matters() {
        // Brute force over every ordered pair of small block ids.
        let mut symmetric = 0u64;
        let mut total = 0u64;
        for a in 0u64..1024 {
            for b in (a + 1)..1024 {
                total += 1;
                if edge_index(a, b) == edge_index(b, a) {
                    symmetric += 1;
                }
            }
        }
        let asym_rate = 1.0 - symmetric as f64 / total as f64;
        assert!(asym_rate > 0.99, "asymmetry rate {asym_rate}");
    }

    #[test]
    fn bucket_boundaries() {
        let expected = [
            (0, 0),
            (1, 1),
            (2, 2),
            (3, 4),
            (4, 8),
            (7, 8),
            (8, 16),
            (15, 16),
            (16, 32),
            (31, 32),
            (32, 64),
            (127, 64),
            (128, 128),
            (255, 128),
        ];
        for (count, b) in expected {
            assert_eq!(bucket(count), b, "count {count}");
        }
    }

    #[test]
    fn new_bits_semantics() {
        let mut virgin = VirginMap::new();
        let mut map = CoverageMap::new();
        map.record_edge(1, 2);
        assert!(has_new_bits(&map, &mut virgin).unwrap());
        assert!(!has_new_bits(&map, &mut virgin).unwrap());

        // 3 -> 4 crosses from bucket "3" into "4-7".
        let mut map = CoverageMap::new();
        for _ in 0..3 {
            map.record_edge(5, 6);
        }
        assert!(has_new_bits(&map, &mut virgin).unwrap());
        map.record_edge(5, 6);
        assert!(has_new_bits(&map, &mut virgin).unwrap());
        // 5 stays in 4-7.
        map.record_edge(5, 6);
        assert!(!has_new_bits(&map, &mut virgin).unwrap());
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let map = CoverageMap::with_size(16);
        let mut virgin = VirginMap::new();
        assert!(matches!(
            has_new_bits(&map, &mut virgin),
            Err(Error::MapSize { .. })
        ));
    }

    #[test]
    fn sparse_and_dense_agree() {
        let fb = ExecFeedback {
            exec_seq: 1,
            edges: vec![(10, 1), (20, 3), (65535, 300)],
            blocks_hit: 3,
            block_universe: 7,
        };
        let mut v1 = VirginMap::new();
        let mut v2 = VirginMap::new();
        let dense = new_bits(&CoverageMap::from_feedback(&fb), &mut v1).unwrap();
        let sparse = new_bits_sparse(&fb, &mut v2);
        assert_eq!(dense, sparse);
        assert_eq!(v1, v2);
    }

    #[test]
    fn feedback_codec() {
        let fb = ExecFeedback {
            exec_seq: 42,
            edges: vec![(1, 2), (3, 4)],
            blocks_hit: 5,
            block_universe: 9,
        };
        let bytes = fb.encode();
        assert_eq!(bytes.len(), 8 + 4 + 16 + 8);
        assert_eq!(ExecFeedback::decode(&bytes).unwrap(), fb);
        assert!(ExecFeedback::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn coverage_percent_cases() {
        assert_eq!(coverage_percent(&[]), Some(0.0));
        let full = ExecFeedback {
            exec_seq: 1,
            edges: vec![],
            blocks_hit: 7,
            block_universe: 7,
        };
        assert_eq!(coverage_percent(&[full.clone()]), Some(1.0));
        let none = ExecFeedback {
            block_universe: 0,
            blocks_hit: 0,
            ..full
        };
        assert_eq!(coverage_percent(&[none]), None);
    }
}
