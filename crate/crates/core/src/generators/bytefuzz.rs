//! Byte-level mutational fuzzer in the style of AFL, with the harness
//! decoding each byte string into typed arguments.
//!
//! Evo: round-robin over the queue; each entry first runs the deterministic
//! stages once (bit flips 1/2/4, byte flips 1/2/4, arithmetic +-1..35 on
//! 8/16/32-bit words in both byte orders, interesting values), then
//! `havoc_cycles` havoc rounds. Inputs that set virgin bits join the queue.
//! BB: havoc on the seed only; the queue never grows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::decode::{decode, minimal_input};
use super::{Generator, GeneratorKind, Mode, Proposal};
use crate::coverage::{new_bits_sparse, ExecFeedback, VirginMap};
use crate::surface::ParamType;
use crate::wire::encode_values;

pub const ARITH_MAX: u32 = 35;
pub const INTERESTING_8: [i8; 9] = [-128, -1, 0, 1, 16, 32, 64, 100, 127];
pub const INTERESTING_16: [i16; 10] = [-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767];
pub const INTERESTING_32: [i32; 8] = [
    -2147483648,
    -100663046,
    -32769,
    32768,
    65535,
    65536,
    100663045,
    2147483647,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Flip1,
    Flip2,
    Flip4,
    Byte1,
    Byte2,
    Byte4,
    Arith8,
    Arith16,
    Arith32,
    Interest8,
    Interest16,
    Interest32,
}

pub const STAGES: [Stage; 12] = [
    Stage::Flip1,
    Stage::Flip2,
    Stage::Flip4,
    Stage::Byte1,
    Stage::Byte2,
    Stage::Byte4,
    Stage::Arith8,
    Stage::Arith16,
    Stage::Arith32,
    Stage::Interest8,
    Stage::Interest16,
    Stage::Interest32,
];

/// Number of positions a stage visits on an input of `len` bytes.
fn positions(stage: Stage, len: usize) -> usize {
    let bits = len * 8;
    match stage {
        Stage::Flip1 => bits,
        Stage::Flip2 => bits.saturating_sub(1),
        Stage::Flip4 => bits.saturating_sub(3),
        Stage::Byte1 | Stage::Arith8 | Stage::Interest8 => len,
        Stage::Byte2 | Stage::Arith16 | Stage::Interest16 => len.saturating_sub(1),
        Stage::Byte4 | Stage::Arith32 | Stage::Interest32 => len.saturating_sub(3),
    }
}

fn flip_bit(buf: &mut [u8], bit: usize) {
    buf[bit / 8] ^= 128 >> (bit % 8);
}

fn put(buf: &[u8], at: usize, bytes: &[u8]) -> Vec<u8> {
    let mut c = buf.to_vec();
    c[at..at + bytes.len()].copy_from_slice(bytes);
    c
}

/// Children of one stage at one position, in emission order.
pub fn stage_children(stage: Stage, input: &[u8], pos: usize) -> Vec<Vec<u8>> {
    let mut out = Vec::new();
    match stage {
        Stage::Flip1 | Stage::Flip2 | Stage::Flip4 => {
            let n = match stage {
                Stage::Flip1 => 1,
                Stage::Flip2 => 2,
                _ => 4,
            };
            let mut c = input.to_vec();
            (pos..pos + n).for_each(|b| flip_bit(&mut c, b));
            out.push(c);
        }
        Stage::Byte1 | Stage::Byte2 | Stage::Byte4 => {
            let n = match stage {
                Stage::Byte1 => 1,
                Stage::Byte2 => 2,
                _ => 4,
            };
            let mut c = input.to_vec();
            c[pos..pos + n].iter_mut().for_each(|b| *b ^= 0xFF);
            out.push(c);
        }
        Stage::Arith8 => {
            for k in 1..=ARITH_MAX as u8 {
                out.push(put(input, pos, &[input[pos].wrapping_add(k)]));
                out.push(put(input, pos, &[input[pos].wrapping_sub(k)]));
            }
        }
        Stage::Arith16 => {
            let le = u16::from_le_bytes([input[pos], input[pos + 1]]);
            let be = u16::from_be_bytes([input[pos], input[pos + 1]]);
            for k in 1..=ARITH_MAX as u16 {
                out.push(put(input, pos, &le.wrapping_add(k).to_le_bytes()));
                out.push(put(input, pos, &le.wrapping_sub(k).to_le_bytes()));
                out.push(put(input, pos, &be.wrapping_add(k).to_be_bytes()));
                out.push(put(input, pos, &be.wrapping_sub(k).to_be_bytes()));
            }
        }
        Stage::Arith32 => {
            let w: [u8; 4] = input[pos..pos + 4].try_into().unwrap();
            let le = u32::from_le_bytes(w);
            let be = u32::from_be_bytes(w);
            for k in 1..=ARITH_MAX {
                out.push(put(input, pos, &le.wrapping_add(k).to_le_bytes()));
                out.push(put(input, pos, &le.wrapping_sub(k).to_le_bytes()));
                out.push(put(input, pos, &be.wrapping_add(k).to_be_bytes()));
                out.push(put(input, pos, &be.wrapping_sub(k).to_be_bytes()));
            }
        }
        Stage::Interest8 => {
            for v in INTERESTING_8 {
                out.push(put(input, pos, &[v as u8]));
            }
        }
        Stage::Interest16 => {
            for v in INTERESTING_8.iter().map(|v| *v as i16).chain(INTERESTING_16) {
                out.push(put(input, pos, &v.to_le_bytes()));
                out.push(put(input, pos, &v.to_be_bytes()));
            }
        }
        Stage::Interest32 => {
            let all = INTERESTING_8
                .iter()
                .map(|v| *v as i32)
                .chain(INTERESTING_16.iter().map(|v| *v as i32))
                .chain(INTERESTING_32);
            for v in all {
                out.push(put(input, pos, &v.to_le_bytes()));
                out.push(put(input, pos, &v.to_be_bytes()));
            }
        }
    }
    out
}

/// Lazy walk over all deterministic stages of one input.
#[derive(Debug, Clone, Default)]
pub struct DetWalk {
    stage: usize,
    pos: usize,
    buffer: std::collections::VecDeque<Vec<u8>>,
}

impl DetWalk {
    pub fn next(&mut self, input: &[u8]) -> Option<Vec<u8>> {
        loop {
            if let Some(c) = self.buffer.pop_front() {
                return Some(c);
            }
            let stage = *STAGES.get(self.stage)?;
            if self.pos >= positions(stage, input.len()) {
                self.stage += 1;
                self.pos = 0;
                continue;
            }
            self.buffer = stage_children(stage, input, self.pos).into();
            self.pos += 1;
        }
    }
}

/// 2^1..2^7 stacked random mutations.
pub fn havoc(input: &[u8], rng: &mut impl Rng, max_len: usize) -> Vec<u8> {
    let mut buf = input.to_vec();
    let rounds = 1usize << rng.gen_range(1..=7);
    for _ in 0..rounds {
        let len = buf.len();
        let op = if len == 0 { 10 } else { rng.gen_range(0..12) };
        match op {
            0 => flip_bit(&mut buf, rng.gen_range(0..len * 8)),
            1 => buf[rng.gen_range(0..len)] = *INTERESTING_8.choose(rng).unwrap() as u8,
            2 if len >= 2 => {
                let at = rng.gen_range(0..len - 1);
                let v = *INTERESTING_16.choose(rng).unwrap();
                let b = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                buf[at..at + 2].copy_from_slice(&b);
            }
            3 if len >= 4 => {
                let at = rng.gen_range(0..len - 3);
                let v = *INTERESTING_32.choose(rng).unwrap();
                let b = if rng.gen() { v.to_le_bytes() } else { v.to_be_bytes() };
                buf[at..at + 4].copy_from_slice(&b);
            }
            4 => {
                let at = rng.gen_range(0..len);
                buf[at] = buf[at].wrapping_sub(rng.gen_range(1..=ARITH_MAX as u8));
            }
            5 => {
                let at = rng.gen_range(0..len);
                buf[at] = buf[at].wrapping_add(rng.gen_range(1..=ARITH_MAX as u8));
            }
            6 if len >= 2 => {
                let at = rng.gen_range(0..len - 1);
                let v = u16::from_le_bytes([buf[at], buf[at + 1]]);
                let k = rng.gen_range(1..=ARITH_MAX as u16);
                let v = if rng.gen() { v.wrapping_add(k) } else { v.wrapping_sub(k) };
                buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
            }
            7 if len >= 4 => {
                let at = rng.gen_range(0..len - 3);
                let v = u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
                let k = rng.gen_range(1..=ARITH_MAX);
                let v = if rng.gen() { v.wrapping_add(k) } else { v.wrapping_sub(k) };
                buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
            }
            8 => {
                let at = rng.gen_range(0..len);
                buf[at] ^= rng.gen_range(1..=255u8);
            }
            9 if len >= 2 => {
                let n = rng.gen_range(1..=len / 2);
                let at = rng.gen_range(0..=len - n);
                buf.drain(at..at + n);
            }
            10 if len < max_len => {
                let n = rng.gen_range(1..=16.min(max_len - len));
                let at = rng.gen_range(0..=len);
                let chunk: Vec<u8> = if len > 0 && rng.gen_bool(0.75) {
                    let from = rng.gen_range(0..len);
                    (0..n).map(|i| buf[(from + i) % len]).collect()
                } else {
                    let b: u8 = rng.gen();
                    vec![b; n]
                };
                buf.splice(at..at, chunk);
            }
            11 if len >= 2 => {
                let n = rng.gen_range(1..=len / 2);
                let from = rng.gen_range(0..=len - n);
                let to = rng.gen_range(0..=len - n);
                let chunk = buf[from..from + n].to_vec();
                buf[to..to + n].copy_from_slice(&chunk);
            }
            _ => {
                let at = rng.gen_range(0..len.max(1));
                if let Some(b) = buf.get_mut(at) {
                    *b = rng.gen();
                }
            }
        }
    }
    buf.truncate(max_len);
    buf
}

pub struct ByteFuzz {
    params: Vec<ParamType>,
    mode: Mode,
    rng: ChaCha8Rng,
    max_len: usize,
    havoc_cycles: u32,
    queue: Vec<Vec<u8>>,
    det_done: Vec<bool>,
    cursor: usize,
    det: DetWalk,
    havoc_left: u32,
    virgin: VirginMap,
    pending: Vec<u8>,
}

impl ByteFuzz {
    pub fn new(
        params: Vec<ParamType>,
        mode: Mode,
        seed: u64,
        havoc_cycles: u32,
        max_len: usize,
    ) -> Self {
        let seed_input = minimal_input(&params);
        ByteFuzz {
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_len: max_len.max(1),
            havoc_cycles: havoc_cycles.max(1),
            queue: vec![seed_input],
            det_done: vec![mode == Mode::BlackBox],
            cursor: 0,
            det: DetWalk::default(),
            havoc_left: havoc_cycles.max(1),
            virgin: VirginMap::new(),
            pending: Vec::new(),
        }
    }

    pub fn queue(&self) -> &[Vec<u8>] {
        &self.queue
    }

    /// Next raw byte string, before decoding.
    pub fn next_bytes(&mut self) -> Vec<u8> {
        loop {
            let entry = &self.queue[self.cursor];
            if !self.det_done[self.cursor] {
                if let Some(c) = self.det.next(entry) {
                    return c;
                }
                self.det_done[self.cursor] = true;
            }
            if self.havoc_left > 0 {
                self.havoc_left -= 1;
                return havoc(entry, &mut self.rng, self.max_len);
            }
            self.cursor = (self.cursor + 1) % self.queue.len();
            self.det = DetWalk::default();
            self.havoc_left = self.havoc_cycles;
        }
    }
}

impl Generator for ByteFuzz {
    fn kind(&self) -> GeneratorKind {
        match self.mode {
            Mode::BlackBox => GeneratorKind::ByteFuzzBB,
            Mode::Evolutionary => GeneratorKind::ByteFuzzEvo,
        }
    }

    fn propose(&mut self) -> Proposal {
        let bytes = self.next_bytes();
        let values = decode(&bytes, &self.params);
        self.pending = bytes;
        Proposal {
            payload: encode_values(&values),
            decoded: Some(values),
        }
    }

    fn observe(&mut self, fb: Option<&ExecFeedback>) {
        if self.mode == Mode::BlackBox {
            return;
        }
        if let Some(fb) = fb {
            if new_bits_sparse(fb, &mut self.virgin) > 0 {
                self.queue.push(std::mem::take(&mut self.pending));
                self.det_done.push(false);
            }
        }
    }

    fn corpus_len(&self) -> usize {
        self.queue.len()
    }
}
