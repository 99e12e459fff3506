//! Typed generator with black-box and evolutionary modes.
//!
//! BB draws fresh values per parameter type. Evo keeps a population of
//! inputs that set virgin bits, tournament-selects a parent and applies
//! one to four type-aware mutations. The mutation operators are a
//! reconstruction, not a copy of any existing tool's operator set.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Generator, GeneratorKind, Mode, Proposal};
use crate::coverage::{bucket, new_bits_sparse, ExecFeedback, VirginMap};
use crate::surface::ParamType;
use crate::wire::{encode_values, TypedValue};

/// Share of integer and float draws taken from the boundary sets.
pub const BOUNDARY_WEIGHT: f64 = 0.2;
pub const MAX_STRING: usize = 256;
pub const MAX_BLOB: usize = 256;
const TOURNAMENT: usize = 3;

pub const INT32_BOUNDARY: [i32; 5] = [0, 1, -1, i32::MIN, i32::MAX];
pub const INT64_BOUNDARY: [i64; 5] = [0, 1, -1, i64::MIN, i64::MAX];
const F64_BOUNDARY: [f64; 7] = [
    0.0,
    1.0,
    -1.0,
    f64::MIN,
    f64::MAX,
    f64::INFINITY,
    f64::NAN,
];

pub const FORMAT_TOKENS: [&str; 9] = ["%s", "%n", "%x", "%p", "%d", "{0}", "${x}", "../", "%%"];
const UTF8_SAMPLES: [&str; 6] = ["é", "ß", "ж", "中文", "\u{202E}", "😀"];

pub fn gen_value(t: &ParamType, rng: &mut impl Rng) -> TypedValue {
    let boundary = rng.gen_bool(BOUNDARY_WEIGHT);
    match t {
        ParamType::Bool => TypedValue::Bool(rng.gen()),
        ParamType::I32 if boundary => TypedValue::I32(*INT32_BOUNDARY.choose(rng).unwrap()),
        ParamType::I32 => TypedValue::I32(rng.gen()),
        ParamType::I64 if boundary => TypedValue::I64(*INT64_BOUNDARY.choose(rng).unwrap()),
        ParamType::I64 => TypedValue::I64(rng.gen()),
        ParamType::F32 if boundary => TypedValue::F32(*F64_BOUNDARY.choose(rng).unwrap() as f32),
        ParamType::F32 => TypedValue::F32(f32::from_bits(rng.gen())),
        ParamType::F64 if boundary => TypedValue::F64(*F64_BOUNDARY.choose(rng).unwrap()),
        ParamType::F64 => TypedValue::F64(f64::from_bits(rng.gen())),
        ParamType::Str => TypedValue::Str(gen_string(rng)),
        ParamType::Blob => {
            let len = rng.gen_range(0..=MAX_BLOB);
            TypedValue::Blob((0..len).map(|_| rng.gen()).collect())
        }
        ParamType::Composite(fields) => {
            TypedValue::Composite(fields.iter().map(|f| gen_value(f, rng)).collect())
        }
    }
}

fn gen_string(rng: &mut impl Rng) -> String {
    let target = rng.gen_range(0..=MAX_STRING);
    let mut s = String::new();
    let style = rng.gen_range(0..4);
    while s.chars().count() < target {
        match style {
            0 | 1 => s.push(rng.gen_range(0x20u8..0x7F) as char),
            2 => s.push_str(UTF8_SAMPLES.choose(rng).unwrap()),
            _ => s.push_str(FORMAT_TOKENS.choose(rng).unwrap()),
        }
    }
    s.chars().take(MAX_STRING).collect()
}

fn mutate_value(v: &mut TypedValue, donor: Option<&TypedValue>, rng: &mut impl Rng) {
    match v {
        TypedValue::Bool(b) => *b = !*b,
        TypedValue::I32(x) => match rng.gen_range(0..3) {
            0 => *x = x.wrapping_add(rng.gen_range(-35..=35)),
            1 => *x = *INT32_BOUNDARY.choose(rng).unwrap(),
            _ => *x ^= 1 << rng.gen_range(0..32),
        },
        TypedValue::I64(x) => match rng.gen_range(0..3) {
            0 => *x = x.wrapping_add(rng.gen_range(-35..=35)),
            1 => *x = *INT64_BOUNDARY.choose(rng).unwrap(),
            _ => *x ^= 1 << rng.gen_range(0..64),
        },
        TypedValue::F32(x) => match rng.gen_range(0..3) {
            0 => *x = -*x,
            1 => *x *= rng.gen_range(-4.0..4.0),
            _ => *x = *F64_BOUNDARY.choose(rng).unwrap() as f32,
        },
        TypedValue::F64(x) => match rng.gen_range(0..3) {
            0 => *x = -*x,
            1 => *x *= rng.gen_range(-4.0..4.0),
            _ => *x = *F64_BOUNDARY.choose(rng).unwrap(),
        },
        TypedValue::Str(s) => {
            let mut chars: Vec<char> = s.chars().collect();
            match rng.gen_range(0..4) {
                0 => {
                    let at = rng.gen_range(0..=chars.len());
                    let c = if rng.gen_bool(0.8) {
                        rng.gen_range(0x20u8..0x7F) as char
                    } else {
                        UTF8_SAMPLES.choose(rng).unwrap().chars().next().unwrap()
                    };
                    chars.insert(at, c);
                }
                1 if !chars.is_empty() => {
                    let at = rng.gen_range(0..chars.len());
                    chars.remove(at);
                }
                2 if !chars.is_empty() => {
                    let a = rng.gen_range(0..chars.len());
                    let b = rng.gen_range(a..=chars.len());
                    let dup: Vec<char> = chars[a..b].to_vec();
                    let at = rng.gen_range(0..=chars.len());
                    chars.splice(at..at, dup);
                }
                _ => {
                    // Splice: prefix of ours, suffix of the donor's.
                    if let Some(TypedValue::Str(other)) = donor {
                        let o: Vec<char> = other.chars().collect();
                        let cut = rng.gen_range(0..=chars.len());
                        let from = rng.gen_range(0..=o.len());
                        chars.truncate(cut);
                        chars.extend_from_slice(&o[from..]);
                    } else {
                        chars.extend(FORMAT_TOKENS.choose(rng).unwrap().chars());
                    }
                }
            }
            chars.truncate(MAX_STRING);
            *s = chars.into_iter().collect();
        }
        TypedValue::Blob(b) => match rng.gen_range(0..3) {
            0 if !b.is_empty() => {
                let i = rng.gen_range(0..b.len() * 8);
                b[i / 8] ^= 128 >> (i % 8);
            }
            1 if b.len() < MAX_BLOB => {
                let at = rng.gen_range(0..=b.len());
                b.insert(at, rng.gen());
            }
            2 if !b.is_empty() => {
                let at = rng.gen_range(0..b.len());
                b.remove(at);
            }
            _ => b.push(rng.gen()),
        },
        TypedValue::Composite(fields) => {
            if !fields.is_empty() {
                let i = rng.gen_range(0..fields.len());
                let d = match donor {
                    Some(TypedValue::Composite(df)) => df.get(i),
                    _ => None,
                };
                mutate_value(&mut fields[i], d, rng);
            }
        }
    }
}

/// Applies one to four mutations, each to a random parameter.
pub fn mutate(values: &mut [TypedValue], donor: Option<&[TypedValue]>, rng: &mut impl Rng) {
    if values.is_empty() {
        return;
    }
    for _ in 0..rng.gen_range(1..=4) {
        let i = rng.gen_range(0..values.len());
        let d = donor.and_then(|d| d.get(i));
        mutate_value(&mut values[i], d, rng);
    }
}

#[derive(Debug, Clone)]
pub struct Member {
    pub values: Vec<TypedValue>,
    pub fitness: u32,
    pub size: usize,
    pub order: u64,
    /// Bucketed edges of the admitting execution.
    pub signature: Vec<(u32, u8)>,
}

pub struct EvoFuzz {
    params: Vec<ParamType>,
    mode: Mode,
    rng: ChaCha8Rng,
    cap: usize,
    population: Vec<Member>,
    virgin: VirginMap,
    pending: Vec<TypedValue>,
    admitted: u64,
}

impl EvoFuzz {
    pub fn new(params: Vec<ParamType>, mode: Mode, seed: u64, population: usize) -> Self {
        EvoFuzz {
            params,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cap: population.max(1),
            population: Vec::new(),
            virgin: VirginMap::new(),
            pending: Vec::new(),
            admitted: 0,
        }
    }

    pub fn population(&self) -> &[Member] {
        &self.population
    }

    fn tournament(&mut self) -> usize {
        let mut best = self.rng.gen_range(0..self.population.len());
        for _ in 1..TOURNAMENT {
            let c = self.rng.gen_range(0..self.population.len());
            if better(&self.population[c], &self.population[best]) {
                best = c;
            }
        }
        best
    }

    /// Drops the worst member whose coverage is shared by someone else.
    /// Members holding a unique edge bucket are never evicted.
    fn evict(&mut self) {
        let mut counts: HashMap<(u32, u8), u32> = HashMap::new();
        for m in &self.population {
            for e in &m.signature {
                *counts.entry(*e).or_default() += 1;
            }
        }
        let victim = self
            .population
            .iter()
            .enumerate()
            .filter(|(_, m)| m.signature.iter().all(|e| counts[e] > 1))
            .min_by(|(_, a), (_, b)| {
                if better(a, b) {
                    std::cmp::Ordering::Greater
                } else {
                    std::cmp::Ordering::Less
                }
            })
            .map(|(i, _)| i);
        if let Some(i) = victim {
            self.population.remove(i);
        }
    }
}

/// Higher fitness wins, then shorter encoding, then earlier discovery.
fn better(a: &Member, b: &Member) -> bool {
    (a.fitness, std::cmp::Reverse(a.size), std::cmp::Reverse(a.order))
        > (b.fitness, std::cmp::Reverse(b.size), std::cmp::Reverse(b.order))
}

impl Generator for EvoFuzz {
    fn kind(&self) -> GeneratorKind {
        match self.mode {
            Mode::BlackBox => GeneratorKind::EvoFuzzBB,
            Mode::Evolutionary => GeneratorKind::EvoFuzzEvo,
        }
    }

    fn propose(&mut self) -> Proposal {
        let values = if self.mode == Mode::BlackBox || self.population.is_empty() {
            self.params.iter().map(|t| gen_value(t, &mut self.rng)).collect()
        } else {
            let p = self.tournament();
            let mut child = self.population[p].values.clone();
            let d = self.rng.gen_range(0..self.population.len());
            let donor = self.population[d].values.clone();
            mutate(&mut child, Some(&donor), &mut self.rng);
            child
        };
        self.pending = values.clone();
        Proposal {
            payload: encode_values(&values),
            decoded: Some(values),
        }
    }

    fn observe(&mut self, fb: Option<&ExecFeedback>) {
        if self.mode == Mode::BlackBox {
            return;
        }
        let Some(fb) = fb else { return };
        let fresh = new_bits_sparse(fb, &mut self.virgin);
        if fresh == 0 {
            return;
        }
        self.admitted += 1;
        let values = std::mem::take(&mut self.pending);
        self.population.push(Member {
            size: encode_values(&values).len(),
            values,
            fitness: fresh,
            order: self.admitted,
            signature: fb.edges.iter().map(|(i, c)| (*i, bucket(*c))).collect(),
        });
        while self.population.len() > self.cap {
            let before = self.population.len();
            self.evict();
            if self.population.len() == before {
                break;
            }
        }
    }

    fn corpus_len(&self) -> usize {
        self.population.len()
    }
}
