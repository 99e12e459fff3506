//! Black-box random payloads, sent raw in the parameter region.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Generator, GeneratorKind, Proposal};
use crate::coverage::ExecFeedback;

/// Uniform length in `[0, max_payload]`, uniform bytes.
pub fn randfuzz_next(rng: &mut impl RngCore, max_payload: usize) -> Vec<u8> {
    let len = rng.gen_range(0..=max_payload);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

pub struct RandFuzz {
    rng: ChaCha8Rng,
    max_payload: usize,
}

impl RandFuzz {
    pub fn new(seed: u64, max_payload: usize) -> Self {
        RandFuzz {
            rng: ChaCha8Rng::seed_from_u64(seed),
            max_payload,
        }
    }
}

impl Generator for RandFuzz {
    fn kind(&self) -> GeneratorKind {
        GeneratorKind::RandFuzz
    }

    fn propose(&mut self) -> Proposal {
        Proposal {
            payload: randfuzz_next(&mut self.rng, self.max_payload),
            decoded: None,
        }
    }

    fn observe(&mut self, _fb: Option<&ExecFeedback>) {}

    fn corpus_len(&self) -> usize {
        0
    }
}
