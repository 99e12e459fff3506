//! Input generators and the harness that carries their output to a target.

pub mod bytefuzz;
pub mod decode;
pub mod evofuzz;
pub mod harness;
pub mod randfuzz;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::coverage::ExecFeedback;
use crate::error::{Error, Result};
use crate::surface::{ApiDescriptor, Group};
use crate::wire::TypedValue;

pub use bytefuzz::ByteFuzz;
pub use evofuzz::EvoFuzz;
pub use harness::{Delivery, Exec, Harness, HarnessConfig};
pub use randfuzz::RandFuzz;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GeneratorKind {
    #[serde(rename = "randfuzz")]
    RandFuzz,
    #[serde(rename = "evofuzz-bb")]
    EvoFuzzBB,
    #[serde(rename = "evofuzz-evo")]
    EvoFuzzEvo,
    #[serde(rename = "bytefuzz-bb")]
    ByteFuzzBB,
    #[serde(rename = "bytefuzz-evo")]
    ByteFuzzEvo,
}

pub const ALL_KINDS: [GeneratorKind; 5] = [
    GeneratorKind::RandFuzz,
    GeneratorKind::EvoFuzzBB,
    GeneratorKind::EvoFuzzEvo,
    GeneratorKind::ByteFuzzBB,
    GeneratorKind::ByteFuzzEvo,
];

impl GeneratorKind {
    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::RandFuzz => "randfuzz",
            GeneratorKind::EvoFuzzBB => "evofuzz-bb",
            GeneratorKind::EvoFuzzEvo => "evofuzz-evo",
            GeneratorKind::ByteFuzzBB => "bytefuzz-bb",
            GeneratorKind::ByteFuzzEvo => "bytefuzz-evo",
        }
    }

    pub fn mode(self) -> Mode {
        match self {
            GeneratorKind::EvoFuzzEvo | GeneratorKind::ByteFuzzEvo => Mode::Evolutionary,
            _ => Mode::BlackBox,
        }
    }

    /// The byte fuzzer runs without a forkserver, so every input goes out
    /// through a newly started harness with its own request connection.
    pub fn fresh_harness_per_exec(self) -> bool {
        matches!(self, GeneratorKind::ByteFuzzBB | GeneratorKind::ByteFuzzEvo)
    }

    /// Whether the generator can drive `api`. The byte fuzzer's decoder
    /// only knows primitives; the others take any parameter list.
    pub fn supports(self, api: &ApiDescriptor) -> bool {
        match self {
            GeneratorKind::ByteFuzzBB | GeneratorKind::ByteFuzzEvo => {
                api.group == Group::Primitive
            }
            _ => true,
        }
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_KINDS
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::Other(format!(
                    "unknown generator kind `{s}` (expected one of {})",
                    ALL_KINDS.map(|k| k.name()).join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    BlackBox,
    Evolutionary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub kind: GeneratorKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_budget")]
    pub budget_s: f64,
    #[serde(default = "default_max_payload")]
    pub max_payload: usize,
    #[serde(default = "default_population")]
    pub population: usize,
    #[serde(default = "default_havoc")]
    pub havoc_cycles: u32,
}

fn default_budget() -> f64 {
    60.0
}
fn default_max_payload() -> usize {
    4096
}
fn default_population() -> usize {
    50
}
fn default_havoc() -> u32 {
    256
}

impl GeneratorConfig {
    pub fn new(kind: GeneratorKind, seed: u64) -> Self {
        GeneratorConfig {
            kind,
            seed,
            budget_s: default_budget(),
            max_payload: default_max_payload(),
            population: default_population(),
            havoc_cycles: default_havoc(),
        }
    }
}

/// One generated invocation: the parameter payload plus its typed form
/// when the generator knows it.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub payload: Vec<u8>,
    pub decoded: Option<Vec<TypedValue>>,
}

pub trait Generator: Send {
    fn kind(&self) -> GeneratorKind;
    fn propose(&mut self) -> Proposal;
    /// Feedback for the most recent proposal, if the target sent any.
    fn observe(&mut self, fb: Option<&ExecFeedback>);
    fn corpus_len(&self) -> usize;
}

pub fn build(cfg: &GeneratorConfig, api: &ApiDescriptor) -> Result<Box<dyn Generator>> {
    if !cfg.kind.supports(api) {
        return Err(Error::Config {
            path: "generator".into(),
            field: "kind".into(),
            reason: format!(
                "{} cannot encode parameters ({}) of {}",
                cfg.kind,
                api.signature(),
                api.api_ref()
            ),
        });
    }
    let params = api.params.clone();
    Ok(match cfg.kind {
        GeneratorKind::RandFuzz => Box::new(RandFuzz::new(cfg.seed, cfg.max_payload)),
        GeneratorKind::EvoFuzzBB | GeneratorKind::EvoFuzzEvo => Box::new(EvoFuzz::new(
            params,
            cfg.kind.mode(),
            cfg.seed,
            cfg.population,
        )),
        GeneratorKind::ByteFuzzBB | GeneratorKind::ByteFuzzEvo => Box::new(ByteFuzz::new(
            params,
            cfg.kind.mode(),
            cfg.seed,
            cfg.havoc_cycles,
            cfg.max_payload,
        )),
    })
}
