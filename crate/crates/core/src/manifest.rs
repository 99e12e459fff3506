//! Service manifest: the single document that both builds the target
//! simulator and drives static surface mapping.
//!
//! Schema (JSON):
//!
//! ```text
//! {
//!   "build": "<build name>",
//!   "principals": [{"id": 0, "name": "untrusted_app", "permissions": []},
//!                  {"id": 1000, "name": "system", "all_permissions": true}],
//!   "services": [{
//!     "name": "window", "interface": "mfuz.server.wm.IWindowManager",
//!     "methods": [{
//!       "name": "setOverscan", "txn_id": 1,
//!       "params": ["i32", "str", {"composite": ["i32", "i32"]}],
//!       "block_count": 17,
//!       "behavior": {"kind": "echo"},
//!       "permissions": [{"name": "perm.X", "position": "entry"}],
//!       "fault": {"class": "freeze", "trigger": {"kind": "abs_ge", "param": 0, "threshold": 4096}, "repeat": 8}
//!     }]
//!   }]
//! }
//! ```
//!
//! `block_count` must equal the size of the method's block graph (see
//! [`crate::target::body::BlockLayout`]); the loader reports the expected
//! value when it does not.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::surface::ParamType;
use crate::target::body::BlockLayout;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub build: String,
    #[serde(default)]
    pub principals: Vec<PrincipalSpec>,
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrincipalSpec {
    pub id: u32,
    pub name: String,
    #[serde(default)]
    pub permissions: Vec<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub all_permissions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceSpec {
    pub name: String,
    pub interface: String,
    pub methods: Vec<MethodSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub name: String,
    pub txn_id: u32,
    pub params: Vec<ParamType>,
    pub block_count: u32,
    #[serde(default)]
    pub behavior: Behavior,
    #[serde(default)]
    pub permissions: Vec<PermissionCheck>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckPosition {
    /// Runs before argument decoding.
    Entry,
    /// Runs after argument validation, before the behavior blocks.
    Deep,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermissionCheck {
    pub name: String,
    pub position: CheckPosition,
}

/// What the method body does after its arguments are validated.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Behavior {
    /// Returns a digest of the arguments.
    #[default]
    Echo,
    /// Byte 0 of the first argument's raw bytes selects one of `arms` blocks.
    Branch { arms: u32 },
    /// One block per matched prefix byte of the first argument.
    Gate { prefix: Vec<u8> },
    /// Stores the argument digest under the first argument's key.
    Store,
    /// Looks up the first argument's key in the service store.
    Lookup,
    /// Clears the service store.
    Clear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultClass {
    UncaughtException,
    Freeze,
    ResourceExhaustion,
    ParseCrash,
    CollateralCrash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub class: FaultClass,
    pub trigger: Trigger,
    /// Freeze: consecutive triggering calls needed to wedge the dispatcher.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u32>,
    /// ResourceExhaustion: resource table size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<u32>,
    /// Chance that a triggering call actually fires. Anything below 1.0
    /// makes the fault nondeterministic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
}

pub const DEFAULT_FREEZE_REPEAT: u32 = 8;
pub const DEFAULT_RESOURCE_LIMIT: u32 = 1024;

impl FaultSpec {
    pub fn repeat(&self) -> u32 {
        self.repeat.unwrap_or(DEFAULT_FREEZE_REPEAT).max(1)
    }

    pub fn limit(&self) -> u32 {
        self.limit.unwrap_or(DEFAULT_RESOURCE_LIMIT).max(1)
    }

    pub fn is_deterministic(&self) -> bool {
        self.probability.is_none_or(|p| p >= 1.0)
    }
}

/// Deterministic predicate over decoded arguments.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trigger {
    Always,
    /// Integer argument `rem_euclid(modulus) == remainder`.
    IntMod {
        param: usize,
        modulus: i64,
        remainder: i64,
    },
    /// Numeric argument with magnitude at least `threshold`.
    AbsGe { param: usize, threshold: i64 },
    /// Integer argument outside the given set.
    NotIn { param: usize, values: Vec<i64> },
    /// Raw byte of the argument at `offset` equals `value`.
    ByteEq {
        param: usize,
        offset: usize,
        value: u8,
    },
}

impl Trigger {
    pub fn param(&self) -> Option<usize> {
        match self {
            Trigger::Always => None,
            Trigger::IntMod { param, .. }
            | Trigger::AbsGe { param, .. }
            | Trigger::NotIn { param, .. }
            | Trigger::ByteEq { param, .. } => Some(*param),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// The reference manifest shipped with the crate.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_MANIFEST).expect("shipped reference manifest is valid")
    }

    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.build.trim().is_empty() {
            errors.push("build name is empty".to_string());
        }
        let mut service_names = BTreeSet::new();
        for svc in &self.services {
            if !is_token(&svc.name) {
                errors.push(format!("service name `{}` is not a token", svc.name));
            }
            if !service_names.insert(svc.name.as_str()) {
                errors.push(format!("duplicate service `{}`", svc.name));
            }
            if svc.interface.is_empty()
                || !svc.interface.split('.').all(|part| is_token(part))
            {
                errors.push(format!(
                    "{}: interface `{}` is not a dotted name",
                    svc.name, svc.interface
                ));
            }
            let mut txns: BTreeMap<u32, Vec<&str>> = BTreeMap::new();
            let mut names = BTreeSet::new();
            for m in &svc.methods {
                let at = format!("{}.{}", svc.name, m.name);
                if !is_token(&m.name) {
                    errors.push(format!("{at}: method name is not a token"));
                }
                if m.txn_id == 0 {
                    errors.push(format!("{at}: txn_id must be >= 1"));
                }
                txns.entry(m.txn_id).or_default().push(m.name.as_str());
                if !names.insert((m.name.as_str(), m.params.len())) {
                    errors.push(format!(
                        "{at}: duplicate (method, arity) ({}, {})",
                        m.name,
                        m.params.len()
                    ));
                }
                if !m.params.iter().all(ParamType::check_depth) {
                    errors.push(format!("{at}: composites may nest only one level"));
                }
                self.validate_method(&at, m, &mut errors);
            }
            for (txn, methods) in txns {
                if methods.len() > 1 {
                    errors.push(format!(
                        "duplicate (service, txn_id): ({}, {}) used by {}",
                        svc.name,
                        txn,
                        methods.join(", ")
                    ));
                }
            }
        }
        let mut ids = BTreeSet::new();
        for p in &self.principals {
            if !ids.insert(p.id) {
                errors.push(format!("duplicate principal id {}", p.id));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    fn validate_method(&self, at: &str, m: &MethodSpec, errors: &mut Vec<String>) {
        let expected = BlockLayout::new(m).block_count();
        if m.block_count != expected {
            errors.push(format!(
                "{at}: block_count {} does not match block graph size {expected}",
                m.block_count
            ));
        }
        match &m.behavior {
            Behavior::Branch { arms } if *arms == 0 => {
                errors.push(format!("{at}: branch needs at least one arm"))
            }
            Behavior::Gate { prefix } if prefix.is_empty() => {
                errors.push(format!("{at}: gate prefix is empty"))
            }
            Behavior::Branch { .. } | Behavior::Gate { .. } | Behavior::Store | Behavior::Lookup
                if m.params.is_empty() =>
            {
                errors.push(format!("{at}: behavior needs at least one parameter"))
            }
            _ => {}
        }
        let mut seen = BTreeSet::new();
        for check in &m.permissions {
            if check.name.is_empty() {
                errors.push(format!("{at}: empty permission name"));
            }
            if !seen.insert(check.name.as_str()) {
                errors.push(format!("{at}: permission `{}` listed twice", check.name));
            }
        }
        if let Some(fault) = &m.fault {
            if let Some(idx) = fault.trigger.param() {
                match m.params.get(idx) {
                    None => errors.push(format!("{at}: trigger references missing param {idx}")),
                    Some(t) => {
                        let numeric_only = matches!(
                            fault.trigger,
                            Trigger::IntMod { .. } | Trigger::NotIn { .. }
                        );
                        let ok = match t {
                            ParamType::I32 | ParamType::I64 | ParamType::Bool => true,
                            ParamType::F32 | ParamType::F64 => {
                                !numeric_only || matches!(fault.trigger, Trigger::AbsGe { .. })
                            }
                            _ => matches!(fault.trigger, Trigger::ByteEq { .. }),
                        };
                        if !ok {
                            errors.push(format!(
                                "{at}: trigger does not apply to param type {t}"
                            ));
                        }
                    }
                }
            }
            if let Trigger::IntMod { modulus, .. } = fault.trigger {
                if modulus <= 0 {
                    errors.push(format!("{at}: modulus must be positive"));
                }
            }
            if let Some(p) = fault.probability {
                if !(0.0..=1.0).contains(&p) {
                    errors.push(format!("{at}: probability must lie in [0, 1]"));
                }
            }
        }
    }

    /// Stable identity of this build: build name plus a content hash.
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("manifest serializes");
        let digest = Sha256::digest(&canonical);
        format!("{}@{}", self.build, hex::encode(&digest[..8]))
    }

    pub fn method(&self, service: &str, txn_id: u32) -> Option<(&ServiceSpec, &MethodSpec)> {
        let svc = self.services.iter().find(|s| s.name == service)?;
        let m = svc.methods.iter().find(|m| m.txn_id == txn_id)?;
        Some((svc, m))
    }

    pub fn principal(&self, id: u32) -> Option<&PrincipalSpec> {
        self.principals.iter().find(|p| p.id == id)
    }

    /// Ground-truth permission map: `service.method` → all checked
    /// permissions, Entry and Deep.
    pub fn permission_ground_truth(&self) -> BTreeMap<String, BTreeSet<String>> {
        self.permission_entries(|_| true)
    }

    pub fn permission_entries(
        &self,
        keep: impl Fn(&PermissionCheck) -> bool,
    ) -> BTreeMap<String, BTreeSet<String>> {
        let mut out = BTreeMap::new();
        for svc in &self.services {
            for m in &svc.methods {
                let perms: BTreeSet<String> = m
                    .permissions
                    .iter()
                    .filter(|c| keep(c))
                    .map(|c| c.name.clone())
                    .collect();
                if !perms.is_empty() {
                    out.insert(format!("{}.{}", svc.name, m.name), perms);
                }
            }
        }
        out
    }

    pub fn api_count(&self) -> usize {
        self.services.iter().map(|s| s.methods.len()).sum()
    }
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

pub const REFERENCE_MANIFEST: &str = include_str!("../data/reference_manifest.json");
