//! Attack-surface mapping.
//!
//! A [`Surface`] lists every API a target registers, each carrying both its
//! high-level identity (service, interface, method, parameter types) and its
//! low-level transaction ID. Two independent routes build one:
//! [`map_static`] parses the service manifest, [`map_dynamic`] queries a
//! running target's service-manager meta-service.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::client::TargetClient;
use crate::error::{Error, Result};
use crate::manifest::Manifest;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamType {
    Bool,
    I32,
    I64,
    F32,
    F64,
    Str,
    Blob,
    /// Flat composite: fields may not themselves be composites.
    Composite(Vec<ParamType>),
}

impl ParamType {
    pub fn is_primitive(&self) -> bool {
        !matches!(self, ParamType::Blob | ParamType::Composite(_))
    }

    pub fn name(&self) -> String {
        match self {
            ParamType::Bool => "bool".into(),
            ParamType::I32 => "i32".into(),
            ParamType::I64 => "i64".into(),
            ParamType::F32 => "f32".into(),
            ParamType::F64 => "f64".into(),
            ParamType::Str => "str".into(),
            ParamType::Blob => "blob".into(),
            ParamType::Composite(fields) => {
                let inner: Vec<_> = fields.iter().map(ParamType::name).collect();
                format!("composite({})", inner.join(","))
            }
        }
    }

    fn from_simple(s: &str) -> Option<Self> {
        Some(match s {
            "bool" => ParamType::Bool,
            "i32" => ParamType::I32,
            "i64" => ParamType::I64,
            "f32" => ParamType::F32,
            "f64" => ParamType::F64,
            "str" => ParamType::Str,
            "blob" => ParamType::Blob,
            _ => return None,
        })
    }

    /// Composite fields must be non-composite.
    pub fn check_depth(&self) -> bool {
        match self {
            ParamType::Composite(fields) => fields
                .iter()
                .all(|f| !matches!(f, ParamType::Composite(_))),
            _ => true,
        }
    }
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParamRepr {
    Simple(String),
    Composite { composite: Vec<ParamRepr> },
}

impl ParamRepr {
    fn into_type(self) -> std::result::Result<ParamType, String> {
        match self {
            ParamRepr::Simple(s) => {
                ParamType::from_simple(&s).ok_or_else(|| format!("unknown param type `{s}`"))
            }
            ParamRepr::Composite { composite } => Ok(ParamType::Composite(
                composite
                    .into_iter()
                    .map(ParamRepr::into_type)
                    .collect::<std::result::Result<_, _>>()?,
            )),
        }
    }

    fn from_type(t: &ParamType) -> Self {
        match t {
            ParamType::Composite(fields) => ParamRepr::Composite {
                composite: fields.iter().map(ParamRepr::from_type).collect(),
            },
            other => ParamRepr::Simple(other.name()),
        }
    }
}

impl Serialize for ParamType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        ParamRepr::from_type(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for ParamType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ParamRepr::deserialize(d)?
            .into_type()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Primitive,
    Complex,
}

impl Group {
    /// Zero-parameter APIs are classified `Complex` here but belong to
    /// neither fuzz group; see [`partition`].
    pub fn of(params: &[ParamType]) -> Group {
        if !params.is_empty() && params.iter().all(ParamType::is_primitive) {
            Group::Primitive
        } else {
            Group::Complex
        }
    }
}

/// Low-level address of one API: service name plus transaction ID.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ApiRef {
    pub service: String,
    pub txn_id: u32,
}

impl ApiRef {
    pub fn new(service: impl Into<String>, txn_id: u32) -> Self {
        ApiRef {
            service: service.into(),
            txn_id,
        }
    }
}

impl fmt::Display for ApiRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.service, self.txn_id)
    }
}

impl std::str::FromStr for ApiRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (service, txn) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::Other(format!("expected service:txn, got `{s}`")))?;
        let txn_id = txn
            .parse()
            .map_err(|_| Error::Other(format!("bad transaction id in `{s}`")))?;
        Ok(ApiRef::new(service, txn_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ApiDescriptor {
    pub service_name: String,
    pub interface_name: String,
    pub method_name: String,
    pub txn_id: u32,
    pub params: Vec<ParamType>,
    pub block_count: u32,
    pub group: Group,
}

impl ApiDescriptor {
    pub fn api_ref(&self) -> ApiRef {
        ApiRef::new(self.service_name.clone(), self.txn_id)
    }

    /// `service.method` key used by permission maps.
    pub fn method_key(&self) -> String {
        format!("{}.{}", self.service_name, self.method_name)
    }

    pub fn signature(&self) -> String {
        let params: Vec<_> = self.params.iter().map(ParamType::name).collect();
        format!(
            "{}.{}({})",
            self.interface_name,
            self.method_name,
            params.join(",")
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Surface {
    pub target_fingerprint: String,
    pub apis: Vec<ApiDescriptor>,
    /// Milliseconds since the Unix epoch.
    pub captured_at: u64,
}

impl Surface {
    pub fn new(target_fingerprint: String, mut apis: Vec<ApiDescriptor>) -> Result<Self> {
        apis.sort_by(|a, b| {
            (&a.service_name, a.txn_id).cmp(&(&b.service_name, b.txn_id))
        });
        let surface = Surface {
            target_fingerprint,
            apis,
            captured_at: now_ms(),
        };
        surface.validate()?;
        Ok(surface)
    }

    /// Checks both uniqueness keys.
    pub fn validate(&self) -> Result<()> {
        let mut by_txn = BTreeSet::new();
        let mut by_name = BTreeSet::new();
        let mut errors = Vec::new();
        for api in &self.apis {
            if api.txn_id == 0 {
                errors.push(format!("{}: txn_id must be >= 1", api.method_key()));
            }
            if !by_txn.insert((api.service_name.as_str(), api.txn_id)) {
                errors.push(format!(
                    "duplicate (service, txn_id): ({}, {})",
                    api.service_name, api.txn_id
                ));
            }
            if !by_name.insert((
                api.service_name.as_str(),
                api.method_name.as_str(),
                api.params.len(),
            )) {
                errors.push(format!(
                    "duplicate (service, method, arity): ({}, {}, {})",
                    api.service_name,
                    api.method_name,
                    api.params.len()
                ));
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errors))
        }
    }

    pub fn find(&self, api: &ApiRef) -> Option<&ApiDescriptor> {
        self.apis
            .iter()
            .find(|d| d.service_name == api.service && d.txn_id == api.txn_id)
    }

    /// Set view ignoring `captured_at`.
    pub fn api_set(&self) -> BTreeSet<&ApiDescriptor> {
        self.apis.iter().collect()
    }

    pub fn same_apis(&self, other: &Surface) -> bool {
        self.target_fingerprint == other.target_fingerprint && self.api_set() == other.api_set()
    }

    /// Pretty JSON with stable key order.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn services(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for api in &self.apis {
            *out.entry(api.service_name.as_str()).or_default() += 1;
        }
        out
    }
}

pub(crate) fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Builds a surface by parsing a service manifest.
pub fn map_static(manifest_path: &Path) -> Result<Surface> {
    let manifest = Manifest::load(manifest_path)?;
    Ok(surface_of(&manifest))
}

/// Surface of an already-validated manifest.
pub fn surface_of(manifest: &Manifest) -> Surface {
    let apis = manifest
        .services
        .iter()
        .flat_map(|svc| {
            svc.methods.iter().map(move |m| ApiDescriptor {
                service_name: svc.name.clone(),
                interface_name: svc.interface.clone(),
                method_name: m.name.clone(),
                txn_id: m.txn_id,
                params: m.params.clone(),
                block_count: m.block_count,
                group: Group::of(&m.params),
            })
        })
        .collect();
    // The manifest was validated on load, so uniqueness holds.
    Surface::new(manifest.fingerprint(), apis).expect("validated manifest yields a valid surface")
}

/// Reply of the service manager's `describe` call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServiceDescription {
    pub name: String,
    pub interface: String,
    pub methods: Vec<MethodDescription>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodDescription {
    pub name: String,
    #[serde(default)]
    pub txn_id: Option<u32>,
    pub params: Vec<ParamType>,
    pub block_count: u32,
}

/// Builds a surface by querying a running target: list services, then
/// describe each one.
pub fn map_dynamic(endpoint: &str) -> Result<Surface> {
    let mut client = TargetClient::connect(endpoint)?;
    let fingerprint = client.fingerprint()?;
    let names = client.list_services()?;
    let mut apis = Vec::new();
    for name in names {
        let desc = client.describe_service(&name)?;
        for m in desc.methods {
            let txn_id = match m.txn_id {
                Some(id) if id >= 1 => id,
                _ => {
                    return Err(Error::Protocol {
                        service: name.clone(),
                        reason: format!("method `{}` has no valid txn_id", m.name),
                    })
                }
            };
            if m.block_count == 0 {
                return Err(Error::Protocol {
                    service: name.clone(),
                    reason: format!("method `{}` reports block_count 0", m.name),
                });
            }
            apis.push(ApiDescriptor {
                service_name: desc.name.clone(),
                interface_name: desc.interface.clone(),
                method_name: m.name,
                txn_id,
                group: Group::of(&m.params),
                params: m.params,
                block_count: m.block_count,
            });
        }
    }
    Surface::new(fingerprint, apis)
}

/// Splits the surface into the primitive and complex fuzz groups.
/// Zero-parameter APIs land in neither.
pub fn partition(surface: &Surface) -> (Vec<ApiDescriptor>, Vec<ApiDescriptor>) {
    let mut primitive = Vec::new();
    let mut complex = Vec::new();
    for api in surface.apis.iter().filter(|a| !a.params.is_empty()) {
        match api.group {
            Group::Primitive => primitive.push(api.clone()),
            Group::Complex => complex.push(api.clone()),
        }
    }
    (primitive, complex)
}
