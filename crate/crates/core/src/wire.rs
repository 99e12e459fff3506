//! Binary RPC protocol spoken by the target.
//!
//! Every message travels in a frame: `u32` little-endian body length, then
//! the body. Frames larger than [`MAX_FRAME`] are rejected.
//!
//! Request body:
//!
//! ```text
//! u32 magic = 0x4D46555A
//! u16 service-name length, service-name bytes (UTF-8)
//! u32 txn_id
//! u32 principal_id
//! payload: one TLV per parameter, in order
//! ```
//!
//! All integers little-endian. A parameter TLV is a tag byte followed by the
//! value:
//!
//! | tag  | type      | value                                   |
//! |------|-----------|-----------------------------------------|
//! | 0x01 | Bool      | 1 byte, 0 or 1                          |
//! | 0x02 | I32       | 4 bytes                                 |
//! | 0x03 | I64       | 8 bytes                                 |
//! | 0x04 | F32       | 4 bytes (IEEE-754 bits)                 |
//! | 0x05 | F64       | 8 bytes (IEEE-754 bits)                 |
//! | 0x06 | Str       | u32 length + UTF-8 bytes                |
//! | 0x07 | Blob      | u32 length + bytes                      |
//! | 0x08 | Composite | u32 length + nested TLV sequence        |
//!
//! Bytes after the last expected parameter are ignored.
//!
//! Response body: a status byte and a status-specific payload.
//!
//! | status | meaning           | payload                                  |
//! |--------|-------------------|------------------------------------------|
//! | 0      | OK                | u32 length + bytes                       |
//! | 1      | PERMISSION_DENIED | u16 length + permission name             |
//! | 2      | EXCEPTION         | u16 length + class, u32 length + message |
//! | 3      | NO_SUCH_SERVICE   | empty                                    |
//! | 4      | NO_SUCH_TXN       | empty                                    |

use std::io::{self, Read, Write};

use serde_json::json;

use crate::error::{Error, Result};
use crate::surface::ParamType;

pub const MAGIC: u32 = 0x4D46_555A;
pub const MAX_FRAME: usize = 1 << 20;

pub const TAG_BOOL: u8 = 0x01;
pub const TAG_I32: u8 = 0x02;
pub const TAG_I64: u8 = 0x03;
pub const TAG_F32: u8 = 0x04;
pub const TAG_F64: u8 = 0x05;
pub const TAG_STR: u8 = 0x06;
pub const TAG_BLOB: u8 = 0x07;
pub const TAG_COMPOSITE: u8 = 0x08;

#[derive(Debug, Clone)]
pub enum TypedValue {
    Bool(bool),
    I32(i32),
    I64(i64),
    F32(f32),
    F64(f64),
    Str(String),
    Blob(Vec<u8>),
    Composite(Vec<TypedValue>),
}

// Floats compare by bit pattern so NaN payloads round-trip.
impl PartialEq for TypedValue {
    fn eq(&self, other: &Self) -> bool {
        use TypedValue::*;
        match (self, other) {
            (Bool(a), Bool(b)) => a == b,
            (I32(a), I32(b)) => a == b,
            (I64(a), I64(b)) => a == b,
            (F32(a), F32(b)) => a.to_bits() == b.to_bits(),
            (F64(a), F64(b)) => a.to_bits() == b.to_bits(),
            (Str(a), Str(b)) => a == b,
            (Blob(a), Blob(b)) => a == b,
            (Composite(a), Composite(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for TypedValue {}

impl TypedValue {
    pub fn tag(&self) -> u8 {
        match self {
            TypedValue::Bool(_) => TAG_BOOL,
            TypedValue::I32(_) => TAG_I32,
            TypedValue::I64(_) => TAG_I64,
            TypedValue::F32(_) => TAG_F32,
            TypedValue::F64(_) => TAG_F64,
            TypedValue::Str(_) => TAG_STR,
            TypedValue::Blob(_) => TAG_BLOB,
            TypedValue::Composite(_) => TAG_COMPOSITE,
        }
    }

    pub fn matches(&self, t: &ParamType) -> bool {
        match (self, t) {
            (TypedValue::Composite(vals), ParamType::Composite(types)) => {
                vals.len() == types.len() && vals.iter().zip(types).all(|(v, t)| v.matches(t))
            }
            (v, t) => tag_of(t) == v.tag(),
        }
    }

    /// Integer view used by fault triggers.
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            TypedValue::Bool(b) => Some(*b as i64),
            TypedValue::I32(v) => Some(*v as i64),
            TypedValue::I64(v) => Some(*v),
            _ => None,
        }
    }

    pub fn magnitude(&self) -> Option<f64> {
        match self {
            TypedValue::F32(v) => Some(v.abs() as f64),
            TypedValue::F64(v) => Some(v.abs()),
            other => other.as_i64().map(|v| (v as f64).abs()),
        }
    }

    /// Raw value bytes without tag: little-endian numbers, string UTF-8,
    /// blob bytes, composites as their nested TLV sequence.
    pub fn raw_bytes(&self) -> Vec<u8> {
        match self {
            TypedValue::Bool(b) => vec![*b as u8],
            TypedValue::I32(v) => v.to_le_bytes().to_vec(),
            TypedValue::I64(v) => v.to_le_bytes().to_vec(),
            TypedValue::F32(v) => v.to_bits().to_le_bytes().to_vec(),
            TypedValue::F64(v) => v.to_bits().to_le_bytes().to_vec(),
            TypedValue::Str(s) => s.as_bytes().to_vec(),
            TypedValue::Blob(b) => b.clone(),
            TypedValue::Composite(fields) => encode_values(fields),
        }
    }

    /// JSON rendering for input records. Non-finite floats become strings.
    pub fn to_json(&self) -> serde_json::Value {
        fn float(v: f64) -> serde_json::Value {
            if v.is_finite() {
                json!(v)
            } else {
                json!(v.to_string())
            }
        }
        match self {
            TypedValue::Bool(b) => json!({ "bool": b }),
            TypedValue::I32(v) => json!({ "i32": v }),
            TypedValue::I64(v) => json!({ "i64": v }),
            TypedValue::F32(v) => json!({ "f32": float(*v as f64) }),
            TypedValue::F64(v) => json!({ "f64": float(*v) }),
            TypedValue::Str(s) => json!({ "str": s }),
            TypedValue::Blob(b) => json!({ "blob": hex::encode(b) }),
            TypedValue::Composite(f) => {
                json!({ "composite": f.iter().map(TypedValue::to_json).collect::<Vec<_>>() })
            }
        }
    }
}

pub fn values_to_json(values: &[TypedValue]) -> serde_json::Value {
    serde_json::Value::Array(values.iter().map(TypedValue::to_json).collect())
}

pub fn tag_of(t: &ParamType) -> u8 {
    match t {
        ParamType::Bool => TAG_BOOL,
        ParamType::I32 => TAG_I32,
        ParamType::I64 => TAG_I64,
        ParamType::F32 => TAG_F32,
        ParamType::F64 => TAG_F64,
        ParamType::Str => TAG_STR,
        ParamType::Blob => TAG_BLOB,
        ParamType::Composite(_) => TAG_COMPOSITE,
    }
}

pub fn encode_value(out: &mut Vec<u8>, v: &TypedValue) {
    out.push(v.tag());
    match v {
        TypedValue::Str(_) | TypedValue::Blob(_) | TypedValue::Composite(_) => {
            let raw = v.raw_bytes();
            out.extend_from_slice(&(raw.len() as u32).to_le_bytes());
            out.extend_from_slice(&raw);
        }
        other => out.extend_from_slice(&other.raw_bytes()),
    }
}

pub fn encode_values(values: &[TypedValue]) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        encode_value(&mut out, v);
    }
    out
}

/// Why a payload failed to decode. Surfaces to callers as the
/// `BadParcel` exception.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParcelError {
    pub param: usize,
    pub reason: String,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u8(&mut self) -> Option<u8> {
        self.take(1).map(|b| b[0])
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos.min(self.buf.len())..]
    }
}

fn decode_one(c: &mut Cursor<'_>, t: &ParamType) -> std::result::Result<TypedValue, String> {
    let tag = c.u8().ok_or("truncated before tag")?;
    let want = tag_of(t);
    if tag != want {
        return Err(format!("expected tag {want:#04x} ({t}), found {tag:#04x}"));
    }
    let short = || format!("truncated {t}");
    Ok(match t {
        ParamType::Bool => match c.u8().ok_or_else(short)? {
            0 => TypedValue::Bool(false),
            1 => TypedValue::Bool(true),
            b => return Err(format!("bool byte {b:#04x}")),
        },
        ParamType::I32 => TypedValue::I32(c.u32().ok_or_else(short)? as i32),
        ParamType::I64 => TypedValue::I64(c.u64().ok_or_else(short)? as i64),
        ParamType::F32 => TypedValue::F32(f32::from_bits(c.u32().ok_or_else(short)?)),
        ParamType::F64 => TypedValue::F64(f64::from_bits(c.u64().ok_or_else(short)?)),
        ParamType::Str | ParamType::Blob | ParamType::Composite(_) => {
            let len = c.u32().ok_or_else(short)? as usize;
            let bytes = c.take(len).ok_or_else(short)?;
            match t {
                ParamType::Str => TypedValue::Str(
                    String::from_utf8(bytes.to_vec()).map_err(|_| "invalid UTF-8".to_string())?,
                ),
                ParamType::Blob => TypedValue::Blob(bytes.to_vec()),
                ParamType::Composite(fields) => {
                    let mut inner = Cursor { buf: bytes, pos: 0 };
                    let vals = fields
                        .iter()
                        .map(|f| decode_one(&mut inner, f))
                        .collect::<std::result::Result<Vec<_>, _>>()?;
                    TypedValue::Composite(vals)
                }
                _ => unreachable!(),
            }
        }
    })
}

/// Strict TLV decode against a parameter list. Trailing bytes are ignored.
pub fn decode_values(
    payload: &[u8],
    params: &[ParamType],
) -> std::result::Result<Vec<TypedValue>, ParcelError> {
    let mut c = Cursor {
        buf: payload,
        pos: 0,
    };
    params
        .iter()
        .enumerate()
        .map(|(i, t)| decode_one(&mut c, t).map_err(|reason| ParcelError { param: i, reason }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub service: String,
    pub txn_id: u32,
    pub principal: u32,
    pub payload: Vec<u8>,
}

impl Request {
    pub fn new(service: impl Into<String>, txn_id: u32, principal: u32, payload: Vec<u8>) -> Self {
        Request {
            service: service.into(),
            txn_id,
            principal,
            payload,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let name = self.service.as_bytes();
        let mut out = Vec::with_capacity(14 + name.len() + self.payload.len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&self.txn_id.to_le_bytes());
        out.extend_from_slice(&self.principal.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: body, pos: 0 };
        let bad = |what: &str| Error::Wire(format!("request: {what}"));
        let magic = c.u32().ok_or_else(|| bad("truncated magic"))?;
        if magic != MAGIC {
            return Err(bad(&format!("bad magic {magic:#010x}")));
        }
        let len = c.u16().ok_or_else(|| bad("truncated name length"))? as usize;
        let name = c.take(len).ok_or_else(|| bad("truncated service name"))?;
        let service =
            String::from_utf8(name.to_vec()).map_err(|_| bad("service name is not UTF-8"))?;
        let txn_id = c.u32().ok_or_else(|| bad("truncated txn_id"))?;
        let principal = c.u32().ok_or_else(|| bad("truncated principal"))?;
        Ok(Request {
            service,
            txn_id,
            principal,
            payload: c.rest().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Response {
    Ok(Vec<u8>),
    PermissionDenied(String),
    Exception { class: String, message: String },
    NoSuchService,
    NoSuchTxn,
}

impl Response {
    pub fn exception(class: impl Into<String>, message: impl Into<String>) -> Self {
        Response::Exception {
            class: class.into(),
            message: message.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Response::Ok(payload) => {
                out.push(0);
                out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                out.extend_from_slice(payload);
            }
            Response::PermissionDenied(name) => {
                out.push(1);
                out.extend_from_slice(&(name.len() as u16).to_le_bytes());
                out.extend_from_slice(name.as_bytes());
            }
            Response::Exception { class, message } => {
                out.push(2);
                out.extend_from_slice(&(class.len() as u16).to_le_bytes());
                out.extend_from_slice(class.as_bytes());
                out.extend_from_slice(&(message.len() as u32).to_le_bytes());
                out.extend_from_slice(message.as_bytes());
            }
            Response::NoSuchService => out.push(3),
            Response::NoSuchTxn => out.push(4),
        }
        out
    }

    pub fn decode(body: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf: body, pos: 0 };
        let bad = |what: &str| Error::Wire(format!("response: {what}"));
        let text = |b: &[u8]| String::from_utf8_lossy(b).into_owned();
        Ok(match c.u8().ok_or_else(|| bad("empty body"))? {
            0 => {
                let len = c.u32().ok_or_else(|| bad("truncated length"))? as usize;
                Response::Ok(c.take(len).ok_or_else(|| bad("truncated payload"))?.to_vec())
            }
            1 => {
                let len = c.u16().ok_or_else(|| bad("truncated length"))? as usize;
                Response::PermissionDenied(text(c.take(len).ok_or_else(|| bad("truncated name"))?))
            }
            2 => {
                let len = c.u16().ok_or_else(|| bad("truncated class length"))? as usize;
                let class = text(c.take(len).ok_or_else(|| bad("truncated class"))?);
                let len = c.u32().ok_or_else(|| bad("truncated message length"))? as usize;
                let message = text(c.take(len).ok_or_else(|| bad("truncated message"))?);
                Response::Exception { class, message }
            }
            3 => Response::NoSuchService,
            4 => Response::NoSuchTxn,
            s => return Err(bad(&format!("unknown status {s}"))),
        })
    }

    pub fn status_name(&self) -> &'static str {
        match self {
            Response::Ok(_) => "ok",
            Response::PermissionDenied(_) => "permission_denied",
            Response::Exception { .. } => "exception",
            Response::NoSuchService => "no_such_service",
            Response::NoSuchTxn => "no_such_txn",
        }
    }
}

pub fn write_frame(w: &mut impl Write, body: &[u8]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(4 + body.len());
    buf.extend_from_slice(&(body.len() as u32).to_le_bytes());
    buf.extend_from_slice(body);
    w.write_all(&buf)?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on clean end-of-stream before a header.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    let len = u32::from_le_bytes(header) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {len} bytes exceeds limit"),
        ));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    Ok(Some(body))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_layout_is_bit_exact() {
        let req = Request::new("ab", 7, 1000, vec![TAG_I32, 5, 0, 0, 0]);
        let bytes = req.encode();
        assert_eq!(
            bytes,
            vec![
                0x5A, 0x55, 0x46, 0x4D, // magic LE
                2, 0, b'a', b'b', // name
                7, 0, 0, 0, // txn
                0xE8, 0x03, 0, 0, // principal
                0x02, 5, 0, 0, 0 // i32 TLV
            ]
        );
        assert_eq!(Request::decode(&bytes).unwrap(), req);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = Request::new("a", 1, 0, vec![]).encode();
        bytes[0] ^= 1;
        assert!(Request::decode(&bytes).is_err());
    }

    #[test]
    fn tlv_decode_strict_on_tags_lenient_on_trailer() {
        let params = [ParamType::I32, ParamType::Str];
        let mut p = encode_values(&[TypedValue::I32(-3), TypedValue::Str("hi".into())]);
        p.extend_from_slice(b"junk");
        assert_eq!(
            decode_values(&p, &params).unwrap(),
            vec![TypedValue::I32(-3), TypedValue::Str("hi".into())]
        );
        let err = decode_values(&[TAG_I64, 0, 0, 0, 0, 0, 0, 0, 0], &[ParamType::I32]).unwrap_err();
        assert_eq!(err.param, 0);
        assert!(decode_values(&[TAG_STR, 255, 255, 255, 255], &[ParamType::Str]).is_err());
        assert!(decode_values(&[], &[ParamType::Bool]).is_err());
    }

    #[test]
    fn composite_nests_tlv() {
        let t = ParamType::Composite(vec![ParamType::I32, ParamType::Bool]);
        let v = TypedValue::Composite(vec![TypedValue::I32(1), TypedValue::Bool(true)]);
        let bytes = encode_values(std::slice::from_ref(&v));
        assert_eq!(bytes[0], TAG_COMPOSITE);
        assert_eq!(&bytes[1..5], &7u32.to_le_bytes());
        assert_eq!(decode_values(&bytes, &[t]).unwrap(), vec![v]);
    }

    #[test]
    fn responses_roundtrip() {
        for r in [
            Response::Ok(vec![1, 2, 3]),
            Response::PermissionDenied("perm.X".into()),
            Response::exception("BadParcel", "param 0"),
            Response::NoSuchService,
            Response::NoSuchTxn,
        ] {
            assert_eq!(Response::decode(&r.encode()).unwrap(), r);
        }
    }

    #[test]
    fn frames() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"hello").unwrap();
        write_frame(&mut buf, b"").unwrap();
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"hello");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }
}
