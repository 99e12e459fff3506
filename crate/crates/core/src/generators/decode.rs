//! Byte string to typed arguments, total by zero-extension.
//!
//! The input is read as if followed by infinitely many zero bytes:
//!
//! * `i32`/`i64`/`f32`/`f64`: fixed-width little-endian (floats by bit pattern)
//! * `bool`: next byte `& 1`
//! * `str`: next byte is the length L (0..=255), then L bytes, each mapped to
//!   one character: `b < 0xE0` gives printable ASCII `0x20 + b % 95`,
//!   `b >= 0xE0` gives `UTF8_TOKENS[(b - 0xE0) % UTF8_TOKENS.len()]`
//! * `blob`: length byte, then that many raw bytes
//! * composite: its fields in order

use crate::surface::ParamType;
use crate::wire::TypedValue;

/// Non-ASCII single characters reachable from string bytes `>= 0xE0`.
pub const UTF8_TOKENS: [char; 8] = [
    'é', 'ß', 'ж', '中', '\u{202E}', '\u{FEFF}', '😀', '\u{FFFD}',
];

const TOKEN_BASE: u8 = 0xE0;

pub fn string_char(b: u8) -> char {
    if b < TOKEN_BASE {
        (0x20 + b % 95) as char
    } else {
        UTF8_TOKENS[(b - TOKEN_BASE) as usize % UTF8_TOKENS.len()]
    }
}

/// Inverse of [`string_char`] for characters of the charset.
pub fn char_byte(c: char) -> Option<u8> {
    match c as u32 {
        0x20..=0x7E => Some(c as u8 - 0x20),
        _ => UTF8_TOKENS
            .iter()
            .position(|t| *t == c)
            .map(|i| TOKEN_BASE + i as u8),
    }
}

struct ZeroExt<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ZeroExt<'_> {
    fn byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn array<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        for b in &mut out {
            *b = self.byte();
        }
        out
    }
}

fn decode_one(r: &mut ZeroExt<'_>, t: &ParamType) -> TypedValue {
    match t {
        ParamType::Bool => TypedValue::Bool(r.byte() & 1 == 1),
        ParamType::I32 => TypedValue::I32(i32::from_le_bytes(r.array())),
        ParamType::I64 => TypedValue::I64(i64::from_le_bytes(r.array())),
        ParamType::F32 => TypedValue::F32(f32::from_bits(u32::from_le_bytes(r.array()))),
        ParamType::F64 => TypedValue::F64(f64::from_bits(u64::from_le_bytes(r.array()))),
        ParamType::Str => {
            let len = r.byte();
            TypedValue::Str((0..len).map(|_| string_char(r.byte())).collect())
        }
        ParamType::Blob => {
            let len = r.byte();
            TypedValue::Blob((0..len).map(|_| r.byte()).collect())
        }
        ParamType::Composite(fields) => {
            TypedValue::Composite(fields.iter().map(|f| decode_one(r, f)).collect())
        }
    }
}

pub fn decode(bytes: &[u8], params: &[ParamType]) -> Vec<TypedValue> {
    let mut r = ZeroExt { bytes, pos: 0 };
    params.iter().map(|t| decode_one(&mut r, t)).collect()
}

fn encode_one(v: &TypedValue, out: &mut Vec<u8>) {
    match v {
        TypedValue::Bool(b) => out.push(*b as u8),
        TypedValue::I32(x) => out.extend(x.to_le_bytes()),
        TypedValue::I64(x) => out.extend(x.to_le_bytes()),
        TypedValue::F32(x) => out.extend(x.to_bits().to_le_bytes()),
        TypedValue::F64(x) => out.extend(x.to_bits().to_le_bytes()),
        TypedValue::Str(s) => {
            let bytes: Vec<u8> = s
                .chars()
                .filter_map(char_byte)
                .take(255)
                .collect();
            out.push(bytes.len() as u8);
            out.extend(bytes);
        }
        TypedValue::Blob(b) => {
            let n = b.len().min(255);
            out.push(n as u8);
            out.extend(&b[..n]);
        }
        TypedValue::Composite(fields) => fields.iter().for_each(|f| encode_one(f, out)),
    }
}

/// Byte string that decodes back to `values` when they lie in the decoder's
/// range (charset strings, blobs and strings of at most 255 units).
pub fn encode(values: &[TypedValue]) -> Vec<u8> {
    let mut out = Vec::new();
    values.iter().for_each(|v| encode_one(v, &mut out));
    out
}

/// Shortest input: every parameter decoded from zero bytes.
pub fn minimal_input(params: &[ParamType]) -> Vec<u8> {
    encode(&decode(&[], params))
}
