//! Canonical JSON and content hashing.
//!
//! Canonical form: UTF-8 JSON, no insignificant whitespace, object keys in
//! lexicographic byte order at every depth. Hashes are SHA-256 over that form.

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::template::{unresolved_placeholders, TemplateError};
use crate::types::{ImagePayload, Role, SamplingParams};

/// Serializes `value` to canonical JSON.
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    let mut out = String::new();
    write_value(&v, &mut out);
    Ok(out)
}

fn write_value(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                // a bare string always serializes
                out.push_str(&serde_json::to_string(k).expect("string key"));
                out.push(':');
                write_value(&map[k], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_value(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a sequence of byte strings, each length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` differ.
pub fn hash_parts(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// A 64-bit seed derived from `(master, parts...)`.
pub fn derive_seed(master: u64, parts: &[&[u8]]) -> u64 {
    let m = master.to_le_bytes();
    let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 1);
    all.push(&m);
    all.extend_from_slice(parts);
    let d = hash_parts(&all);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Serialize)]
struct HashedRequest<'a> {
    role: Role,
    prompt: &'a str,
    images: Vec<HashedImage<'a>>,
    sampling: &'a SamplingParams,
}

#[derive(Serialize)]
struct HashedImage<'a> {
    media_type: &'a str,
    sha256: String,
}

/// Cache/replay key of a model request: SHA-256 hex over the canonical JSON
/// of role, prompt, per-image digests and sampling parameters.
pub fn canonical_hash(
    role: Role,
    prompt: &str,
    images: &[ImagePayload],
    sampling: &SamplingParams,
) -> Result<String, TemplateError> {
    if let Some(name) = unresolved_placeholders(prompt).into_iter().next() {
        return Err(TemplateError::Unresolved(name));
    }
    let req = HashedRequest {
        role,
        prompt,
        images: images
            .iter()
            .map(|img| HashedImage {
                media_type: &img.media_type,
                sha256: sha256_hex(&img.bytes),
            })
            .collect(),
        sampling,
    };
    let json = to_canonical_json(&req).expect("request is plain data");
    Ok(sha256_hex(json.as_bytes()))
}

/// Hex digest of canonical JSON of `value`.
pub fn content_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(to_canonical_json(value).expect("plain data").as_bytes())
}

/// Short form for directory names and report headers.
pub fn short_hash(hex_digest: &str) -> &str {
    &hex_digest[..hex_digest.len().min(16)]
}
