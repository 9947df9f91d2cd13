use serde::Serialize;
use sha2::{Digest, Sha256};

/// Compact JSON with lexicographically sorted object keys.
///
/// `serde_json::Value` keeps objects in a `BTreeMap` (the `preserve_order`
/// feature is off), so a round-trip through `Value` sorts every level. Floats
/// are written in their shortest round-trip form.
pub(crate) fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub(crate) fn hash_canonical<T: Serialize>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(canonical_json(value)?.as_bytes()))
}
