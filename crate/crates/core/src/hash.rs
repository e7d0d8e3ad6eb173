//! Content hashes for configs and model parameters.

use alloc::string::String;
use core::fmt::Write;
use serde::Serialize;
use sha2::{Digest, Sha256};

fn hex(bytes: &[u8], len: usize) -> String {
    let mut out = String::with_capacity(len * 2);
    for b in bytes.iter().take(len) {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// 16-hex-digit digest of the canonical JSON form of `value`.
pub fn json_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex(&Sha256::digest(&bytes), 8)
}

/// 16-hex-digit digest of the exact bit patterns of a parameter vector.
pub fn params_hash(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_bits().to_le_bytes());
    }
    hex(&h.finalize(), 8)
}
