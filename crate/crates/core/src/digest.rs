//! Content hashing for configs, checkpoints and reports.

use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Key-order independent JSON text: `serde_json::Value` objects are sorted maps.
pub fn canonical_json(value: &serde_json::Value) -> String {
    serde_json::to_string(value).expect("json values always serialise")
}

pub fn canonical_hash(value: &serde_json::Value) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_hash_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"b":1,"a":{"y":2,"x":[1,2]}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"a":{"x":[1,2],"y":2},"b":1}"#).unwrap();
        assert_eq!(canonical_hash(&a), canonical_hash(&b));
    }
}
