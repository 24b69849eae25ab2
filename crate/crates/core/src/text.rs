//! Token handling shared by retrieval, diffing, and refinement.
//!
//! Tokens are lowercase runs of alphanumerics, `_` and `:`. The `:` is kept so
//! that query tags such as `needs:search` survive as single tokens.

use std::collections::{BTreeMap, BTreeSet};

use sha2::{Digest, Sha256};

/// Splits `text` into lowercase tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == ':'))
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

pub fn token_set(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().collect()
}

/// 64-bit FNV-1a. Stable across platforms and releases, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0100_0000_01b3);
    }
    hash
}

/// Multiset of hashed tokens.
pub fn hashed_bag(text: &str) -> BTreeMap<u64, f64> {
    let mut bag = BTreeMap::new();
    for tok in tokenize(text) {
        *bag.entry(fnv1a(tok.as_bytes())).or_insert(0.0) += 1.0;
    }
    bag
}

/// Cosine similarity between two hashed token multisets. Zero if either is empty.
pub fn bag_cosine(a: &BTreeMap<u64, f64>, b: &BTreeMap<u64, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(k, va)| b.get(k).map(|vb| va * vb))
        .sum();
    if dot == 0.0 {
        return 0.0;
    }
    let na: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Jaccard index of two sets; two empty sets are defined to have index 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Derives a 64-bit seed from labelled parts. Used to split independent RNG
/// streams off a master seed.
pub fn derive_seed(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for p in parts {
        hasher.update((p.len() as u64).to_le_bytes());
        hasher.update(p.as_bytes());
    }
    let digest = hasher.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(buf)
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_keeps_tags_and_underscores() {
        assert_eq!(
            tokenize("Needs:Search, data_processing!  x"),
            vec!["needs:search", "data_processing", "x"]
        );
    }

    #[test]
    fn cosine_of_identical_bags_is_one() {
        let a = hashed_bag("a b b c");
        assert!((bag_cosine(&a, &a) - 1.0).abs() < 1e-12);
        assert_eq!(bag_cosine(&a, &hashed_bag("")), 0.0);
    }

    #[test]
    fn cosine_matches_hand_computation() {
        // {a:1,b:2} . {b:1,c:1} = 2 ; |a|=sqrt5 |b|=sqrt2
        let s = bag_cosine(&hashed_bag("a b b"), &hashed_bag("b c"));
        assert!((s - 2.0 / (5f64.sqrt() * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn jaccard_edges() {
        let e: BTreeSet<u8> = BTreeSet::new();
        assert_eq!(jaccard(&e, &e), 0.0);
        let a: BTreeSet<u8> = [1, 2, 3].into();
        let b: BTreeSet<u8> = [2, 3, 4].into();
        assert!((jaccard(&a, &b) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn derive_seed_is_label_sensitive() {
        assert_ne!(derive_seed(&["a", "bc"]), derive_seed(&["ab", "c"]));
        assert_eq!(derive_seed(&["x", "1"]), derive_seed(&["x", "1"]));
    }
}
