//! Whitespace tokenization and seed derivation shared by every stage.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Splits on Unicode whitespace. Templates, EDA and the trigram metric all use
/// this tokenization so that prefix splits and word counts agree.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(t.as_ref());
    }
    out
}

/// Derives an independent 64-bit seed from a base seed and a tag. Stable
/// across platforms and releases.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn seeded_rng(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_collapses_runs_of_whitespace() {
        assert_eq!(tokenize("  a\tb  c\n"), vec!["a", "b", "c"]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn derived_seeds_differ_by_tag() {
        assert_eq!(derive_seed(7, "pos"), derive_seed(7, "pos"));
        assert_ne!(derive_seed(7, "pos"), derive_seed(7, "neg"));
        assert_ne!(derive_seed(7, "pos"), derive_seed(8, "pos"));
    }
}
