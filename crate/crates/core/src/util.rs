//! Small shared helpers: stable hashing, seed derivation, atomic file writes.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::Result;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over raw bytes. Stable across platforms and compiler versions,
/// unlike `std::collections::hash_map::DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// splitmix64 finalizer; a bijective avalanche on 64-bit words.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit hash of a string, well mixed.
pub fn hash_str(s: &str) -> u64 {
    mix64(fnv1a(s.as_bytes()))
}

/// Derive a component seed from the global seed and a component name, so
/// that e.g. the forest and the split never draw from the same stream.
pub fn derive_seed(global: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(global.to_le_bytes());
    h.update(name.as_bytes());
    let out = h.finalize();
    let mut buf = [0u8; 8];
    buf.copy_from_slice(&out[..8]);
    u64::from_le_bytes(buf)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to `path` via a sibling temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Format with 6 significant digits in `1.23456E-04` style.
pub fn sci6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000E+00".to_string();
    }
    let s = format!("{:.5e}", x);
    let (mantissa, exp) = s.split_once('e').expect("float exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}E{sign}{:02}", exp.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sci6_matches_table_style() {
        assert_eq!(sci6(3.39e-4), "3.39000E-04");
        assert_eq!(sci6(0.307), "3.07000E-01");
        assert_eq!(sci6(12.5), "1.25000E+01");
        assert_eq!(sci6(-2.0), "-2.00000E+00");
        assert_eq!(sci6(0.0), "0.00000E+00");
    }

    #[test]
    fn derived_seeds_differ_by_name() {
        assert_ne!(derive_seed(7, "forest"), derive_seed(7, "split"));
        assert_eq!(derive_seed(7, "forest"), derive_seed(7, "forest"));
    }

    #[test]
    fn fnv_known_vector() {
        assert_eq!(fnv1a(b""), FNV_OFFSET);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
    }
}
