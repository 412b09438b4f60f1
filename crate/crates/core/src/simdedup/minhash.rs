//! MinHash signatures over shingle sets.
//!
//! Each of the `d` hash functions is `h_j(x) = (a_j * x + b_j) mod p` with
//! `p = 2^61 - 1`, applied to a stable 64-bit hash of the shingle. The
//! coefficients are drawn from a ChaCha stream seeded by `seed`, so a
//! signature is a pure function of `(shingles, d, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::shingle::ShingleSet;
use crate::corpus::NormalizedValue;
use crate::error::{Error, Result};
use crate::util::hash_str;

const MERSENNE_61: u64 = (1 << 61) - 1;

#[inline]
fn mod_mersenne(x: u128) -> u64 {
    let p = MERSENNE_61 as u128;
    let folded = (x & p) + (x >> 61);
    let folded = (folded & p) + (folded >> 61);
    let r = folded as u64;
    if r >= MERSENNE_61 {
        r - MERSENNE_61
    } else {
        r
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub values: Vec<u64>,
    pub seed: u64,
}

impl MinHashSignature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A family of `d` universal hash functions fixed by a seed.
#[derive(Debug, Clone)]
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
    seed: u64,
}

impl MinHasher {
    pub fn new(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(Error::invalid("signature length d must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..d)
            .map(|_| {
                (
                    rng.random_range(1..MERSENNE_61),
                    rng.random_range(0..MERSENNE_61),
                )
            })
            .collect();
        Ok(MinHasher { coeffs, seed })
    }

    pub fn d(&self) -> usize {
        self.coeffs.len()
    }

    /// The `j`-th hash of a shingle.
    pub fn hash(&self, j: usize, shingle: &str) -> u64 {
        let x = hash_str(shingle) % MERSENNE_61;
        let (a, b) = self.coeffs[j];
        mod_mersenne(a as u128 * x as u128 + b as u128)
    }

    pub fn signature(&self, shingles: &ShingleSet) -> Result<MinHashSignature> {
        if shingles.is_empty() {
            return Err(Error::empty("cannot sign an empty shingle set"));
        }
        let mut values = vec![u64::MAX; self.coeffs.len()];
        for s in shingles.iter() {
            let x = (hash_str(s) % MERSENNE_61) as u128;
            for (v, &(a, b)) in values.iter_mut().zip(&self.coeffs) {
                let h = mod_mersenne(a as u128 * x + b as u128);
                if h < *v {
                    *v = h;
                }
            }
        }
        Ok(MinHashSignature {
            values,
            seed: self.seed,
        })
    }
}

pub fn minhash_signature(shingles: &ShingleSet, d: usize, seed: u64) -> Result<MinHashSignature> {
    MinHasher::new(d, seed)?.signature(shingles)
}

/// Fraction of positions where two signatures agree.
pub fn estimate_jaccard(a: &MinHashSignature, b: &MinHashSignature) -> Result<NormalizedValue> {
    if a.len() != b.len() || a.seed != b.seed {
        return Err(Error::Dimension(format!(
            "signatures differ in shape: d={}/{} seed={}/{}",
            a.len(),
            b.len(),
            a.seed,
            b.seed
        )));
    }
    if a.is_empty() {
        return Err(Error::empty("empty signature"));
    }
    let agree = a.values.iter().zip(&b.values).filter(|(x, y)| x == y).count();
    NormalizedValue::new(agree as f64 / a.len() as f64)
}
