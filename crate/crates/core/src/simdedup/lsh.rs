//! Banded LSH over MinHash signatures.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::minhash::MinHashSignature;
use crate::error::{Error, Result};

/// Candidate pairs (by position in `signatures`) whose signatures agree on
/// every row of at least one band. Pairs are `(i, j)` with `i < j`.
pub fn candidate_indices(
    signatures: &[&MinHashSignature],
    bands: usize,
    rows: usize,
) -> Result<BTreeSet<(usize, usize)>> {
    let Some(first) = signatures.first() else {
        return Ok(BTreeSet::new());
    };
    let d = first.len();
    if bands == 0 || rows == 0 || bands * rows != d {
        return Err(Error::invalid(format!(
            "bands ({bands}) x rows ({rows}) must equal signature length {d}"
        )));
    }
    if let Some(bad) = signatures.iter().find(|s| s.len() != d || s.seed != first.seed) {
        return Err(Error::Dimension(format!(
            "signature with d={} seed={} among d={d} seed={}",
            bad.len(),
            bad.seed,
            first.seed
        )));
    }

    let mut pairs = BTreeSet::new();
    for band in 0..bands {
        let span = band * rows..(band + 1) * rows;
        let mut buckets: HashMap<&[u64], Vec<usize>> = HashMap::new();
        for (i, sig) in signatures.iter().enumerate() {
            buckets.entry(&sig.values[span.clone()]).or_default().push(i);
        }
        for members in buckets.values() {
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    pairs.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    Ok(pairs)
}

/// Keyed variant: unordered key pairs, emitted with the smaller key first.
pub fn lsh_candidates<K: Ord + Clone>(
    signatures: &BTreeMap<K, MinHashSignature>,
    bands: usize,
    rows: usize,
) -> Result<BTreeSet<(K, K)>> {
    let keys: Vec<&K> = signatures.keys().collect();
    let sigs: Vec<&MinHashSignature> = signatures.values().collect();
    Ok(candidate_indices(&sigs, bands, rows)?
        .into_iter()
        .map(|(i, j)| (keys[i].clone(), keys[j].clone()))
        .collect())
}

/// Probability that a pair with Jaccard `s` becomes a candidate.
pub fn candidate_probability(s: f64, bands: usize, rows: usize) -> f64 {
    1.0 - (1.0 - s.powi(rows as i32)).powi(bands as i32)
}
