//! Near-synonym clustering of feature phrases.
//!
//! Phrases are shingled, MinHash-signed, paired by LSH banding, verified
//! against the similarity threshold and merged with union-find. Each
//! resulting group is collapsed onto one representative phrase, yielding the
//! canonical feature set and a per-product canonical feature list.

pub mod lsh;
pub mod minhash;
pub mod shingle;
pub mod union_find;

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::{clean_caption, FeaturePhrase, FeatureUniverse};
use crate::corpus::Catalog;
use crate::error::{Error, Result};

pub use lsh::lsh_candidates;
pub use minhash::{estimate_jaccard, minhash_signature, MinHashSignature, MinHasher};
pub use shingle::{shingle, ShingleMode, ShingleSet};
pub use union_find::UnionFind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DedupConfig {
    pub d: usize,
    pub seed: u64,
    pub tau0: f64,
    pub bands: usize,
    pub rows: usize,
    pub mode: ShingleMode,
    /// Verify candidates with exact shingle-set Jaccard instead of the
    /// signature estimate.
    pub exact_verify: bool,
}

impl Default for DedupConfig {
    fn default() -> Self {
        DedupConfig {
            d: 128,
            seed: 0,
            tau0: 0.8,
            bands: 16,
            rows: 8,
            mode: ShingleMode::Unigram,
            exact_verify: false,
        }
    }
}

impl DedupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau0 > 0.0 && self.tau0 <= 1.0) {
            return Err(Error::invalid(format!("tau0 {} must be in (0, 1]", self.tau0)));
        }
        if self.d == 0 || self.bands * self.rows != self.d {
            return Err(Error::invalid(format!(
                "bands ({}) x rows ({}) must equal d ({})",
                self.bands, self.rows, self.d
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymGroup {
    /// Sorted, non-empty.
    pub members: Vec<FeaturePhrase>,
    pub representative: FeaturePhrase,
}

impl SynonymGroup {
    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }
}

/// Pairs of phrases that passed LSH candidacy and threshold verification,
/// smaller phrase first.
pub fn verified_pairs(
    universe: &FeatureUniverse,
    config: &DedupConfig,
) -> Result<BTreeSet<(FeaturePhrase, FeaturePhrase)>> {
    let phrases: Vec<&FeaturePhrase> = universe.phrases().collect();
    Ok(verified_index_pairs(&phrases, config)?
        .into_iter()
        .map(|(i, j)| (phrases[i].clone(), phrases[j].clone()))
        .collect())
}

fn verified_index_pairs(
    phrases: &[&FeaturePhrase],
    config: &DedupConfig,
) -> Result<Vec<(usize, usize)>> {
    config.validate()?;
    let hasher = MinHasher::new(config.d, config.seed)?;
    let shingles: Vec<ShingleSet> = phrases
        .par_iter()
        .map(|p| shingle(p, config.mode))
        .collect::<Result<_>>()?;
    let signatures: Vec<MinHashSignature> = shingles
        .par_iter()
        .map(|s| hasher.signature(s))
        .collect::<Result<_>>()?;
    let sig_refs: Vec<&MinHashSignature> = signatures.iter().collect();
    let candidates = lsh::candidate_indices(&sig_refs, config.bands, config.rows)?;

    let mut out = Vec::new();
    for (i, j) in candidates {
        let similarity = if config.exact_verify {
            shingles[i].jaccard(&shingles[j])
        } else {
            estimate_jaccard(&signatures[i], &signatures[j])?.get()
        };
        if similarity >= config.tau0 {
            out.push((i, j));
        }
    }
    Ok(out)
}

/// Partition the universe into synonym groups. Representatives are picked
/// with the frequency heuristic; see [`select_representative`] to re-pick
/// with an external adapter.
pub fn cluster_synonyms(universe: &FeatureUniverse, config: &DedupConfig) -> Result<Vec<SynonymGroup>> {
    if universe.is_empty() {
        return Err(Error::empty("feature universe has no phrases"));
    }
    let phrases: Vec<&FeaturePhrase> = universe.phrases().collect();
    let mut uf = UnionFind::new(phrases.len());
    for (i, j) in verified_index_pairs(&phrases, config)? {
        uf.union(i, j);
    }
    Ok(uf
        .groups()
        .into_iter()
        .map(|idx| {
            let members: Vec<FeaturePhrase> = idx.into_iter().map(|i| phrases[i].clone()).collect();
            let representative = heuristic_representative(&members, universe);
            SynonymGroup {
                members,
                representative,
            }
        })
        .collect())
}

/// Request sent to an external representative selector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeRequest {
    pub candidates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeResponse {
    pub choice: String,
}

/// A text-generation backend that picks the best phrase of a group.
pub trait RepresentativeAdapter: Send + Sync {
    fn choose(&self, request: &RepresentativeRequest) -> Result<RepresentativeResponse>;
}

impl<F> RepresentativeAdapter for F
where
    F: Fn(&RepresentativeRequest) -> Result<RepresentativeResponse> + Send + Sync,
{
    fn choose(&self, request: &RepresentativeRequest) -> Result<RepresentativeResponse> {
        self(request)
    }
}

/// Posts the request as JSON to a URL and reads `{"choice": ...}` back.
pub struct HttpRepresentativeAdapter {
    url: String,
    agent: ureq::Agent,
}

impl HttpRepresentativeAdapter {
    pub fn new(url: impl Into<String>, timeout: std::time::Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpRepresentativeAdapter {
            url: url.into(),
            agent,
        }
    }
}

impl RepresentativeAdapter for HttpRepresentativeAdapter {
    fn choose(&self, request: &RepresentativeRequest) -> Result<RepresentativeResponse> {
        let mut resp = self
            .agent
            .post(&self.url)
            .send_json(request)
            .map_err(|e| Error::Adapter(format!("POST {}: {e}", self.url)))?;
        resp.body_mut()
            .read_json::<RepresentativeResponse>()
            .map_err(|e| Error::Adapter(format!("POST {}: bad response: {e}", self.url)))
    }
}

pub enum RepresentativeStrategy<'a> {
    Heuristic,
    External(&'a dyn RepresentativeAdapter),
}

/// Highest frequency, then shortest text, then lexicographically first.
fn heuristic_representative(members: &[FeaturePhrase], universe: &FeatureUniverse) -> FeaturePhrase {
    members
        .iter()
        .min_by(|a, b| {
            universe
                .frequency(b)
                .cmp(&universe.frequency(a))
                .then(a.as_str().len().cmp(&b.as_str().len()))
                .then(a.cmp(b))
        })
        .expect("group is non-empty")
        .clone()
}

pub fn select_representative(
    group: &SynonymGroup,
    universe: &FeatureUniverse,
    strategy: &RepresentativeStrategy<'_>,
) -> Result<FeaturePhrase> {
    if group.members.is_empty() {
        return Err(Error::empty("synonym group"));
    }
    if group.is_singleton() {
        return Ok(group.members[0].clone());
    }
    match strategy {
        RepresentativeStrategy::Heuristic => Ok(heuristic_representative(&group.members, universe)),
        RepresentativeStrategy::External(adapter) => {
            let request = RepresentativeRequest {
                candidates: group.members.iter().map(|m| m.to_string()).collect(),
            };
            let response = adapter.choose(&request)?;
            match group.members.iter().find(|m| m.as_str() == response.choice) {
                Some(m) => Ok(m.clone()),
                None => {
                    log::warn!(
                        "representative {:?} is not a group member; using heuristic",
                        response.choice
                    );
                    Ok(heuristic_representative(&group.members, universe))
                }
            }
        }
    }
}

/// Re-pick every group's representative with the given strategy.
pub fn select_representatives(
    groups: &mut [SynonymGroup],
    universe: &FeatureUniverse,
    strategy: &RepresentativeStrategy<'_>,
) -> Result<()> {
    for g in groups.iter_mut() {
        g.representative = select_representative(g, universe, strategy)?;
    }
    Ok(())
}

/// The canonical feature set: one representative per synonym group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    /// Sorted canonical features.
    pub features: Vec<FeaturePhrase>,
    /// Every known phrase mapped onto its canonical feature.
    pub alias_map: BTreeMap<FeaturePhrase, FeaturePhrase>,
}

impl FeatureSet {
    pub fn group_count(&self) -> usize {
        self.features.len()
    }

    pub fn canonical(&self, phrase: &FeaturePhrase) -> Option<&FeaturePhrase> {
        self.alias_map.get(phrase)
    }

    /// Canonical features of a raw caption, deduplicated, caption order.
    pub fn canonical_features(&self, caption: &str) -> Result<Vec<FeaturePhrase>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for phrase in clean_caption(caption) {
            let canon = self.alias_map.get(&phrase).ok_or_else(|| {
                Error::invalid(format!("phrase {:?} is not covered by any synonym group", phrase.as_str()))
            })?;
            if seen.insert(canon) {
                out.push(canon.clone());
            }
        }
        Ok(out)
    }
}

/// Canonical feature list per product id.
pub type ProductFeatures = BTreeMap<String, Vec<FeaturePhrase>>;

pub fn canonicalize(catalog: &Catalog, groups: &[SynonymGroup]) -> Result<(FeatureSet, ProductFeatures)> {
    let mut alias_map = BTreeMap::new();
    let mut features = BTreeSet::new();
    for g in groups {
        if !g.members.contains(&g.representative) {
            return Err(Error::invalid(format!(
                "representative {:?} is not a member of its group",
                g.representative.as_str()
            )));
        }
        for m in &g.members {
            if alias_map.insert(m.clone(), g.representative.clone()).is_some() {
                return Err(Error::invalid(format!(
                    "phrase {:?} appears in more than one group",
                    m.as_str()
                )));
            }
        }
        features.insert(g.representative.clone());
    }
    let set = FeatureSet {
        features: features.into_iter().collect(),
        alias_map,
    };
    let mut per_product = ProductFeatures::new();
    for p in catalog.products() {
        per_product.insert(p.id.clone(), set.canonical_features(&p.caption)?);
    }
    Ok((set, per_product))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::build_universe;
    use crate::corpus::Product;

    fn catalog(captions: &[&str]) -> Catalog {
        Catalog::new(
            captions
                .iter()
                .enumerate()
                .map(|(i, c)| Product {
                    id: format!("p{i}"),
                    caption: c.to_string(),
                    image_ref: String::new(),
                    sales: i as f64,
                    categoricals: Default::default(),
                    numerics: Default::default(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn phrase(s: &str) -> FeaturePhrase {
        FeaturePhrase::new(s).unwrap()
    }

    fn member_lists(groups: &[SynonymGroup]) -> Vec<Vec<String>> {
        groups
            .iter()
            .map(|g| g.members.iter().map(|m| m.to_string()).collect())
            .collect()
    }

    #[test]
    fn reordered_synonyms_cluster() {
        let u = build_universe(&catalog(&["hook and zip fastening", "zip and hook fastening"]));
        let groups = cluster_synonyms(&u, &DedupConfig::default()).unwrap();
        assert_eq!(
            member_lists(&groups),
            vec![vec!["hook and zip fastening", "zip and hook fastening"]]
        );
    }

    #[test]
    fn dissimilar_phrases_stay_apart() {
        let u = build_universe(&catalog(&["cable knit, palm print, glass beads"]));
        let groups = cluster_synonyms(&u, &DedupConfig::default()).unwrap();
        assert_eq!(groups.len(), 3);
        assert!(groups.iter().all(SynonymGroup::is_singleton));
    }

    #[test]
    fn empty_universe_and_bad_config_rejected() {
        let u = build_universe(&catalog(&[""]));
        assert!(matches!(cluster_synonyms(&u, &DedupConfig::default()), Err(Error::Empty(_))));
        let u = build_universe(&catalog(&["a"]));
        let bad_tau = DedupConfig { tau0: 0.0, ..Default::default() };
        assert!(cluster_synonyms(&u, &bad_tau).is_err());
        let bad_bands = DedupConfig { bands: 10, ..Default::default() };
        assert!(cluster_synonyms(&u, &bad_bands).is_err());
    }

    #[test]
    fn heuristic_prefers_frequency_then_length() {
        let u = build_universe(&catalog(&[
            "cable knit", "cable knit", "cable knit", "cable knit", "cable knit",
            "cable knit fabric", "cable knit fabric",
            "zip detail", "zip details",
        ]));
        let g = SynonymGroup {
            members: vec![phrase("cable knit"), phrase("cable knit fabric")],
            representative: phrase("cable knit fabric"),
        };
        let rep = select_representative(&g, &u, &RepresentativeStrategy::Heuristic).unwrap();
        assert_eq!(rep.as_str(), "cable knit");

        let g = SynonymGroup {
            members: vec![phrase("zip detail"), phrase("zip details")],
            representative: phrase("zip details"),
        };
        let rep = select_representative(&g, &u, &RepresentativeStrategy::Heuristic).unwrap();
        assert_eq!(rep.as_str(), "zip detail");

        let single = SynonymGroup {
            members: vec![phrase("zip details")],
            representative: phrase("zip details"),
        };
        let rep = select_representative(&single, &u, &RepresentativeStrategy::Heuristic).unwrap();
        assert_eq!(rep.as_str(), "zip details");
    }

    #[test]
    fn external_adapter_used_and_validated() {
        let u = build_universe(&catalog(&["zip detail", "zip detail", "zip details"]));
        let g = SynonymGroup {
            members: vec![phrase("zip detail"), phrase("zip details")],
            representative: phrase("zip detail"),
        };
        let pick_last = |r: &RepresentativeRequest| {
            Ok(RepresentativeResponse {
                choice: r.candidates.last().unwrap().clone(),
            })
        };
        let rep = select_representative(&g, &u, &RepresentativeStrategy::External(&pick_last)).unwrap();
        assert_eq!(rep.as_str(), "zip details");

        let hallucinate = |_: &RepresentativeRequest| {
            Ok(RepresentativeResponse {
                choice: "zipper".into(),
            })
        };
        let rep = select_representative(&g, &u, &RepresentativeStrategy::External(&hallucinate)).unwrap();
        assert_eq!(rep.as_str(), "zip detail");

        let down = |_: &RepresentativeRequest| -> Result<RepresentativeResponse> {
            Err(Error::Adapter("connection refused".into()))
        };
        let err = select_representative(&g, &u, &RepresentativeStrategy::External(&down)).unwrap_err();
        assert!(err.to_string().contains("connection refused"));
    }

    #[test]
    fn http_adapter_round_trip() {
        use std::io::{BufRead, BufReader, Read, Write};
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: RepresentativeRequest = serde_json::from_slice(&body).unwrap();
            let out = serde_json::to_string(&RepresentativeResponse {
                choice: req.candidates[1].clone(),
            })
            .unwrap();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                out.len(),
                out
            )
            .unwrap();
        });
        let adapter = HttpRepresentativeAdapter::new(
            format!("http://{addr}/choose"),
            std::time::Duration::from_secs(5),
        );
        let resp = adapter
            .choose(&RepresentativeRequest {
                candidates: vec!["a".into(), "b".into()],
            })
            .unwrap();
        assert_eq!(resp.choice, "b");
        server.join().unwrap();
    }

    #[test]
    fn canonicalize_identity_for_singletons() {
        let c = catalog(&["cable knit, folded cuffs", "folded cuffs"]);
        let u = build_universe(&c);
        let groups: Vec<SynonymGroup> = u
            .phrases()
            .map(|p| SynonymGroup {
                members: vec![p.clone()],
                representative: p.clone(),
            })
            .collect();
        let (set, per) = canonicalize(&c, &groups).unwrap();
        assert_eq!(set.group_count(), u.len());
        assert!(set.alias_map.iter().all(|(k, v)| k == v));
        assert_eq!(per["p0"], vec![phrase("cable knit"), phrase("folded cuffs")]);
        assert_eq!(per["p1"], vec![phrase("folded cuffs")]);
    }

    #[test]
    fn canonicalize_collapses_group() {
        let c = catalog(&["zip detail, cable knit", "zip details", "zip detail; zip details"]);
        let u = build_universe(&c);
        let groups = vec![
            SynonymGroup {
                members: vec![phrase("cable knit")],
                representative: phrase("cable knit"),
            },
            SynonymGroup {
                members: vec![phrase("zip detail"), phrase("zip details")],
                representative: phrase("zip detail"),
            },
        ];
        let (set, per) = canonicalize(&c, &groups).unwrap();
        assert_eq!(set.group_count(), u.len() - 1);
        assert_eq!(set.canonical(&phrase("zip details")), Some(&phrase("zip detail")));
        assert_eq!(per["p1"], vec![phrase("zip detail")]);
        assert_eq!(per["p2"], vec![phrase("zip detail")]);
    }

    #[test]
    fn canonicalize_rejects_uncovered_phrase() {
        let c = catalog(&["zip detail, cable knit"]);
        let groups = vec![SynonymGroup {
            members: vec![phrase("cable knit")],
            representative: phrase("cable knit"),
        }];
        let err = canonicalize(&c, &groups).unwrap_err();
        assert!(err.to_string().contains("zip detail"));
    }
}
