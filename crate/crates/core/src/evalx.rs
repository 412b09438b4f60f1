//! Triplet ranking evaluation and feature-removal ablation.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::captions::{clean_caption, split_pieces, FeaturePhrase};
use crate::corpus::{Catalog, Product};
use crate::encode::{EmbeddingProvider, Encoder};
use crate::error::{Error, Result};
use crate::forest::Classifier;
use crate::influence::{InfluenceRanking, InfluenceRecord};
use crate::labeler::SalesClass;
use crate::simdedup::{FeatureSet, ProductFeatures};
use crate::util::sci6;

pub const DEFAULT_TRIPLES: usize = 20;

/// Three products of one type holding classes 1, 2 and 3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    pub product_type: String,
    pub products: [String; 3],
    pub truth: [SalesClass; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleResult {
    pub predicted: [f64; 3],
    pub concordant: u8,
    pub discordant: u8,
    pub tau: f64,
}

/// Pairwise tau over the three products. Pairs with equal predicted scores
/// count toward neither side.
pub fn kendall_tau_triple(predicted: [f64; 3], truth: [u8; 3]) -> Result<TripleResult> {
    if truth[0] == truth[1] || truth[0] == truth[2] || truth[1] == truth[2] {
        return Err(Error::invalid(format!("truth labels {truth:?} are not distinct")));
    }
    if predicted.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid(format!("predicted scores {predicted:?} are not finite")));
    }
    let (mut p, mut q) = (0u8, 0u8);
    for (i, j) in [(0, 1), (0, 2), (1, 2)] {
        let dp = predicted[i] - predicted[j];
        let dt = truth[i] as i16 - truth[j] as i16;
        if dp == 0.0 {
            continue;
        }
        if (dp > 0.0) == (dt > 0) {
            p += 1;
        } else {
            q += 1;
        }
    }
    Ok(TripleResult {
        predicted,
        concordant: p,
        discordant: q,
        tau: (p as f64 - q as f64) / 3.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauSummary {
    pub triples: usize,
    pub sum: f64,
    pub mean: f64,
    pub correct: usize,
}

/// Both the sum of per-triple taus and their mean.
pub fn kendall_tau_total(results: &[TripleResult]) -> Result<TauSummary> {
    if results.is_empty() {
        return Err(Error::empty("no triple results to aggregate"));
    }
    let sum: f64 = results.iter().map(|r| r.tau).sum();
    Ok(TauSummary {
        triples: results.len(),
        sum,
        mean: sum / results.len() as f64,
        correct: correct_triple_count(results),
    })
}

/// Triples whose predicted order matches the truth exactly.
pub fn correct_triple_count(results: &[TripleResult]) -> usize {
    results.iter().filter(|r| r.concordant == 3).count()
}

/// Draws `m` triples from distinct product types. A type is eligible when it
/// holds at least one product of each of classes 1, 2 and 3.
pub fn select_triples(
    catalog: &Catalog,
    labels: &[SalesClass],
    m: usize,
    seed: u64,
    type_attr: &str,
) -> Result<Vec<Triple>> {
    if labels.len() != catalog.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} products",
            labels.len(),
            catalog.len()
        )));
    }
    if m == 0 {
        return Err(Error::invalid("triple count must be positive"));
    }
    if !catalog.schema().categoricals.contains_key(type_attr) {
        return Err(Error::invalid(format!("catalog has no categorical attribute {type_attr:?}")));
    }
    let mut by_type: BTreeMap<&str, [Vec<&str>; 3]> = BTreeMap::new();
    for (p, l) in catalog.products().iter().zip(labels) {
        if l.get() > 3 {
            continue;
        }
        let t = p.categoricals[type_attr].as_str();
        by_type.entry(t).or_default()[l.index()].push(p.id.as_str());
    }
    let mut eligible: Vec<(&str, [Vec<&str>; 3])> = by_type
        .into_iter()
        .filter(|(_, c)| c.iter().all(|v| !v.is_empty()))
        .collect();
    if eligible.len() < m {
        return Err(Error::invalid(format!(
            "need {m} product types with classes 1, 2 and 3, found {}",
            eligible.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    eligible.shuffle(&mut rng);
    Ok(eligible
        .into_iter()
        .take(m)
        .map(|(t, classes)| {
            let mut pick = |i: usize| classes[i].choose(&mut rng).expect("non-empty").to_string();
            let products = [pick(0), pick(1), pick(2)];
            Triple {
                product_type: t.to_string(),
                products,
                truth: [SalesClass::from_index(0), SalesClass::from_index(1), SalesClass::from_index(2)],
            }
        })
        .collect())
}

/// Prediction scores for every product in a batch.
pub fn score_products(
    products: &[Product],
    model: &(dyn Classifier + Sync),
    encoder: &Encoder,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<f64>> {
    let rows = encoder.encode_products(provider, products)?;
    rows.par_iter().map(|r| model.prediction_score(&r.values)).collect()
}

pub fn score_triples(
    triples: &[Triple],
    catalog: &Catalog,
    model: &(dyn Classifier + Sync),
    encoder: &Encoder,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<TripleResult>> {
    let index = catalog.index_by_id();
    let mut products = Vec::with_capacity(triples.len() * 3);
    for t in triples {
        for id in &t.products {
            let p = index
                .get(id.as_str())
                .ok_or_else(|| Error::invalid(format!("triple product {id:?} not in catalog")))?;
            products.push((*p).clone());
        }
    }
    let scores = score_products(&products, model, encoder, provider)?;
    triples
        .iter()
        .zip(scores.chunks(3))
        .map(|(t, s)| kendall_tau_triple([s[0], s[1], s[2]], t.truth.map(SalesClass::get)))
        .collect()
}

pub fn triples_to_csv(triples: &[Triple], results: &[TripleResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "product_type", "product_1", "product_2", "product_3", "truth_1", "truth_2", "truth_3", "score_1",
        "score_2", "score_3", "concordant", "discordant", "tau",
    ])?;
    for (t, r) in triples.iter().zip(results) {
        let mut rec = vec![t.product_type.clone()];
        rec.extend(t.products.iter().cloned());
        rec.extend(t.truth.iter().map(|c| c.to_string()));
        rec.extend(r.predicted.iter().map(|&s| sci6(s)));
        rec.push(r.concordant.to_string());
        rec.push(r.discordant.to_string());
        rec.push(sci6(r.tau));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

pub fn tau_summary_to_csv(s: &TauSummary) -> String {
    format!(
        "metric,value\ntriples,{}\nkendall_tau_sum,{}\nkendall_tau_mean,{}\ncorrect_triples,{}\n",
        s.triples,
        sci6(s.sum),
        sci6(s.mean),
        s.correct
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// High-influence feature; removal should lower the score.
    Good,
    /// Low-influence feature; removal should raise the score.
    Bad,
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Good => "good",
            Polarity::Bad => "bad",
        })
    }
}

/// Which of the two variants scored higher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Original,
    Modified,
    Tie,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Original => "original",
            Direction::Modified => "modified",
            Direction::Tie => "tie",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCase {
    pub feature: FeaturePhrase,
    pub feature_score: f64,
    pub polarity: Polarity,
    pub original: Product,
    pub modified: Product,
    pub original_score: Option<f64>,
    pub modified_score: Option<f64>,
}

impl AblationCase {
    /// `None` until scored.
    pub fn direction(&self) -> Option<Direction> {
        let (o, m) = (self.original_score?, self.modified_score?);
        Some(if o > m {
            Direction::Original
        } else if m > o {
            Direction::Modified
        } else {
            Direction::Tie
        })
    }

    pub fn expected(&self) -> Direction {
        match self.polarity {
            Polarity::Good => Direction::Original,
            Polarity::Bad => Direction::Modified,
        }
    }

    pub fn matches_expectation(&self) -> Option<bool> {
        Some(self.direction()? == self.expected())
    }
}

/// Copy of `product` with every caption piece that maps onto `feature`
/// removed. Other pieces keep their original text.
pub fn remove_feature(product: &Product, feature: &FeaturePhrase, features: &FeatureSet) -> Result<Product> {
    let mut kept = Vec::new();
    let mut removed = false;
    for piece in split_pieces(&product.caption) {
        let hit = clean_caption(piece)
            .first()
            .is_some_and(|p| features.canonical(p) == Some(feature));
        if hit {
            removed = true;
        } else if !piece.trim().is_empty() {
            kept.push(piece.trim());
        }
    }
    if !removed {
        return Err(Error::invalid(format!(
            "product {:?} does not carry feature {:?}",
            product.id,
            feature.as_str()
        )));
    }
    let mut modified = product.clone();
    modified.id = format!("{}#without:{}", product.id, feature.as_str());
    modified.caption = kept.join(", ");
    Ok(modified)
}

/// Top and bottom `fraction` of the ranking, restricted to features seen
/// in at least `min_frequency` products.
pub fn decile_features(
    ranking: &InfluenceRanking,
    fraction: f64,
    min_frequency: usize,
) -> Result<(Vec<&InfluenceRecord>, Vec<&InfluenceRecord>)> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::invalid(format!("fraction {fraction} must lie in (0, 0.5]")));
    }
    let kept: Vec<&InfluenceRecord> = ranking.records.iter().filter(|r| r.frequency >= min_frequency).collect();
    let count = (kept.len() as f64 * fraction).ceil() as usize;
    if count == 0 {
        return Err(Error::empty(format!("no feature has frequency >= {min_frequency}")));
    }
    Ok((kept[..count].to_vec(), kept[kept.len() - count..].to_vec()))
}

/// Samples up to `n` (product, feature) pairs for the given features and
/// builds caption-removal cases from them.
pub fn ablation_cases(
    catalog: &Catalog,
    features: &FeatureSet,
    product_features: &ProductFeatures,
    chosen: &[(&InfluenceRecord, Polarity)],
    n: usize,
    seed: u64,
) -> Result<Vec<AblationCase>> {
    let mut pool = Vec::new();
    for p in catalog.products() {
        let Some(list) = product_features.get(&p.id) else {
            continue;
        };
        for (rec, pol) in chosen {
            if list.contains(&rec.feature) {
                pool.push((p, *rec, *pol));
            }
        }
    }
    if pool.is_empty() {
        return Err(Error::empty("no product carries any chosen feature"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool.into_iter()
        .map(|(p, rec, polarity)| {
            Ok(AblationCase {
                feature: rec.feature.clone(),
                feature_score: rec.score,
                polarity,
                original: p.clone(),
                modified: remove_feature(p, &rec.feature, features)?,
                original_score: None,
                modified_score: None,
            })
        })
        .collect()
}

/// Scores both variants of every case.
pub fn run_ablation(
    cases: &[AblationCase],
    model: &(dyn Classifier + Sync),
    encoder: &Encoder,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<AblationCase>> {
    cases
        .par_iter()
        .map(|c| {
            let score = |p: &Product| -> Result<f64> {
                let row = encoder.encode_product(provider, p)?;
                model.prediction_score(&row.values)
            };
            let ctx = |e: Error| e.context(format!("ablation of {:?} on {}", c.feature.as_str(), c.original.id));
            let mut out = c.clone();
            out.original_score = Some(score(&c.original).map_err(ctx)?);
            out.modified_score = Some(score(&c.modified).map_err(ctx)?);
            Ok(out)
        })
        .collect()
}

pub fn ablation_to_csv(cases: &[AblationCase]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "remove", "feature", "feature_score", "product", "original_s", "modified_s", "direction", "expected",
        "matches",
    ])?;
    for c in cases {
        let (Some(o), Some(m), Some(d)) = (c.original_score, c.modified_score, c.direction()) else {
            return Err(Error::invalid(format!("case on {} has not been scored", c.original.id)));
        };
        w.write_record([
            c.polarity.to_string(),
            c.feature.to_string(),
            sci6(c.feature_score),
            c.original.id.clone(),
            sci6(o),
            sci6(m),
            d.to_string(),
            c.expected().to_string(),
            (d == c.expected()).to_string(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simdedup::SynonymGroup;
    use proptest::prelude::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn fp(s: &str) -> FeaturePhrase {
        FeaturePhrase::new(s).unwrap()
    }

    fn product(id: &str, ty: &str, sales: f64, caption: &str) -> Product {
        Product {
            id: id.into(),
            caption: caption.into(),
            image_ref: String::new(),
            sales,
            categoricals: BTreeMap::from([("product_type".into(), ty.into())]),
            numerics: BTreeMap::new(),
        }
    }

    fn class(l: u8) -> SalesClass {
        SalesClass::new(l, 3).unwrap()
    }

    #[test]
    fn tau_examples() {
        let r = kendall_tau_triple([1.1, 2.0, 2.9], [1, 2, 3]).unwrap();
        assert_eq!((r.concordant, r.discordant, r.tau), (3, 0, 1.0));
        let r = kendall_tau_triple([2.9, 2.0, 1.1], [1, 2, 3]).unwrap();
        assert_eq!((r.concordant, r.discordant, r.tau), (0, 3, -1.0));
        let r = kendall_tau_triple([2.0, 1.1, 2.9], [1, 2, 3]).unwrap();
        assert_eq!((r.concordant, r.discordant), (2, 1));
        assert!((r.tau - 1.0 / 3.0).abs() < 1e-15);
        assert!(kendall_tau_triple([1.0, 2.0, 3.0], [1, 1, 3]).is_err());
    }

    #[test]
    fn tied_scores_count_nowhere() {
        let r = kendall_tau_triple([2.0, 2.0, 2.0], [1, 2, 3]).unwrap();
        assert_eq!((r.concordant, r.discordant, r.tau), (0, 0, 0.0));
        let r = kendall_tau_triple([1.0, 1.0, 3.0], [3, 1, 2]).unwrap();
        // pairs (0,2): pred low, truth high -> discordant; (1,2): concordant
        assert_eq!((r.concordant, r.discordant), (1, 1));
    }

    #[test]
    fn totals_and_counts() {
        let perfect = kendall_tau_triple([1.0, 2.0, 3.0], [1, 2, 3]).unwrap();
        let reversed = kendall_tau_triple([3.0, 2.0, 1.0], [1, 2, 3]).unwrap();
        let swap = kendall_tau_triple([2.0, 1.0, 3.0], [1, 2, 3]).unwrap();
        let s = kendall_tau_total(&[perfect; 20]).unwrap();
        assert_eq!((s.sum, s.mean, s.correct), (20.0, 1.0, 20));
        assert_eq!(correct_triple_count(&[reversed; 4]), 0);
        let mixed = [perfect, swap, reversed];
        assert_eq!(correct_triple_count(&mixed), 1);
        let s = kendall_tau_total(&mixed).unwrap();
        assert!((s.sum - 1.0 / 3.0).abs() < 1e-15);
        assert!(kendall_tau_total(&[]).is_err());
    }

    fn typed_catalog() -> (Catalog, Vec<SalesClass>) {
        let mut products = Vec::new();
        let mut labels = Vec::new();
        for t in 0..6 {
            for k in 0..6 {
                products.push(product(&format!("t{t}-{k}"), &format!("type{t}"), k as f64, "plain"));
                labels.push(class(1 + (k % 3) as u8));
            }
        }
        // a type missing class 3
        products.push(product("lonely-1", "lonely", 1.0, "plain"));
        labels.push(class(1));
        products.push(product("lonely-2", "lonely", 2.0, "plain"));
        labels.push(class(2));
        (Catalog::new(products).unwrap(), labels)
    }

    #[test]
    fn triples_are_valid_and_seeded() {
        let (cat, labels) = typed_catalog();
        let by_id: BTreeMap<&str, (&Product, SalesClass)> = cat
            .products()
            .iter()
            .zip(&labels)
            .map(|(p, l)| (p.id.as_str(), (p, *l)))
            .collect();
        let a = select_triples(&cat, &labels, 6, 1, "product_type").unwrap();
        let b = select_triples(&cat, &labels, 6, 2, "product_type").unwrap();
        assert_ne!(a, b);
        assert_eq!(a, select_triples(&cat, &labels, 6, 1, "product_type").unwrap());
        for t in a.iter().chain(&b) {
            for (id, truth) in t.products.iter().zip(t.truth) {
                let (p, l) = by_id[id.as_str()];
                assert_eq!(p.categoricals["product_type"], t.product_type);
                assert_eq!(l, truth);
            }
        }
        let types: BTreeSet<&str> = a.iter().map(|t| t.product_type.as_str()).collect();
        assert_eq!(types.len(), 6);
        let err = select_triples(&cat, &labels, 7, 1, "product_type").unwrap_err();
        assert!(err.to_string().contains("found 6"), "{err}");
    }

    #[test]
    fn single_eligible_type_is_forced() {
        let products = vec![
            product("a", "shirt", 1.0, "x"),
            product("b", "shirt", 2.0, "x"),
            product("c", "shirt", 3.0, "x"),
            product("d", "hat", 3.0, "x"),
        ];
        let labels = vec![class(1), class(2), class(3), class(3)];
        let cat = Catalog::new(products).unwrap();
        let t = select_triples(&cat, &labels, 1, 99, "product_type").unwrap();
        assert_eq!(t[0].products, ["a".to_string(), "b".into(), "c".into()]);
    }

    fn feature_set() -> FeatureSet {
        let groups = vec![
            SynonymGroup {
                members: vec![fp("folded cuffs"), fp("cuffs folded")],
                representative: fp("folded cuffs"),
            },
            SynonymGroup {
                members: vec![fp("cotton")],
                representative: fp("cotton"),
            },
        ];
        let cat = Catalog::new(vec![product("z", "t", 1.0, "cotton")]).unwrap();
        crate::simdedup::canonicalize(&cat, &groups).unwrap().0
    }

    #[test]
    fn removal_drops_every_alias() {
        let set = feature_set();
        let p = product("p1", "t", 1.0, "Cotton, Cuffs folded; folded cuffs.");
        let m = remove_feature(&p, &fp("folded cuffs"), &set).unwrap();
        assert_eq!(m.caption, "Cotton");
        assert_eq!(m.id, "p1#without:folded cuffs");
        assert_eq!(set.canonical_features(&m.caption).unwrap(), vec![fp("cotton")]);
        assert_eq!(m.categoricals, p.categoricals);
        assert!(remove_feature(&m, &fp("folded cuffs"), &set).is_err());
    }

    #[test]
    fn direction_rules() {
        let set = feature_set();
        let p = product("p1", "t", 1.0, "cotton, folded cuffs");
        let mut c = AblationCase {
            feature: fp("folded cuffs"),
            feature_score: 0.9,
            polarity: Polarity::Good,
            modified: remove_feature(&p, &fp("folded cuffs"), &set).unwrap(),
            original: p,
            original_score: Some(2.636),
            modified_score: Some(2.440),
        };
        assert_eq!(c.direction(), Some(Direction::Original));
        assert_eq!(c.matches_expectation(), Some(true));
        c.polarity = Polarity::Bad;
        assert_eq!(c.matches_expectation(), Some(false));
        c.modified_score = Some(2.636);
        assert_eq!(c.direction(), Some(Direction::Tie));
        c.modified_score = None;
        assert_eq!(c.direction(), None);
        assert!(ablation_to_csv(&[c]).is_err());
    }

    fn perm() -> impl Strategy<Value = [u8; 3]> {
        Just([1u8, 2, 3]).prop_shuffle().prop_map(|v| v)
    }

    proptest! {
        #[test]
        fn tau_invariant_under_increasing_maps(
            x in proptest::array::uniform3(-100.0f64..100.0),
            truth in perm(),
            a in 0.01f64..50.0,
            b in -50.0f64..50.0,
        ) {
            let r = kendall_tau_triple(x, truth).unwrap();
            let y = x.map(|v| a * v + b + v * v * v);
            let ties = |z: [f64; 3]| [z[0] == z[1], z[0] == z[2], z[1] == z[2]];
            // strictly increasing, but rounding could merge near-equal values
            prop_assume!(ties(x) == ties(y));
            let s = kendall_tau_triple(y, truth).unwrap();
            prop_assert_eq!((r.concordant, r.discordant), (s.concordant, s.discordant));
        }

        #[test]
        fn negating_scores_negates_tau(x in proptest::array::uniform3(-100.0f64..100.0), truth in perm()) {
            prop_assume!(x[0] != x[1] && x[0] != x[2] && x[1] != x[2]);
            let r = kendall_tau_triple(x, truth).unwrap();
            let s = kendall_tau_triple(x.map(|v| -v), truth).unwrap();
            prop_assert_eq!(r.tau, -s.tau);
            prop_assert_eq!(r.concordant + r.discordant, 3);
        }

        #[test]
        fn correct_count_bounds(xs in proptest::collection::vec((proptest::array::uniform3(0.0f64..3.0), perm()), 1..30)) {
            let rs: Vec<TripleResult> = xs.iter().map(|(x, t)| kendall_tau_triple(*x, *t).unwrap()).collect();
            let s = kendall_tau_total(&rs).unwrap();
            prop_assert!(s.correct <= rs.len());
            prop_assert_eq!(s.correct == rs.len(), s.mean == 1.0);
            prop_assert!((-1.0..=1.0).contains(&s.mean));
        }
    }
}
