//! Synthetic catalogs with planted feature effects.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::captions::{clean_caption, FeaturePhrase};
use crate::corpus::{Catalog, Product};
use crate::error::{Error, Result};
use crate::labeler::fit_thresholds;
use crate::util::{derive_seed, write_atomic};

/// A planted caption feature: every variant maps onto `name` and adds
/// `effect` to expected sales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureTemplate {
    pub name: String,
    pub variants: Vec<String>,
    pub effect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalSpec {
    pub name: String,
    pub levels: Vec<String>,
    /// Per-level sales effect, same length as `levels`. Levels of effectful
    /// attributes also shape the generated image bytes.
    #[serde(default)]
    pub effects: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    /// Sales effect per unit.
    #[serde(default)]
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n_products: usize,
    pub seed: u64,
    pub base_sales: f64,
    pub noise_sd: f64,
    pub features: Vec<FeatureTemplate>,
    pub min_features: usize,
    pub max_features: usize,
    #[serde(default)]
    pub categoricals: Vec<CategoricalSpec>,
    #[serde(default)]
    pub numerics: Vec<NumericSpec>,
    /// Give products an `images/<id>.bin` reference (see [`render_images`]).
    #[serde(default)]
    pub images: bool,
}

const SYLLABLES: [&str; 24] = [
    "ba", "ke", "lo", "mi", "nu", "ra", "so", "ti", "ve", "za", "do", "fe", "ga", "hi", "jo", "ku", "le", "ma",
    "ne", "po", "ri", "su", "ta", "yo",
];

/// `count` distinct pronounceable pseudo-words.
pub fn pseudo_words(count: usize, rng: &mut impl Rng) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=3);
        let w: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// Features of `words_each` unique words; variants are rotations of the
/// word order, so every variant shares its token set with the canonical
/// name and no token is shared across features.
pub fn reordered_features(effects: &[f64], words_each: usize, variants: usize, rng: &mut impl Rng) -> Vec<FeatureTemplate> {
    let words = pseudo_words(effects.len() * words_each, rng);
    effects
        .iter()
        .zip(words.chunks(words_each))
        .map(|(&effect, w)| {
            let variants = (0..variants.clamp(1, words_each))
                .map(|r| {
                    let mut v = w.to_vec();
                    v.rotate_left(r);
                    v.join(" ")
                })
                .collect();
            FeatureTemplate {
                name: w.join(" "),
                variants,
                effect,
            }
        })
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1).max(1) as f64).collect()
}

fn levels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:02}")).collect()
}

impl SynthSpec {
    /// Three-level `segment` attribute carries most of the signal; captions
    /// add smaller planted effects. Bayes accuracy for three classes is
    /// about 0.95.
    pub fn planted_signal(n_products: usize, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-vocabulary"));
        SynthSpec {
            n_products,
            seed,
            base_sales: 30.0,
            noise_sd: 2.6,
            features: reordered_features(&linspace(-1.0, 1.0, 30), 2, 2, &mut rng),
            min_features: 2,
            max_features: 5,
            categoricals: vec![
                CategoricalSpec {
                    name: "segment".into(),
                    levels: vec!["budget".into(), "core".into(), "premium".into()],
                    effects: Some(vec![0.0, 10.0, 20.0]),
                },
                CategoricalSpec {
                    name: "product_type".into(),
                    levels: levels("type", 24),
                    effects: None,
                },
                CategoricalSpec {
                    name: "colour".into(),
                    levels: ["black", "white", "red", "blue", "green", "beige"].map(String::from).to_vec(),
                    effects: None,
                },
            ],
            numerics: vec![NumericSpec {
                name: "price".into(),
                min: 10.0,
                max: 100.0,
                slope: 0.0,
            }],
            images: true,
        }
    }

    /// Sales driven by caption features alone, for ablation studies.
    pub fn feature_driven(n_products: usize, seed: u64) -> SynthSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synth-vocabulary"));
        SynthSpec {
            n_products,
            seed,
            base_sales: 40.0,
            noise_sd: 2.0,
            features: reordered_features(&linspace(-8.0, 8.0, 40), 2, 2, &mut rng),
            min_features: 3,
            max_features: 6,
            categoricals: vec![CategoricalSpec {
                name: "product_type".into(),
                levels: levels("type", 24),
                effects: None,
            }],
            numerics: vec![NumericSpec {
                name: "price".into(),
                min: 10.0,
                max: 100.0,
                slope: 0.0,
            }],
            images: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_products < 9 {
            return Err(Error::invalid("need at least 9 products (3 per class)"));
        }
        if !(self.base_sales.is_finite() && self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid("base_sales and noise_sd must be finite, noise_sd >= 0"));
        }
        if self.features.is_empty() {
            return Err(Error::invalid("feature vocabulary is empty"));
        }
        if self.min_features == 0 || self.min_features > self.max_features || self.max_features > self.features.len() {
            return Err(Error::invalid(format!(
                "need 1 <= min_features <= max_features <= {}",
                self.features.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for f in &self.features {
            if !f.effect.is_finite() {
                return Err(Error::invalid(format!("feature {:?} has a non-finite effect", f.name)));
            }
            if f.variants.is_empty() {
                return Err(Error::invalid(format!("feature {:?} has no variants", f.name)));
            }
            let own: BTreeSet<&String> = std::iter::once(&f.name).chain(&f.variants).collect();
            for v in own {
                let cleaned = clean_caption(v);
                if cleaned.len() != 1 || cleaned[0].as_str() != v {
                    return Err(Error::invalid(format!("variant {v:?} is not a clean single phrase")));
                }
                if !seen.insert(v.as_str()) {
                    return Err(Error::invalid(format!("phrase {v:?} is used twice")));
                }
            }
        }
        let mut names = BTreeSet::new();
        for c in &self.categoricals {
            if c.levels.is_empty() || !names.insert(c.name.as_str()) {
                return Err(Error::invalid(format!("categorical {:?} is empty or repeated", c.name)));
            }
            if let Some(e) = &c.effects {
                if e.len() != c.levels.len() || e.iter().any(|x| !x.is_finite()) {
                    return Err(Error::invalid(format!("categorical {:?} effects malformed", c.name)));
                }
            }
        }
        for n in &self.numerics {
            if !names.insert(n.name.as_str()) || !(n.min.is_finite() && n.max.is_finite() && n.min <= n.max && n.slope.is_finite()) {
                return Err(Error::invalid(format!("numeric {:?} malformed or repeated", n.name)));
            }
        }
        Ok(())
    }

    /// Every phrase mapped onto the name of its planted feature.
    pub fn variant_map(&self) -> BTreeMap<FeaturePhrase, usize> {
        let mut map = BTreeMap::new();
        for (i, f) in self.features.iter().enumerate() {
            for v in std::iter::once(&f.name).chain(&f.variants) {
                map.insert(FeaturePhrase::new(v.as_str()).expect("validated"), i);
            }
        }
        map
    }

    /// Planted groups as phrase sets, for checking synonym clustering.
    pub fn planted_groups(&self) -> Vec<BTreeSet<FeaturePhrase>> {
        self.features
            .iter()
            .map(|f| {
                f.variants
                    .iter()
                    .map(|v| FeaturePhrase::new(v.as_str()).expect("validated"))
                    .collect()
            })
            .collect()
    }

    /// Noise-free sales of a product under this spec.
    pub fn expected_sales(&self, product: &Product) -> Result<f64> {
        let mut mu = self.base_sales;
        for c in &self.categoricals {
            let Some(effects) = &c.effects else { continue };
            let level = product
                .categoricals
                .get(&c.name)
                .ok_or_else(|| Error::invalid(format!("{} lacks {:?}", product.id, c.name)))?;
            let at = c
                .levels
                .iter()
                .position(|l| l == level)
                .ok_or_else(|| Error::invalid(format!("{} has unknown level {level:?}", product.id)))?;
            mu += effects[at];
        }
        for n in &self.numerics {
            let v = product
                .numerics
                .get(&n.name)
                .ok_or_else(|| Error::invalid(format!("{} lacks {:?}", product.id, n.name)))?;
            mu += n.slope * v;
        }
        let map = self.variant_map();
        let mut hit = BTreeSet::new();
        for phrase in clean_caption(&product.caption) {
            let f = map
                .get(&phrase)
                .ok_or_else(|| Error::invalid(format!("{}: phrase {:?} not planted", product.id, phrase.as_str())))?;
            if hit.insert(*f) {
                mu += self.features[*f].effect;
            }
        }
        Ok(mu)
    }
}

/// Draws a catalog. Deterministic per `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Catalog> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth-products"));
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let width = (spec.n_products.max(1) as f64).log10().floor() as usize + 1;
    let mut products = Vec::with_capacity(spec.n_products);
    for i in 0..spec.n_products {
        let id = format!("p{i:0width$}");
        let mut mu = spec.base_sales;
        let mut categoricals = BTreeMap::new();
        for c in &spec.categoricals {
            let at = rng.random_range(0..c.levels.len());
            if let Some(e) = &c.effects {
                mu += e[at];
            }
            categoricals.insert(c.name.clone(), c.levels[at].clone());
        }
        let mut numerics = BTreeMap::new();
        for n in &spec.numerics {
            let v = if n.max > n.min { rng.random_range(n.min..n.max) } else { n.min };
            mu += n.slope * v;
            numerics.insert(n.name.clone(), v);
        }
        let k = rng.random_range(spec.min_features..=spec.max_features);
        let mut pieces = Vec::with_capacity(k);
        for f in index::sample(&mut rng, spec.features.len(), k) {
            let t = &spec.features[f];
            mu += t.effect;
            pieces.push(t.variants.choose(&mut rng).expect("validated").clone());
        }
        let sales = (mu + noise.sample(&mut rng)).max(0.0);
        products.push(Product {
            image_ref: if spec.images { format!("images/{id}.bin") } else { String::new() },
            id,
            caption: pieces.join(", "),
            sales,
            categoricals,
            numerics,
        });
    }
    Catalog::new(products)
}

const IMAGE_BYTES: usize = 512;

/// Writes one deterministic byte blob per product under `root`. Bytes come
/// mostly from a small palette keyed by the product's levels of effectful
/// categoricals, so image embeddings carry the same signal.
pub fn render_images(spec: &SynthSpec, catalog: &Catalog, root: &Path) -> Result<()> {
    for p in catalog.products() {
        if p.image_ref.is_empty() {
            continue;
        }
        let key: Vec<&str> = spec
            .categoricals
            .iter()
            .filter(|c| c.effects.is_some())
            .filter_map(|c| p.categoricals.get(&c.name).map(String::as_str))
            .collect();
        let mut palette_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("palette:{}", key.join("|"))));
        let palette: Vec<u8> = (0..8).map(|_| palette_rng.random()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("image:{}", p.id)));
        let bytes: Vec<u8> = (0..IMAGE_BYTES)
            .map(|_| {
                if rng.random_bool(0.7) {
                    *palette.choose(&mut rng).expect("non-empty")
                } else {
                    rng.random()
                }
            })
            .collect();
        let path = root.join(&p.image_ref);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        write_atomic(&path, &bytes)?;
    }
    Ok(())
}

/// Accuracy of the classifier that knows each product's expected sales and
/// the noise law, under quantile classes fitted to the catalog's sales.
pub fn bayes_accuracy(spec: &SynthSpec, catalog: &Catalog, class_count: u8) -> Result<f64> {
    let thresholds = fit_thresholds(&catalog.sales(), class_count)?;
    let mut total = 0.0;
    for p in catalog.products() {
        let mu = spec.expected_sales(p)?;
        // sales are clipped at 0 and every cut point is >= 0, so the CDF of
        // the clipped value at a cut point equals the unclipped one
        let cdf = |t: f64| -> f64 {
            if spec.noise_sd == 0.0 {
                if mu.max(0.0) <= t { 1.0 } else { 0.0 }
            } else {
                NormalDist::new(mu, spec.noise_sd).expect("validated").cdf(t)
            }
        };
        let mut prev = 0.0;
        let mut best: f64 = 0.0;
        for &t in &thresholds.cut_points {
            let c = cdf(t);
            best = best.max(c - prev);
            prev = c;
        }
        best = best.max(1.0 - prev);
        total += best;
    }
    Ok(total / catalog.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captions::build_universe;
    use crate::labeler::{assign_all, class_counts};
    use crate::simdedup::{cluster_synonyms, DedupConfig};

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec::planted_signal(120, 5);
        let a = generate(&spec).unwrap().to_jsonl();
        let b = generate(&spec).unwrap().to_jsonl();
        assert_eq!(a, b);
        let c = generate(&SynthSpec::planted_signal(120, 6)).unwrap().to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_noise_single_positive_feature() {
        let spec = SynthSpec {
            n_products: 60,
            seed: 3,
            base_sales: 10.0,
            noise_sd: 0.0,
            features: vec![
                FeatureTemplate {
                    name: "gold buttons".into(),
                    variants: vec!["gold buttons".into(), "buttons gold".into()],
                    effect: 5.0,
                },
                FeatureTemplate {
                    name: "plain hem".into(),
                    variants: vec!["plain hem".into()],
                    effect: 0.0,
                },
                FeatureTemplate {
                    name: "round neck".into(),
                    variants: vec!["round neck".into()],
                    effect: 0.0,
                },
            ],
            min_features: 1,
            max_features: 2,
            categoricals: vec![],
            numerics: vec![],
            images: false,
        };
        let cat = generate(&spec).unwrap();
        let has = |p: &Product| p.caption.contains("gold");
        let with: Vec<f64> = cat.products().iter().filter(|p| has(p)).map(|p| p.sales).collect();
        let without: Vec<f64> = cat.products().iter().filter(|p| !has(p)).map(|p| p.sales).collect();
        assert!(!with.is_empty() && !without.is_empty());
        let lo = with.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = without.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo > hi);
        for p in cat.products() {
            assert_eq!(spec.expected_sales(p).unwrap(), p.sales);
        }
        assert_eq!(bayes_accuracy(&spec, &cat, 3).unwrap(), 1.0);
    }

    #[test]
    fn clustering_recovers_planted_groups() {
        let spec = SynthSpec::feature_driven(400, 2);
        let cat = generate(&spec).unwrap();
        let universe = build_universe(&cat);
        let planted = spec.planted_groups();
        for g in &planted {
            for v in g {
                assert!(universe.contains(v), "{v} missing");
            }
        }
        let groups = cluster_synonyms(&universe, &DedupConfig::default()).unwrap();
        let found: BTreeSet<BTreeSet<FeaturePhrase>> =
            groups.into_iter().map(|g| g.members.into_iter().collect()).collect();
        let want: BTreeSet<BTreeSet<FeaturePhrase>> = planted.into_iter().collect();
        assert_eq!(found, want);
    }

    #[test]
    fn planted_signal_is_near_bayes_target() {
        let spec = SynthSpec::planted_signal(1000, 0);
        let cat = generate(&spec).unwrap();
        let acc = bayes_accuracy(&spec, &cat, 3).unwrap();
        assert!((0.93..=0.97).contains(&acc), "bayes accuracy {acc}");
        let t = fit_thresholds(&cat.sales(), 3).unwrap();
        let counts = class_counts(&assign_all(&cat.sales(), &t), 3);
        assert!(counts.iter().all(|&c| c >= 3));
    }

    #[test]
    fn images_are_deterministic() {
        let spec = SynthSpec::planted_signal(12, 1);
        let cat = generate(&spec).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        render_images(&spec, &cat, a.path()).unwrap();
        render_images(&spec, &cat, b.path()).unwrap();
        for p in cat.products() {
            let x = std::fs::read(a.path().join(&p.image_ref)).unwrap();
            let y = std::fs::read(b.path().join(&p.image_ref)).unwrap();
            assert_eq!(x.len(), IMAGE_BYTES);
            assert_eq!(x, y);
        }
    }

    #[test]
    fn spec_validation() {
        let good = SynthSpec::feature_driven(50, 0);
        good.validate().unwrap();
        let mut s = good.clone();
        s.n_products = 5;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.features[0].effect = f64::NAN;
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.features[0].variants.push("Not, clean".into());
        assert!(s.validate().is_err());
        let mut s = good.clone();
        s.max_features = 100;
        assert!(s.validate().is_err());
        let json = serde_json::to_string(&good).unwrap();
        assert_eq!(serde_json::from_str::<SynthSpec>(&json).unwrap(), good);
    }
}
