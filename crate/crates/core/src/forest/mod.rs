//! Random-forest classifier over encoded feature rows.

mod tree;

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encode::EncodedDataset;
use crate::error::{Error, Result};
use crate::labeler::{validate_class_count, SalesClass};
use crate::util::{derive_seed, write_atomic};

pub use tree::{Node, Tree};
use tree::TreeConfig;

const MODEL_MAGIC: &str = "TRENDLENS-FOREST";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// Features scored per split; `None` means `ceil(sqrt(dim))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::invalid("n_trees must be positive"));
        }
        if self.min_samples_split < 2 {
            return Err(Error::invalid("min_samples_split must be at least 2"));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::invalid("features_per_split must be positive"));
        }
        Ok(())
    }
}

/// Class-probability vector; index `i` is class `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution(pub Vec<f64>);

impl ClassDistribution {
    pub fn probabilities(&self) -> &[f64] {
        &self.0
    }

    /// Most probable class; ties go to the lower class.
    pub fn argmax(&self) -> SalesClass {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        SalesClass::from_index(best)
    }

    /// Expected class label, `sum_i p_i * i`.
    pub fn prediction_score(&self) -> f64 {
        self.0.iter().enumerate().map(|(i, p)| p * (i + 1) as f64).sum()
    }
}

/// Anything that maps a feature row to a class distribution.
pub trait Classifier {
    fn class_count(&self) -> u8;

    fn predict_proba(&self, row: &[f64]) -> Result<ClassDistribution>;

    fn predict(&self, row: &[f64]) -> Result<SalesClass> {
        Ok(self.predict_proba(row)?.argmax())
    }

    fn prediction_score(&self, row: &[f64]) -> Result<f64> {
        Ok(self.predict_proba(row)?.prediction_score())
    }
}

/// Fraction of rows whose predicted class equals the label.
pub fn evaluate_accuracy(model: &dyn Classifier, dataset: &EncodedDataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::empty("cannot evaluate on an empty dataset"));
    }
    let mut hits = 0usize;
    for (row, label) in dataset.rows.iter().zip(&dataset.labels) {
        if model.predict(&row.values)? == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dataset.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub class_count: u8,
    pub n_features: usize,
    pub layout_fingerprint: u64,
    pub provider_fingerprint: String,
    pub params: ForestParams,
    pub train_accuracy: f64,
    pub trees: Vec<Tree>,
}

impl Classifier for ForestModel {
    fn class_count(&self) -> u8 {
        self.class_count
    }

    /// Mean over trees of the leaf's class fractions.
    fn predict_proba(&self, row: &[f64]) -> Result<ClassDistribution> {
        if row.len() != self.n_features {
            return Err(Error::Dimension(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features
            )));
        }
        let mut probs = vec![0.0; self.class_count as usize];
        for t in &self.trees {
            let counts = t.leaf_counts(row);
            let total: u32 = counts.iter().sum();
            for (p, &c) in probs.iter_mut().zip(counts) {
                *p += c as f64 / total as f64;
            }
        }
        let k = self.trees.len() as f64;
        probs.iter_mut().for_each(|p| *p /= k);
        Ok(ClassDistribution(probs))
    }
}

impl ForestModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = format!("{MODEL_MAGIC} v{MODEL_VERSION}\n");
        out.push_str(&serde_json::to_string(self)?);
        out.push('\n');
        write_atomic(path, out.as_bytes())
    }

    pub fn from_bytes(text: &str) -> Result<Self> {
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::Format("model file has no header".into()))?;
        let version = header
            .strip_prefix(MODEL_MAGIC)
            .and_then(|v| v.trim().strip_prefix('v'))
            .ok_or_else(|| Error::Format(format!("not a forest model: {header:?}")))?;
        if version != MODEL_VERSION.to_string() {
            return Err(Error::Format(format!(
                "model version {version} unsupported, expected {MODEL_VERSION}"
            )));
        }
        let model: ForestModel = serde_json::from_str(body)?;
        validate_class_count(model.class_count)?;
        let c = model.class_count as usize;
        for t in &model.trees {
            for n in &t.nodes {
                match n {
                    Node::Leaf { counts } if counts.len() != c || counts.iter().all(|&x| x == 0) => {
                        return Err(Error::Format("malformed leaf".into()))
                    }
                    Node::Split { feature, left, right, .. }
                        if *feature as usize >= model.n_features
                            || *left as usize >= t.nodes.len()
                            || *right as usize >= t.nodes.len() =>
                    {
                        return Err(Error::Format("malformed split".into()))
                    }
                    _ => {}
                }
            }
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_bytes(&std::fs::read_to_string(path)?)
    }

    /// Checks that a dataset was encoded with the layout this model was trained on.
    pub fn check_compatible(&self, dataset: &EncodedDataset) -> Result<()> {
        if dataset.layout.fingerprint() != self.layout_fingerprint {
            return Err(Error::Dimension("dataset layout differs from the model's".into()));
        }
        if dataset.provider_fingerprint != self.provider_fingerprint {
            return Err(Error::invalid(format!(
                "dataset embedded by {}, model trained on {}",
                dataset.provider_fingerprint, self.provider_fingerprint
            )));
        }
        Ok(())
    }
}

/// Trains a forest. Each tree draws from its own seed derived from
/// `params.seed`, so results do not depend on thread scheduling.
pub fn train(dataset: &EncodedDataset, class_count: u8, params: &ForestParams) -> Result<ForestModel> {
    params.validate()?;
    validate_class_count(class_count)?;
    if dataset.is_empty() {
        return Err(Error::empty("cannot train on an empty dataset"));
    }
    let n_features = dataset.layout.width();
    if n_features == 0 {
        return Err(Error::Dimension("dataset has zero feature columns".into()));
    }
    let labels: Vec<usize> = dataset.labels.iter().map(|l| l.index()).collect();
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::invalid("training data holds a single class"));
    }
    if let Some(bad) = dataset.labels.iter().find(|l| l.get() > class_count) {
        return Err(Error::invalid(format!("label {bad} exceeds class count {class_count}")));
    }
    let rows: Vec<Vec<f64>> = dataset.rows.iter().map(|r| r.values.clone()).collect();
    if rows.iter().any(|r| r.len() != n_features) {
        return Err(Error::Dimension("row width differs from layout".into()));
    }
    let config = TreeConfig {
        class_count: class_count as usize,
        max_depth: params.max_depth,
        min_samples_split: params.min_samples_split,
        features_per_split: params
            .features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .min(n_features),
    };
    let n = rows.len();
    let trees: Vec<Tree> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, &format!("tree-{t}")));
            let sample: Vec<usize> = if params.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            Tree::grow(&rows, &labels, sample, &config, &mut rng)
        })
        .collect();
    let mut model = ForestModel {
        class_count,
        n_features,
        layout_fingerprint: dataset.layout.fingerprint(),
        provider_fingerprint: dataset.provider_fingerprint.clone(),
        params: params.clone(),
        train_accuracy: 0.0,
        trees,
    };
    model.train_accuracy = evaluate_accuracy(&model, dataset)?;
    Ok(model)
}
