//! Frequency-regularized influence score per canonical feature.
//!
//! `score(f) = mean(N_S(s) for s in S_f) + lambda * N_P(p_f)`, where `N_S`
//! min-max normalizes over every sale in the catalog, `S_f` holds the sales
//! of products carrying `f`, `p_f = |S_f|` and `N_P` min-max normalizes over
//! the frequencies of all features.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::captions::FeaturePhrase;
use crate::corpus::{Catalog, MinMax};
use crate::error::{Error, Result};
use crate::simdedup::{FeatureSet, ProductFeatures};
use crate::util::sci6;

pub const DEFAULT_LAMBDA: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRecord {
    pub feature: FeaturePhrase,
    pub product_sales: Vec<f64>,
    pub mean_norm_sales: f64,
    pub frequency: usize,
    pub norm_frequency: f64,
    pub score: f64,
}

/// Records sorted by score descending, ties by feature ascending.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceRanking {
    pub records: Vec<InfluenceRecord>,
    pub lambda: f64,
}

fn ranking_order(a: &InfluenceRecord, b: &InfluenceRecord) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.feature.cmp(&b.feature))
}

pub fn influence_scores(
    catalog: &Catalog,
    features: &FeatureSet,
    product_features: &ProductFeatures,
    lambda: f64,
) -> Result<InfluenceRanking> {
    if catalog.is_empty() {
        return Err(Error::empty("catalog has no products"));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda {lambda} must be finite and >= 0")));
    }
    let sales_scale = MinMax::fit(&catalog.sales())?;

    let mut per_feature: Vec<Vec<f64>> = vec![Vec::new(); features.features.len()];
    for p in catalog.products() {
        let Some(list) = product_features.get(&p.id) else {
            continue;
        };
        for f in list {
            if let Ok(pos) = features.features.binary_search(f) {
                per_feature[pos].push(p.sales);
            }
        }
    }
    if let Some(pos) = per_feature.iter().position(Vec::is_empty) {
        return Err(Error::invalid(format!(
            "feature {:?} occurs in no product",
            features.features[pos].as_str()
        )));
    }

    let freqs: Vec<f64> = per_feature.iter().map(|s| s.len() as f64).collect();
    let freq_scale = MinMax::fit(&freqs)?;

    let mut records: Vec<InfluenceRecord> = features
        .features
        .iter()
        .zip(per_feature)
        .map(|(feature, sales)| {
            let mean_norm_sales =
                sales.iter().map(|&s| sales_scale.apply(s).get()).sum::<f64>() / sales.len() as f64;
            let frequency = sales.len();
            let norm_frequency = freq_scale.apply(frequency as f64).get();
            InfluenceRecord {
                feature: feature.clone(),
                product_sales: sales,
                mean_norm_sales,
                frequency,
                norm_frequency,
                score: mean_norm_sales + lambda * norm_frequency,
            }
        })
        .collect();
    records.sort_by(ranking_order);
    Ok(InfluenceRanking { records, lambda })
}

impl InfluenceRanking {
    pub fn get(&self, feature: &FeaturePhrase) -> Option<&InfluenceRecord> {
        self.records.iter().find(|r| &r.feature == feature)
    }

    /// Rank report: feature, frequency, mean_norm_sales, norm_frequency, score.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["feature", "frequency", "mean_norm_sales", "norm_frequency", "score"])?;
        for r in &self.records {
            w.write_record([
                r.feature.to_string(),
                r.frequency.to_string(),
                sci6(r.mean_norm_sales),
                sci6(r.norm_frequency),
                sci6(r.score),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

pub type RecordFilter<'a> = &'a dyn Fn(&InfluenceRecord) -> bool;

/// The first and last `count` records that pass `filter`, in ranking order.
pub fn top_bottom<'r>(
    ranking: &'r InfluenceRanking,
    count: usize,
    filter: Option<RecordFilter<'_>>,
) -> Result<(Vec<&'r InfluenceRecord>, Vec<&'r InfluenceRecord>)> {
    let kept: Vec<&InfluenceRecord> = ranking
        .records
        .iter()
        .filter(|r| filter.is_none_or(|f| f(r)))
        .collect();
    if count > kept.len() {
        return Err(Error::invalid(format!(
            "requested {count} records per side but only {} pass the filter (short by {})",
            kept.len(),
            count - kept.len()
        )));
    }
    Ok((kept[..count].to_vec(), kept[kept.len() - count..].to_vec()))
}
