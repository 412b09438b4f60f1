//! Equal-quantile sales classes.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CLASSES: u8 = 3;

/// Sales class in `1..=C`; higher means more sales.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SalesClass(u8);

impl SalesClass {
    pub fn new(label: u8, class_count: u8) -> Result<Self> {
        if label == 0 || label > class_count {
            return Err(Error::invalid(format!(
                "class label {label} outside 1..={class_count}"
            )));
        }
        Ok(SalesClass(label))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based index.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn from_index(index: usize) -> Self {
        SalesClass(index as u8 + 1)
    }
}

impl fmt::Display for SalesClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileThresholds {
    pub cut_points: Vec<f64>,
    pub class_count: u8,
}

pub fn validate_class_count(c: u8) -> Result<()> {
    if (3..=5).contains(&c) {
        Ok(())
    } else {
        Err(Error::invalid(format!("class count {c} must be 3, 4 or 5")))
    }
}

/// Linear-interpolation quantile of sorted data at probability `q`
/// (rank position `(n - 1) * q`).
fn interpolated_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Cut points at the `j / c` quantiles for `j = 1..c`.
pub fn fit_thresholds(sales: &[f64], c: u8) -> Result<QuantileThresholds> {
    validate_class_count(c)?;
    if sales.len() < c as usize {
        return Err(Error::invalid(format!(
            "{} sales values cannot fill {c} classes",
            sales.len()
        )));
    }
    if let Some(bad) = sales.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("sales value {bad} is not finite")));
    }
    let mut sorted = sales.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut_points = (1..c)
        .map(|j| interpolated_quantile(&sorted, j as f64 / c as f64))
        .collect();
    Ok(QuantileThresholds {
        cut_points,
        class_count: c,
    })
}

/// `1 +` the number of cut points strictly below the sale, so a sale equal
/// to a cut point stays in the lower class.
pub fn assign_class(sale: f64, thresholds: &QuantileThresholds) -> SalesClass {
    SalesClass(1 + thresholds.cut_points.iter().filter(|&&t| t < sale).count() as u8)
}

pub fn assign_all(sales: &[f64], thresholds: &QuantileThresholds) -> Vec<SalesClass> {
    sales.iter().map(|&s| assign_class(s, thresholds)).collect()
}

pub fn class_counts(labels: &[SalesClass], class_count: u8) -> Vec<usize> {
    let mut counts = vec![0; class_count as usize];
    for l in labels {
        counts[l.index()] += 1;
    }
    counts
}

/// Largest relative deviation of a class count from the balanced size.
pub fn imbalance(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let ideal = n as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - ideal).abs() / ideal)
        .fold(0.0, f64::max)
}

/// Labels plus a warning when classes drift more than 10% from balance.
pub fn label_with_report(sales: &[f64], thresholds: &QuantileThresholds) -> (Vec<SalesClass>, Vec<usize>) {
    let labels = assign_all(sales, thresholds);
    let counts = class_counts(&labels, thresholds.class_count);
    let dev = imbalance(&counts);
    if dev > 0.10 {
        log::warn!(
            "class counts {counts:?} deviate {:.1}% from balance (duplicate sales values?)",
            dev * 100.0
        );
    }
    (labels, counts)
}
