//! Linear dimensionality reduction for image embeddings.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReducerMethod {
    #[default]
    Pca,
    LinearAutoencoder,
}

impl std::str::FromStr for ReducerMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pca" => Ok(ReducerMethod::Pca),
            "linear_autoencoder" | "autoencoder" => Ok(ReducerMethod::LinearAutoencoder),
            other => Err(Error::invalid(format!("unknown reducer {other:?}"))),
        }
    }
}

/// Training budget for the linear autoencoder (full-batch gradient descent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoencoderOptions {
    pub epochs: usize,
    /// Step size relative to the largest covariance eigenvalue.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for AutoencoderOptions {
    fn default() -> Self {
        AutoencoderOptions {
            epochs: 2000,
            learning_rate: 0.2,
            seed: 0,
        }
    }
}

/// A fitted linear map: `z = encoder · (x − mean)`,
/// reconstruction `x̂ = mean + decoder · z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reducer {
    pub method: ReducerMethod,
    pub input_dim: usize,
    pub output_dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `output_dim × input_dim`.
    pub encoder: Vec<f64>,
    /// Row-major `input_dim × output_dim`.
    pub decoder: Vec<f64>,
    /// Eigenvalues of the (1/n) covariance, descending. PCA only.
    pub eigenvalues: Vec<f64>,
}

fn to_matrix(vectors: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let dim = vectors.first().map_or(0, Vec::len);
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::Dimension(format!(
            "vector of length {} among length {dim}",
            v.len()
        )));
    }
    Ok(DMatrix::from_fn(vectors.len(), dim, |i, j| vectors[i][j]))
}

/// Rows minus their column mean, plus the mean.
fn center(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let n = x.nrows() as f64;
    let mean = DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n));
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= mean.transpose();
    }
    (xc, mean)
}

pub fn fit_reducer(vectors: &[Vec<f64>], k: usize, method: ReducerMethod) -> Result<Reducer> {
    fit_reducer_with(vectors, k, method, &AutoencoderOptions::default())
}

pub fn fit_reducer_with(
    vectors: &[Vec<f64>],
    k: usize,
    method: ReducerMethod,
    options: &AutoencoderOptions,
) -> Result<Reducer> {
    let x = to_matrix(vectors)?;
    let (n, dim) = x.shape();
    if k == 0 || k >= dim {
        return Err(Error::invalid(format!(
            "reduced dimension {k} must be in 1..{dim}"
        )));
    }
    if n < k + 1 {
        return Err(Error::invalid(format!(
            "need at least {} vectors to fit {k} components, got {n}",
            k + 1
        )));
    }
    if vectors.iter().all(|v| v == &vectors[0]) {
        return Err(Error::invalid("all input vectors are identical"));
    }
    let (xc, mean) = center(&x);
    let cov = xc.transpose() * &xc / n as f64;
    match method {
        ReducerMethod::Pca => Ok(fit_pca(&cov, mean, k)),
        ReducerMethod::LinearAutoencoder => Ok(fit_autoencoder(&cov, mean, k, options)),
    }
}

fn fit_pca(cov: &DMatrix<f64>, mean: DVector<f64>, k: usize) -> Reducer {
    let dim = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut encoder = Vec::with_capacity(k * dim);
    for &c in &order[..k] {
        let col = eig.eigenvectors.column(c);
        // sign: largest-magnitude coordinate positive
        let pivot = col.iter().cloned().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        encoder.extend(col.iter().map(|v| v * sign));
    }
    let enc = DMatrix::from_row_slice(k, dim, &encoder);
    let decoder = enc.transpose();
    Reducer {
        method: ReducerMethod::Pca,
        input_dim: dim,
        output_dim: k,
        mean: mean.iter().copied().collect(),
        encoder,
        decoder: row_major(&decoder),
        eigenvalues: order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect(),
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// Minimizes `tr((D E − I) C (D E − I)ᵀ)`, the mean squared reconstruction
/// error on centered data with covariance `C`.
fn fit_autoencoder(cov: &DMatrix<f64>, mean: DVector<f64>, k: usize, opt: &AutoencoderOptions) -> Reducer {
    let dim = cov.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    // Encoder weights along near-zero-variance directions barely move under
    // gradient descent, so whatever the init puts there stays; start tiny.
    let init = Normal::new(0.0, 1e-4 / (dim as f64).sqrt()).expect("valid normal");
    let mut enc = DMatrix::from_fn(k, dim, |_, _| init.sample(&mut rng));
    let mut dec = DMatrix::from_fn(dim, k, |_, _| init.sample(&mut rng));

    // unit top eigenvalue, so the step size does not depend on data scale
    let c = cov / top_eigenvalue(cov).max(f64::MIN_POSITIVE);
    let eye = DMatrix::<f64>::identity(dim, dim);
    for _ in 0..opt.epochs {
        let resid = &dec * &enc - &eye;
        let rc = &resid * &c;
        let g_dec = &rc * enc.transpose() * 2.0;
        let g_enc = dec.transpose() * &rc * 2.0;
        dec -= g_dec * opt.learning_rate;
        enc -= g_enc * opt.learning_rate;
    }
    Reducer {
        method: ReducerMethod::LinearAutoencoder,
        input_dim: dim,
        output_dim: k,
        mean: mean.iter().copied().collect(),
        encoder: row_major(&enc),
        decoder: row_major(&dec),
        eigenvalues: Vec::new(),
    }
}

/// Power iteration; a few dozen steps are plenty for a step-size bound.
fn top_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut v = DVector::from_element(m.nrows(), 1.0 / (m.nrows() as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..100 {
        let w = m * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

impl Reducer {
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!(
                "reducer expects {} inputs, got {}",
                self.input_dim,
                x.len()
            )));
        }
        Ok((0..self.output_dim)
            .map(|r| {
                let row = &self.encoder[r * self.input_dim..(r + 1) * self.input_dim];
                row.iter()
                    .zip(x.iter().zip(&self.mean))
                    .map(|(w, (xi, mi))| w * (xi - mi))
                    .sum()
            })
            .collect())
    }

    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.output_dim {
            return Err(Error::Dimension(format!(
                "reducer expects {} codes, got {}",
                self.output_dim,
                z.len()
            )));
        }
        Ok((0..self.input_dim)
            .map(|r| {
                let row = &self.decoder[r * self.output_dim..(r + 1) * self.output_dim];
                self.mean[r] + row.iter().zip(z).map(|(w, zi)| w * zi).sum::<f64>()
            })
            .collect())
    }

    /// Mean over rows of the squared reconstruction error.
    pub fn reconstruction_error(&self, vectors: &[Vec<f64>]) -> Result<f64> {
        if vectors.is_empty() {
            return Err(Error::empty("no vectors"));
        }
        let mut total = 0.0;
        for v in vectors {
            let back = self.reconstruct(&self.transform(v)?)?;
            total += v.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(total / vectors.len() as f64)
    }

    /// Fraction of total variance kept by the components (PCA only).
    pub fn explained_variance(&self) -> Option<f64> {
        if self.eigenvalues.is_empty() {
            return None;
        }
        let total: f64 = self.eigenvalues.iter().sum();
        let kept: f64 = self.eigenvalues[..self.output_dim].iter().sum();
        Some(if total > 0.0 { kept / total } else { 1.0 })
    }
}
