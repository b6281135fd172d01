//! PCA projection, Mahalanobis anomaly scoring and the silhouette score.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{Result, TransferError};

/// Row-major `n × d` view as a matrix, in f64.
fn matrix(rows: &[f32], dim: usize) -> DMatrix<f64> {
    let n = rows.len() / dim;
    DMatrix::from_row_iterator(n, dim, rows.iter().map(|&v| v as f64))
}

fn mean_and_covariance(x: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows() as f64;
    let mean = x.row_mean().transpose();
    let mut centred = x.clone();
    for mut row in centred.row_iter_mut() {
        row -= mean.transpose();
    }
    // population convention
    let cov = centred.transpose() * &centred / n;
    (mean, cov)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    /// Two orthonormal rows of length `dim`, row-major.
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
    /// Population variance along each component, descending.
    pub explained_variance: [f64; 2],
}

/// Top two principal axes of the centred rows. Each axis is signed so that
/// its largest-magnitude entry is positive.
pub fn fit_projection(rows: &[f32], dim: usize) -> Result<Projection2D> {
    let n = rows.len() / dim.max(1);
    if dim == 0 || n < 3 {
        return Err(TransferError::TooFewPoints { needed: 3, found: n });
    }
    let x = matrix(rows, dim);
    let (mean, cov) = mean_and_covariance(&x);
    if cov.trace() <= 0.0 {
        return Err(TransferError::Degenerate("all points coincide".into()));
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| -> Vec<f64> {
        let col = eig.eigenvectors.column(order[k]);
        let pivot = col.iter().fold(0.0f64, |best, &v| if v.abs() > best.abs() { v } else { best });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        col.iter().map(|v| v * sign).collect()
    };
    let var = |k: usize| eig.eigenvalues[order[k]].max(0.0);
    Ok(Projection2D {
        components: [axis(0), axis(1)],
        mean: mean.iter().copied().collect(),
        explained_variance: [var(0), var(1)],
    })
}

impl Projection2D {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, rows: &[f32]) -> Vec<[f64; 2]> {
        rows.chunks_exact(self.dim())
            .map(|r| {
                let mut out = [0.0; 2];
                for (k, c) in self.components.iter().enumerate() {
                    out[k] = r.iter().zip(&self.mean).zip(c).map(|((&v, m), w)| (v as f64 - m) * w).sum();
                }
                out
            })
            .collect()
    }
}

/// Gaussian envelope of normal-condition embeddings.
#[derive(Clone, Debug)]
pub struct AnomalyModel {
    pub mean: Vec<f64>,
    /// Population covariance plus `ridge · I`, row-major.
    pub covariance: Vec<f64>,
    pub threshold: f64,
    pub ridge: f64,
    pub quantile: f64,
    chol: Cholesky<f64, nalgebra::Dyn>,
}

pub const DEFAULT_RIDGE: f64 = 1e-6;
pub const DEFAULT_QUANTILE: f64 = 0.99;

/// Linear-interpolation quantile of `values` (sorted copy, `q` in [0, 1]).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn fit_anomaly_model(reference: &[f32], dim: usize, ridge: f64, q: f64) -> Result<AnomalyModel> {
    if dim == 0 || reference.len() < dim {
        return Err(TransferError::EmptyReference);
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(TransferError::InvalidArgument(format!("quantile {q} outside [0, 1]")));
    }
    if !(ridge >= 0.0) {
        return Err(TransferError::InvalidArgument(format!("ridge {ridge} must be ≥ 0")));
    }
    let x = matrix(reference, dim);
    let (mean, mut cov) = mean_and_covariance(&x);
    for i in 0..dim {
        cov[(i, i)] += ridge;
    }
    let covariance: Vec<f64> = cov.transpose().iter().copied().collect();
    let chol = Cholesky::new(cov).ok_or_else(|| {
        TransferError::Degenerate("covariance is not positive definite; increase the ridge".into())
    })?;
    let mut model = AnomalyModel {
        mean: mean.iter().copied().collect(),
        covariance,
        threshold: 0.0,
        ridge,
        quantile: q,
        chol,
    };
    let scores = model.score(reference);
    model.threshold = quantile(&scores, q);
    Ok(model)
}

impl AnomalyModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `sqrt((z − μ)ᵀ (Σ + ridge·I)⁻¹ (z − μ))` per row.
    pub fn score(&self, rows: &[f32]) -> Vec<f64> {
        let l = self.chol.l();
        rows.chunks_exact(self.dim())
            .map(|r| {
                let d = DVector::from_iterator(self.dim(), r.iter().zip(&self.mean).map(|(&v, m)| v as f64 - m));
                let y = l.solve_lower_triangular(&d).expect("Cholesky factor has a positive diagonal");
                y.norm()
            })
            .collect()
    }

    pub fn flags(&self, scores: &[f64]) -> Vec<bool> {
        scores.iter().map(|&s| s > self.threshold).collect()
    }
}

/// Mean silhouette coefficient with Euclidean distances. A point alone in its
/// cluster scores 0.
pub fn silhouette(rows: &[f32], dim: usize, labels: &[usize]) -> Result<f64> {
    let n = labels.len();
    if rows.len() != n * dim {
        return Err(TransferError::InvalidArgument(format!(
            "{} labels for {} rows",
            n,
            rows.len() / dim.max(1)
        )));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let clusters = sizes.iter().filter(|&&s| s > 0).count();
    if clusters < 2 {
        return Err(TransferError::InvalidArgument(format!(
            "silhouette needs at least 2 clusters, got {clusters}"
        )));
    }
    let singletons = sizes.iter().filter(|&&s| s == 1).count();
    if singletons > 0 {
        warn!("{singletons} singleton cluster(s); their points score 0");
    }
    let x: Vec<f64> = rows.iter().map(|&v| v as f64).collect();
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = &x[i * dim..(i + 1) * dim];
        for j in 0..n {
            if i != j {
                let xj = &x[j * dim..(j + 1) * dim];
                let d2: f64 = xi.iter().zip(xj).map(|(a, b)| (a - b) * (a - b)).sum();
                sums[labels[j]] += d2.sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}
