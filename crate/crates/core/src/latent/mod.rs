//! Density estimation, sampling and 2-D projection of latent means.

mod kde;
mod pca;
mod tsne;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

pub use kde::{bandwidth_grid, fit_class_kdes, fit_kde, ClassKdeSet, KdeFit, KdeModel, DEFAULT_FOLDS, GRID_POINTS};
pub use pca::{pca, Pca};
pub use tsne::{calibrate_affinities, tsne, Calibration, TsneConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Pca,
    Tsne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub method: Method,
    /// (n, 2).
    pub coords: Tensor,
}

pub fn project(points: &Tensor, method: Method, tsne_cfg: &TsneConfig) -> Result<ProjectionResult> {
    let coords = match method {
        Method::Pca => pca(points, 2)?.project(points)?,
        Method::Tsne => tsne(points, tsne_cfg)?,
    };
    if !coords.all_finite() {
        return Err(TensorError::NonFinite { op: "project".into() });
    }
    Ok(ProjectionResult { method, coords })
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    math::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Mean silhouette coefficient under Euclidean distance. Points whose
/// cluster is a singleton score 0.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = points.dims2("silhouette")?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "silhouette",
            lhs: alloc::vec![n],
            rhs: alloc::vec![labels.len()],
        });
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = alloc::vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(TensorError::Invalid("silhouette needs at least two populated clusters".into()));
    }
    let mut total = 0.0;
    let mut sums = alloc::vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            if i != j {
                sums[labels[j]] += euclid(points.sample(i), points.sample(j));
            }
        }
        let own = labels[i];
        if sizes[own] < 2 {
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

/// Row-wise mean of `points` restricted to rows with `labels == class`.
pub fn class_centroid(points: &Tensor, labels: &[usize], class: usize) -> Option<Vec<f64>> {
    let d = points.shape().get(1).copied()?;
    let mut acc = alloc::vec![0.0; d];
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l == class {
            acc.iter_mut().zip(points.sample(i)).for_each(|(a, b)| *a += b);
            count += 1;
        }
    }
    (count > 0).then(|| acc.into_iter().map(|v| v / count as f64).collect())
}
