//! Principal component analysis through a symmetric eigendecomposition of
//! the sample covariance.

use alloc::vec::Vec;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::kernels::gemm;
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `k` rows of length `d`, unit norm, by decreasing variance.
    pub components: Vec<Vec<f64>>,
    /// All covariance eigenvalues, decreasing.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn total_variance(&self) -> f64 {
        self.eigenvalues.iter().sum()
    }

    /// Fraction of the total variance captured by the kept components.
    pub fn explained(&self) -> f64 {
        let k = self.components.len();
        self.eigenvalues[..k].iter().sum::<f64>() / self.total_variance()
    }

    /// (n, k) coordinates of `points` in the component basis.
    pub fn project(&self, points: &Tensor) -> Result<Tensor> {
        let (n, d) = points.dims2("pca_project")?;
        if d != self.mean.len() {
            return Err(TensorError::ShapeMismatch {
                op: "pca_project",
                lhs: alloc::vec![self.mean.len()],
                rhs: alloc::vec![d],
            });
        }
        let k = self.components.len();
        let mut out = Vec::with_capacity(n * k);
        for i in 0..n {
            let row = points.sample(i);
            for c in &self.components {
                out.push(row.iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum());
            }
        }
        Tensor::new([n, k], out)
    }

    /// Map coordinates back to the input space.
    pub fn reconstruct(&self, coords: &Tensor) -> Result<Tensor> {
        let (n, k) = coords.dims2("pca_reconstruct")?;
        let d = self.mean.len();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let c = coords.sample(i);
            for j in 0..d {
                out.push(self.mean[j] + (0..k).map(|t| c[t] * self.components[t][j]).sum::<f64>());
            }
        }
        Tensor::new([n, d], out)
    }
}

/// Top-`k` principal axes of `points` (n, d). Component signs are fixed so
/// that each component's largest-magnitude entry is positive.
pub fn pca(points: &Tensor, k: usize) -> Result<Pca> {
    let (n, d) = points.dims2("pca")?;
    if n < 2 || k == 0 || k > d {
        return Err(TensorError::Invalid(alloc::format!("pca needs n >= 2 and 1 <= k <= d (n={n}, d={d}, k={k})")));
    }
    let mut mean = alloc::vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(points.sample(i)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = points.data().to_vec();
    for row in centered.chunks_mut(d) {
        row.iter_mut().zip(&mean).for_each(|(x, m)| *x -= m);
    }
    let mut cov = alloc::vec![0.0; d * d];
    gemm(d, n, d, 1.0 / (n - 1) as f64, &centered, (1, d), &centered, (d, 1), 0.0, &mut cov, (d, 1));
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(d, d, &cov));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    if !(eigenvalues.iter().sum::<f64>() > 0.0) {
        return Err(TensorError::Invalid("degenerate covariance: all points coincide".into()));
    }
    let components = order[..k]
        .iter()
        .map(|&i| {
            let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let pivot = c.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        eigenvalues,
    })
}
