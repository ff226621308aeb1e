//! Batch-wise semi-hard negative mining on latent means.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Result, Tensor, TensorError};

use super::TripletConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Squared Euclidean distance between rows `i` and `j`.
#[inline]
pub fn squared_distance(points: &Tensor, i: usize, j: usize) -> f64 {
    points
        .sample(i)
        .iter()
        .zip(points.sample(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

/// Full matrix of squared distances between rows.
pub fn pairwise_squared(points: &Tensor) -> Result<Vec<f64>> {
    let (n, _) = points.dims2("pairwise_squared")?;
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = squared_distance(points, i, j);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// For every ordered (anchor, positive) pair pick the negative closest to
/// the anchor inside the band `d(a,p) < d(a,n) < d(a,p) + margin`. When the
/// band is empty, fall back to the closest negative with `d(a,n) > d(a,p)`;
/// when there is none, the pair is skipped. Ties go to the lowest index.
pub fn mine_semi_hard(mu: &Tensor, labels: &[usize], cfg: &TripletConfig) -> Result<Vec<Triplet>> {
    let (n, _) = mu.dims2("mine_semi_hard")?;
    if labels.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "mine_semi_hard",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    let d = pairwise_squared(mu)?;
    let mut out = Vec::new();
    let mut lonely = 0usize;
    for a in 0..n {
        let mut has_positive = false;
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            has_positive = true;
            let dap = d[a * n + p];
            let upper = dap + cfg.margin;
            let mut band: Option<(usize, f64)> = None;
            let mut above: Option<(usize, f64)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let dan = d[a * n + neg];
                if dan <= dap {
                    continue;
                }
                if dan < upper && band.is_none_or(|(_, b)| dan < b) {
                    band = Some((neg, dan));
                }
                if above.is_none_or(|(_, b)| dan < b) {
                    above = Some((neg, dan));
                }
            }
            let best = band.or(above);
            if let Some((negative, _)) = best {
                out.push(Triplet {
                    anchor: a,
                    positive: p,
                    negative,
                });
            }
        }
        if !has_positive {
            lonely += 1;
        }
    }
    if lonely > 0 {
        log::warn!("{lonely} anchors have no same-class partner in the batch; no triplets for them");
    }
    Ok(out)
}
