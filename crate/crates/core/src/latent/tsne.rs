//! Exact t-SNE: perplexity-calibrated Gaussian affinities in the input
//! space, Student-t affinities in the plane, gradient descent with momentum
//! and per-coordinate gains.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

const SEARCH_TOL: f64 = 1e-5;
const SEARCH_ITERS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    /// Row-stochastic conditional affinities `p_{j|i}`, n x n.
    pub conditional: Vec<f64>,
    /// Achieved Shannon entropy (nats) per row.
    pub entropy: Vec<f64>,
    /// Precision `1 / (2 sigma_i^2)` per row.
    pub beta: Vec<f64>,
}

/// Entropy and row of `p_{j|i}` for squared distances `d` at precision `beta`.
fn row_at(d: &[f64], i: usize, beta: f64, row: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut z = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r = if j == i { 0.0 } else { math::exp(-beta * (d[j] - dmin)) };
        z += *r;
    }
    let mut h = 0.0;
    for (j, r) in row.iter_mut().enumerate() {
        *r /= z;
        if j != i && *r > 0.0 {
            h -= *r * math::ln(*r);
        }
    }
    h
}

/// Binary search per point for the Gaussian precision whose conditional
/// distribution has entropy `ln(perplexity)`.
pub fn calibrate_affinities(points: &Tensor, perplexity: f64) -> Result<Calibration> {
    let (n, _) = points.dims2("tsne")?;
    if n < 3 {
        return Err(TensorError::Invalid("t-SNE needs at least 3 points".into()));
    }
    if !(perplexity > 0.0 && perplexity < (n - 1) as f64) {
        return Err(TensorError::Invalid(alloc::format!("perplexity {perplexity} must lie in (0, {})", n - 1)));
    }
    let target = math::ln(perplexity);
    let sq = crate::loss::pairwise_squared(points)?;
    let mut cond = alloc::vec![0.0; n * n];
    let mut entropy = alloc::vec![0.0; n];
    let mut betas = alloc::vec![1.0; n];
    for i in 0..n {
        let d = &sq[i * n..(i + 1) * n];
        let row = &mut cond[i * n..(i + 1) * n];
        let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
        let mut beta = 1.0;
        let mut h = row_at(d, i, beta, row);
        for _ in 0..SEARCH_ITERS {
            if (h - target).abs() <= SEARCH_TOL {
                break;
            }
            // Entropy falls as beta grows.
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
            h = row_at(d, i, beta, row);
        }
        entropy[i] = h;
        betas[i] = beta;
    }
    Ok(Calibration {
        conditional: cond,
        entropy,
        beta: betas,
    })
}

/// Embed `points` (n, d) in the plane. The perplexity is clamped to
/// `(n - 1) / 3`.
pub fn tsne(points: &Tensor, cfg: &TsneConfig) -> Result<Tensor> {
    let (n, _) = points.dims2("tsne")?;
    let perplexity = cfg.perplexity.min((n as f64 - 1.0) / 3.0);
    let cal = calibrate_affinities(points, perplexity)?;
    let mut p = alloc::vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cal.conditional[i * n + j] + cal.conditional[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = Normal::new(0.0, 1e-2).expect("valid std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut update = alloc::vec![0.0; 2 * n];
    let mut gains = alloc::vec![1.0f64; 2 * n];
    let mut num = alloc::vec![0.0; n * n];
    let mut grad = alloc::vec![0.0; 2 * n];

    for it in 0..cfg.iterations {
        let exaggeration = if it < cfg.exaggeration_iters { cfg.early_exaggeration } else { 1.0 };
        let momentum = if it < cfg.exaggeration_iters { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let (dx, dy) = (y[2 * i] - y[2 * j], y[2 * i + 1] - y[2 * j + 1]);
                let v = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = v;
                num[j * n + i] = v;
                z += 2.0 * v;
            }
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = (num[i * n + j] / z).max(1e-12);
                let m = 4.0 * (exaggeration * p[i * n + j] - q) * num[i * n + j];
                grad[2 * i] += m * (y[2 * i] - y[2 * j]);
                grad[2 * i + 1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
        }
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= mean);
        }
    }
    Tensor::new([n, 2], y)
}
