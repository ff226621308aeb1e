//! Isotropic Gaussian kernel density estimates with cross-validated bandwidth.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Label;
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

pub const DEFAULT_FOLDS: usize = 5;
pub const GRID_POINTS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    pub class: Label,
    pub bandwidth: f64,
    /// (n, d) kernel centers.
    pub points: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Log density of the equal-weight mixture of `N(c, h^2 I)` over the rows
/// of `centers`, evaluated at `z`.
fn mixture_log_density(centers: &[&[f64]], h: f64, z: &[f64]) -> f64 {
    let d = z.len() as f64;
    let inv = 1.0 / (2.0 * h * h);
    let terms: Vec<f64> = centers.iter().map(|c| -sq_dist(c, z) * inv).collect();
    math::log_sum_exp(&terms) - math::ln(centers.len() as f64) - 0.5 * d * math::ln(2.0 * core::f64::consts::PI * h * h)
}

impl KdeModel {
    pub fn new(class: Label, bandwidth: f64, points: Tensor) -> Result<KdeModel> {
        let (n, _) = points.dims2("kde")?;
        if n < 2 {
            return Err(TensorError::Invalid("a KDE needs at least two points".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(TensorError::Invalid(alloc::format!("bandwidth must be positive, got {bandwidth}")));
        }
        Ok(KdeModel {
            class,
            bandwidth,
            points,
        })
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self) -> Vec<&[f64]> {
        (0..self.len()).map(|i| self.points.sample(i)).collect()
    }

    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(TensorError::ShapeMismatch {
                op: "kde_log_density",
                lhs: alloc::vec![self.dim()],
                rhs: alloc::vec![z.len()],
            });
        }
        Ok(mixture_log_density(&self.rows(), self.bandwidth, z))
    }

    pub fn density(&self, z: &[f64]) -> Result<f64> {
        self.log_density(z).map(math::exp)
    }

    /// Exact mixture draws: a uniformly chosen center plus `N(0, h^2 I)`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            let c = self.points.sample(rng.random_range(0..self.len()));
            for &v in c {
                let e: f64 = StandardNormal.sample(rng);
                out.push(v + self.bandwidth * e);
            }
        }
        Tensor::new([n, d], out).expect("sized above")
    }
}

/// `count` log-spaced bandwidths over `[0.05, 5] * median pairwise distance / sqrt(d)`.
pub fn bandwidth_grid(points: &Tensor, count: usize) -> Result<Vec<f64>> {
    let (n, d) = points.dims2("bandwidth_grid")?;
    let mut dists = Vec::with_capacity(n * (n.saturating_sub(1)) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(math::sqrt(sq_dist(points.sample(i), points.sample(j))));
        }
    }
    if dists.is_empty() {
        return Err(TensorError::Invalid("bandwidth grid needs at least two points".into()));
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let median = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if !(median > 0.0) {
        return Err(TensorError::Invalid("points are degenerate: median pairwise distance is zero".into()));
    }
    let scale = median / math::sqrt(d as f64);
    let (a, b) = (math::ln(0.05 * scale), math::ln(5.0 * scale));
    Ok(math::linspace(a, b, count).into_iter().map(math::exp).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdeFit {
    pub model: KdeModel,
    /// `(bandwidth, mean held-out log-likelihood)` per grid value.
    pub cv_curve: Vec<(f64, f64)>,
}

impl KdeFit {
    /// Index of the chosen bandwidth in the grid.
    pub fn selected_index(&self) -> usize {
        self.cv_curve
            .iter()
            .position(|&(h, _)| h == self.model.bandwidth)
            .unwrap_or(0)
    }
}

/// Choose the bandwidth from `grid` maximizing the mean held-out
/// log-likelihood over `folds` folds; ties go to the smaller bandwidth.
pub fn fit_kde(points: &Tensor, class: Label, grid: &[f64], folds: usize, seed: u64) -> Result<KdeFit> {
    let (n, _) = points.dims2("fit_kde")?;
    if folds < 2 {
        return Err(TensorError::Invalid("cross validation needs at least 2 folds".into()));
    }
    if n < folds {
        return Err(TensorError::Invalid(alloc::format!("{n} points cannot fill {folds} folds")));
    }
    if grid.is_empty() || grid.iter().any(|h| !(*h > 0.0)) {
        return Err(TensorError::Invalid("bandwidth grid must be non-empty and positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of: Vec<usize> = {
        let mut f = alloc::vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut curve = Vec::with_capacity(sorted.len());
    let mut best: Option<(f64, f64)> = None;
    for &h in &sorted {
        let mut fold_total = 0.0;
        for k in 0..folds {
            let train: Vec<&[f64]> = (0..n).filter(|&i| fold_of[i] != k).map(|i| points.sample(i)).collect();
            let held: Vec<usize> = (0..n).filter(|&i| fold_of[i] == k).collect();
            let ll: f64 = held
                .iter()
                .map(|&i| mixture_log_density(&train, h, points.sample(i)))
                .sum();
            fold_total += ll / held.len() as f64;
        }
        let score = fold_total / folds as f64;
        curve.push((h, score));
        if score.is_finite() && best.is_none_or(|(_, s)| score > s) {
            best = Some((h, score));
        }
    }
    let (h, _) = best.ok_or_else(|| TensorError::Invalid("every candidate bandwidth gave a non-finite likelihood".into()))?;
    Ok(KdeFit {
        model: KdeModel::new(class, h, points.clone())?,
        cv_curve: curve,
    })
}

/// One KDE per class over a shared latent dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassKdeSet {
    pub latent_dim: usize,
    pub models: Vec<KdeModel>,
}

impl ClassKdeSet {
    pub fn new(models: Vec<KdeModel>) -> Result<ClassKdeSet> {
        let d = models
            .first()
            .map(KdeModel::dim)
            .ok_or_else(|| TensorError::Invalid("no class models".into()))?;
        if models.iter().any(|m| m.dim() != d) {
            return Err(TensorError::Invalid("class KDE models disagree on latent dimension".into()));
        }
        Ok(ClassKdeSet { latent_dim: d, models })
    }

    pub fn get(&self, class: Label) -> Option<&KdeModel> {
        self.models.iter().find(|m| m.class == class)
    }

    /// Fit one model per class present in `labels`, each on its own rows.
    pub fn fit(points: &Tensor, labels: &[Label], folds: usize, seed: u64) -> Result<ClassKdeSet> {
        ClassKdeSet::new(fit_class_kdes(points, labels, folds, seed)?.into_iter().map(|f| f.model).collect())
    }
}

/// Per-class fits with their cross-validation curves, in class order.
/// Class `k` uses fold seed `seed ^ k`.
pub fn fit_class_kdes(points: &Tensor, labels: &[Label], folds: usize, seed: u64) -> Result<Vec<KdeFit>> {
    let (n, d) = points.dims2("fit_class_kdes")?;
    if labels.len() != n {
        return Err(TensorError::Invalid("one label per point required".into()));
    }
    let mut fits = Vec::new();
    for class in Label::ALL {
        let rows: Vec<&[f64]> = (0..n).filter(|&i| labels[i] == class).map(|i| points.sample(i)).collect();
        if rows.is_empty() {
            continue;
        }
        let pts = Tensor::new([rows.len(), d], rows.concat())?;
        let grid = bandwidth_grid(&pts, GRID_POINTS)?;
        let folds = folds.min(rows.len());
        fits.push(fit_kde(&pts, class, &grid, folds, seed ^ class.index() as u64)?);
    }
    if fits.is_empty() {
        return Err(TensorError::Invalid("no points to fit".into()));
    }
    Ok(fits)
}
