//! Reconstruction, latent and metric-learning loss terms and their weighted
//! combination `ssim + bce + w * (kl + triplet)`.

mod mining;
mod ssim;

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Var};
use crate::math;
use crate::model::ForwardVars;
use crate::tensor::{Result, Tensor, TensorError};

pub use mining::{mine_semi_hard, pairwise_squared, squared_distance, Triplet};
pub use ssim::{mean_ssim, ssim_loss, ssim_loss_value, ssim_map, SsimConfig, C1, C2};

/// Probability clamp applied before taking logs in the BCE term.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the KL and triplet terms.
    pub latent_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { latent_weight: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletConfig {
    /// Margin on squared Euclidean distances.
    pub margin: f64,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub triplet: TripletConfig,
    pub ssim: SsimConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weights.latent_weight > 0.0) {
            return Err(TensorError::Invalid("latent_weight must be positive".into()));
        }
        if !(self.triplet.margin > 0.0) {
            return Err(TensorError::Invalid("triplet margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ssim_loss: f64,
    pub bce_loss: f64,
    pub kl_loss: f64,
    pub triplet_loss: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(ssim: f64, bce: f64, kl: f64, triplet: f64, w: &LossWeights) -> LossReport {
        LossReport {
            ssim_loss: ssim,
            bce_loss: bce,
            kl_loss: kl,
            triplet_loss: triplet,
            total: total_loss(ssim, bce, kl, triplet, w),
        }
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let sum = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            ssim_loss: sum(|r| r.ssim_loss),
            bce_loss: sum(|r| r.bce_loss),
            kl_loss: sum(|r| r.kl_loss),
            triplet_loss: sum(|r| r.triplet_loss),
            total: sum(|r| r.total),
        }
    }
}

pub fn total_loss(ssim: f64, bce: f64, kl: f64, triplet: f64, w: &LossWeights) -> f64 {
    ssim + bce + w.latent_weight * (kl + triplet)
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

#[inline]
fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Mean binary cross entropy of `pred` against `target`.
pub fn bce_loss_value(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape("bce_loss", pred, target)?;
    let n = pred.numel().max(1) as f64;
    let s: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            -(t * math::ln(p) + (1.0 - t) * math::ln(1.0 - p))
        })
        .sum();
    Ok(s / n)
}

struct BceOp;

impl CustomOp for BceOp {
    fn name(&self) -> &'static str {
        "bce_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (pred, target) = (inputs[0], inputs[1]);
        let scale = grad[0] / pred.numel().max(1) as f64;
        let gp = pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| {
                if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
                    0.0
                } else {
                    scale * (p - t) / (p * (1.0 - p))
                }
            })
            .collect();
        let gt = pred
            .data()
            .iter()
            .map(|&p| {
                let p = clamp_prob(p);
                scale * (math::ln(1.0 - p) - math::ln(p))
            })
            .collect();
        vec![Some(gp), Some(gt)]
    }
}

/// Graph op for [`bce_loss_value`]; the target receives no gradient.
pub fn bce_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let v = bce_loss_value(g.value(pred), g.value(target))?;
    g.custom(Box::new(BceOp), vec![pred, target], Tensor::scalar(v))
}

/// Batch mean of `-0.5 * sum_d (1 + logvar - mu^2 - exp(logvar))`.
pub fn kl_loss_value(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    same_shape("kl_loss", mu, logvar)?;
    let (n, _) = mu.dims2("kl_loss")?;
    let s: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &v)| -0.5 * (1.0 + v - m * m - math::exp(v)))
        .sum();
    Ok(s / n.max(1) as f64)
}

struct KlOp;

impl CustomOp for KlOp {
    fn name(&self) -> &'static str {
        "kl_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (mu, logvar) = (inputs[0], inputs[1]);
        let scale = grad[0] / mu.shape()[0].max(1) as f64;
        let gm = mu.data().iter().map(|m| scale * m).collect();
        let gv = logvar
            .data()
            .iter()
            .map(|&v| scale * 0.5 * (math::exp(v) - 1.0))
            .collect();
        vec![Some(gm), Some(gv)]
    }
}

pub fn kl_loss(g: &mut Graph, mu: Var, logvar: Var) -> Result<Var> {
    let v = kl_loss_value(g.value(mu), g.value(logvar))?;
    g.custom(Box::new(KlOp), vec![mu, logvar], Tensor::scalar(v))
}

fn check_triplets(mu: &Tensor, triplets: &[Triplet]) -> Result<()> {
    let (n, _) = mu.dims2("triplet_loss")?;
    if let Some(t) = triplets
        .iter()
        .find(|t| t.anchor >= n || t.positive >= n || t.negative >= n)
    {
        return Err(TensorError::Invalid(format!("triplet {t:?} out of range for batch of {n}")));
    }
    Ok(())
}

/// Mean hinge `max(0, d(a,p) - d(a,n) + margin)` over triplets, with squared
/// Euclidean distances. An empty list yields 0.
pub fn triplet_loss_value(mu: &Tensor, triplets: &[Triplet], cfg: &TripletConfig) -> Result<f64> {
    check_triplets(mu, triplets)?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = triplets
        .iter()
        .map(|t| {
            let v = squared_distance(mu, t.anchor, t.positive) - squared_distance(mu, t.anchor, t.negative)
                + cfg.margin;
            v.max(0.0)
        })
        .sum();
    Ok(s / triplets.len() as f64)
}

struct TripletOp {
    triplets: Vec<Triplet>,
    margin: f64,
}

impl CustomOp for TripletOp {
    fn name(&self) -> &'static str {
        "triplet_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let mu = inputs[0];
        let d = mu.shape()[1];
        let mut gm = vec![0.0; mu.numel()];
        if self.triplets.is_empty() {
            return vec![Some(gm)];
        }
        let scale = grad[0] / self.triplets.len() as f64;
        for t in &self.triplets {
            let hinge = squared_distance(mu, t.anchor, t.positive)
                - squared_distance(mu, t.anchor, t.negative)
                + self.margin;
            if hinge <= 0.0 {
                continue;
            }
            let (a, p, n) = (mu.sample(t.anchor), mu.sample(t.positive), mu.sample(t.negative));
            for k in 0..d {
                gm[t.anchor * d + k] += scale * 2.0 * (n[k] - p[k]);
                gm[t.positive * d + k] += scale * -2.0 * (a[k] - p[k]);
                gm[t.negative * d + k] += scale * 2.0 * (a[k] - n[k]);
            }
        }
        vec![Some(gm)]
    }
}

pub fn triplet_loss(g: &mut Graph, mu: Var, triplets: Vec<Triplet>, cfg: &TripletConfig) -> Result<Var> {
    if triplets.is_empty() {
        log::warn!("triplet_loss called with no triplets; contributing 0");
    }
    let v = triplet_loss_value(g.value(mu), &triplets, cfg)?;
    let op = TripletOp {
        triplets,
        margin: cfg.margin,
    };
    g.custom(Box::new(op), vec![mu], Tensor::scalar(v))
}

/// Graph handles of every loss term for one batch.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub ssim: Var,
    pub bce: Var,
    pub kl: Var,
    pub triplet: Var,
    pub total: Var,
    pub triplets: Vec<Triplet>,
}

impl LossVars {
    pub fn report(&self, g: &Graph, w: &LossWeights) -> LossReport {
        let v = |x: Var| g.value(x).data()[0];
        LossReport {
            ssim_loss: v(self.ssim),
            bce_loss: v(self.bce),
            kl_loss: v(self.kl),
            triplet_loss: v(self.triplet),
            total: v(self.total),
        } 
        .with_weights_checked(w)
    }
}

impl LossReport {
    fn with_weights_checked(self, w: &LossWeights) -> LossReport {
        debug_assert!(
            (self.total - total_loss(self.ssim_loss, self.bce_loss, self.kl_loss, self.triplet_loss, w))
                .abs()
                <= 1e-9 * self.total.abs().max(1.0)
        );
        self
    }
}

/// SSIM on the image, BCE on the WBT, KL and semi-hard triplet loss on the
/// latent means, combined with the configured weights.
pub fn vae_loss(
    g: &mut Graph,
    out: &ForwardVars,
    image: Var,
    wbt: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossVars> {
    let ssim = ssim_loss(g, out.recon_image, image, &cfg.ssim)?;
    let bce = bce_loss(g, out.recon_wbt, wbt)?;
    let kl = kl_loss(g, out.mu, out.logvar)?;
    let triplets = mine_semi_hard(g.value(out.mu), labels, &cfg.triplet)?;
    let triplet = triplet_loss(g, out.mu, triplets.clone(), &cfg.triplet)?;
    let latent = g.add(kl, triplet)?;
    let latent = g.scale(latent, cfg.weights.latent_weight)?;
    let recon = g.add(ssim, bce)?;
    let total = g.add(recon, latent)?;
    Ok(LossVars {
        ssim,
        bce,
        kl,
        triplet,
        total,
        triplets,
    })
}
