//! Gaussian-windowed SSIM over "valid" windows, per channel.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{CustomOp, Graph, Var};
use crate::kernels::{separable_valid, separable_valid_adjoint};
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

/// Dynamic range of the compared data.
const RANGE: f64 = 1.0;
pub const C1: f64 = (0.01 * RANGE) * (0.01 * RANGE);
pub const C2: f64 = (0.03 * RANGE) * (0.03 * RANGE);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 11,
            sigma: 1.5,
        }
    }
}

impl SsimConfig {
    /// 7x7 window for 32 px images.
    pub fn desk() -> SsimConfig {
        SsimConfig {
            window: 7,
            sigma: 1.5,
        }
    }

    /// Normalized 1-D Gaussian; the 2-D window is its outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                math::exp(-d * d / (2.0 * self.sigma * self.sigma))
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }
}

struct Stats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    exx: Vec<f64>,
    eyy: Vec<f64>,
    exy: Vec<f64>,
}

fn geometry(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<(usize, usize, usize)> {
    if x.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ssim",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    let (n, c, h, w) = x.dims4("ssim")?;
    if cfg.window == 0 || cfg.window > h || cfg.window > w {
        return Err(TensorError::Invalid(format!(
            "ssim: {}x{} window larger than {h}x{w} image",
            cfg.window, cfg.window
        )));
    }
    Ok((n * c, h, w))
}

fn stats(x: &[f64], y: &[f64], planes: usize, h: usize, w: usize, k: &[f64]) -> Stats {
    let sq = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(a, b)| a * b).collect() };
    Stats {
        mu_x: separable_valid(x, planes, h, w, k),
        mu_y: separable_valid(y, planes, h, w, k),
        exx: separable_valid(&sq(x, x), planes, h, w, k),
        eyy: separable_valid(&sq(y, y), planes, h, w, k),
        exy: separable_valid(&sq(x, y), planes, h, w, k),
    }
}

/// Window-wise SSIM terms `(A1, A2, B1, B2)` so that `S = A1 A2 / (B1 B2)`.
#[inline]
fn terms(s: &Stats, i: usize) -> (f64, f64, f64, f64) {
    let (mx, my) = (s.mu_x[i], s.mu_y[i]);
    let sxx = s.exx[i] - mx * mx;
    let syy = s.eyy[i] - my * my;
    let sxy = s.exy[i] - mx * my;
    (
        2.0 * mx * my + C1,
        2.0 * sxy + C2,
        mx * mx + my * my + C1,
        sxx + syy + C2,
    )
}

/// SSIM value of every window of every plane, flattened.
pub fn ssim_map(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<Vec<f64>> {
    let (planes, h, w) = geometry(x, y, cfg)?;
    let st = stats(x.data(), y.data(), planes, h, w, &cfg.kernel());
    Ok((0..st.mu_x.len())
        .map(|i| {
            let (a1, a2, b1, b2) = terms(&st, i);
            a1 * a2 / (b1 * b2)
        })
        .collect())
}

/// Mean SSIM over windows, channels and batch.
pub fn mean_ssim(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    let m = ssim_map(x, y, cfg)?;
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// `1 - mean SSIM`, in `[0, 2]`.
pub fn ssim_loss_value(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    Ok(1.0 - mean_ssim(x, y, cfg)?)
}

struct SsimLossOp {
    cfg: SsimConfig,
}

impl CustomOp for SsimLossOp {
    fn name(&self) -> &'static str {
        "ssim_loss"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, y) = (inputs[0], inputs[1]);
        let s = x.shape();
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let k = self.cfg.kernel();
        let st = stats(x.data(), y.data(), planes, h, w, &k);
        let windows = st.mu_x.len();
        let dl_ds = -grad[0] / windows as f64;

        let mut d_mux = vec![0.0; windows];
        let mut d_muy = vec![0.0; windows];
        let mut d_exx = vec![0.0; windows];
        let mut d_eyy = vec![0.0; windows];
        let mut d_exy = vec![0.0; windows];
        for i in 0..windows {
            let (a1, a2, b1, b2) = terms(&st, i);
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let den = b1 * b2;
            let ssim = a1 * a2 / den;
            d_mux[i] = dl_ds * ((2.0 * my * a2 - 2.0 * my * a1) / den - ssim * (2.0 * mx / b1 - 2.0 * mx / b2));
            d_muy[i] = dl_ds * ((2.0 * mx * a2 - 2.0 * mx * a1) / den - ssim * (2.0 * my / b1 - 2.0 * my / b2));
            d_exx[i] = dl_ds * (-ssim / b2);
            d_eyy[i] = d_exx[i];
            d_exy[i] = dl_ds * (2.0 * a1 / den);
        }
        let back = |v: &[f64]| separable_valid_adjoint(v, planes, h, w, &k);
        let (gmx, gmy) = (back(&d_mux), back(&d_muy));
        let (gxx, gyy, gxy) = (back(&d_exx), back(&d_eyy), back(&d_exy));
        let (xs, ys) = (x.data(), y.data());
        let gx = (0..xs.len())
            .map(|i| gmx[i] + 2.0 * xs[i] * gxx[i] + ys[i] * gxy[i])
            .collect();
        let gy = (0..ys.len())
            .map(|i| gmy[i] + 2.0 * ys[i] * gyy[i] + xs[i] * gxy[i])
            .collect();
        vec![Some(gx), Some(gy)]
    }
}

/// Graph op for `1 - mean SSIM(x, y)`.
pub fn ssim_loss(g: &mut Graph, x: Var, y: Var, cfg: &SsimConfig) -> Result<Var> {
    let value = ssim_loss_value(g.value(x), g.value(y), cfg)?;
    g.custom(Box::new(SsimLossOp { cfg: *cfg }), vec![x, y], Tensor::scalar(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = SsimConfig::default().kernel();
        assert_eq!(k.len(), 11);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(k[i], k[10 - i]);
        }
    }

    #[test]
    fn window_larger_than_image_is_an_error() {
        let x = Tensor::zeros([1, 1, 8, 8]);
        assert!(ssim_loss_value(&x, &x, &SsimConfig::default()).is_err());
        assert!(ssim_loss_value(&x, &x, &SsimConfig::desk()).is_ok());
    }
}
