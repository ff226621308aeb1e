//! Training-time augmentation: horizontal flip and rotation on the image,
//! random erasing on both modalities, applied in that order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PairedSample;
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

/// Placement attempts before an erase is skipped.
const ERASE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub erase_prob: f64,
    /// Bounds on the erased fraction of the plane.
    pub erase_area: (f64, f64),
    /// Bounds on the erased rectangle's height / width.
    pub erase_aspect: (f64, f64),
    pub hflip_prob: f64,
    /// Rotation angle drawn uniformly from `[-rotation_deg, rotation_deg]`.
    pub rotation_deg: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            erase_prob: 0.5,
            erase_area: (0.02, 0.33),
            erase_aspect: (0.3, 3.3),
            hflip_prob: 0.5,
            rotation_deg: 20.0,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> AugmentConfig {
        AugmentConfig {
            erase_prob: 0.0,
            hflip_prob: 0.0,
            rotation_deg: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        let ok = p(self.erase_prob)
            && p(self.hflip_prob)
            && 0.0 < self.erase_area.0
            && self.erase_area.0 <= self.erase_area.1
            && self.erase_area.1 <= 1.0
            && 0.0 < self.erase_aspect.0
            && self.erase_aspect.0 <= self.erase_aspect.1
            && self.rotation_deg >= 0.0
            && self.rotation_deg.is_finite();
        if ok {
            Ok(())
        } else {
            Err(TensorError::Invalid(alloc::format!("invalid augmentation config {self:?}")))
        }
    }
}

fn chw(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

/// Mirror along the width axis.
pub fn hflip(t: &Tensor) -> Tensor {
    let (c, h, w) = chw(t);
    let src = t.data();
    Tensor::from_fn([c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Rotate by `deg` degrees about the plane center with bilinear sampling;
/// samples falling outside the source are zero.
pub fn rotate(t: &Tensor, deg: f64) -> Tensor {
    let (c, h, w) = chw(t);
    let (sin, cos) = (math::sin(deg.to_radians()), math::cos(deg.to_radians()));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let src = t.data();
    let fetch = |ch: usize, y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            src[(ch * h + y as usize) * w + x as usize]
        }
    };
    let mut out = alloc::vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            // Inverse map from destination to source.
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (math::floor(sx), math::floor(sy));
            let (tx, ty) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            for ch in 0..c {
                let v = (1.0 - ty) * ((1.0 - tx) * fetch(ch, y0, x0) + tx * fetch(ch, y0, x0 + 1))
                    + ty * ((1.0 - tx) * fetch(ch, y0 + 1, x0) + tx * fetch(ch, y0 + 1, x0 + 1));
                out[(ch * h + y) * w + x] = v;
            }
        }
    }
    Tensor::new([c, h, w], out).expect("shape matches buffer")
}

/// Overwrite a random rectangle (all channels) with uniform noise. Returns
/// the rectangle `(top, left, height, width)` or `None` when no placement
/// within the area and aspect bounds was found.
pub fn random_erase<R: Rng + ?Sized>(
    t: &mut Tensor,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    let (c, h, w) = chw(t);
    let plane = (h * w) as f64;
    let (la, lb) = (math::ln(cfg.erase_aspect.0), math::ln(cfg.erase_aspect.1));
    for _ in 0..ERASE_ATTEMPTS {
        let area = rng.random_range(cfg.erase_area.0..=cfg.erase_area.1) * plane;
        let aspect = math::exp(if la < lb { rng.random_range(la..lb) } else { la });
        let eh = math::round(math::sqrt(area * aspect)) as usize;
        let ew = math::round(math::sqrt(area / aspect)) as usize;
        let frac = (eh * ew) as f64 / plane;
        if eh == 0 || ew == 0 || eh > h || ew > w || frac < cfg.erase_area.0 || frac > cfg.erase_area.1 {
            continue;
        }
        let top = rng.random_range(0..=h - eh);
        let left = rng.random_range(0..=w - ew);
        let data = t.data_mut();
        for ch in 0..c {
            for y in top..top + eh {
                for x in left..left + ew {
                    data[(ch * h + y) * w + x] = rng.random_range(0.0..1.0);
                }
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

/// Flip, then rotate (image only), then erase (image and WBT independently).
/// Labels and ids are carried over unchanged.
pub fn augment<R: Rng + ?Sized>(sample: &PairedSample, cfg: &AugmentConfig, rng: &mut R) -> PairedSample {
    augment_with_target(sample, cfg, rng).0
}

/// Like [`augment`], but also returns the sample as it was before erasing.
/// Training reconstructs this target: erasing hides part of the input, the
/// geometric transforms change what is to be reproduced.
pub fn augment_with_target<R: Rng + ?Sized>(sample: &PairedSample, cfg: &AugmentConfig, rng: &mut R) -> (PairedSample, PairedSample) {
    let mut out = sample.clone();
    if cfg.hflip_prob > 0.0 && rng.random_bool(cfg.hflip_prob) {
        out.image = hflip(&out.image);
    }
    if cfg.rotation_deg > 0.0 {
        let deg = rng.random_range(-cfg.rotation_deg..=cfg.rotation_deg);
        out.image = rotate(&out.image, deg);
    }
    let target = out.clone();
    if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob) {
        random_erase(&mut out.image, cfg, rng);
    }
    if cfg.erase_prob > 0.0 && rng.random_bool(cfg.erase_prob) {
        random_erase(&mut out.wbt, cfg, rng);
    }
    (out, target)
}
