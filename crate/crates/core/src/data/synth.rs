//! Synthetic stand-in for the clinical otoscopy / WBT pairs. Both modalities
//! are rendered from one set of latent factors per sample.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wbt::{resample_wbt, WbtRawGrid, RAW_FREQ_RANGE, RAW_PRESSURE_RANGE};
use super::{Label, PairedSample};
use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

const RAW_PRESSURE_POINTS: usize = 51;
const RAW_FREQ_POINTS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthFactors {
    pub class: Label,
    pub absorbance_level: f64,
    /// daPa.
    pub pressure_peak_center: f64,
    pub peak_sharpness: f64,
    /// Hue in [0, 1).
    pub membrane_hue: f64,
    pub bulge: f64,
    pub effusion_level: f64,
    /// Seeds the per-sample rendering noise.
    pub rng_seed: u64,
}

impl SynthFactors {
    pub fn draw<R: Rng + ?Sized>(class: Label, rng: &mut R) -> SynthFactors {
        let (level, bulge, effusion, hue) = match class {
            Label::AOM => (
                rng.random_range(0.05..=0.25),
                rng.random_range(0.6..=1.0),
                rng.random_range(0.0..=0.3),
                (rng.random_range(-0.03..=0.03f64) + 1.0) % 1.0,
            ),
            Label::OME => (
                rng.random_range(0.05..=0.30),
                rng.random_range(0.0..=0.3),
                rng.random_range(0.5..=1.0),
                rng.random_range(0.11..=0.16),
            ),
            Label::NOE => (
                rng.random_range(0.45..=0.85),
                rng.random_range(0.0..=0.2),
                rng.random_range(0.0..=0.1),
                rng.random_range(0.06..=0.10),
            ),
        };
        SynthFactors {
            class,
            absorbance_level: level,
            pressure_peak_center: rng.random_range(-40.0..=40.0),
            peak_sharpness: rng.random_range(0.8..=1.5),
            membrane_hue: hue,
            bulge,
            effusion_level: effusion,
            rng_seed: rng.next_u64(),
        }
    }
}

fn bump(x: f64, c: f64, w: f64) -> f64 {
    let t = (x - c) / w;
    math::exp(-t * t)
}

/// Position of `f` on a log axis with 226 Hz at 0 and 8 kHz at 1.
fn log_freq_pos(f: f64) -> f64 {
    math::ln(f / RAW_FREQ_RANGE.0) / math::ln(RAW_FREQ_RANGE.1 / RAW_FREQ_RANGE.0)
}

/// Class-independent measurement disturbances: a slow ripple over frequency,
/// a pressure tilt and one broad artifact blob at a random position.
struct Nuisance {
    ripple_amp: f64,
    ripple_rate: f64,
    ripple_phase: f64,
    tilt: f64,
    blob_amp: f64,
    blob_p: f64,
    blob_u: f64,
    blob_wp: f64,
    blob_wu: f64,
}

impl Nuisance {
    fn draw<R: Rng + ?Sized>(rng: &mut R) -> Nuisance {
        Nuisance {
            ripple_amp: rng.random_range(-0.03..=0.03),
            ripple_rate: rng.random_range(1.0..=2.0),
            ripple_phase: rng.random_range(0.0..1.0),
            tilt: rng.random_range(-TILT_MAX..=TILT_MAX),
            blob_amp: rng.random_range(0.0..=BLOB_MAX),
            blob_p: rng.random_range(RAW_PRESSURE_RANGE.1..=RAW_PRESSURE_RANGE.0),
            blob_u: rng.random_range(0.0..=1.0),
            blob_wp: rng.random_range(60.0..=120.0),
            blob_wu: rng.random_range(0.12..=0.25),
        }
    }

    fn at(&self, p: f64, u: f64) -> f64 {
        let mid = 0.5 * (RAW_PRESSURE_RANGE.0 + RAW_PRESSURE_RANGE.1);
        let half = 0.5 * (RAW_PRESSURE_RANGE.0 - RAW_PRESSURE_RANGE.1);
        self.ripple_amp * math::sin(2.0 * PI * (u * self.ripple_rate + self.ripple_phase))
            + self.tilt * (p - mid) / half
            + self.blob_amp * bump(p, self.blob_p, self.blob_wp) * bump(u, self.blob_u, self.blob_wu)
    }
}

const TILT_MAX: f64 = 0.18;
const BLOB_MAX: f64 = 0.8;
const IMAGE_NOISE: f64 = 0.015;
const NOE_FLOOR: f64 = 0.12;

/// Noise-free absorbance surface of one ear at pressure `p` (daPa) and
/// frequency `f` (Hz), before the nuisance terms.
fn base_absorbance(fac: &SynthFactors, p: f64, f: f64) -> f64 {
    let u = log_freq_pos(f);
    let l = fac.absorbance_level;
    match fac.class {
        Label::AOM => 0.7 * l + 0.35 * fac.bulge * bump(u, 0.62, 0.22),
        Label::OME => l * (1.0 - 0.8 * fac.effusion_level * u),
        Label::NOE => {
            let ridge = bump(p, fac.pressure_peak_center, 70.0 / fac.peak_sharpness);
            NOE_FLOOR + (l - NOE_FLOOR) * (0.7 + 0.3 * u) * ridge
        }
    }
}

/// Raw measurement on the device sweep (200 to -300 daPa, 226 Hz to 8 kHz).
pub fn render_raw_wbt(fac: &SynthFactors) -> WbtRawGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(fac.rng_seed);
    let nuisance = Nuisance::draw(&mut rng);
    let pressures = math::linspace(RAW_PRESSURE_RANGE.0, RAW_PRESSURE_RANGE.1, RAW_PRESSURE_POINTS);
    let (a, b) = (math::ln(RAW_FREQ_RANGE.0), math::ln(RAW_FREQ_RANGE.1));
    let mut frequencies: Vec<f64> = math::linspace(a, b, RAW_FREQ_POINTS).into_iter().map(math::exp).collect();
    frequencies[0] = RAW_FREQ_RANGE.0;
    frequencies[RAW_FREQ_POINTS - 1] = RAW_FREQ_RANGE.1;
    let mut absorbance = Vec::with_capacity(pressures.len() * frequencies.len());
    for &p in &pressures {
        for &f in &frequencies {
            let v = base_absorbance(fac, p, f) + nuisance.at(p, log_freq_pos(f));
            absorbance.push(v.clamp(0.0, 1.0));
        }
    }
    WbtRawGrid::new(pressures, frequencies, absorbance).expect("synthetic axes are monotone")
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - math::floor(h)) * 6.0;
    let i = math::floor(h6);
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Distance from `(x, y)` to the segment `a`-`b`.
fn segment_distance(x: f64, y: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
    math::sqrt(px * px + py * py)
}

/// Otoscope-like view: a shaded membrane disk with a malleus stripe on a
/// dark background, shape (3, size, size).
pub fn render_image(fac: &SynthFactors, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(fac.rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-0.1..=0.1) * s;
    let cy = s / 2.0 + rng.random_range(-0.1..=0.1) * s;
    let radius = s * rng.random_range(0.28..=0.46);
    let angle = rng.random_range(95.0f64..=135.0).to_radians();
    let tip = (cx + 0.7 * radius * math::cos(angle), cy - 0.7 * radius * math::sin(angle));
    let stripe_w = 0.05 * s;
    // Exposure and white balance of the otoscope, shared by all classes.
    let gain = rng.random_range(0.6..=1.15);
    let balance = [
        rng.random_range(0.85..=1.15),
        rng.random_range(0.85..=1.15),
        rng.random_range(0.85..=1.15),
    ];
    let reflex = (
        cx + rng.random_range(-0.5..=0.5) * radius,
        cy + rng.random_range(-0.5..=0.5) * radius,
        rng.random_range(0.0..=0.6),
    );
    let meniscus = (fac.class == Label::OME).then(|| (rng.random_range(-0.4..=0.4), 0.04 * s));
    let (sat, val) = match fac.class {
        Label::AOM => (rng.random_range(0.5..=0.8), 0.80),
        Label::OME => (rng.random_range(0.45..=0.75), 0.85),
        Label::NOE => (rng.random_range(0.1..=0.3), 0.82),
    };
    let base = hsv_to_rgb(fac.membrane_hue, sat, val);
    let base = mix(base, [0.85, 0.60, 0.15], 0.35 * fac.effusion_level);
    let background = [0.06, 0.04, 0.04];

    let mut data = alloc::vec![0.0; 3 * size * size];
    for yi in 0..size {
        for xi in 0..size {
            let (x, y) = (xi as f64 + 0.5, yi as f64 + 0.5);
            let (dx, dy) = (x - cx, y - cy);
            let r = math::sqrt(dx * dx + dy * dy);
            let rr = math::powi((r / radius).min(1.0), 2);
            let shade = 1.0 + 0.35 * fac.bulge * (1.0 - rr) - 0.25 * fac.bulge * rr;
            let mut col = [base[0] * shade, base[1] * shade, base[2] * shade];
            let m = bump(segment_distance(x, y, (cx, cy), tip), 0.0, stripe_w);
            col = mix(col, [0.97, 0.95, 0.88], 0.55 * m);
            let glint = bump(math::sqrt((x - reflex.0) * (x - reflex.0) + (y - reflex.1) * (y - reflex.1)), 0.0, 0.12 * radius);
            col = mix(col, [1.0, 1.0, 1.0], reflex.2 * glint);
            if let Some((h, w)) = meniscus {
                // Air-fluid line: a dark rim over a brighter amber pool.
                let line = bump(y - cy - h * radius, 0.0, w);
                let below = if y - cy > h * radius { 1.0 } else { 0.0 };
                col = mix(col, [0.95, 0.70, 0.25], 0.3 * below);
                col = mix(col, [0.15, 0.10, 0.05], 0.7 * line);
            }
            let alpha = ((radius - r) / 0.6 + 0.5).clamp(0.0, 1.0);
            let px = mix(background, col, alpha);
            for (c, v) in px.iter().enumerate() {
                let noise = rng.random_range(-IMAGE_NOISE..=IMAGE_NOISE);
                data[(c * size + yi) * size + xi] = (v * gain * balance[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([3, size, size], data).expect("shape matches buffer")
}

/// Render one paired sample from its factors. Values are rounded to `f32`
/// precision so the sample survives a disk round trip unchanged.
pub fn render_sample(
    fac: &SynthFactors,
    image_size: usize,
    sample_id: alloc::string::String,
    patient_id: alloc::string::String,
) -> Result<PairedSample> {
    Ok(PairedSample {
        image: render_image(fac, image_size).map(math::to_f32_precision),
        wbt: resample_wbt(&render_raw_wbt(fac), image_size)?.map(math::to_f32_precision),
        label: fac.class,
        patient_id,
        sample_id,
    })
}

/// `n_per_class` samples of each class.
pub fn synth_dataset(n_per_class: usize, image_size: usize, seed: u64) -> Result<(Vec<PairedSample>, Vec<SynthFactors>)> {
    synth_dataset_with_counts([n_per_class; 3], image_size, seed)
}

/// Split `total` in the clinical AOM:OME:NOE ratio 211:419:537.
pub fn class_counts_like_clinic(total: usize) -> [usize; 3] {
    let w = [211usize, 419, 537];
    let sum: usize = w.iter().sum();
    let mut c = [0usize; 3];
    for i in 0..3 {
        c[i] = (total * w[i] / sum).max(1);
    }
    let assigned: usize = c.iter().sum();
    if assigned < total {
        c[2] += total - assigned;
    }
    c
}

/// Samples ordered by class, each patient contributing one or two ears of
/// the same class.
pub fn synth_dataset_with_counts(
    counts: [usize; 3],
    image_size: usize,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<SynthFactors>)> {
    if counts.iter().any(|&c| c == 0) {
        return Err(TensorError::Invalid("every class needs at least one sample".into()));
    }
    if image_size < 2 {
        return Err(TensorError::Invalid("image_size must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    let mut factors = Vec::new();
    let mut patient = 0usize;
    for (label, &n) in Label::ALL.iter().zip(&counts) {
        let mut left_in_patient = 0usize;
        for _ in 0..n {
            if left_in_patient == 0 {
                patient += 1;
                left_in_patient = if rng.random_bool(0.5) { 2 } else { 1 };
            }
            left_in_patient -= 1;
            let fac = SynthFactors::draw(*label, &mut rng);
            let id = format!("S{:05}", samples.len());
            samples.push(render_sample(&fac, image_size, id, format!("P{patient:04}"))?);
            factors.push(fac);
        }
    }
    Ok((samples, factors))
}
