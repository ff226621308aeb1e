//! Wideband tympanometry grids and bilinear regridding onto the common
//! pressure x frequency grid.

use alloc::format;
use alloc::vec::Vec;

use crate::math;
use crate::tensor::{Result, Tensor, TensorError};

pub const PRESSURE_MAX: f64 = 180.0;
pub const PRESSURE_MIN: f64 = -280.0;
pub const FREQ_MIN_HZ: f64 = 226.0;
pub const FREQ_MAX_HZ: f64 = 4000.0;
pub const GRID_STEPS: usize = 64;

/// Pressure sweep of a raw measurement, daPa, descending.
pub const RAW_PRESSURE_RANGE: (f64, f64) = (200.0, -300.0);
/// Stimulus range of a raw measurement, Hz, ascending.
pub const RAW_FREQ_RANGE: (f64, f64) = (226.0, 8000.0);

#[derive(Debug, Clone, PartialEq)]
pub struct WbtRawGrid {
    /// Strictly descending, daPa.
    pub pressures: Vec<f64>,
    /// Strictly ascending, Hz.
    pub frequencies: Vec<f64>,
    /// Row-major, one row per pressure.
    pub absorbance: Vec<f64>,
}

impl WbtRawGrid {
    pub fn new(pressures: Vec<f64>, frequencies: Vec<f64>, absorbance: Vec<f64>) -> Result<WbtRawGrid> {
        let g = WbtRawGrid {
            pressures,
            frequencies,
            absorbance,
        };
        g.validate()?;
        Ok(g)
    }

    /// Sample `f(pressure, frequency)` on the given axes.
    pub fn from_fn(pressures: Vec<f64>, frequencies: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Result<WbtRawGrid> {
        let mut a = Vec::with_capacity(pressures.len() * frequencies.len());
        for &p in &pressures {
            for &fr in &frequencies {
                a.push(f(p, fr));
            }
        }
        WbtRawGrid::new(pressures, frequencies, a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pressures.len() < 2 || !self.pressures.windows(2).all(|w| w[0] > w[1]) {
            return Err(TensorError::Invalid("pressure axis must be strictly descending with ≥2 points".into()));
        }
        if self.frequencies.len() < 2 || !self.frequencies.windows(2).all(|w| w[0] < w[1]) {
            return Err(TensorError::Invalid("frequency axis must be strictly ascending with ≥2 points".into()));
        }
        if self.absorbance.len() != self.pressures.len() * self.frequencies.len() {
            return Err(TensorError::BadLength {
                shape: alloc::vec![self.pressures.len(), self.frequencies.len()],
                len: self.absorbance.len(),
            });
        }
        Ok(())
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.absorbance[i * self.frequencies.len() + j]
    }
}

/// `steps` equally spaced pressures from 180 down to -280 daPa.
pub fn pressure_axis(steps: usize) -> Vec<f64> {
    math::linspace(PRESSURE_MAX, PRESSURE_MIN, steps)
}

/// `steps` log-spaced frequencies from 226 Hz to 4 kHz.
pub fn frequency_axis(steps: usize) -> Vec<f64> {
    let (a, b) = (math::ln(FREQ_MIN_HZ), math::ln(FREQ_MAX_HZ));
    let mut v: Vec<f64> = math::linspace(a, b, steps).into_iter().map(math::exp).collect();
    if let Some(first) = v.first_mut() {
        *first = FREQ_MIN_HZ;
    }
    if steps > 1 {
        v[steps - 1] = FREQ_MAX_HZ;
    }
    v
}

/// Cell index `k` and weight `t` with `x = axis[k] + t (axis[k+1] - axis[k])`.
/// `axis` is monotone in either direction and covers `x`.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let descending = axis[0] > axis[1];
    let k = if descending {
        axis.partition_point(|&a| a > x)
    } else {
        axis.partition_point(|&a| a < x)
    };
    let k = k.saturating_sub(1).min(axis.len() - 2);
    let t = (x - axis[k]) / (axis[k + 1] - axis[k]);
    (k, t)
}

fn check_cover(name: &str, lo: f64, hi: f64, need_lo: f64, need_hi: f64) -> Result<()> {
    if need_lo < lo || need_hi > hi {
        return Err(TensorError::Invalid(format!(
            "{name} axis covers [{lo}, {hi}] but the target grid needs [{need_lo}, {need_hi}]"
        )));
    }
    Ok(())
}

/// Bilinear interpolation of `raw` onto arbitrary target axes, clamped to [0, 1].
pub fn resample_onto(raw: &WbtRawGrid, pressures: &[f64], frequencies: &[f64]) -> Result<Tensor> {
    raw.validate()?;
    let (p_hi, p_lo) = (raw.pressures[0], *raw.pressures.last().unwrap());
    let (f_lo, f_hi) = (raw.frequencies[0], *raw.frequencies.last().unwrap());
    let fold = |v: &[f64]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
    };
    let (tp_lo, tp_hi) = fold(pressures);
    let (tf_lo, tf_hi) = fold(frequencies);
    check_cover("pressure", p_lo, p_hi, tp_lo, tp_hi)?;
    check_cover("frequency", f_lo, f_hi, tf_lo, tf_hi)?;

    let fcells: Vec<(usize, f64)> = frequencies.iter().map(|&f| locate(&raw.frequencies, f)).collect();
    let mut out = Vec::with_capacity(pressures.len() * frequencies.len());
    for &p in pressures {
        let (i, s) = locate(&raw.pressures, p);
        for &(j, t) in &fcells {
            let top = raw.at(i, j) + t * (raw.at(i, j + 1) - raw.at(i, j));
            let bot = raw.at(i + 1, j) + t * (raw.at(i + 1, j + 1) - raw.at(i + 1, j));
            out.push((top + s * (bot - top)).clamp(0.0, 1.0));
        }
    }
    Tensor::new([1, pressures.len(), frequencies.len()], out)
}

/// Regrid onto `steps` pressures (rows, 180 to -280 daPa) by `steps`
/// frequencies (columns, 226 Hz to 4 kHz), shape (1, steps, steps).
pub fn resample_wbt(raw: &WbtRawGrid, steps: usize) -> Result<Tensor> {
    if steps < 2 {
        return Err(TensorError::Invalid("resample_wbt needs at least 2 steps".into()));
    }
    resample_onto(raw, &pressure_axis(steps), &frequency_axis(steps))
}
