//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates forward values, so it stays independent
//! of the backward rules it is used to audit.

use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::tensor::{Result, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    /// Central-difference step.
    pub h: f64,
    /// Gradients smaller than this are compared in absolute terms.
    pub floor: f64,
    /// Estimates at `h` and `h / 2` must agree to this relative tolerance,
    /// otherwise the step is taken as straddling a kink and shrunk.
    pub smooth_tol: f64,
    /// How many times the step may be quartered.
    pub refinements: usize,
    /// Maximum number of probed coordinates per input; `None` probes all.
    pub max_probes: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-5,
            floor: 1e-5,
            smooth_tol: 1e-5,
            refinements: 3,
            max_probes: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// `(input, coordinate, analytic, numeric)` of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn rel_error(&self, a: f64, n: f64) -> f64 {
        (a - n).abs() / a.abs().max(n.abs()).max(self.floor)
    }

    /// Central difference at offset 0 of `f`, which evaluates the function
    /// at a signed offset along one coordinate. Only the numeric estimates
    /// steer the step, never the analytic gradient.
    pub fn central_difference(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        // Estimate plus a rough scale of its rounding noise. Long sums round
        // worse than this, hence the headroom below.
        let mut cd = |h: f64| -> Result<(f64, f64)> {
            let (fp, fm) = (f(h)?, f(-h)?);
            Ok(((fp - fm) / (2.0 * h), f64::EPSILON * (fp.abs() + fm.abs()) / h))
        };
        let mut h = self.h;
        let (mut d, _) = cd(h)?;
        for _ in 0..self.refinements {
            let (half, noise) = cd(h / 2.0)?;
            if (d - half).abs() <= self.smooth_tol * d.abs().max(half.abs()).max(self.floor) + 16.0 * noise {
                return Ok(half);
            }
            h /= 4.0;
            d = cd(h)?.0;
        }
        Ok(d)
    }

    /// Compare the gradient of the scalar built by `f` against central
    /// differences. Probed coordinates are drawn with `rng` when
    /// `max_probes` limits them.
    pub fn run<F, R>(&self, inputs: &[Tensor], rng: &mut R, f: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
        R: Rng + ?Sized,
    {
        let mut g = Graph::with_finite_check(true);
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        let analytic: Vec<Tensor> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();

        let eval = |perturbed: &[Tensor]| -> Result<f64> {
            let mut g = Graph::with_finite_check(true);
            let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            g.value(out).item()
        };

        let mut report = GradReport::default();
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (i, input) in inputs.iter().enumerate() {
            let n = input.numel();
            let coords: Vec<usize> = match self.max_probes {
                Some(k) if k < n => index::sample(rng, n, k).into_vec(),
                _ => (0..n).collect(),
            };
            for j in coords {
                let x0 = input.data()[j];
                let numeric = self.central_difference(|dx| {
                    work[i].data_mut()[j] = x0 + dx;
                    eval(&work)
                })?;
                work[i].data_mut()[j] = x0;
                let a = analytic[i].data()[j];
                let err = self.rel_error(a, numeric);
                report.probes += 1;
                if err > report.max_rel_error || report.worst.is_none() {
                    report.max_rel_error = report.max_rel_error.max(err);
                    report.worst = Some((i, j, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
