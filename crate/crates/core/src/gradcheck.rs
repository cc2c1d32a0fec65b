//! Central finite-difference oracles for checking reverse-mode gradients.
//!
//! The oracles only ever evaluate the function being checked; they never
//! look at the graph that produced the analytic gradient.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative disagreement between an analytic and a numerical value.
/// Pairs where both sides are below `1e-10` in magnitude count as agreeing.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-10 {
        return 0.0;
    }
    (analytic - numeric).abs() / scale
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub trials: usize,
    /// Directions rejected because the two probes straddled a kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.trials > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.trials += other.trials;
        self.skipped += other.skipped;
    }
}

/// Compares `<grad, d>` with `(f(x + h d) - f(x - h d)) / 2h` along random
/// unit directions `d`.
///
/// `f` returns the function value and a branch signature; a direction whose
/// two probes disagree on the signature crossed a non-differentiable point
/// and is redrawn (at most `4 * trials` times in total).
pub fn directional_check<F, R>(
    mut f: F,
    x0: &[f64],
    grad: &[f64],
    trials: usize,
    step: f64,
    rng: &mut R,
) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
    R: Rng + ?Sized,
{
    let mut report = CheckReport::default();
    let mut x = x0.to_vec();
    while report.trials < trials && report.skipped < 4 * trials {
        let mut d: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        d.iter_mut().for_each(|v| *v /= norm);
        for i in 0..x.len() {
            x[i] = x0[i] + step * d[i];
        }
        let (fp, sp) = f(&x)?;
        for i in 0..x.len() {
            x[i] = x0[i] - step * d[i];
        }
        let (fm, sm) = f(&x)?;
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        let analytic: f64 = grad.iter().zip(&d).map(|(g, d)| g * d).sum();
        report.max_rel_err = report.max_rel_err.max(relative_error(analytic, numeric));
        report.trials += 1;
    }
    Ok(report)
}

/// Per-coordinate central differences over `indices`.
pub fn coordinate_check<F>(mut f: F, x0: &[f64], grad: &[f64], indices: &[usize], step: f64) -> Result<CheckReport>
where
    F: FnMut(&[f64]) -> Result<(f64, u64)>,
{
    let mut report = CheckReport::default();
    let mut x = x0.to_vec();
    for &i in indices {
        x[i] = x0[i] + step;
        let (fp, sp) = f(&x)?;
        x[i] = x0[i] - step;
        let (fm, sm) = f(&x)?;
        x[i] = x0[i];
        if sp != sm {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * step);
        report.max_rel_err = report.max_rel_err.max(relative_error(grad[i], numeric));
        report.trials += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn detects_wrong_gradient() {
        let f = |x: &[f64]| Ok((x[0] * x[0] + 3.0 * x[1], 0));
        let x0 = [1.5, -2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let good = directional_check(f, &x0, &[3.0, 3.0], 20, FD_STEP, &mut rng).unwrap();
        assert!(good.passes(1e-8), "{good:?}");
        let bad = directional_check(f, &x0, &[3.0, 2.0], 20, FD_STEP, &mut rng).unwrap();
        assert!(!bad.passes(1e-4));
        let coord = coordinate_check(f, &x0, &[3.0, 3.0], &[0, 1], FD_STEP).unwrap();
        assert!(coord.passes(1e-8));
    }
}
