//! Central finite-difference verification of analytic gradients.
//!
//! All checks run on the f64 path with a configurable step (default 1e-4).
//! Relative error for one coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
//! Losses with absolute-value kinks are checked at resampled points whose
//! residuals stay clear of the kink, see [`KINK_MARGIN`].

/// Default perturbation step.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Test points are resampled until every kink-prone quantity (L1 residuals,
/// ReLU pre-activations, pooling margins) has at least this magnitude.
pub const KINK_MARGIN: f64 = 1e-3;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        if !err.is_finite() {
            return f64::INFINITY;
        }
        worst = worst.max(err);
    }
    worst
}

/// Run a full check: finite differences of `f` at `x` against `analytic`.
pub fn check(f: impl FnMut(&[f64]) -> f64, x: &[f64], analytic: &[f64], step: f64) -> f64 {
    let numeric = central_diff(f, x, step);
    max_rel_error(analytic, &numeric)
}

/// One operator's result in the gradient-check suite.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub instances: usize,
    pub worst_rel_error: f64,
    pub tolerance: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }
}
