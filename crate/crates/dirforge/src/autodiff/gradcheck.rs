//! Central finite differences: the independent gradient oracle.
//!
//! Used throughout the test suite to validate tape gradients without
//! trusting any of the tape's own machinery.

/// Central-difference gradient of a scalar function at `x`.
///
/// Each coordinate is perturbed by ±h while the others stay fixed:
/// g_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h.
pub fn central_diff<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Worst-case agreement between an analytic and a numeric gradient.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    /// max over coordinates of |a - n| / max(|a|, |n|, floor)
    pub max_rel: f64,
    /// max over coordinates of |a - n|
    pub max_abs: f64,
    /// coordinate achieving max_rel
    pub worst: usize,
}

/// Compares with a denominator floor of 1e-3, which makes near-zero
/// coordinates compare absolutely instead of amplifying rounding noise.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> CheckReport {
    compare_floored(analytic, numeric, 1e-3)
}

pub fn compare_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> CheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = CheckReport { max_rel: 0.0, max_abs: 0.0, worst: 0 };
    for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.worst = i;
        }
        report.max_abs = report.max_abs.max(abs);
    }
    report
}
