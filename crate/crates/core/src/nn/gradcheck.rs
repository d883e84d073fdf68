use std::fmt;

use serde::Serialize;

use crate::scalar::Scalar;

/// Magnitude below which relative error degrades to absolute error.
const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{:<32} n={:<6} max_rel_err={:.3e}", e.name, e.count, e.max_rel_error)?;
        }
        write!(
            f,
            "{} (max {:.3e}, tolerance {:e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error(),
            self.tolerance
        )
    }
}

/// Compares analytic gradients against central finite differences.
///
/// `loss_at(group, index, delta)` must return the loss with parameter `index` of
/// gradient group `group` shifted by `delta`, leaving the parameter unchanged afterwards.
pub fn grad_check<T: Scalar>(
    analytic: &[(String, Vec<T>)],
    step: T,
    tolerance: f64,
    mut loss_at: impl FnMut(usize, usize, T) -> T,
) -> GradCheckReport {
    let two_h = (step + step).to_f64_lossy();
    let mut entries = Vec::with_capacity(analytic.len());
    let mut passed = true;
    for (g, (name, grad)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for (i, a) in grad.iter().enumerate() {
            let plus = loss_at(g, i, step).to_f64_lossy();
            let minus = loss_at(g, i, -step).to_f64_lossy();
            let numeric = (plus - minus) / two_h;
            let a = a.to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (a - numeric).abs() / denom;
            worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        }
        if !(worst <= tolerance || tolerance == f64::INFINITY) {
            passed = false;
        }
        entries.push(GradCheckEntry { name: name.clone(), count: grad.len(), max_rel_error: worst });
    }
    GradCheckReport { entries, tolerance, passed }
}
