//! Central-difference verification of tape gradients.

use crate::error::{DivaError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Below this magnitude the relative error is measured against the floor
/// instead of the gradient itself. Central differences at `h = 1e-5` carry
/// roughly `1e-16·|f| / h` of rounding noise, so near-zero gradient entries
/// need an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index (into the checked tensor) of the worst entry.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Combines two reports, keeping the worse one.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_rel_error > self.max_rel_error {
            other
        } else {
            self
        };
        worst.checked = checked;
        worst
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Checks the tape gradient of the scalar `f(x)` against central
/// differences at every entry of `x`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(DivaError::InvalidArgument(format!(
            "step h must be > 0, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().with_grad(true));
    let y = f(&mut tape, xv)?;
    let analytic = match tape.backward(y) {
        Ok(g) => g
            .get(xv)
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![0.0; x.len()]),
        // A function that ignores its input has a zero gradient.
        Err(DivaError::DetachedLoss) => vec![0.0; x.len()],
        Err(e) => return Err(e),
    };
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(p.clone());
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).item())
    };
    let indices: Vec<usize> = (0..x.len()).collect();
    compare_with_central_differences(&analytic, eval, x, &indices, h)
}

/// Compares `analytic[i]` with `(f(x + h e_i) − f(x − h e_i)) / 2h` for each
/// listed flat index `i`.
pub fn compare_with_central_differences(
    analytic: &[f64],
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    indices: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(DivaError::InvalidArgument(format!(
            "step h must be > 0, got {h}"
        )));
    }
    if analytic.len() != x.len() {
        return Err(DivaError::ShapeMismatch {
            left: vec![analytic.len()],
            right: x.shape().to_vec(),
            context: "analytic gradient vs input",
        });
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &i in indices {
        let mut plus = x.to_vec();
        plus[i] += h;
        let mut minus = x.to_vec();
        minus[i] -= h;
        let fp = eval(&Tensor::new(x.shape(), plus)?)?;
        let fm = eval(&Tensor::new(x.shape(), minus)?)?;
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
