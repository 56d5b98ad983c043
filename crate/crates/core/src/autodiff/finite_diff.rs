//! Central finite differences, evaluated in `f64`.
//!
//! Single-precision forward passes are too noisy for a 1e-3 step to resolve
//! gradients to three significant digits, so the oracle works on `f64`
//! inputs and expects an `f64` objective.

use crate::error::{Error, Result};

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn finite_diff_gradient<F>(f: F, at: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let all: Vec<usize> = (0..at.len()).collect();
    finite_diff_at(f, at, h, &all)
}

/// Central differences for the listed coordinates only, in the given order.
pub fn finite_diff_at<F>(mut f: F, at: &[f64], h: f64, indices: &[usize]) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::contract("finite_diff_gradient", format!("step must be positive, got {h}")));
    }
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= x.len() {
            return Err(Error::contract(
                "finite_diff_gradient",
                format!("index {i} outside {} coordinates", x.len()),
            ));
        }
        let orig = x[i];
        x[i] = orig + h;
        let plus = f(&x);
        x[i] = orig - h;
        let minus = f(&x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Relative tolerance with an absolute floor: a pair passes when
/// `|a - n| <= rel * max(|a|, |n|)` or `|a - n| <= abs`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradTolerance {
    pub rel: f64,
    pub abs: f64,
}

impl Default for GradTolerance {
    fn default() -> Self {
        GradTolerance { rel: 1e-3, abs: 1e-6 }
    }
}

impl GradTolerance {
    /// Error normalized so that values `<= self.rel` pass.
    pub fn error(&self, analytic: f64, numeric: f64) -> f64 {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs()).max(self.abs / self.rel);
        diff / scale
    }

    pub fn passes(&self, analytic: f64, numeric: f64) -> bool {
        self.error(analytic, numeric) <= self.rel
    }
}
