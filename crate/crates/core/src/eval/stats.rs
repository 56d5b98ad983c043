use crate::error::{Error, Result};

/// z-value of a two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Mean and 95% half-width `1.96 * s / sqrt(n)` with the sample standard
/// deviation `s` (`n - 1` denominator). A single value has half-width 0.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::contract("confidence_interval", "no values"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, Z95 * var.sqrt() / n.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_have_zero_width() {
        assert_eq!(confidence_interval(&[1.0; 600]).unwrap(), (1.0, 0.0));
        assert_eq!(confidence_interval(&[0.5]).unwrap(), (0.5, 0.0));
        assert!(confidence_interval(&[]).is_err());
    }

    #[test]
    fn two_point_sample() {
        // mean 2, s = sqrt(2)
        let (m, h) = confidence_interval(&[1.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((h - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }
}
