//! Least-squares fits for scaling laws.

use serde::Serialize;

use crate::error::{Error, Result};

/// Ordinary least-squares line `y = intercept + slope x` with its R².
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} x values, {} y values", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Insufficient(format!("{} points, need at least 3", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my) * (v - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Insufficient("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LineFit { slope, intercept, r_squared })
}

/// Log-log power-law fit `y ~ C x^slope`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeFit {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
    /// Intercept of `log y` against `log x`.
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn fit_power_law(x: &[f64], y: &[f64]) -> Result<SlopeFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let line = fit_line(&lx, &ly)?;
    Ok(SlopeFit {
        x: x.to_vec(),
        y: y.to_vec(),
        slope: line.slope,
        intercept: line.intercept,
        r_squared: line.r_squared,
    })
}

/// Fit of `y = a + b / alpha`.
pub fn fit_inverse(alpha: &[f64], y: &[f64]) -> Result<LineFit> {
    if alpha.iter().any(|a| !(*a > 0.0)) {
        return Err(Error::InvalidParameter("alpha values must be positive".into()));
    }
    let inv: Vec<f64> = alpha.iter().map(|a| 1.0 / a).collect();
    fit_line(&inv, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_power_law() {
        let x = [1e-3, 1e-2, 1e-1, 1.0];
        for p in [-0.5, 0.5, 1.0, 2.0] {
            let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(p)).collect();
            let f = fit_power_law(&x, &y).unwrap();
            assert!((f.slope - p).abs() < 1e-12);
            assert!((f.intercept - 3.0f64.ln()).abs() < 1e-12);
            assert!((f.r_squared - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_fit_recovers_coefficients() {
        let a = [2.0, 5.0, 10.0, 20.0];
        let y: Vec<f64> = a.iter().map(|v| 0.1 + 0.8 / v).collect();
        let f = fit_inverse(&a, &y).unwrap();
        assert!((f.intercept - 0.1).abs() < 1e-12 && (f.slope - 0.8).abs() < 1e-12);
    }

    #[test]
    fn rejects_short_or_degenerate_input() {
        assert!(matches!(fit_line(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Insufficient(_))));
        assert!(fit_line(&[1.0; 3], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_power_law(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]).is_err());
    }
}
