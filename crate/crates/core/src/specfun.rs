//! Hermite and Laguerre evaluation by forward recurrence, plus Gamma helpers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_DEGREE_CAP: u32 = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecfunError {
    #[error("degree {n} exceeds cap {cap}")]
    DegreeCap { n: u32, cap: u32 },
    #[error("non-finite argument {0}")]
    NonFinite(f64),
    #[error("dimension mismatch: {alpha} indices for {x} coordinates")]
    DimensionMismatch { alpha: usize, x: usize },
    #[error("laguerre parameter beta = {0} must exceed -1")]
    BadBeta(f64),
    #[error("laguerre argument r = {0} must be nonnegative")]
    NegativeArgument(f64),
    #[error("log_gamma requires z > 0, got {0}")]
    GammaDomain(f64),
}

/// Polynomial degree or radial index, checked against a cap at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PolyDegree(pub u32);

impl PolyDegree {
    pub fn checked(self, cap: u32) -> Result<u32, SpecfunError> {
        if self.0 > cap {
            Err(SpecfunError::DegreeCap { n: self.0, cap })
        } else {
            Ok(self.0)
        }
    }
}

impl From<u32> for PolyDegree {
    fn from(n: u32) -> Self {
        PolyDegree(n)
    }
}

/// H_0 = 1, H_1 = x, H_{n+1} = x H_n - 2n H_{n-1}.
pub fn hermite_1d(n: PolyDegree, x: f64) -> Result<f64, SpecfunError> {
    let n = n.checked(DEFAULT_DEGREE_CAP)?;
    if !x.is_finite() {
        return Err(SpecfunError::NonFinite(x));
    }
    Ok(hermite_unchecked(n, x))
}

pub(crate) fn hermite_unchecked(n: u32, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = x;
    for k in 1..n {
        let next = x * cur - 2.0 * k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}

/// Coefficients of H_n in the monomial basis, index = power.
pub fn hermite_coefficients(n: u32) -> Vec<f64> {
    let mut prev = vec![1.0];
    if n == 0 {
        return prev;
    }
    let mut cur = vec![0.0, 1.0];
    for k in 1..n as usize {
        let mut next = vec![0.0; k + 2];
        for (i, c) in cur.iter().enumerate() {
            next[i + 1] += c;
        }
        for (i, c) in prev.iter().enumerate() {
            next[i] -= 2.0 * k as f64 * c;
        }
        prev = cur;
        cur = next;
    }
    cur
}

pub fn hermite_nd(alpha: &[u32], x: &[f64]) -> Result<f64, SpecfunError> {
    if alpha.len() != x.len() {
        return Err(SpecfunError::DimensionMismatch {
            alpha: alpha.len(),
            x: x.len(),
        });
    }
    let mut prod = 1.0;
    for (&n, &xi) in alpha.iter().zip(x) {
        prod *= hermite_1d(PolyDegree(n), xi)?;
    }
    Ok(prod)
}

/// Kummer normalization M(-m, beta+1, r), equal to 1 at r = 0.
pub fn laguerre(beta: f64, m: PolyDegree, r: f64) -> Result<f64, SpecfunError> {
    let m = m.checked(DEFAULT_DEGREE_CAP)?;
    if !(beta > -1.0) {
        return Err(SpecfunError::BadBeta(beta));
    }
    if !r.is_finite() {
        return Err(SpecfunError::NonFinite(r));
    }
    if r < 0.0 {
        return Err(SpecfunError::NegativeArgument(r));
    }
    // generalized Laguerre recurrence, then divide by L_m(0) = (beta+1)_m / m!
    let mut prev = 1.0;
    if m == 0 {
        return Ok(1.0);
    }
    let mut cur = 1.0 + beta - r;
    let mut norm = 1.0 + beta;
    for k in 1..m {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0 + beta - r) * cur - (kf + beta) * prev) / (kf + 1.0);
        prev = cur;
        cur = next;
        norm *= (kf + 1.0 + beta) / (kf + 1.0);
    }
    Ok(cur / norm)
}

/// Coefficients of M(-m, beta+1, r) in powers of r.
pub fn laguerre_coefficients(beta: f64, m: u32) -> Vec<f64> {
    let mut out = Vec::with_capacity(m as usize + 1);
    let mut c = 1.0;
    out.push(c);
    for j in 0..m {
        let jf = j as f64;
        c *= (jf - m as f64) / ((beta + 1.0 + jf) * (jf + 1.0));
        out.push(c);
    }
    out
}

pub fn log_gamma(z: f64) -> Result<f64, SpecfunError> {
    if !z.is_finite() {
        return Err(SpecfunError::NonFinite(z));
    }
    if z <= 0.0 {
        return Err(SpecfunError::GammaDomain(z));
    }
    Ok(statrs::function::gamma::ln_gamma(z))
}

pub fn gamma(z: f64) -> f64 {
    statrs::function::gamma::gamma(z)
}

/// |Gamma(-s)| for 0 < s < 1, i.e. Gamma(1-s)/s.
pub fn abs_gamma_neg(s: f64) -> f64 {
    gamma(1.0 - s) / s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_table_values() {
        assert_eq!(hermite_1d(PolyDegree(2), 1.0).unwrap(), -1.0);
        assert_eq!(hermite_1d(PolyDegree(0), 7.3).unwrap(), 1.0);
        // explicit series x^4 - 12x^2 + 12
        let x: f64 = 2.0;
        assert_eq!(hermite_1d(PolyDegree(4), x).unwrap(), x.powi(4) - 12.0 * x * x + 12.0);
    }

    #[test]
    fn hermite_nd_products() {
        assert_eq!(hermite_nd(&[3], &[2.0]).unwrap(), -4.0);
        assert_eq!(hermite_nd(&[0, 0], &[1.0, -1.0]).unwrap(), 1.0);
        assert_eq!(hermite_nd(&[1, 2], &[1.0, 1.0]).unwrap(), -1.0);
        assert!(matches!(
            hermite_nd(&[1], &[1.0, 2.0]),
            Err(SpecfunError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn hermite_rejects_cap_and_nan() {
        assert!(matches!(
            hermite_1d(PolyDegree(65), 0.1),
            Err(SpecfunError::DegreeCap { .. })
        ));
        assert!(hermite_1d(PolyDegree(3), f64::NAN).is_err());
    }

    #[test]
    fn hermite_coefficients_match_recurrence() {
        for n in 0..12 {
            let c = hermite_coefficients(n);
            for &x in &[-1.7f64, 0.3, 2.9] {
                let v: f64 = c.iter().enumerate().map(|(i, ci)| ci * x.powi(i as i32)).sum();
                let h = hermite_1d(PolyDegree(n), x).unwrap();
                assert!((v - h).abs() <= 1e-9 * h.abs().max(1.0));
            }
        }
    }

    #[test]
    fn laguerre_examples() {
        assert_eq!(laguerre(0.7, PolyDegree(0), 5.0).unwrap(), 1.0);
        assert!((laguerre(-0.5, PolyDegree(1), 1.0).unwrap() + 1.0).abs() < 1e-15);
        let a: f64 = 0.3;
        let y: f64 = 1.7;
        let l = laguerre((a - 1.0) / 2.0, PolyDegree(1), y * y / 4.0).unwrap();
        let expected = (1.0 + a) / 2.0 - y * y / 4.0;
        assert!((l * (1.0 + a) / 2.0 - expected).abs() < 1e-14);
        assert!(laguerre(-1.0, PolyDegree(1), 1.0).is_err());
        assert!(laguerre(0.0, PolyDegree(1), -1.0).is_err());
    }

    #[test]
    fn laguerre_series_agrees_with_recurrence() {
        // oracle: direct Pochhammer series
        for &beta in &[-0.95, -0.25, 0.0, 0.8, 3.5] {
            for m in 0..15u32 {
                for &r in &[0.0, 0.4, 2.5, 9.0] {
                    let mut term = 1.0;
                    let mut sum = 1.0;
                    for j in 0..m {
                        let jf = j as f64;
                        term *= (jf - m as f64) * r / ((beta + 1.0 + jf) * (jf + 1.0));
                        sum += term;
                    }
                    let v = laguerre(beta, PolyDegree(m), r).unwrap();
                    assert!((v - sum).abs() <= 1e-9 * sum.abs().max(1.0), "{beta} {m} {r}");
                }
            }
        }
    }

    #[test]
    fn log_gamma_values() {
        assert!(log_gamma(1.0).unwrap().abs() < 1e-14);
        assert!((log_gamma(5.0).unwrap() - 24f64.ln()).abs() < 1e-13);
        let half = 0.5 * std::f64::consts::PI.ln();
        assert!((log_gamma(0.5).unwrap() - half).abs() < 1e-14);
        assert!(log_gamma(0.0).is_err());
    }

    #[test]
    fn abs_gamma_neg_half() {
        // |Gamma(-1/2)| = 2 sqrt(pi)
        let v = abs_gamma_neg(0.5);
        assert!((v - 2.0 * std::f64::consts::PI.sqrt()).abs() < 1e-13);
    }
}
