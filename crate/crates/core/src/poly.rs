//! Polynomials in (x, y, t) extended by the odd power y|y|^{-a}.
//!
//! A monomial x^alpha * y^k * omega^w * t^j, omega = y|y|^{-a}, equals
//! sgn(y)^{k+w} |y|^{k + w(1-a)} t^j. Products and derivatives stay in this class,
//! which covers every eigenfunction and blow-up profile used in the crate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussmeasure::{trace_mass, Convention, ExtensionParams, MeasureError, MomentTable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolyError {
    #[error("polynomial dimension {got} does not match {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("trace of |y|^{0} is singular")]
    SingularTrace(f64),
    #[error("time exponent {0} is not a nonnegative integer")]
    TimeExponent(f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Monomial {
    pub x: Vec<u32>,
    pub k: i32,
    pub w: i32,
    pub t: u32,
}

impl Monomial {
    pub fn one(dim_n: usize) -> Self {
        Monomial {
            x: vec![0; dim_n],
            k: 0,
            w: 0,
            t: 0,
        }
    }

    /// real power of |y|
    pub fn y_power(&self, a: f64) -> f64 {
        self.k as f64 + self.w as f64 * (1.0 - a)
    }

    pub fn odd_in_y(&self) -> bool {
        (self.k + self.w).rem_euclid(2) == 1
    }

    pub fn x_degree(&self) -> u32 {
        self.x.iter().sum()
    }

    /// parabolic degree |alpha| + p + 2j
    pub fn parabolic_degree(&self, a: f64) -> f64 {
        self.x_degree() as f64 + self.y_power(a) + 2.0 * self.t as f64
    }

    fn eval(&self, x: &[f64], y: f64, t: f64, a: f64) -> f64 {
        let mut v = 1.0;
        for (e, xi) in self.x.iter().zip(x) {
            v *= xi.powi(*e as i32);
        }
        if self.k != 0 || self.w != 0 {
            let p = self.y_power(a);
            let ay = y.abs();
            let mag = if self.w == 0 { ay.powi(self.k) } else { ay.powf(p) };
            v *= mag;
            if self.odd_in_y() && y < 0.0 {
                v = -v;
            }
        }
        if self.t != 0 {
            v *= t.powi(self.t as i32);
        }
        v
    }
}

/// Sum of c * monomial with a fixed exponent a and spatial dimension N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "PolySpec", try_from = "PolySpec")]
pub struct GenPoly {
    pub dim_n: usize,
    pub a: f64,
    terms: BTreeMap<Monomial, f64>,
}

/// Sum of c_e tau^e with real exponents.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerSeries {
    pub terms: Vec<(f64, f64)>,
}

impl PowerSeries {
    pub fn push(&mut self, exponent: f64, coeff: f64) {
        if coeff == 0.0 {
            return;
        }
        for term in &mut self.terms {
            if (term.0 - exponent).abs() < 1e-12 {
                term.1 += coeff;
                return;
            }
        }
        self.terms.push((exponent, coeff));
        self.terms.sort_by(|l, r| l.0.partial_cmp(&r.0).unwrap());
    }

    pub fn eval(&self, tau: f64) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| if *e == 0.0 { *c } else { c * tau.powf(*e) })
            .sum()
    }

    /// (1/r^2) * int_0^{r^2} series(tau) dtau
    pub fn average(&self, r: f64) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| c * (r * r).powf(*e) / (e + 1.0))
            .sum()
    }

    pub fn scaled(&self, f: f64) -> PowerSeries {
        PowerSeries {
            terms: self.terms.iter().map(|(e, c)| (*e, c * f)).collect(),
        }
    }

    pub fn shifted(&self, de: f64) -> PowerSeries {
        PowerSeries {
            terms: self.terms.iter().map(|(e, c)| (e + de, *c)).collect(),
        }
    }

    pub fn add(&self, other: &PowerSeries) -> PowerSeries {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.push(*e, *c);
        }
        out
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let mut v = 1.0;
    for i in 0..k {
        v *= (n - i) as f64 / (i + 1) as f64;
    }
    v
}

impl GenPoly {
    pub fn zero(dim_n: usize, a: f64) -> Self {
        GenPoly {
            dim_n,
            a,
            terms: BTreeMap::new(),
        }
    }

    pub fn constant(dim_n: usize, a: f64, c: f64) -> Self {
        let mut p = Self::zero(dim_n, a);
        p.add_term(Monomial::one(dim_n), c);
        p
    }

    pub fn monomial(dim_n: usize, a: f64, m: Monomial, c: f64) -> Self {
        let mut p = Self::zero(dim_n, a);
        p.add_term(m, c);
        p
    }

    pub fn x(dim_n: usize, a: f64, axis: usize) -> Self {
        let mut m = Monomial::one(dim_n);
        m.x[axis] = 1;
        Self::monomial(dim_n, a, m, 1.0)
    }

    pub fn y(dim_n: usize, a: f64) -> Self {
        let mut m = Monomial::one(dim_n);
        m.k = 1;
        Self::monomial(dim_n, a, m, 1.0)
    }

    /// y|y|^{-a}
    pub fn omega(dim_n: usize, a: f64) -> Self {
        let mut m = Monomial::one(dim_n);
        m.w = 1;
        Self::monomial(dim_n, a, m, 1.0)
    }

    pub fn t(dim_n: usize, a: f64) -> Self {
        let mut m = Monomial::one(dim_n);
        m.t = 1;
        Self::monomial(dim_n, a, m, 1.0)
    }

    pub fn add_term(&mut self, m: Monomial, c: f64) {
        if c == 0.0 {
            return;
        }
        match self.terms.get_mut(&m) {
            Some(v) => {
                *v += c;
                if *v == 0.0 {
                    self.terms.remove(&m);
                }
            }
            None => {
                self.terms.insert(m, c);
            }
        }
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &f64)> {
        self.terms.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    /// Drop coefficients below `tol` in absolute value.
    pub fn pruned(&self, tol: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            if c.abs() > tol {
                out.add_term(m.clone(), *c);
            }
        }
        out
    }

    pub fn coefficient(&self, m: &Monomial) -> f64 {
        self.terms.get(m).copied().unwrap_or(0.0)
    }

    /// point = (x_1..x_N, y)
    pub fn eval(&self, point: &[f64], t: f64) -> f64 {
        let (x, y) = point.split_at(self.dim_n);
        let y = y.first().copied().unwrap_or(0.0);
        self.terms
            .iter()
            .map(|(m, c)| c * m.eval(x, y, t, self.a))
            .sum()
    }

    pub fn scale(&self, f: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        if f == 0.0 {
            return out;
        }
        for (m, c) in &self.terms {
            out.terms.insert(m.clone(), c * f);
        }
        out
    }

    pub fn add(&self, other: &GenPoly) -> GenPoly {
        let mut out = self.clone();
        for (m, c) in &other.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &GenPoly) -> GenPoly {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &GenPoly) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m1, c1) in &self.terms {
            for (m2, c2) in &other.terms {
                let m = Monomial {
                    x: m1.x.iter().zip(&m2.x).map(|(a, b)| a + b).collect(),
                    k: m1.k + m2.k,
                    w: m1.w + m2.w,
                    t: m1.t + m2.t,
                };
                out.add_term(m, c1 * c2);
            }
        }
        out
    }

    pub fn d_x(&self, axis: usize) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let e = m.x[axis];
            if e == 0 {
                continue;
            }
            let mut n = m.clone();
            n.x[axis] = e - 1;
            out.add_term(n, c * e as f64);
        }
        out
    }

    pub fn d_y(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let p = m.y_power(self.a);
            if p == 0.0 {
                continue;
            }
            let mut n = m.clone();
            n.k -= 1;
            out.add_term(n, c * p);
        }
        out
    }

    pub fn d_t(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            if m.t == 0 {
                continue;
            }
            let mut n = m.clone();
            n.t -= 1;
            out.add_term(n, c * m.t as f64);
        }
        out
    }

    pub fn grad(&self) -> Vec<GenPoly> {
        let mut g: Vec<GenPoly> = (0..self.dim_n).map(|i| self.d_x(i)).collect();
        g.push(self.d_y());
        g
    }

    pub fn grad_sq(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for g in self.grad() {
            out = out.add(&g.mul(&g));
        }
        out
    }

    pub fn grad_dot(&self, other: &GenPoly) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (g, h) in self.grad().iter().zip(other.grad()) {
            out = out.add(&g.mul(&h));
        }
        out
    }

    pub fn laplace_x(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for i in 0..self.dim_n {
            out = out.add(&self.d_x(i).d_x(i));
        }
        out
    }

    /// y^{-a} d_y (y^a d_y .) acting on |y|^p gives p(p - 1 + a)|y|^{p-2}.
    pub fn weighted_y_operator(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let p = m.y_power(self.a);
            let f = p * (p - 1.0 + self.a);
            if f == 0.0 {
                continue;
            }
            let mut n = m.clone();
            n.k -= 2;
            out.add_term(n, c * f);
        }
        out
    }

    /// d_t W + y^{-a} div(y^a grad W), the right-hand side of the backward equation.
    pub fn backward_residual(&self) -> GenPoly {
        self.d_t().add(&self.laplace_x()).add(&self.weighted_y_operator())
    }

    /// d_t U - y^{-a} div(y^a grad U)
    pub fn forward_residual(&self) -> GenPoly {
        self.d_t().sub(&self.laplace_x().add(&self.weighted_y_operator()))
    }

    /// Z = 2t d_t + X.grad, which multiplies each monomial by its parabolic degree.
    pub fn z_operator(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * m.parabolic_degree(self.a));
        }
        out
    }

    /// X.grad only (no time part)
    pub fn euler_spatial(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * (m.x_degree() as f64 + m.y_power(self.a)));
        }
        out
    }

    /// W(x + x0, y, t + t0)
    pub fn translate(&self, x0: &[f64], t0: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            // expand each shifted factor binomially
            let mut partial: Vec<(Monomial, f64)> = vec![(
                Monomial {
                    x: vec![0; self.dim_n],
                    k: m.k,
                    w: m.w,
                    t: 0,
                },
                *c,
            )];
            for axis in 0..self.dim_n {
                let e = m.x[axis];
                let mut next = Vec::new();
                for (pm, pc) in &partial {
                    for i in 0..=e {
                        let mut nm = pm.clone();
                        nm.x[axis] = i;
                        let f = binomial(e, i) * x0[axis].powi((e - i) as i32);
                        if f != 0.0 {
                            next.push((nm, pc * f));
                        }
                    }
                }
                partial = next;
            }
            let e = m.t;
            for (pm, pc) in partial {
                for i in 0..=e {
                    let mut nm = pm.clone();
                    nm.t = i;
                    let f = binomial(e, i) * t0.powi((e - i) as i32);
                    if f != 0.0 {
                        out.add_term(nm, pc * f);
                    }
                }
            }
        }
        out
    }

    /// W(rX, r^2 t)
    pub fn parabolic_scale(&self, r: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * r.powf(m.parabolic_degree(self.a)));
        }
        out
    }

    /// W(X, -t)
    pub fn time_reflect(&self) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let sign = if m.t % 2 == 1 { -1.0 } else { 1.0 };
            out.add_term(m.clone(), sign * c);
        }
        out
    }

    /// Restriction to y = 0 (terms with positive |y|-power vanish).
    pub fn trace(&self) -> Result<GenPoly, PolyError> {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let p = m.y_power(self.a);
            if p < 0.0 {
                return Err(PolyError::SingularTrace(p));
            }
            if p == 0.0 {
                out.add_term(m.clone(), *c);
            }
        }
        Ok(out)
    }

    /// Set t to a fixed value, leaving a polynomial in X.
    pub fn at_time(&self, t: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let mut n = m.clone();
            n.t = 0;
            out.add_term(n, c * t.powi(m.t as i32));
        }
        out
    }

    /// t^kappa P(X / sqrt(t)) for a polynomial in X only; every exponent of t must be a
    /// nonnegative integer.
    pub fn homogenize(&self, kappa: f64) -> Result<GenPoly, PolyError> {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            let e = kappa - 0.5 * (m.x_degree() as f64 + m.y_power(self.a)) + m.t as f64;
            let rounded = e.round();
            if (e - rounded).abs() > 1e-9 || rounded < 0.0 {
                return Err(PolyError::TimeExponent(e));
            }
            let mut n = m.clone();
            n.t = rounded as u32;
            out.add_term(n, *c);
        }
        Ok(out)
    }

    /// int P(X, tau) dmu_tau as a series in tau (measure centered at the origin).
    pub fn expect_series(
        &self,
        table: &MomentTable,
        convention: Convention,
    ) -> Result<PowerSeries, PolyError> {
        let mut s = PowerSeries::default();
        for (m, c) in &self.terms {
            if convention == Convention::WholeSpace && m.odd_in_y() {
                continue;
            }
            let mut v = *c;
            for e in &m.x {
                v *= table.x_moment(*e);
            }
            if v == 0.0 {
                continue;
            }
            let p = m.y_power(self.a);
            v *= table.y_moment(p)?;
            s.push(m.t as f64 + 0.5 * (m.x_degree() as f64 + p), v);
        }
        Ok(s)
    }

    pub fn expect(&self, tau: f64, table: &MomentTable, convention: Convention) -> Result<f64, PolyError> {
        Ok(self.expect_series(table, convention)?.eval(tau))
    }

    /// int P(x, 0, tau) G_a(x, 0, tau) dx for a trace polynomial, as a series in tau.
    pub fn trace_expect_series(&self, table: &MomentTable, p: &ExtensionParams) -> Result<PowerSeries, PolyError> {
        let tr = self.trace()?;
        let mut s = PowerSeries::default();
        for (m, c) in tr.terms() {
            let mut v = *c;
            for e in &m.x {
                v *= table.x_moment(*e);
            }
            s.push(m.t as f64 + 0.5 * m.x_degree() as f64, v);
        }
        // mass of the trace measure is trace_mass(1) * tau^{-(1+a)/2}
        Ok(s.scaled(trace_mass(1.0, p)).shifted(-(1.0 + p.a) / 2.0))
    }

    /// Largest parabolic degree among the terms.
    pub fn max_parabolic_degree(&self) -> f64 {
        self.terms
            .keys()
            .map(|m| m.parabolic_degree(self.a))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_parabolic_degree(&self) -> f64 {
        self.terms
            .keys()
            .map(|m| m.parabolic_degree(self.a))
            .fold(f64::INFINITY, f64::min)
    }

    /// Components of parabolic degree within 1e-9 of `deg`.
    pub fn homogeneous_part(&self, deg: f64) -> GenPoly {
        let mut out = Self::zero(self.dim_n, self.a);
        for (m, c) in &self.terms {
            if (m.parabolic_degree(self.a) - deg).abs() < 1e-9 {
                out.add_term(m.clone(), *c);
            }
        }
        out
    }
}

/// Serializable term list {coeff, x, k, w, t}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermSpec {
    pub coeff: f64,
    #[serde(default)]
    pub x: Vec<u32>,
    #[serde(default)]
    pub k: i32,
    #[serde(default)]
    pub w: i32,
    #[serde(default)]
    pub t: u32,
}

/// Serialized form of a [`GenPoly`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolySpec {
    pub dim_n: usize,
    pub a: f64,
    pub terms: Vec<TermSpec>,
}

impl From<GenPoly> for PolySpec {
    fn from(p: GenPoly) -> Self {
        PolySpec {
            dim_n: p.dim_n,
            a: p.a,
            terms: p.to_terms(),
        }
    }
}

impl TryFrom<PolySpec> for GenPoly {
    type Error = PolyError;

    fn try_from(s: PolySpec) -> Result<Self, Self::Error> {
        GenPoly::from_terms(s.dim_n, s.a, &s.terms)
    }
}

impl GenPoly {
    pub fn from_terms(dim_n: usize, a: f64, specs: &[TermSpec]) -> Result<GenPoly, PolyError> {
        let mut out = Self::zero(dim_n, a);
        for s in specs {
            let mut x = s.x.clone();
            if x.is_empty() {
                x = vec![0; dim_n];
            }
            if x.len() != dim_n {
                return Err(PolyError::Dimension {
                    got: x.len(),
                    expected: dim_n,
                });
            }
            out.add_term(
                Monomial {
                    x,
                    k: s.k,
                    w: s.w,
                    t: s.t,
                },
                s.coeff,
            );
        }
        Ok(out)
    }

    pub fn to_terms(&self) -> Vec<TermSpec> {
        self.terms
            .iter()
            .map(|(m, c)| TermSpec {
                coeff: *c,
                x: m.x.clone(),
                k: m.k,
                w: m.w,
                t: m.t,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: f64 = 0.3;

    fn theta01(a: f64) -> GenPoly {
        // ((1+a)/2) t - y^2/4
        let y = GenPoly::y(1, a);
        GenPoly::t(1, a).scale((1.0 + a) / 2.0).sub(&y.mul(&y).scale(0.25))
    }

    #[test]
    fn evaluation_and_parity() {
        let w = GenPoly::omega(1, A);
        assert!((w.eval(&[0.0, 2.0], 0.0) - 2f64.powf(1.0 - A)).abs() < 1e-15);
        assert!((w.eval(&[0.0, -2.0], 0.0) + 2f64.powf(1.0 - A)).abs() < 1e-15);
    }

    #[test]
    fn backward_residual_of_table_polynomial_vanishes() {
        assert!(theta01(A).backward_residual().pruned(1e-14).is_zero());
        let x = GenPoly::x(1, A, 0);
        let theta20 = x.mul(&x).sub(&GenPoly::t(1, A).scale(2.0));
        assert!(theta20.backward_residual().pruned(1e-14).is_zero());
    }

    #[test]
    fn derivative_of_omega() {
        let d = GenPoly::omega(1, A).d_y();
        // (1-a) |y|^{-a}
        let v = d.eval(&[0.0, 1.7], 0.0);
        assert!((v - (1.0 - A) * 1.7f64.powf(-A)).abs() < 1e-14);
    }

    #[test]
    fn translate_matches_pointwise() {
        let x = GenPoly::x(2, A, 0);
        let p = x.mul(&x).mul(&GenPoly::t(2, A)).add(&GenPoly::x(2, A, 0).scale(3.0)).add(&GenPoly::y(2, A));
        let q = p.translate(&[0.5, -1.0], 0.25);
        let pt = [0.3, 0.7, 1.1];
        let shifted = [0.8, -0.3, 1.1];
        assert!((q.eval(&pt, 0.6) - p.eval(&shifted, 0.85)).abs() < 1e-13);
    }

    #[test]
    fn expectation_of_x_squared() {
        let table = MomentTable::new(A, 40).unwrap();
        let x = GenPoly::x(1, A, 0);
        let s = x.mul(&x).expect_series(&table, Convention::HalfSpace).unwrap();
        assert!((s.eval(0.7) - 1.4).abs() < 1e-13);
        assert!((s.average(0.5) - 0.25).abs() < 1e-13);
    }

    #[test]
    fn homogenize_hermite() {
        // x^2 - 2 -> x^2 - 2t
        let x = GenPoly::x(1, A, 0);
        let h = x.mul(&x).sub(&GenPoly::constant(1, A, 2.0));
        let theta = h.homogenize(1.0).unwrap();
        assert!((theta.eval(&[1.5, 0.0], 0.3) - (2.25 - 0.6)).abs() < 1e-14);
        assert!(h.homogenize(0.5).is_err());
    }

    #[test]
    fn json_round_trip() {
        let p = theta01(A).add(&GenPoly::omega(1, A).scale(0.5));
        let js = serde_json::to_string(&p).unwrap();
        let back: GenPoly = serde_json::from_str(&js).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn z_operator_on_homogeneous_polynomial() {
        let th = theta01(A);
        let diff = th.z_operator().sub(&th.scale(2.0));
        assert!(diff.pruned(1e-14).is_zero());
    }
}
