//! Hermite-Laguerre eigenfunctions of the weighted Ornstein-Uhlenbeck operator,
//! their Gram matrices, weak eigen-residuals, and Gaussian-Poincare ratios.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussmeasure::{Convention, ExtensionParams, MeasureError, MomentTable, QuadratureRule};
use crate::poly::{GenPoly, Monomial, PolyError};
use crate::specfun::{hermite_coefficients, laguerre_coefficients, DEFAULT_DEGREE_CAP};

pub const DEFAULT_EIGEN_CAP: u32 = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("multi-index has length {got}, expected {expected}")]
    IndexShape { got: usize, expected: usize },
    #[error("index |alpha| + 2m = {0} exceeds the degree cap")]
    IndexCap(u32),
    #[error("half-space eigenfunction evaluated at y = {0} < 0")]
    NegativeY(f64),
    #[error("eigenfunction norm {0:e} below 1e-14")]
    SingularNorm(f64),
    #[error("{0:?} is not compatible with a {1:?} rule")]
    ConventionMismatch(ProblemKind, Convention),
    #[error("zero gradient energy with nonzero variance {0:e}")]
    ZeroEnergy(f64),
    #[error("empty test set")]
    EmptyTestSet,
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ProblemKind {
    Neumann,
    Dirichlet,
    WholeSpaceEven,
    WholeSpaceOdd,
}

impl ProblemKind {
    pub fn convention(self) -> Convention {
        match self {
            ProblemKind::Neumann | ProblemKind::Dirichlet => Convention::HalfSpace,
            _ => Convention::WholeSpace,
        }
    }

    /// Families carrying the factor y|y|^{-a}.
    pub fn is_odd_family(self) -> bool {
        matches!(self, ProblemKind::Dirichlet | ProblemKind::WholeSpaceOdd)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EigenIndex {
    pub kind: ProblemKind,
    pub alpha: Vec<u32>,
    pub m: u32,
}

impl EigenIndex {
    pub fn new(kind: ProblemKind, alpha: Vec<u32>, m: u32) -> Self {
        EigenIndex { kind, alpha, m }
    }

    pub fn n(&self) -> u32 {
        self.alpha.iter().sum()
    }

    fn validate(&self, p: &ExtensionParams) -> Result<(), SpectralError> {
        if self.alpha.len() != p.dim_n {
            return Err(SpectralError::IndexShape {
                got: self.alpha.len(),
                expected: p.dim_n,
            });
        }
        let total = self.n() + 2 * self.m;
        if total > DEFAULT_DEGREE_CAP || self.alpha.iter().any(|&k| k > DEFAULT_DEGREE_CAP) {
            return Err(SpectralError::IndexCap(total));
        }
        Ok(())
    }
}

pub fn eigenvalue(idx: &EigenIndex, p: &ExtensionParams) -> Result<f64, SpectralError> {
    idx.validate(p)?;
    let base = idx.n() as f64 / 2.0 + idx.m as f64;
    Ok(if idx.kind.is_odd_family() {
        base + (1.0 - p.a) / 2.0
    } else {
        base
    })
}

/// The eigenfunction as a polynomial in (x, y, omega), unnormalized.
pub fn eigenfunction_poly(idx: &EigenIndex, p: &ExtensionParams) -> Result<GenPoly, SpectralError> {
    idx.validate(p)?;
    let n = p.dim_n;
    let a = p.a;
    let mut out = GenPoly::constant(n, a, 1.0);
    for (axis, &deg) in idx.alpha.iter().enumerate() {
        let mut h = GenPoly::zero(n, a);
        for (pow, c) in hermite_coefficients(deg).into_iter().enumerate() {
            let mut m = Monomial::one(n);
            m.x[axis] = pow as u32;
            h.add_term(m, c);
        }
        out = out.mul(&h);
    }
    let odd = idx.kind.is_odd_family();
    let beta = if odd { (1.0 - a) / 2.0 } else { (a - 1.0) / 2.0 };
    let mut lag = GenPoly::zero(n, a);
    for (j, c) in laguerre_coefficients(beta, idx.m).into_iter().enumerate() {
        let mut m = Monomial::one(n);
        m.k = 2 * j as i32;
        lag.add_term(m, c / 4f64.powi(j as i32));
    }
    out = out.mul(&lag);
    if odd {
        out = out.mul(&GenPoly::omega(n, a));
    }
    Ok(out)
}

/// Point value; `point` = (x_1..x_N, y).
pub fn eigenfunction(idx: &EigenIndex, p: &ExtensionParams, point: &[f64]) -> Result<f64, SpectralError> {
    let y = point.get(p.dim_n).copied().unwrap_or(0.0);
    if idx.kind.convention() == Convention::HalfSpace && y < 0.0 {
        return Err(SpectralError::NegativeY(y));
    }
    Ok(eigenfunction_poly(idx, p)?.eval(point, 0.0))
}

fn multi_indices(dim_n: usize, total: u32) -> Vec<Vec<u32>> {
    if dim_n == 1 {
        return vec![vec![total]];
    }
    let mut out = Vec::new();
    for first in (0..=total).rev() {
        for mut rest in multi_indices(dim_n - 1, total - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// All indices with |alpha| + 2m <= cap.
pub fn indices_up_to(kind: ProblemKind, dim_n: usize, cap: u32) -> Vec<EigenIndex> {
    let mut out = Vec::new();
    for total in 0..=cap {
        for m in 0..=total / 2 {
            let n = total - 2 * m;
            for alpha in multi_indices(dim_n, n) {
                out.push(EigenIndex::new(kind, alpha, m));
            }
        }
    }
    out
}

pub fn eigenspace(kappa: f64, kind: ProblemKind, p: &ExtensionParams) -> Vec<EigenIndex> {
    eigenspace_with_cap(kappa, kind, p, DEFAULT_EIGEN_CAP)
}

pub fn eigenspace_with_cap(kappa: f64, kind: ProblemKind, p: &ExtensionParams, cap: u32) -> Vec<EigenIndex> {
    if !(kappa >= 0.0) {
        return Vec::new();
    }
    indices_up_to(kind, p.dim_n, cap)
        .into_iter()
        .filter(|idx| {
            eigenvalue(idx, p)
                .map(|k| (k - kappa).abs() <= 1e-12)
                .unwrap_or(false)
        })
        .collect()
}

/// Smallest nonzero eigenvalue over the given kinds (cap 4 suffices for the gap).
pub fn smallest_nonzero_eigenvalue(kinds: &[ProblemKind], p: &ExtensionParams) -> f64 {
    let mut best = f64::INFINITY;
    for &kind in kinds {
        for idx in indices_up_to(kind, p.dim_n, 4) {
            let k = eigenvalue(&idx, p).unwrap();
            if k > 1e-12 && k < best {
                best = k;
            }
        }
    }
    best
}

fn check_kind(kind: ProblemKind, rule: &QuadratureRule) -> Result<(), SpectralError> {
    if kind.convention() != rule.convention {
        return Err(SpectralError::ConventionMismatch(kind, rule.convention));
    }
    Ok(())
}

/// Integral of a polynomial against the t = 1 measure of the rule.
fn poly_integral(f: &GenPoly, table: &MomentTable, conv: Convention) -> Result<f64, SpectralError> {
    Ok(f.expect(1.0, table, conv)?)
}

/// Eigenfunction divided by its quadrature norm.
pub fn normalized_eigenfunction(
    idx: &EigenIndex,
    p: &ExtensionParams,
    table: &MomentTable,
    conv: Convention,
) -> Result<GenPoly, SpectralError> {
    let v = eigenfunction_poly(idx, p)?;
    let norm2 = poly_integral(&v.mul(&v), table, conv)?;
    let norm = norm2.max(0.0).sqrt();
    if norm < 1e-14 {
        return Err(SpectralError::SingularNorm(norm));
    }
    Ok(v.scale(1.0 / norm))
}

fn params_of(rule: &QuadratureRule) -> ExtensionParams {
    ExtensionParams {
        a: rule.a,
        s: (1.0 - rule.a) / 2.0,
        dim_n: rule.dim_n,
    }
}

pub fn gram_matrix(indices: &[EigenIndex], rule: &QuadratureRule) -> Result<DMatrix<f64>, SpectralError> {
    let p = params_of(rule);
    let table = rule.moment_table()?;
    let mut fns = Vec::with_capacity(indices.len());
    for idx in indices {
        check_kind(idx.kind, rule)?;
        fns.push(normalized_eigenfunction(idx, &p, &table, rule.convention)?);
    }
    let k = fns.len();
    let mut g = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            let v = poly_integral(&fns[i].mul(&fns[j]), &table, rule.convention)?;
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// max over eta of |int grad V . grad eta - kappa int V eta| with normalized functions.
pub fn ou_residual(idx: &EigenIndex, rule: &QuadratureRule, test_set: &[EigenIndex]) -> Result<f64, SpectralError> {
    if test_set.is_empty() {
        return Err(SpectralError::EmptyTestSet);
    }
    check_kind(idx.kind, rule)?;
    let p = params_of(rule);
    let table = rule.moment_table()?;
    let kappa = eigenvalue(idx, &p)?;
    let v = normalized_eigenfunction(idx, &p, &table, rule.convention)?;
    let mut worst: f64 = 0.0;
    for eta_idx in test_set {
        check_kind(eta_idx.kind, rule)?;
        let eta = normalized_eigenfunction(eta_idx, &p, &table, rule.convention)?;
        let stiff = poly_integral(&v.grad_dot(&eta), &table, rule.convention)?;
        let mass = poly_integral(&v.mul(&eta), &table, rule.convention)?;
        worst = worst.max((stiff - kappa * mass).abs());
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoincareKind {
    HalfSpace,
    WholeSpace,
    Dirichlet,
}

/// Optimal constant: 2 on the half-space, 2/min(1, 1-a) on the whole space, 2/(1-a) for Dirichlet data.
pub fn poincare_constant(kind: PoincareKind, a: f64) -> f64 {
    match kind {
        PoincareKind::HalfSpace => 2.0,
        PoincareKind::WholeSpace => 2.0 / (1.0f64).min(1.0 - a),
        PoincareKind::Dirichlet => 2.0 / (1.0 - a),
    }
}

pub fn poincare_ratio(v: &GenPoly, kind: PoincareKind, rule: &QuadratureRule) -> Result<f64, SpectralError> {
    let table = rule.moment_table()?;
    let conv = match kind {
        PoincareKind::WholeSpace => Convention::WholeSpace,
        _ => Convention::HalfSpace,
    };
    let second = poly_integral(&v.mul(v), &table, conv)?;
    let num = match kind {
        PoincareKind::Dirichlet => second,
        _ => {
            let mean = poly_integral(v, &table, conv)?;
            second - mean * mean
        }
    };
    let den = poly_integral(&v.grad_sq(), &table, conv)?;
    if den.abs() < 1e-14 {
        if num.abs() < 1e-14 {
            return Ok(0.0);
        }
        return Err(SpectralError::ZeroEnergy(num));
    }
    Ok(num / den)
}

/// Named member of the Poincare corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub label: String,
    pub extremal: bool,
    pub poly: GenPoly,
}

/// Random polynomials in (x, y) of total degree <= `degree` with coefficients in [-1, 1].
/// Dirichlet corpora multiply by y or by y|y|^{-a} so the trace vanishes.
pub fn random_corpus(
    p: &ExtensionParams,
    kind: PoincareKind,
    count: usize,
    degree: u32,
    seed: u64,
) -> Vec<CorpusEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = p.dim_n;
    let mut monos = Vec::new();
    for total in 0..=degree {
        for k in 0..=total {
            for alpha in multi_indices(n, total - k) {
                let mut m = Monomial::one(n);
                m.x = alpha;
                m.k = k as i32;
                monos.push(m);
            }
        }
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut poly = GenPoly::zero(n, p.a);
        let top = if kind == PoincareKind::Dirichlet { degree.saturating_sub(1) } else { degree };
        for m in &monos {
            if m.x_degree() + m.k as u32 > top {
                continue;
            }
            poly.add_term(m.clone(), rng.gen_range(-1.0..1.0));
        }
        let label = if kind == PoincareKind::Dirichlet {
            if i % 2 == 0 {
                poly = poly.mul(&GenPoly::y(n, p.a));
                format!("random-{i}*y")
            } else {
                poly = poly.mul(&GenPoly::omega(n, p.a));
                format!("random-{i}*omega")
            }
        } else {
            format!("random-{i}")
        };
        out.push(CorpusEntry {
            label,
            extremal: false,
            poly,
        });
    }
    out
}

/// Functions for which the sharp constant is attained.
pub fn extremals(p: &ExtensionParams, kind: PoincareKind) -> Vec<CorpusEntry> {
    let n = p.dim_n;
    let a = p.a;
    let omega = CorpusEntry {
        label: "y|y|^-a".into(),
        extremal: true,
        poly: GenPoly::omega(n, a),
    };
    let xs = (0..n).map(|j| CorpusEntry {
        label: format!("x_{}", j + 1),
        extremal: true,
        poly: GenPoly::x(n, a, j),
    });
    match kind {
        PoincareKind::Dirichlet => vec![omega],
        PoincareKind::HalfSpace => xs.collect(),
        PoincareKind::WholeSpace => {
            let mut v = Vec::new();
            if a <= 0.0 {
                v.extend(xs);
            }
            if a >= 0.0 {
                v.push(omega);
            }
            v
        }
    }
}

/// Candidates examined alongside the random corpus: every x_j and y|y|^{-a}, flagged
/// as extremal only when the sign of a says they attain the constant.
fn candidate_specials(p: &ExtensionParams, kind: PoincareKind) -> Vec<CorpusEntry> {
    let ext = extremals(p, kind);
    let is_ext = |label: &str| ext.iter().any(|e| e.label == label);
    let mut v: Vec<CorpusEntry> = (0..p.dim_n)
        .map(|j| GenPoly::x(p.dim_n, p.a, j))
        .enumerate()
        .map(|(j, poly)| {
            let label = format!("x_{}", j + 1);
            CorpusEntry {
                extremal: is_ext(&label),
                label,
                poly,
            }
        })
        .collect();
    if kind != PoincareKind::HalfSpace {
        v.push(CorpusEntry {
            label: "y|y|^-a".into(),
            extremal: is_ext("y|y|^-a"),
            poly: GenPoly::omega(p.dim_n, p.a),
        });
    }
    if kind == PoincareKind::Dirichlet {
        // x_j does not vanish on the trace
        v.retain(|e| e.label == "y|y|^-a");
    }
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RatioRow {
    pub label: String,
    pub extremal: bool,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoincareReport {
    pub a: f64,
    pub kind: PoincareKind,
    pub constant: f64,
    pub max_ratio: f64,
    pub argmax: String,
    /// labels whose ratio is within `tol` of the constant
    pub attained_by: Vec<String>,
    /// every function attaining the constant is a stated extremal, and every stated extremal attains it
    pub extremal_verdict: bool,
    pub rows: Vec<RatioRow>,
}

pub fn poincare_report(
    p: &ExtensionParams,
    kind: PoincareKind,
    count: usize,
    seed: u64,
    tol: f64,
) -> Result<PoincareReport, SpectralError> {
    let conv = if kind == PoincareKind::WholeSpace { Convention::WholeSpace } else { Convention::HalfSpace };
    let rule = crate::gaussmeasure::build_quadrature_with(p, &[40], p.a, conv)?;
    let mut entries = random_corpus(p, kind, count, 6, seed);
    entries.extend(candidate_specials(p, kind));
    let constant = poincare_constant(kind, p.a);
    let mut rows = Vec::with_capacity(entries.len());
    for e in &entries {
        rows.push(RatioRow {
            label: e.label.clone(),
            extremal: e.extremal,
            ratio: poincare_ratio(&e.poly, kind, &rule)?,
        });
    }
    let (mut max_ratio, mut argmax) = (f64::NEG_INFINITY, String::new());
    for r in &rows {
        if r.ratio > max_ratio {
            max_ratio = r.ratio;
            argmax = r.label.clone();
        }
    }
    let attained_by: Vec<String> = rows
        .iter()
        .filter(|r| (r.ratio - constant).abs() <= tol)
        .map(|r| r.label.clone())
        .collect();
    let verdict = rows
        .iter()
        .all(|r| r.extremal == ((r.ratio - constant).abs() <= tol))
        && rows.iter().all(|r| r.ratio <= constant + tol);
    Ok(PoincareReport {
        a: p.a,
        kind,
        constant,
        max_ratio,
        argmax,
        attained_by,
        extremal_verdict: verdict,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmeasure::{build_quadrature, build_quadrature_with};

    fn params(a: f64) -> ExtensionParams {
        ExtensionParams::from_a(a, 1).unwrap()
    }

    #[test]
    fn eigenvalue_examples() {
        let p = params(0.0);
        assert_eq!(eigenvalue(&EigenIndex::new(ProblemKind::Neumann, vec![0], 0), &p).unwrap(), 0.0);
        assert_eq!(eigenvalue(&EigenIndex::new(ProblemKind::Neumann, vec![3], 1), &p).unwrap(), 2.5);
        let q = params(-0.5);
        assert_eq!(eigenvalue(&EigenIndex::new(ProblemKind::Dirichlet, vec![1], 0), &q).unwrap(), 1.25);
    }

    #[test]
    fn eigenfunction_examples() {
        let p = params(0.0);
        let v = eigenfunction(&EigenIndex::new(ProblemKind::Neumann, vec![2], 0), &p, &[1.0, 0.7]).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        let q = params(0.5);
        let d = eigenfunction(&EigenIndex::new(ProblemKind::Dirichlet, vec![0], 0), &q, &[0.0, 4.0]).unwrap();
        assert!((d - 2.0).abs() < 1e-15);
        let o = eigenfunction(&EigenIndex::new(ProblemKind::WholeSpaceOdd, vec![0], 0), &p, &[0.0, -1.0]).unwrap();
        assert!((o + 1.0).abs() < 1e-15);
        assert!(eigenfunction(&EigenIndex::new(ProblemKind::Neumann, vec![0], 0), &p, &[0.0, -1.0]).is_err());
    }

    #[test]
    fn eigenspace_examples() {
        let p = params(0.0);
        let k1 = eigenspace(1.0, ProblemKind::Neumann, &p);
        assert_eq!(
            k1,
            vec![
                EigenIndex::new(ProblemKind::Neumann, vec![2], 0),
                EigenIndex::new(ProblemKind::Neumann, vec![0], 1)
            ]
        );
        assert_eq!(eigenspace(0.5, ProblemKind::Neumann, &p).len(), 1);
        assert!(eigenspace(0.3, ProblemKind::Neumann, &p).is_empty());
    }

    #[test]
    fn gram_single_and_pair() {
        let p = params(0.3);
        let rule = build_quadrature(&p, &[40]).unwrap();
        let g = gram_matrix(&[EigenIndex::new(ProblemKind::Neumann, vec![3], 2)], &rule).unwrap();
        assert!((g[(0, 0)] - 1.0).abs() < 1e-13);
        let g2 = gram_matrix(
            &[
                EigenIndex::new(ProblemKind::Neumann, vec![1], 0),
                EigenIndex::new(ProblemKind::Neumann, vec![2], 0),
            ],
            &rule,
        )
        .unwrap();
        assert!((g2 - DMatrix::identity(2, 2)).abs().max() < 1e-10);
    }

    #[test]
    fn whole_space_cross_family_orthogonal() {
        let p = params(-0.4);
        let rule = build_quadrature_with(&p, &[40], p.a, Convention::WholeSpace).unwrap();
        let g = gram_matrix(
            &[
                EigenIndex::new(ProblemKind::WholeSpaceEven, vec![1], 1),
                EigenIndex::new(ProblemKind::WholeSpaceOdd, vec![1], 1),
            ],
            &rule,
        )
        .unwrap();
        assert!(g[(0, 1)].abs() < 1e-14);
        assert!(gram_matrix(&[EigenIndex::new(ProblemKind::Neumann, vec![0], 0)], &rule).is_err());
    }

    #[test]
    fn ou_residual_examples() {
        let p = params(0.5);
        let rule = build_quadrature(&p, &[40]).unwrap();
        let tests = indices_up_to(ProblemKind::Neumann, 1, 4);
        let r0 = ou_residual(&EigenIndex::new(ProblemKind::Neumann, vec![0], 0), &rule, &tests).unwrap();
        assert_eq!(r0, 0.0);
        let r2 = ou_residual(&EigenIndex::new(ProblemKind::Neumann, vec![2], 0), &rule, &tests).unwrap();
        assert!(r2 <= 1e-9);
        let dtests = indices_up_to(ProblemKind::Dirichlet, 1, 4);
        let rd = ou_residual(&EigenIndex::new(ProblemKind::Dirichlet, vec![0], 0), &rule, &dtests).unwrap();
        assert!(rd <= 1e-9);
    }

    #[test]
    fn poincare_examples() {
        let p = params(-0.5);
        let whole = build_quadrature_with(&p, &[40], p.a, Convention::WholeSpace).unwrap();
        let x = GenPoly::x(1, p.a, 0);
        assert!((poincare_ratio(&x, PoincareKind::WholeSpace, &whole).unwrap() - 2.0).abs() < 1e-12);
        let c = GenPoly::constant(1, p.a, 3.0);
        assert_eq!(poincare_ratio(&c, PoincareKind::WholeSpace, &whole).unwrap(), 0.0);
        let x2 = x.mul(&x);
        assert!((poincare_ratio(&x2, PoincareKind::WholeSpace, &whole).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn spectral_gap() {
        for &a in &[-0.5, 0.0, 0.5] {
            let p = params(a);
            let whole = smallest_nonzero_eigenvalue(&[ProblemKind::WholeSpaceEven, ProblemKind::WholeSpaceOdd], &p);
            assert!((whole - (1.0f64).min(1.0 - a) / 2.0).abs() < 1e-15);
            assert_eq!(smallest_nonzero_eigenvalue(&[ProblemKind::Neumann], &p), 0.5);
        }
    }
}
