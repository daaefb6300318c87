//! Blow-up analysis at a trace point: normalized rescalings, projections onto the
//! eigenbasis, the homogeneous tangent polynomial, and nodal-point classification.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frequency::{self, FieldHandle, FrequencyError, PolyField, ProfileParams, VanishingOrder};
use crate::gaussmeasure::{Convention, ExtensionParams, KahanSum, MeasureError, MomentTable, QuadratureRule, TracePoint};
use crate::poly::{GenPoly, Monomial, PolyError};
use crate::solver::FieldRole;
use crate::spectral::{self, EigenIndex, ProblemKind, SpectralError};

#[derive(Debug, Error)]
pub enum BlowupError {
    #[error("height {0:e} too small to normalize")]
    VanishingHeight(f64),
    #[error("quadrature node ({r}x, {t}) outside the field hull")]
    OutOfHull { r: f64, t: f64 },
    #[error("quotient limit {raw} is not within {tol} of an admissible frequency")]
    Inconclusive { raw: f64, tol: f64 },
    #[error("every tangent coefficient at kappa = {0} is below 1e-10")]
    AllCoefficientsVanish(f64),
    #[error("2 kappa = {0} is not an integer; spatial dimension not applicable")]
    NotApplicable(f64),
    #[error("|u(p0)| = {value:e} exceeds the nodal tolerance {tol:e}")]
    NotNodal { value: f64, tol: f64 },
    #[error("vanishing order appears infinite at this point")]
    InfiniteOrder,
    #[error("need at least {0} radii")]
    ShortLadder(usize),
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

pub type Result<T> = std::result::Result<T, BlowupError>;

pub const SNAP_TOL: f64 = 0.1;
pub const COEFF_FLOOR: f64 = 1e-10;
pub const NODAL_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const RANK_TOL: f64 = 1e-10;

/// Which eigenbasis the blow-up is expanded in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    Neumann,
    Dirichlet,
    /// even and odd modes on the whole line in y
    WholeSpace,
}

impl Family {
    pub fn kinds(self) -> &'static [ProblemKind] {
        match self {
            Family::Neumann => &[ProblemKind::Neumann],
            Family::Dirichlet => &[ProblemKind::Dirichlet],
            Family::WholeSpace => &[ProblemKind::WholeSpaceEven, ProblemKind::WholeSpaceOdd],
        }
    }

    pub fn convention(self) -> Convention {
        match self {
            Family::WholeSpace => Convention::WholeSpace,
            _ => Convention::HalfSpace,
        }
    }

    pub fn for_kind(kind: ProblemKind) -> Family {
        match kind {
            ProblemKind::Neumann => Family::Neumann,
            ProblemKind::Dirichlet => Family::Dirichlet,
            _ => Family::WholeSpace,
        }
    }

    /// Admissible frequency closest to `raw`.
    pub fn nearest_admissible(self, raw: f64, a: f64) -> f64 {
        let half = (2.0 * raw.max(0.0)).round() / 2.0;
        let shifted = |off: f64| ((2.0 * (raw - off)).round().max(0.0)) / 2.0 + off;
        let odd = (1.0 - a) / 2.0;
        let cands: Vec<f64> = match self {
            Family::Neumann => vec![half],
            Family::Dirichlet => vec![shifted(odd)],
            Family::WholeSpace => vec![half, shifted(odd)],
        };
        cands
            .into_iter()
            .min_by(|x, y| (x - raw).abs().partial_cmp(&(y - raw).abs()).unwrap())
            .unwrap()
    }
}

/// W_{p0,r}(X, t) = W(rX, r^2 t) / sqrt(H(W, r)); the center is the one the handle carries.
pub fn rescale(w: &FieldHandle, r: f64, rule: &QuadratureRule) -> Result<FieldHandle> {
    let h = w.averaged(r, rule, frequency::TIME_ORDER)?.h;
    if !(h > 1e-14) {
        return Err(BlowupError::VanishingHeight(h));
    }
    Ok(w.scaled_view(r, 1.0 / h.sqrt()))
}

/// Handle for a closed-form field given in original coordinates, centered at p0.
pub fn poly_handle(w: &GenPoly, p0: &TracePoint, family: Family) -> FieldHandle {
    let f = PolyField::new(w, p0.clone(), None);
    FieldHandle::Poly(match family {
        Family::WholeSpace => f.whole_space(),
        _ => f,
    })
}

fn normalized(idx: &EigenIndex, p: &ExtensionParams, table: &MomentTable) -> Result<GenPoly> {
    Ok(spectral::normalized_eigenfunction(idx, p, table, idx.kind.convention())?)
}

/// w_{alpha,m}(r) = int W(rX, r^2) Vbar_{alpha,m}(X) dmu(X).
pub fn project_coefficients(
    w: &FieldHandle,
    r: f64,
    indices: &[EigenIndex],
    rule: &QuadratureRule,
) -> Result<Vec<(EigenIndex, f64)>> {
    let p = w.params()?;
    let table = rule.moment_table()?;
    let basis: Vec<GenPoly> = indices.iter().map(|i| normalized(i, &p, &table)).collect::<Result<_>>()?;
    match w {
        FieldHandle::Poly(f) => {
            let slice = f.w.parabolic_scale(r).at_time(1.0);
            indices
                .iter()
                .zip(&basis)
                .map(|(i, v)| Ok((i.clone(), slice.mul(v).expect(1.0, &table, i.kind.convention())?)))
                .collect()
        }
        FieldHandle::Grid(g) => {
            let outside_is_zero = g.w.role == FieldRole::Cutoff;
            let n = p.dim_n;
            let mut acc = vec![KahanSum::default(); indices.len()];
            let mut x = vec![0.0; n + 1];
            let mut bad = false;
            rule.for_each_node(|xi, wt| {
                for k in 0..=n {
                    x[k] = r * xi[k];
                }
                let v = match w.value(&x, r * r) {
                    Some(v) => v,
                    None if outside_is_zero => 0.0,
                    None => {
                        bad = true;
                        return;
                    }
                };
                for (k, b) in basis.iter().enumerate() {
                    acc[k].add(wt * v * b.eval(xi, 0.0));
                }
            });
            if bad {
                return Err(BlowupError::OutOfHull { r, t: r * r });
            }
            Ok(indices.iter().cloned().zip(acc.iter().map(|s| s.value())).collect())
        }
    }
}

/// Value at h = 0 of the polynomial through the points (h_k, v_k) (Neville).
pub fn extrapolate_to_zero(h: &[f64], v: &[f64]) -> f64 {
    let mut p = v.to_vec();
    let n = p.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (h[i + m] * p[i] - h[i] * p[i + 1]) / (h[i + m] - h[i]);
        }
    }
    p[0]
}

/// Two-stage extrapolation in r^2 over the three smallest radii, plus the change
/// against the same fit one radius up.
fn limit_in_r2(radii: &[f64], values: &[f64]) -> (f64, f64) {
    let n = radii.len();
    let h: Vec<f64> = radii.iter().map(|r| r * r).collect();
    let best = extrapolate_to_zero(&h[n - 3..], &values[n - 3..]);
    let prev = if n >= 4 {
        extrapolate_to_zero(&h[n - 4..n - 1], &values[n - 4..n - 1])
    } else {
        best
    };
    (best, (best - prev).abs())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentTerm {
    pub kind: ProblemKind,
    pub alpha: Vec<u32>,
    pub m: u32,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentMap {
    pub kappa: f64,
    /// quotient limit before snapping
    pub raw_kappa: f64,
    pub terms: Vec<TangentTerm>,
    #[serde(rename = "L0")]
    pub l0: Option<f64>,
    pub params: ExtensionParams,
}

impl TangentMap {
    /// Theta(X, t) = t^kappa sum v Vbar(X / sqrt t).
    pub fn polynomial(&self, table: &MomentTable) -> Result<GenPoly> {
        let p = &self.params;
        let mut out = GenPoly::zero(p.dim_n, p.a);
        for term in &self.terms {
            let idx = EigenIndex::new(term.kind, term.alpha.clone(), term.m);
            let v = normalized(&idx, p, table)?;
            out = out.add(&v.homogenize(self.kappa)?.scale(term.v));
        }
        Ok(out)
    }

    pub fn coefficient(&self, kind: ProblemKind, alpha: &[u32], m: u32) -> f64 {
        self.terms
            .iter()
            .find(|t| t.kind == kind && t.alpha == alpha && t.m == m)
            .map_or(0.0, |t| t.v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TangentOptions {
    pub family: Family,
    pub snap_tol: f64,
    pub profile: ProfileParams,
}

impl Default for TangentOptions {
    fn default() -> Self {
        TangentOptions {
            family: Family::Neumann,
            snap_tol: SNAP_TOL,
            profile: ProfileParams::default(),
        }
    }
}

pub fn tangent_map(
    w: &FieldHandle,
    ladder: &[f64],
    rule: &QuadratureRule,
    opts: &TangentOptions,
) -> Result<TangentMap> {
    if ladder.len() < 3 {
        return Err(BlowupError::ShortLadder(3));
    }
    let p = w.params()?;
    let prof = frequency::profile(w, ladder, &opts.profile, rule)?;
    let raw = prof.phi_limit();
    let kappa = opts.family.nearest_admissible(raw, p.a);
    if !((kappa - raw).abs() <= opts.snap_tol) {
        return Err(BlowupError::Inconclusive {
            raw,
            tol: opts.snap_tol,
        });
    }
    let indices: Vec<EigenIndex> = opts
        .family
        .kinds()
        .iter()
        .flat_map(|&k| spectral::eigenspace(kappa, k, &p))
        .collect();
    let mut series: Vec<Vec<f64>> = vec![Vec::with_capacity(ladder.len()); indices.len()];
    for &r in ladder {
        let scale = r.powf(-2.0 * kappa);
        for (k, (_, c)) in project_coefficients(w, r, &indices, rule)?.into_iter().enumerate() {
            series[k].push(c * scale);
        }
    }
    let mut terms = Vec::new();
    for (idx, vals) in indices.iter().zip(&series) {
        let (v, _) = limit_in_r2(ladder, vals);
        if v.abs() > COEFF_FLOOR {
            terms.push(TangentTerm {
                kind: idx.kind,
                alpha: idx.alpha.clone(),
                m: idx.m,
                v,
            });
        }
    }
    if terms.is_empty() {
        return Err(BlowupError::AllCoefficientsVanish(kappa));
    }
    let ts: Vec<f64> = prof.rows.iter().map(|row| row.h / row.r.powf(4.0 * kappa)).collect();
    let (l0, _) = limit_in_r2(ladder, &ts);
    Ok(TangentMap {
        kappa,
        raw_kappa: raw,
        terms,
        l0: Some(l0).filter(|v| v.is_finite()),
        params: p,
    })
}

/// max over samples of |Z Theta - 2 kappa Theta|; samples are (X, t).
pub fn homogeneity_residual(theta: &GenPoly, kappa: f64, samples: &[(Vec<f64>, f64)]) -> f64 {
    let res = theta.z_operator().sub(&theta.scale(2.0 * kappa));
    samples
        .iter()
        .map(|(x, t)| res.eval(x, *t).abs())
        .fold(0.0, f64::max)
}

/// Sample set on [-1, 1]^N x [0, 1] x (0, 1] with `k` points per axis.
pub fn sample_box(dim_n: usize, k: usize) -> Vec<(Vec<f64>, f64)> {
    let axis = |lo: f64, j: usize| lo + (1.0 - lo) * (j as f64 + 0.5) / k as f64;
    let total = k.pow(dim_n as u32 + 2);
    (0..total)
        .map(|mut flat| {
            let mut x = Vec::with_capacity(dim_n + 1);
            for _ in 0..dim_n {
                x.push(axis(-1.0, flat % k));
                flat /= k;
            }
            x.push(axis(0.0, flat % k));
            flat /= k;
            (x, axis(0.0, flat % k))
        })
        .collect()
}

/// sup over the box |x_i| <= r, 0 <= y <= r, 0 < t <= r^2 of |W - Theta| / r^{2 kappa},
/// one value per radius; points outside a grid hull are skipped.
pub fn expansion_residuals(w: &FieldHandle, theta: &GenPoly, kappa: f64, ladder: &[f64], k: usize) -> Vec<f64> {
    let unit = sample_box(w.dim_n(), k);
    ladder
        .iter()
        .map(|&r| {
            let mut sup: f64 = 0.0;
            for (x, t) in &unit {
                let xs: Vec<f64> = x.iter().map(|c| c * r).collect();
                let ts = t * r * r;
                if let Some(v) = w.value(&xs, ts) {
                    sup = sup.max((v - theta.eval(&xs, ts)).abs());
                }
            }
            sup / r.powf(2.0 * kappa)
        })
        .collect()
}

fn multi_indices(dim_n: usize, total: u32) -> Vec<Vec<u32>> {
    if dim_n == 1 {
        return vec![vec![total]];
    }
    (0..=total)
        .flat_map(|first| {
            multi_indices(dim_n - 1, total - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

/// N minus the rank of the rows grad_x d_x^alpha d_t^j Theta over |alpha| + 2j = 2 kappa - 1.
pub fn spatial_dimension(theta: &GenPoly, kappa: f64) -> Result<usize> {
    let two_k = 2.0 * kappa;
    if (two_k - two_k.round()).abs() > 1e-9 || two_k.round() < 1.0 {
        return Err(BlowupError::NotApplicable(two_k));
    }
    let order = two_k.round() as u32 - 1;
    let n = theta.dim_n;
    let origin = vec![0.0; n + 1];
    let mut rows: Vec<f64> = Vec::new();
    for j in 0..=order / 2 {
        let mut dt = theta.clone();
        for _ in 0..j {
            dt = dt.d_t();
        }
        for alpha in multi_indices(n, order - 2 * j) {
            let mut d = dt.clone();
            for (axis, &k) in alpha.iter().enumerate() {
                for _ in 0..k {
                    d = d.d_x(axis);
                }
            }
            rows.extend((0..n).map(|axis| d.d_x(axis).eval(&origin, 0.0)));
        }
    }
    let count = rows.len() / n;
    if count == 0 {
        return Ok(n);
    }
    let m = DMatrix::from_row_slice(count, n, &rows);
    let sv = m.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    let rank = sv.iter().filter(|s| **s > RANK_TOL * top.max(1.0)).count();
    Ok(n - rank)
}

/// Caloric extension of a trace polynomial u(x, t): sum_k P_k y^{2k} with P_0 = u and
/// P_{k+1} (2k+2)(2k+1+a) = -(d_t + Laplace_x) P_k.
pub fn caloric_extension(u: &GenPoly) -> Result<GenPoly> {
    if u.terms().any(|(m, _)| m.k != 0 || m.w != 0) {
        return Err(BlowupError::Shape("trace polynomial must not depend on y".into()));
    }
    let a = u.a;
    let mut out = GenPoly::zero(u.dim_n, a);
    let mut pk = u.clone();
    let mut k = 0u32;
    while !pk.is_empty() {
        let mut ypow = Monomial::one(u.dim_n);
        ypow.k = 2 * k as i32;
        out = out.add(&pk.mul(&GenPoly::monomial(u.dim_n, a, ypow, 1.0)));
        let lift = -1.0 / ((2.0 * k as f64 + 2.0) * (2.0 * k as f64 + 1.0 + a));
        pk = pk.d_t().add(&pk.laplace_x()).scale(lift).pruned(0.0);
        k += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class")]
pub enum NodalClass {
    Regular,
    Singular {
        kappa: f64,
        /// spatial dimension; None when 2 kappa is not an integer
        d: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalReport {
    pub point: TracePoint,
    pub class: NodalClass,
    pub tangent: TangentMap,
    pub gradient_norm: f64,
    /// Regular verdict agrees with |grad_x u(p0)| > tolerance
    pub gradient_consistent: bool,
    pub vanishing: VanishingOrder,
}

/// Classify a nodal point of a trace polynomial u(x, t). `u_sup` is the sup norm of u
/// over the region of interest; both tolerances are relative to it.
pub fn classify_nodal_point(
    u: &GenPoly,
    p0: &TracePoint,
    u_sup: f64,
    ladder: &[f64],
    rule: &QuadratureRule,
) -> Result<NodalReport> {
    let n = u.dim_n;
    if p0.x.len() != n {
        return Err(BlowupError::Shape(format!("point has {} coordinates, expected {n}", p0.x.len())));
    }
    let mut at = p0.x.clone();
    at.push(0.0);
    let value = u.eval(&at, p0.t);
    let tol = NODAL_TOL * u_sup;
    if value.abs() > tol {
        return Err(BlowupError::NotNodal { value, tol });
    }
    let gradient_norm = (0..n).map(|k| u.d_x(k).eval(&at, p0.t).powi(2)).sum::<f64>().sqrt();
    let w = caloric_extension(u)?;
    let handle = poly_handle(&w, p0, Family::Neumann);
    let prof = frequency::profile(&handle, ladder, &ProfileParams::default(), rule)?;
    let vanishing = frequency::vanishing_order(&prof)?;
    if vanishing.infinite_suspected {
        return Err(BlowupError::InfiniteOrder);
    }
    let tangent = tangent_map(&handle, ladder, rule, &TangentOptions::default())?;
    let regular = (tangent.kappa - 0.5).abs() < 1e-12;
    let class = if regular {
        NodalClass::Regular
    } else {
        let theta = tangent.polynomial(&rule.moment_table()?)?;
        NodalClass::Singular {
            kappa: tangent.kappa,
            d: spatial_dimension(&theta, tangent.kappa).ok(),
        }
    };
    Ok(NodalReport {
        point: p0.clone(),
        class,
        tangent,
        gradient_norm,
        gradient_consistent: regular == (gradient_norm > GRADIENT_TOL * u_sup),
        vanishing,
    })
}

/// Box lo..hi in (x_1..x_N, t) with `counts` lattice points per axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanLattice {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ScanLattice {
    /// [-1, 1]^{N+1} with 9 points per axis.
    pub fn unit(dim_n: usize) -> Self {
        ScanLattice {
            lo: vec![-1.0; dim_n + 1],
            hi: vec![1.0; dim_n + 1],
            counts: vec![9; dim_n + 1],
        }
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let c = self.counts[axis];
        if c < 2 {
            return self.lo[axis];
        }
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * i as f64 / (c - 1) as f64
    }

    fn points(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new()];
        for &c in &self.counts {
            out = out
                .into_iter()
                .flat_map(|p| {
                    (0..c).map(move |i| {
                        let mut q = p.clone();
                        q.push(i);
                        q
                    })
                })
                .collect();
        }
        out
    }

    fn position(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().enumerate().map(|(k, &i)| self.coord(k, i)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub point: TracePoint,
    /// Ok report or the error message
    pub report: std::result::Result<NodalReport, String>,
}

fn trace_eval(u: &GenPoly, pos: &[f64]) -> f64 {
    let n = u.dim_n;
    let mut x = pos[..n].to_vec();
    x.push(0.0);
    u.eval(&x, pos[n])
}

/// Nodal lattice points and bisected sign changes along lattice edges, each classified.
pub fn nodal_scan(u: &GenPoly, lattice: &ScanLattice, ladder: &[f64], rule: &QuadratureRule) -> Result<Vec<ScanEntry>> {
    let n = u.dim_n;
    if lattice.lo.len() != n + 1 || lattice.hi.len() != n + 1 || lattice.counts.len() != n + 1 {
        return Err(BlowupError::Shape("lattice must have N + 1 axes".into()));
    }
    let nodes = lattice.points();
    let vals: Vec<f64> = nodes.iter().map(|i| trace_eval(u, &lattice.position(i))).collect();
    let sup = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = NODAL_TOL * sup;
    let mut found: Vec<Vec<f64>> = Vec::new();
    let lookup = |idx: &[usize]| {
        let mut flat = 0;
        for (k, &i) in idx.iter().enumerate() {
            flat = flat * lattice.counts[k] + i;
        }
        flat
    };
    for (flat, idx) in nodes.iter().enumerate() {
        let v0 = vals[flat];
        if v0.abs() <= tol {
            found.push(lattice.position(idx));
            continue;
        }
        for axis in 0..=n {
            if idx[axis] + 1 >= lattice.counts[axis] {
                continue;
            }
            let mut next = idx.clone();
            next[axis] += 1;
            let v1 = vals[lookup(&next)];
            if v1.abs() <= tol || v0.signum() == v1.signum() {
                continue;
            }
            let (mut lo, mut hi) = (lattice.position(idx), lattice.position(&next));
            let mut flo = v0;
            for _ in 0..200 {
                let mid: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| 0.5 * (a + b)).collect();
                let fm = trace_eval(u, &mid);
                if fm == 0.0 || (hi[axis] - lo[axis]).abs() < 1e-14 {
                    lo = mid;
                    break;
                }
                if fm.signum() == flo.signum() {
                    lo = mid;
                    flo = fm;
                } else {
                    hi = mid;
                }
            }
            found.push(lo);
        }
    }
    let mut unique: Vec<Vec<f64>> = Vec::new();
    for p in found {
        if !unique.iter().any(|q| q.iter().zip(&p).all(|(a, b)| (a - b).abs() < 1e-9)) {
            unique.push(p);
        }
    }
    Ok(unique
        .into_iter()
        .map(|pos| {
            let point = TracePoint {
                x: pos[..n].to_vec(),
                t: pos[n],
            };
            let report = classify_nodal_point(u, &point, sup, ladder, rule).map_err(|e| e.to_string());
            ScanEntry { point, report }
        })
        .collect())
}

/// The default blow-up ladder for closed-form fields.
pub fn poly_ladder() -> Vec<f64> {
    (0..12).map(|l| 0.4 * 2f64.powf(-(l as f64) / 2.0)).collect()
}
