//! Height, energy and frequency functionals of a field around a trace point,
//! their time averages, and the derived Almgren-Poon, Weiss, Monneau and
//! Alt-Caffarelli-Friedman quantities.
//!
//! Fields are seen in backward analysis time: t > 0 is the distance into the
//! past from the center p0, and the measure at time t is y^a G_a(X, t) dX.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::gaussmeasure::{
    gauss_hermite, gauss_legendre, trace_mass, Convention, ExtensionParams, KahanSum, MeasureError, MomentTable,
    QuadratureRule, TracePoint,
};
use crate::poly::{GenPoly, PolyError, PowerSeries};
use crate::solver::{self, GridField, PotentialField, SolverError};

#[derive(Debug, Error)]
pub enum FrequencyError {
    #[error("height H = {h:e} vanishes at r = {r}")]
    VanishingHeight { r: f64, h: f64 },
    #[error("time {0} outside the field's time hull")]
    TimeOutOfHull(f64),
    #[error("need at least {need} radii with positive height, have {have}")]
    InsufficientRadii { need: usize, have: usize },
    #[error("radii must be positive and strictly decreasing")]
    BadLadder,
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
}

pub type Result<T> = std::result::Result<T, FrequencyError>;

/// Closed-form field, stored already centered at p0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyField {
    pub w: GenPoly,
    /// trace polynomial q(x, t), centered like w
    pub q: Option<GenPoly>,
    pub p0: TracePoint,
    pub convention: Convention,
}

impl PolyField {
    /// Center `w` (given in original coordinates) at p0.
    pub fn new(w: &GenPoly, p0: TracePoint, q: Option<&GenPoly>) -> Self {
        PolyField {
            w: w.translate(&p0.x, p0.t),
            q: q.map(|q| q.translate(&p0.x, p0.t)),
            p0,
            convention: Convention::HalfSpace,
        }
    }

    /// A field that is already centered (p0 = origin).
    pub fn centered(w: GenPoly) -> Self {
        let n = w.dim_n;
        PolyField {
            w,
            q: None,
            p0: TracePoint::origin(n),
            convention: Convention::HalfSpace,
        }
    }

    pub fn whole_space(mut self) -> Self {
        self.convention = Convention::WholeSpace;
        self
    }

    /// Exact energies as series in t.
    pub fn energy_series(&self, table: &MomentTable) -> Result<EnergySeries> {
        let w = &self.w;
        let conv = self.convention;
        let h = w.mul(w).expect_series(table, conv)?;
        let d0 = w.grad_sq().expect_series(table, conv)?.shifted(1.0);
        let trace = match &self.q {
            Some(q) if !q.is_empty() => {
                let p = ExtensionParams::from_a(w.a, w.dim_n)?;
                q.mul(&w.mul(w)).trace_expect_series(table, &p)?.shifted(1.0)
            }
            _ => PowerSeries::default(),
        };
        let d = d0.add(&trace.scaled(-1.0));
        let i = w.mul(&w.z_operator()).expect_series(table, conv)?.scaled(0.5);
        let f = w.backward_residual();
        let wf = w.mul(&f).expect_series(table, conv)?.shifted(1.0);
        Ok(EnergySeries { h, d0, d, i, wf })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySeries {
    pub h: PowerSeries,
    pub d0: PowerSeries,
    pub d: PowerSeries,
    pub i: PowerSeries,
    /// t * int W F dmu_t
    pub wf: PowerSeries,
}

/// Grid-backed field seen through a translation, a parabolic scaling and an amplitude:
/// W(X, t) = amplitude * W_grid(x0 + r x, r y, -(t0 + r^2 t)) - minus(X, t).
#[derive(Debug, Clone)]
pub struct GridView {
    pub w: Arc<GridField>,
    pub f: Arc<GridField>,
    pub q: Option<Arc<PotentialField>>,
    pub p0: TracePoint,
    pub scale: f64,
    pub amplitude: f64,
    /// polynomial subtracted in view coordinates
    pub minus: Option<GenPoly>,
}

impl GridView {
    pub fn new(w: Arc<GridField>, f: Arc<GridField>, q: Option<Arc<PotentialField>>, p0: TracePoint) -> Result<Self> {
        if w.spec != f.spec {
            return Err(FrequencyError::Mismatch("W and F live on different grids".into()));
        }
        if p0.x.len() != w.spec.dim_n() {
            return Err(FrequencyError::Mismatch("center dimension differs from the grid".into()));
        }
        Ok(GridView {
            w,
            f,
            q,
            p0,
            scale: 1.0,
            amplitude: 1.0,
            minus: None,
        })
    }

    fn grid_point(&self, x: &[f64], t: f64) -> (Vec<f64>, f64) {
        let n = self.p0.x.len();
        let mut p: Vec<f64> = (0..n).map(|k| self.p0.x[k] + self.scale * x[k]).collect();
        p.push(self.scale * x[n]);
        (p, -(self.p0.t + self.scale * self.scale * t))
    }

    fn value(&self, x: &[f64], t: f64) -> Option<f64> {
        let (p, tau) = self.grid_point(x, t);
        if !solver::in_hull(&self.w.spec, &p, tau) {
            return None;
        }
        let v = self.amplitude * solver::evaluate(&self.w, &p, tau).ok()?;
        Some(match &self.minus {
            Some(m) => v - m.eval(x, t),
            None => v,
        })
    }

    fn gradient(&self, x: &[f64], t: f64) -> Option<Vec<f64>> {
        let (p, tau) = self.grid_point(x, t);
        if !solver::in_hull(&self.w.spec, &p, tau) {
            return None;
        }
        let q = self.q.as_deref();
        let g = solver::evaluate_gradient(&self.w, q, &p, tau).ok()?;
        let f = self.amplitude * self.scale;
        let mut g: Vec<f64> = g.into_iter().map(|v| v * f).collect();
        if let Some(m) = &self.minus {
            for (k, gm) in m.grad().iter().enumerate() {
                g[k] -= gm.eval(x, t);
            }
        }
        Some(g)
    }

    fn rhs(&self, x: &[f64], t: f64) -> Option<f64> {
        let (p, tau) = self.grid_point(x, t);
        if !solver::in_hull(&self.f.spec, &p, tau) {
            return None;
        }
        let v = self.amplitude * self.scale * self.scale * solver::evaluate(&self.f, &p, tau).ok()?;
        Some(match &self.minus {
            Some(m) => v - m.backward_residual().eval(x, t),
            None => v,
        })
    }

    fn potential(&self, x: &[f64], t: f64) -> f64 {
        let Some(q) = &self.q else { return 0.0 };
        let n = self.p0.x.len();
        let mut full = x[..n].to_vec();
        full.push(0.0);
        let (p, tau) = self.grid_point(&full, t);
        let a = self.w.spec.a;
        q.eval(&self.w.spec, &p[..n], tau).unwrap_or(0.0) * self.scale.powf(1.0 - a)
    }

    fn time_step(&self) -> f64 {
        self.w.spec.dt() / (self.scale * self.scale)
    }

    /// Largest analysis time covered by the grid.
    pub fn max_time(&self) -> f64 {
        let s2 = self.scale * self.scale;
        (-self.w.spec.t_start - self.p0.t) / s2
    }

    /// Smallest admissible radius: four cells of the coarser spatial step.
    pub fn min_radius(&self) -> f64 {
        let h = self
            .w
            .spec
            .x_axes
            .iter()
            .map(|a| a.step())
            .fold(self.w.spec.dy(), f64::max);
        4.0 * h / self.scale
    }
}

#[derive(Debug, Clone)]
pub enum FieldHandle {
    Poly(PolyField),
    Grid(GridView),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub h: f64,
    pub d0: f64,
    pub d: f64,
    pub i: f64,
    /// t * int W F dmu_t
    pub wf: f64,
    /// i from the Z operator directly (grid fields only)
    pub i_direct: Option<f64>,
    /// measure weight of quadrature nodes that fell outside the grid hull
    pub dropped_mass: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averages {
    pub h: f64,
    pub d0: f64,
    pub d: f64,
    pub i: f64,
}

pub const TIME_ORDER: usize = 16;

impl FieldHandle {
    pub fn a(&self) -> f64 {
        match self {
            FieldHandle::Poly(p) => p.w.a,
            FieldHandle::Grid(g) => g.w.spec.a,
        }
    }

    pub fn dim_n(&self) -> usize {
        match self {
            FieldHandle::Poly(p) => p.w.dim_n,
            FieldHandle::Grid(g) => g.w.spec.dim_n(),
        }
    }

    pub fn center(&self) -> &TracePoint {
        match self {
            FieldHandle::Poly(p) => &p.p0,
            FieldHandle::Grid(g) => &g.p0,
        }
    }

    pub fn params(&self) -> Result<ExtensionParams> {
        Ok(ExtensionParams::from_a(self.a(), self.dim_n())?)
    }

    /// True when the field carries no potential and no right-hand side.
    pub fn is_pure(&self) -> bool {
        match self {
            FieldHandle::Poly(p) => {
                p.q.as_ref().is_none_or(|q| q.is_empty()) && p.w.backward_residual().pruned(1e-14).is_empty()
            }
            FieldHandle::Grid(g) => g.q.as_ref().is_none_or(|q| q.bound == 0.0) && g.f.values.iter().all(|v| *v == 0.0),
        }
    }

    /// Value in centered analysis coordinates; None outside a grid hull.
    pub fn value(&self, x: &[f64], t: f64) -> Option<f64> {
        match self {
            FieldHandle::Poly(p) => Some(p.w.eval(x, t)),
            FieldHandle::Grid(g) => g.value(x, t),
        }
    }

    /// The same field scaled: W(r X, r^2 t) * amplitude.
    pub fn scaled_view(&self, r: f64, amplitude: f64) -> FieldHandle {
        match self {
            FieldHandle::Poly(p) => {
                let a = p.w.a;
                FieldHandle::Poly(PolyField {
                    w: p.w.parabolic_scale(r).scale(amplitude),
                    q: p.q.as_ref().map(|q| q.parabolic_scale(r).scale(r.powf(1.0 - a))),
                    p0: p.p0.clone(),
                    convention: p.convention,
                })
            }
            FieldHandle::Grid(g) => {
                let mut v = g.clone();
                v.scale *= r;
                v.amplitude *= amplitude;
                v.minus = g.minus.as_ref().map(|m| m.parabolic_scale(r).scale(amplitude));
                FieldHandle::Grid(v)
            }
        }
    }

    /// W - theta, with theta in centered coordinates.
    pub fn minus(&self, theta: &GenPoly) -> FieldHandle {
        match self {
            FieldHandle::Poly(p) => {
                let mut p = p.clone();
                p.w = p.w.sub(theta);
                FieldHandle::Poly(p)
            }
            FieldHandle::Grid(g) => {
                let mut v = g.clone();
                v.minus = Some(match &g.minus {
                    Some(m) => m.add(theta),
                    None => theta.clone(),
                });
                FieldHandle::Grid(v)
            }
        }
    }

    pub fn instant_energies(&self, t: f64, rule: &QuadratureRule) -> Result<Energies> {
        if !(t > 0.0) {
            return Err(FrequencyError::TimeOutOfHull(t));
        }
        match self {
            FieldHandle::Poly(p) => {
                let s = p.energy_series(&rule.moment_table()?)?;
                Ok(Energies {
                    h: s.h.eval(t),
                    d0: s.d0.eval(t),
                    d: s.d.eval(t),
                    i: s.i.eval(t),
                    wf: s.wf.eval(t),
                    i_direct: None,
                    dropped_mass: 0.0,
                })
            }
            FieldHandle::Grid(g) => grid_energies(g, t, rule),
        }
    }

    /// (1/r^2) int_0^{r^2} of each energy. Polynomial fields integrate their series
    /// exactly; grid fields use Gauss-Legendre of the given order.
    pub fn averaged(&self, r: f64, rule: &QuadratureRule, time_order: usize) -> Result<Averages> {
        match self {
            FieldHandle::Poly(p) => {
                let s = p.energy_series(&rule.moment_table()?)?;
                Ok(Averages {
                    h: s.h.average(r),
                    d0: s.d0.average(r),
                    d: s.d.average(r),
                    i: s.i.average(r),
                })
            }
            FieldHandle::Grid(g) => {
                if r * r > g.max_time() * (1.0 + 1e-12) {
                    return Err(FrequencyError::TimeOutOfHull(r * r));
                }
                let gl = gauss_legendre(time_order)?;
                let mut acc = [KahanSum::default(); 4];
                for (u, w) in gl.nodes.iter().zip(&gl.weights) {
                    let e = grid_energies(g, u * r * r, rule)?;
                    for (k, v) in [e.h, e.d0, e.d, e.i].into_iter().enumerate() {
                        acc[k].add(w * v);
                    }
                }
                Ok(Averages {
                    h: acc[0].value(),
                    d0: acc[1].value(),
                    d: acc[2].value(),
                    i: acc[3].value(),
                })
            }
        }
    }

    /// dH/dr: analytic for polynomial fields, a centered difference otherwise.
    pub fn height_derivative(&self, r: f64, rule: &QuadratureRule) -> Result<f64> {
        match self {
            FieldHandle::Poly(p) => {
                let s = p.energy_series(&rule.moment_table()?)?;
                Ok(s
                    .h
                    .terms
                    .iter()
                    .map(|(e, c)| c * 2.0 * e * r.powf(2.0 * e - 1.0) / (e + 1.0))
                    .sum())
            }
            FieldHandle::Grid(_) => {
                let d = 1e-3 * r;
                let hp = self.averaged(r + d, rule, TIME_ORDER)?.h;
                let hm = self.averaged(r - d, rule, TIME_ORDER)?.h;
                Ok((hp - hm) / (2.0 * d))
            }
        }
    }
}

fn grid_energies(g: &GridView, t: f64, rule: &QuadratureRule) -> Result<Energies> {
    if t > g.max_time() * (1.0 + 1e-12) {
        return Err(FrequencyError::TimeOutOfHull(t));
    }
    let n = rule.dim_n;
    let st = t.sqrt();
    let dt = g.time_step();
    let mut h = KahanSum::default();
    let mut g2 = KahanSum::default();
    let mut wf = KahanSum::default();
    let mut z = KahanSum::default();
    let mut dropped = KahanSum::default();
    let mut x = vec![0.0; n + 1];
    rule.for_each_node(|xi, w| {
        for k in 0..=n {
            x[k] = st * xi[k];
        }
        let Some(v) = g.value(&x, t) else {
            dropped.add(w);
            return;
        };
        let grad = g.gradient(&x, t).unwrap_or_else(|| vec![0.0; n + 1]);
        let f = g.rhs(&x, t).unwrap_or(0.0);
        h.add(w * v * v);
        g2.add(w * grad.iter().map(|c| c * c).sum::<f64>());
        wf.add(w * v * f);
        // time derivative by differences of the interpolant
        let up = g.value(&x, t + dt);
        let dn = if t > dt { g.value(&x, t - dt) } else { None };
        let vt = match (up, dn) {
            (Some(a), Some(b)) => (a - b) / (2.0 * dt),
            (Some(a), None) => (a - v) / dt,
            (None, Some(b)) => (v - b) / dt,
            (None, None) => 0.0,
        };
        let xg: f64 = x.iter().zip(&grad).map(|(a, b)| a * b).sum();
        z.add(w * v * (xg + 2.0 * t * vt));
    });
    // trace term int q w^2 G_a(x, 0, t) dx
    let p = ExtensionParams::from_a(g.w.spec.a, n)?;
    let mut tr = KahanSum::default();
    if g.q.is_some() {
        let rules: Vec<_> = rule.orders[..n].iter().map(|&o| gauss_hermite(o)).collect::<std::result::Result<_, _>>()?;
        let mut idx = vec![0usize; n];
        let mut pt = vec![0.0; n + 1];
        'outer: loop {
            let mut w = 1.0;
            for k in 0..n {
                pt[k] = st * rules[k].nodes[idx[k]];
                w *= rules[k].weights[idx[k]];
            }
            pt[n] = 0.0;
            if let Some(v) = g.value(&pt, t) {
                tr.add(w * g.potential(&pt[..n], t) * v * v);
            }
            let mut k = 0;
            loop {
                if k == n {
                    break 'outer;
                }
                idx[k] += 1;
                if idx[k] < rules[k].nodes.len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
    let trace = trace_mass(t, &p) * tr.value();
    let d0 = t * g2.value();
    let d = d0 - t * trace;
    let wf = t * wf.value();
    Ok(Energies {
        h: h.value(),
        d0,
        d,
        i: d + wf,
        wf,
        i_direct: Some(0.5 * z.value()),
        dropped_mass: dropped.value(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quotients {
    pub n0: f64,
    pub nd: f64,
    pub ni: f64,
}

pub fn quotients_of(avg: &Averages, r: f64) -> Result<Quotients> {
    if !(avg.h > 1e-14) {
        return Err(FrequencyError::VanishingHeight { r, h: avg.h });
    }
    Ok(Quotients {
        n0: avg.d0 / avg.h,
        nd: avg.d / avg.h,
        ni: avg.i / avg.h,
    })
}

pub fn quotients(w: &FieldHandle, r: f64, rule: &QuadratureRule) -> Result<Quotients> {
    quotients_of(&w.averaged(r, rule, TIME_ORDER)?, r)
}

/// e^{C r^{1-a}} N_I + e^{C r^{1-a}} - 1
pub fn phi_from(ni: f64, r: f64, a: f64, c: f64) -> f64 {
    let e = (c * r.powf(1.0 - a)).exp();
    e * ni + e - 1.0
}

pub fn phi_a(w: &FieldHandle, r: f64, c: f64, rule: &QuadratureRule) -> Result<f64> {
    let q = quotients(w, r, rule)?;
    Ok(phi_from(q.ni, r, w.a(), c))
}

/// r^{-2 sigma} [D - (sigma/2) H]
pub fn weiss(w: &FieldHandle, r: f64, sigma: f64, rule: &QuadratureRule) -> Result<f64> {
    let avg = w.averaged(r, rule, TIME_ORDER)?;
    Ok(weiss_from(&avg, r, sigma))
}

pub fn weiss_from(avg: &Averages, r: f64, sigma: f64) -> f64 {
    r.powf(-2.0 * sigma) * (avg.d - 0.5 * sigma * avg.h)
}

/// H / r^{2 sigma}
pub fn t_sigma(w: &FieldHandle, r: f64, sigma: f64, rule: &QuadratureRule) -> Result<f64> {
    Ok(w.averaged(r, rule, TIME_ORDER)?.h / r.powf(2.0 * sigma))
}

/// r^{-4 kappa} H(W - Theta, r)
pub fn monneau(w: &FieldHandle, theta: &GenPoly, kappa: f64, r: f64, rule: &QuadratureRule) -> Result<f64> {
    let diff = w.minus(theta);
    Ok(r.powf(-4.0 * kappa) * diff.averaged(r, rule, TIME_ORDER)?.h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AcfMode {
    Neumann,
    Dirichlet,
    WholeSpace,
}

impl AcfMode {
    pub fn exponent(self, a: f64) -> f64 {
        match self {
            AcfMode::Neumann => 1.0,
            AcfMode::Dirichlet => 1.0 - a,
            AcfMode::WholeSpace => 1f64.min(1.0 - a),
        }
    }
}

/// t^{-p} int_0^t int |grad U|^2 dmu_tau dtau
pub fn acf_j(u: &FieldHandle, t: f64, mode: AcfMode, rule: &QuadratureRule) -> Result<f64> {
    if !(t > 0.0) {
        return Err(FrequencyError::TimeOutOfHull(t));
    }
    let p = mode.exponent(u.a());
    let integral = match u {
        FieldHandle::Poly(f) => {
            let conv = if mode == AcfMode::WholeSpace {
                Convention::WholeSpace
            } else {
                f.convention
            };
            let s = f.w.grad_sq().expect_series(&rule.moment_table()?, conv)?;
            s.terms.iter().map(|(e, c)| c * t.powf(e + 1.0) / (e + 1.0)).sum::<f64>()
        }
        FieldHandle::Grid(_) => {
            let gl = gauss_legendre(TIME_ORDER)?;
            let mut acc = KahanSum::default();
            for (x, w) in gl.nodes.iter().zip(&gl.weights) {
                let tau = x * t;
                let e = u.instant_energies(tau, rule)?;
                acc.add(w * t * e.d0 / tau);
            }
            acc.value()
        }
    };
    Ok(integral / t.powf(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub r: f64,
    pub h: f64,
    pub d0: f64,
    pub d: f64,
    pub i: f64,
    pub n0: f64,
    pub nd: f64,
    pub ni: f64,
    pub phi: f64,
    pub weiss: f64,
    pub tsigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyProfile {
    pub a: f64,
    pub s: f64,
    pub sigma: f64,
    pub c: f64,
    /// whether c came from calibration (false: supplied or the pure-regime default)
    pub calibrated: bool,
    /// whether Phi is nondecreasing in r within the slack for the reported c
    pub monotone: bool,
    pub p0: TracePoint,
    pub rows: Vec<ProfileRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub sigma: f64,
    /// None: 0 for pure fields, calibrated otherwise
    pub c: Option<f64>,
    pub slack: f64,
}

impl Default for ProfileParams {
    fn default() -> Self {
        ProfileParams {
            sigma: 1.0,
            c: None,
            slack: 1e-6,
        }
    }
}

/// r_l = 0.4 * 2^{-l/2}, 12 levels, cut at four grid cells for grid fields.
pub fn default_ladder(w: &FieldHandle) -> Vec<f64> {
    let floor = match w {
        FieldHandle::Poly(_) => 0.0,
        FieldHandle::Grid(g) => g.min_radius(),
    };
    (0..12)
        .map(|l| 0.4 * 2f64.powf(-(l as f64) / 2.0))
        .filter(|r| *r >= floor * (1.0 - 1e-12))
        .collect()
}

pub const C_GRID_STEP: f64 = 0.5;
pub const C_GRID_MAX: f64 = 16.0;

/// Whether values listed along decreasing radii are nondecreasing in r.
pub fn nondecreasing_in_r(values: &[f64], slack: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Smallest C on {0, 0.5, ..., 16} making r -> g(r, C) nondecreasing down the ladder.
pub fn calibrate(radii: &[f64], slack: f64, g: impl Fn(f64, f64) -> f64) -> Option<f64> {
    let steps = (C_GRID_MAX / C_GRID_STEP).round() as usize;
    (0..=steps).map(|k| k as f64 * C_GRID_STEP).find(|&c| {
        let vals: Vec<f64> = radii.iter().map(|&r| g(r, c)).collect();
        nondecreasing_in_r(&vals, slack)
    })
}

pub fn profile(
    w: &FieldHandle,
    radii: &[f64],
    params: &ProfileParams,
    rule: &QuadratureRule,
) -> Result<FrequencyProfile> {
    if radii.is_empty() || radii.iter().any(|r| !(*r > 0.0)) || radii.windows(2).any(|p| p[1] >= p[0]) {
        return Err(FrequencyError::BadLadder);
    }
    let a = w.a();
    let mut rows = Vec::with_capacity(radii.len());
    for &r in radii {
        let avg = w.averaged(r, rule, TIME_ORDER)?;
        let q = quotients_of(&avg, r)?;
        rows.push(ProfileRow {
            r,
            h: avg.h,
            d0: avg.d0,
            d: avg.d,
            i: avg.i,
            n0: q.n0,
            nd: q.nd,
            ni: q.ni,
            phi: 0.0,
            weiss: weiss_from(&avg, r, params.sigma),
            tsigma: avg.h / r.powf(2.0 * params.sigma),
        });
    }
    let ni: Vec<f64> = rows.iter().map(|row| row.ni).collect();
    let phi_at = |k: usize, c: f64| phi_from(ni[k], radii[k], a, c);
    let (c, calibrated) = match params.c {
        Some(c) => (c, false),
        None if w.is_pure() => (0.0, false),
        None => {
            let idx: Vec<f64> = (0..radii.len()).map(|k| k as f64).collect();
            match calibrate(&idx, params.slack, |k, c| phi_at(k as usize, c)) {
                Some(c) => (c, true),
                None => (C_GRID_MAX, true),
            }
        }
    };
    for (k, row) in rows.iter_mut().enumerate() {
        row.phi = phi_at(k, c);
    }
    let phis: Vec<f64> = rows.iter().map(|r| r.phi).collect();
    Ok(FrequencyProfile {
        a,
        s: (1.0 - a) / 2.0,
        sigma: params.sigma,
        c,
        calibrated,
        monotone: nondecreasing_in_r(&phis, params.slack),
        p0: w.center().clone(),
        rows,
    })
}

impl FrequencyProfile {
    pub const COLUMNS: &'static str = "r,H,D0,D,I,N0,ND,NI,Phi,Weiss,Tsigma";

    /// First line: '#' and a JSON object with the run parameters; then the header and rows.
    pub fn to_csv(&self, extra: &serde_json::Value) -> String {
        let header = serde_json::json!({
            "a": self.a,
            "s": self.s,
            "sigma": self.sigma,
            "C": self.c,
            "C_calibrated": self.calibrated,
            "monotone": self.monotone,
            "p0": self.p0,
            "version": env!("CARGO_PKG_VERSION"),
            "config": extra,
        });
        let mut out = format!("# {header}\n{}\n", Self::COLUMNS);
        for r in &self.rows {
            let vals = [r.r, r.h, r.d0, r.d, r.i, r.n0, r.nd, r.ni, r.phi, r.weiss, r.tsigma];
            let line: Vec<String> = vals.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Estimate of Phi(0+) = lim N_I: linear extrapolation in r^{1-a} through the two
    /// smallest radii (the potential enters the energies at that order).
    pub fn phi_limit(&self) -> f64 {
        let n = self.rows.len();
        match n {
            0 => f64::NAN,
            1 => self.rows[0].ni,
            _ => {
                let (p, q) = (&self.rows[n - 2], &self.rows[n - 1]);
                let b = 1.0 - self.a;
                let (u, v) = (p.r.powf(b), q.r.powf(b));
                q.ni - (p.ni - q.ni) / (u - v) * v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishingOrder {
    pub sigma: f64,
    /// half-width of the 95% interval
    pub half_width: f64,
    /// local slopes of log H / log r between consecutive radii, halved
    pub local: Vec<f64>,
    pub infinite_suspected: bool,
}

pub const VANISHING_WINDOW: usize = 6;

/// Least-squares slope of log H against log r over the smallest radii, halved.
pub fn vanishing_order(profile: &FrequencyProfile) -> Result<VanishingOrder> {
    let pts: Vec<(f64, f64)> = profile
        .rows
        .iter()
        .filter(|r| r.h > 0.0)
        .map(|r| (r.r.ln(), r.h.ln()))
        .collect();
    if pts.len() < VANISHING_WINDOW {
        return Err(FrequencyError::InsufficientRadii {
            need: VANISHING_WINDOW,
            have: pts.len(),
        });
    }
    let local: Vec<f64> = pts.windows(2).map(|w| 0.5 * (w[1].1 - w[0].1) / (w[1].0 - w[0].0)).collect();
    let win = &pts[pts.len() - VANISHING_WINDOW..];
    let n = win.len() as f64;
    let mx = win.iter().map(|p| p.0).sum::<f64>() / n;
    let my = win.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = win.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = win.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let resid: f64 = win.iter().map(|p| (p.1 - my - slope * (p.0 - mx)).powi(2)).sum();
    let se = (resid / (n - 2.0) / sxx).sqrt();
    let tq = StudentsT::new(0.0, 1.0, n - 2.0).map(|d| d.inverse_cdf(0.975)).unwrap_or(2.776);
    // infinite order: local slopes keep growing down the ladder without settling
    let tail = &local[local.len().saturating_sub(4)..];
    let growing = tail.windows(2).all(|w| w[1] > w[0] + 0.05);
    let infinite_suspected = growing && tail.len() >= 3 && tail[tail.len() - 1] - tail[0] > 0.5;
    Ok(VanishingOrder {
        sigma: 0.5 * slope,
        half_width: 0.5 * tq * se,
        local,
        infinite_suspected,
    })
}

/// H(r2)/H(r1) <= (r2/r1)^C for every pair on the ladder, with C = 4 (1/2 + max N_I).
pub fn doubling_holds(profile: &FrequencyProfile) -> bool {
    let max_ni = profile.rows.iter().map(|r| r.ni).fold(f64::NEG_INFINITY, f64::max);
    let c = 4.0 * (0.5 + max_ni.max(0.0));
    let rows = &profile.rows;
    for i in 0..rows.len() {
        for j in 0..i {
            // rows[j].r > rows[i].r
            let lhs = rows[j].h / rows[i].h;
            if lhs > (rows[j].r / rows[i].r).powf(c) * (1.0 + 1e-9) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmeasure::build_quadrature;

    fn rule(a: f64) -> QuadratureRule {
        build_quadrature(&ExtensionParams::from_a(a, 1).unwrap(), &[40]).unwrap()
    }

    fn x(a: f64) -> GenPoly {
        GenPoly::x(1, a, 0)
    }

    fn theta20(a: f64) -> GenPoly {
        x(a).mul(&x(a)).sub(&GenPoly::t(1, a).scale(2.0))
    }

    #[test]
    fn energies_of_simple_fields() {
        let a = 0.3;
        let r = rule(a);
        let one = FieldHandle::Poly(PolyField::centered(GenPoly::constant(1, a, 1.0)));
        let e = one.instant_energies(0.7, &r).unwrap();
        assert!((e.h - 1.0).abs() < 1e-13 && e.d0 == 0.0 && e.i == 0.0);
        let w = FieldHandle::Poly(PolyField::centered(x(a)));
        let e = w.instant_energies(0.7, &r).unwrap();
        assert!((e.h - 1.4).abs() < 1e-12);
        assert!((e.d0 - 0.7).abs() < 1e-12);
        assert!((e.i - 0.7).abs() < 1e-12);
        let avg = w.averaged(0.5, &r, TIME_ORDER).unwrap();
        assert!((avg.h - 0.25).abs() < 1e-13 && (avg.d0 - 0.125).abs() < 1e-13);
    }

    #[test]
    fn quotient_examples() {
        let a = -0.4;
        let r = rule(a);
        let w = FieldHandle::Poly(PolyField::centered(x(a)));
        let t = FieldHandle::Poly(PolyField::centered(theta20(a)));
        let one = FieldHandle::Poly(PolyField::centered(GenPoly::constant(1, a, 1.0)));
        for &rad in &[0.05, 0.3, 1.0] {
            assert!((quotients(&w, rad, &r).unwrap().n0 - 0.5).abs() < 1e-12);
            assert!((quotients(&t, rad, &r).unwrap().n0 - 1.0).abs() < 1e-12);
            let q = quotients(&one, rad, &r).unwrap();
            assert_eq!((q.n0, q.nd, q.ni), (0.0, 0.0, 0.0));
        }
        let zero = FieldHandle::Poly(PolyField::centered(GenPoly::zero(1, a)));
        assert!(matches!(quotients(&zero, 0.3, &r), Err(FrequencyError::VanishingHeight { .. })));
    }

    #[test]
    fn homogeneous_height_scales() {
        let a = 0.2;
        let r = rule(a);
        let t = FieldHandle::Poly(PolyField::centered(theta20(a)));
        let h1 = t.averaged(1.0, &r, TIME_ORDER).unwrap().h;
        for &rad in &[0.1, 0.37] {
            let h = t.averaged(rad, &r, TIME_ORDER).unwrap().h;
            assert!((h - rad.powi(4) * h1).abs() < 1e-12 * h1);
        }
    }

    #[test]
    fn phi_weiss_tsigma_examples() {
        let a = 0.0;
        let r = rule(a);
        let t = FieldHandle::Poly(PolyField::centered(theta20(a)));
        assert!((phi_a(&t, 0.3, 0.0, &r).unwrap() - 1.0).abs() < 1e-12);
        let ni = quotients(&t, 0.3, &r).unwrap().ni;
        assert_eq!(phi_from(ni, 0.3, a, 0.0), ni);
        let h1 = t.averaged(1.0, &r, TIME_ORDER).unwrap().h;
        for &rad in &[0.1, 0.5] {
            assert!(weiss(&t, rad, 2.0, &r).unwrap().abs() < 1e-12);
            assert!((t_sigma(&t, rad, 2.0, &r).unwrap() - h1).abs() < 1e-12);
            let w3 = weiss(&t, rad, 3.0, &r).unwrap();
            let expect = rad.powf(4.0 - 6.0) * h1 * (1.0 - 1.5);
            assert!((w3 - expect).abs() < 1e-10 * expect.abs());
        }
        let xw = FieldHandle::Poly(PolyField::centered(x(a)));
        assert!(weiss(&xw, 0.4, 1.0, &r).unwrap().abs() < 1e-13);
    }

    #[test]
    fn relation_between_i_and_d() {
        // non-solution polynomial: i = d + t int W F
        let a = 0.4;
        let r = rule(a);
        let w = x(a).mul(&x(a)).add(&GenPoly::y(1, a).mul(&GenPoly::y(1, a)).scale(0.3)).add(&x(a));
        let f = FieldHandle::Poly(PolyField::centered(w));
        for &t in &[0.1, 0.6] {
            let e = f.instant_energies(t, &r).unwrap();
            assert!((e.i - e.d - e.wf).abs() < 1e-12, "{e:?}");
        }
    }

    #[test]
    fn monneau_of_theta_is_zero() {
        let a = 0.1;
        let r = rule(a);
        let t = FieldHandle::Poly(PolyField::centered(theta20(a)));
        assert!(monneau(&t, &theta20(a), 1.0, 0.3, &r).unwrap().abs() < 1e-14);
    }

    #[test]
    fn acf_examples() {
        let a = -0.3;
        let r = rule(a);
        let xw = FieldHandle::Poly(PolyField::centered(x(a)));
        let c = FieldHandle::Poly(PolyField::centered(GenPoly::constant(1, a, 3.0)));
        // forward image of ((1+a)/2) t - y^2/4
        let th01 = GenPoly::t(1, a)
            .scale((1.0 + a) / 2.0)
            .sub(&GenPoly::y(1, a).mul(&GenPoly::y(1, a)).scale(0.25))
            .time_reflect();
        let u = FieldHandle::Poly(PolyField::centered(th01));
        for &t in &[0.2, 0.5, 0.9] {
            assert!((acf_j(&xw, t, AcfMode::Neumann, &r).unwrap() - 1.0).abs() < 1e-12);
            assert_eq!(acf_j(&c, t, AcfMode::Neumann, &r).unwrap(), 0.0);
            let j = acf_j(&u, t, AcfMode::Neumann, &r).unwrap();
            assert!((j - (1.0 + a) * t / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn vanishing_order_examples() {
        let a = 0.0;
        let r = rule(a);
        let ladder = default_ladder(&FieldHandle::Poly(PolyField::centered(x(a))));
        for (w, expect) in [(theta20(a), 2.0), (x(a), 1.0), (GenPoly::constant(1, a, 1.0), 0.0)] {
            let f = FieldHandle::Poly(PolyField::centered(w));
            let p = profile(&f, &ladder, &ProfileParams::default(), &r).unwrap();
            let v = vanishing_order(&p).unwrap();
            assert!((v.sigma - expect).abs() < 1e-6, "{v:?}");
            assert!(!v.infinite_suspected);
        }
    }

    #[test]
    fn height_derivative_identity() {
        let a = 0.25;
        let r = rule(a);
        let w = x(a).add(&theta20(a).scale(0.7));
        let f = FieldHandle::Poly(PolyField::centered(w));
        for &rad in &[0.1, 0.35] {
            let dh = f.height_derivative(rad, &r).unwrap();
            let i = f.averaged(rad, &r, TIME_ORDER).unwrap().i;
            assert!((dh - 4.0 / rad * i).abs() < 1e-11 * dh.abs().max(1.0));
        }
    }

    #[test]
    fn csv_layout() {
        let a = 0.0;
        let r = rule(a);
        let f = FieldHandle::Poly(PolyField::centered(theta20(a)));
        let p = profile(&f, &[0.4, 0.2], &ProfileParams::default(), &r).unwrap();
        let csv = p.to_csv(&serde_json::json!({}));
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[0].starts_with("# {"));
        assert_eq!(lines[1], FrequencyProfile::COLUMNS);
        assert_eq!(lines.len(), 4);
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn calibration_picks_smallest_c() {
        let radii = [0.4, 0.2, 0.1];
        // g(r, c) = -r + c r: nondecreasing in r once c >= 1
        let c = calibrate(&radii, 0.0, |r, c| -r + c * r).unwrap();
        assert_eq!(c, 1.0);
        assert!(calibrate(&radii, 0.0, |r, _| -r).is_none());
    }
}
