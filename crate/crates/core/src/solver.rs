//! Finite-volume, backward-Euler solver for the weighted extension equation
//! d_t U = y^{-a} div(y^a grad U) on a half-space cylinder, with the conormal
//! condition -lim y^a d_y U = q U imposed as the flux through the y = 0 face.
//!
//! x-axes are node-centered (the end nodes sit on the lateral boundary), y is
//! cell-centered with y_j = (j + 1/2) dy so the weight is never sampled at y = 0.
//! The top row of centers carries boundary data in Dirichlet mode.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("invalid grid: {0}")]
    BadSpec(String),
    #[error("data shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("linear solve failed at step {step}: {reason}")]
    LinearSolve { step: usize, reason: String },
    #[error("cutoff ball of radius {radius} around {center:?} leaves the grid")]
    CutoffSupport { center: Vec<f64>, radius: f64 },
    #[error("point {point:?} at t = {t} is outside the grid hull")]
    OutOfHull { point: Vec<f64>, t: f64 },
    #[error("bad binary field: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SolverError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

impl Axis {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / self.cells as f64
    }

    pub fn nodes(&self) -> usize {
        self.cells + 1
    }

    pub fn node(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.step()
    }
}

/// How y^a is sampled on the y-faces between cell centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FaceWeight {
    /// y^a at the face itself
    #[default]
    Exact,
    /// geometric mean of y^a at the two adjacent centers
    Geometric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum LateralCondition {
    /// values on the lateral end nodes and the top row are prescribed
    #[default]
    Dirichlet,
    /// no flux through the lateral and top boundaries
    ZeroFlux,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_axes: Vec<Axis>,
    pub y_max: f64,
    pub y_cells: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    pub a: f64,
    #[serde(default)]
    pub face_weight: FaceWeight,
    #[serde(default)]
    pub lateral: LateralCondition,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SolverError::BadSpec(m));
        if !(self.a > -1.0 && self.a < 1.0) {
            return bad(format!("a must lie in (-1,1), got {}", self.a));
        }
        if self.x_axes.is_empty() {
            return bad("at least one x-axis is required".into());
        }
        for (k, ax) in self.x_axes.iter().enumerate() {
            if !(ax.hi > ax.lo) || ax.cells < 2 || !ax.lo.is_finite() || !ax.hi.is_finite() {
                return bad(format!("x-axis {k} must have hi > lo and at least 2 cells"));
            }
        }
        if !(self.y_max > 0.0) || self.y_cells < 3 {
            return bad("y-extent must be positive with at least 3 cells".into());
        }
        if !(self.t_end > self.t_start) || self.steps == 0 {
            return bad("time interval must be nonempty with at least one step".into());
        }
        Ok(())
    }

    pub fn dim_n(&self) -> usize {
        self.x_axes.len()
    }

    pub fn dy(&self) -> f64 {
        self.y_max / self.y_cells as f64
    }

    pub fn dt(&self) -> f64 {
        (self.t_end - self.t_start) / self.steps as f64
    }

    pub fn y_center(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dy()
    }

    pub fn time(&self, level: usize) -> f64 {
        self.t_start + level as f64 * self.dt()
    }

    pub fn levels(&self) -> usize {
        self.steps + 1
    }

    /// Values per time level: product of x-node counts times y-cells.
    pub fn level_len(&self) -> usize {
        self.x_axes.iter().map(Axis::nodes).product::<usize>() * self.y_cells
    }

    /// Backward Euler is unconditionally stable; the returned bound is informational.
    pub fn stability_bound(&self) -> f64 {
        f64::INFINITY
    }

    fn x_counts(&self) -> Vec<usize> {
        self.x_axes.iter().map(Axis::nodes).collect()
    }

    /// Flat index within a level, x-axes row-major with y fastest.
    pub fn flat(&self, xi: &[usize], j: usize) -> usize {
        let mut idx = 0;
        for (k, ax) in self.x_axes.iter().enumerate() {
            idx = idx * ax.nodes() + xi[k];
        }
        idx * self.y_cells + j
    }

    fn unflat(&self, mut idx: usize, xi: &mut [usize]) -> usize {
        let j = idx % self.y_cells;
        idx /= self.y_cells;
        for k in (0..self.dim_n()).rev() {
            let n = self.x_axes[k].nodes();
            xi[k] = idx % n;
            idx /= n;
        }
        j
    }

    /// int y^a over the j-th cell
    pub fn cell_measure(&self, j: usize) -> f64 {
        let dy = self.dy();
        let b = 1.0 + self.a;
        (((j + 1) as f64 * dy).powf(b) - (j as f64 * dy).powf(b)) / b
    }

    fn face_weight_between(&self, j: usize) -> f64 {
        match self.face_weight {
            FaceWeight::Exact => ((j + 1) as f64 * self.dy()).powf(self.a),
            FaceWeight::Geometric => (self.y_center(j) * self.y_center(j + 1)).powf(self.a / 2.0),
        }
    }

    fn x_width(&self, k: usize, i: usize) -> f64 {
        let ax = &self.x_axes[k];
        if i == 0 || i == ax.cells {
            0.5 * ax.step()
        } else {
            ax.step()
        }
    }

    fn is_fixed(&self, xi: &[usize], j: usize) -> bool {
        if self.lateral == LateralCondition::ZeroFlux {
            return false;
        }
        j + 1 == self.y_cells || xi.iter().zip(&self.x_axes).any(|(&i, ax)| i == 0 || i == ax.cells)
    }

    fn node_point(&self, xi: &[usize], j: usize) -> Vec<f64> {
        let mut p: Vec<f64> = xi.iter().zip(&self.x_axes).map(|(&i, ax)| ax.node(i)).collect();
        p.push(self.y_center(j));
        p
    }
}

/// What a stored field represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldRole {
    /// the solution itself (forward time)
    Raw,
    /// the cut-off product W
    Cutoff,
    /// the right-hand side F produced by the cut-off
    Rhs,
}

impl FieldRole {
    fn code(self) -> u32 {
        match self {
            FieldRole::Raw => 0,
            FieldRole::Cutoff => 1,
            FieldRole::Rhs => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(FieldRole::Raw),
            1 => Ok(FieldRole::Cutoff),
            2 => Ok(FieldRole::Rhs),
            _ => Err(SolverError::Format(format!("unknown role code {c}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub spec: GridSpec,
    pub role: FieldRole,
    /// levels() * level_len() values, level-major
    pub values: Vec<f64>,
}

impl GridField {
    pub fn zeros(spec: &GridSpec, role: FieldRole) -> Self {
        GridField {
            spec: spec.clone(),
            role,
            values: vec![0.0; spec.levels() * spec.level_len()],
        }
    }

    pub fn level(&self, l: usize) -> &[f64] {
        let n = self.spec.level_len();
        &self.values[l * n..(l + 1) * n]
    }

    fn level_mut(&mut self, l: usize) -> &mut [f64] {
        let n = self.spec.level_len();
        &mut self.values[l * n..(l + 1) * n]
    }

    pub fn get(&self, level: usize, xi: &[usize], j: usize) -> f64 {
        self.values[level * self.spec.level_len() + self.spec.flat(xi, j)]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(SolverError::NonFinite {
                index,
                value: self.values[index],
            }),
            None => Ok(()),
        }
    }

    /// Weighted discrete integral sum m_j * (x control widths) * value at one level.
    pub fn weighted_mass(&self, level: usize) -> f64 {
        let spec = &self.spec;
        let vals = self.level(level);
        let mut xi = vec![0; spec.dim_n()];
        let mut acc = crate::gaussmeasure::KahanSum::default();
        for (idx, v) in vals.iter().enumerate() {
            let j = spec.unflat(idx, &mut xi);
            let mut vol = spec.cell_measure(j);
            for (k, &i) in xi.iter().enumerate() {
                vol *= spec.x_width(k, i);
            }
            acc.add(vol * v);
        }
        acc.value()
    }
}

/// Samples of q on the trace lattice (x-nodes by time levels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialField {
    pub samples: Vec<f64>,
    /// sup |q|
    pub bound: f64,
    /// sup |d_t q| and sup |grad_x q|, estimated by differences
    pub dt_bound: f64,
    pub grad_bound: f64,
    pub time_independent: bool,
}

impl PotentialField {
    pub fn zero(spec: &GridSpec) -> Self {
        let n = spec.level_len() / spec.y_cells;
        PotentialField {
            samples: vec![0.0; n * spec.levels()],
            bound: 0.0,
            dt_bound: 0.0,
            grad_bound: 0.0,
            time_independent: true,
        }
    }

    pub fn from_fn(spec: &GridSpec, q: &dyn Fn(&[f64], f64) -> f64) -> Result<Self> {
        spec.validate()?;
        let counts = spec.x_counts();
        let per = counts.iter().product::<usize>();
        let mut samples = Vec::with_capacity(per * spec.levels());
        let mut xi = vec![0usize; counts.len()];
        for l in 0..spec.levels() {
            let t = spec.time(l);
            for flat in 0..per {
                let mut rest = flat;
                for k in (0..counts.len()).rev() {
                    xi[k] = rest % counts[k];
                    rest /= counts[k];
                }
                let x: Vec<f64> = xi.iter().zip(&spec.x_axes).map(|(&i, ax)| ax.node(i)).collect();
                let v = q(&x, t);
                if !v.is_finite() {
                    return Err(SolverError::NonFinite {
                        index: l * per + flat,
                        value: v,
                    });
                }
                samples.push(v);
            }
        }
        let bound = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut dt_bound = 0.0f64;
        let mut time_independent = true;
        for l in 1..spec.levels() {
            for f in 0..per {
                let d = samples[l * per + f] - samples[(l - 1) * per + f];
                if d != 0.0 {
                    time_independent = false;
                }
                dt_bound = dt_bound.max(d.abs() / spec.dt());
            }
        }
        let mut grad_bound = 0.0f64;
        for l in 0..spec.levels() {
            for f in 0..per {
                let mut rest = f;
                let mut stride = 1;
                for k in (0..counts.len()).rev() {
                    let i = rest % counts[k];
                    rest /= counts[k];
                    if i + 1 < counts[k] {
                        let d = samples[l * per + f + stride] - samples[l * per + f];
                        grad_bound = grad_bound.max(d.abs() / spec.x_axes[k].step());
                    }
                    stride *= counts[k];
                }
            }
        }
        Ok(PotentialField {
            samples,
            bound,
            dt_bound,
            grad_bound,
            time_independent,
        })
    }

    fn at(&self, per: usize, level: usize, flat_x: usize) -> f64 {
        self.samples[level * per + flat_x]
    }

    /// Multilinear interpolation on the trace lattice.
    pub fn eval(&self, spec: &GridSpec, x: &[f64], t: f64) -> Result<f64> {
        let per = spec.level_len() / spec.y_cells;
        let (l0, wt) = locate_time(spec, t).ok_or_else(|| SolverError::OutOfHull {
            point: x.to_vec(),
            t,
        })?;
        let mut corners = Vec::with_capacity(spec.dim_n());
        for (k, ax) in spec.x_axes.iter().enumerate() {
            let c = locate_node(ax, x[k]).ok_or_else(|| SolverError::OutOfHull {
                point: x.to_vec(),
                t,
            })?;
            corners.push(c);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << spec.dim_n()) {
            let mut w = 1.0;
            let mut flat = 0;
            for (k, ax) in spec.x_axes.iter().enumerate() {
                let (i, f) = corners[k];
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { f } else { 1.0 - f };
                flat = flat * ax.nodes() + (i + bit).min(ax.cells);
            }
            if w == 0.0 {
                continue;
            }
            let v0 = self.at(per, l0, flat);
            let v1 = if wt > 0.0 { self.at(per, l0 + 1, flat) } else { v0 };
            acc += w * ((1.0 - wt) * v0 + wt * v1);
        }
        Ok(acc)
    }
}

fn locate_node(ax: &Axis, x: f64) -> Option<(usize, f64)> {
    let h = ax.step();
    let s = (x - ax.lo) / h;
    if !(s >= -1e-12 && s <= ax.cells as f64 + 1e-12) {
        return None;
    }
    let s = s.clamp(0.0, ax.cells as f64);
    let i = (s.floor() as usize).min(ax.cells - 1);
    Some((i, s - i as f64))
}

fn locate_time(spec: &GridSpec, t: f64) -> Option<(usize, f64)> {
    let s = (t - spec.t_start) / spec.dt();
    if !(s >= -1e-9 && s <= spec.steps as f64 + 1e-9) {
        return None;
    }
    let s = s.clamp(0.0, spec.steps as f64);
    let l = (s.floor() as usize).min(spec.steps.saturating_sub(1));
    let f = s - l as f64;
    Some((l, if f < 1e-12 { 0.0 } else { f }))
}

/// Cell-center bracket for y; below the first center the value is clamped.
fn locate_y(spec: &GridSpec, y: f64) -> Option<(usize, f64)> {
    let top = spec.y_center(spec.y_cells - 1);
    if !(y >= -1e-12 && y <= top + 1e-12) {
        return None;
    }
    let s = y / spec.dy() - 0.5;
    if s <= 0.0 {
        return Some((0, 0.0));
    }
    let j = (s.floor() as usize).min(spec.y_cells - 2);
    Some((j, (s - j as f64).min(1.0)))
}

/// Initial data on the whole lattice and boundary data on the fixed nodes, as
/// functions of (x, y, t). Missing boundary data means homogeneous Dirichlet.
pub struct CylinderData<'a> {
    pub initial: &'a dyn Fn(&[f64], f64) -> f64,
    pub boundary: Option<&'a dyn Fn(&[f64], f64, f64) -> f64>,
}

struct Assembly {
    /// flat index -> unknown number
    unknown: Vec<Option<usize>>,
    /// unknown -> flat index
    flat_of: Vec<usize>,
    /// control volume per unknown
    volume: Vec<f64>,
    /// (unknown, fixed flat index, coefficient) couplings to prescribed nodes
    fixed_links: Vec<(usize, usize, f64)>,
    /// bottom unknowns with face area and x-lattice flat index
    bottom: Vec<(usize, f64, usize)>,
    /// stiffness plus mass/dt, with q = 0
    base: CscMatrix<f64>,
    /// position of each unknown's diagonal in base.values()
    diag_pos: Vec<usize>,
}

fn assemble(spec: &GridSpec) -> Assembly {
    let n = spec.level_len();
    let dim = spec.dim_n();
    let mut unknown = vec![None; n];
    let mut flat_of = Vec::new();
    let mut xi = vec![0usize; dim];
    for idx in 0..n {
        let j = spec.unflat(idx, &mut xi);
        if !spec.is_fixed(&xi, j) {
            unknown[idx] = Some(flat_of.len());
            flat_of.push(idx);
        }
    }
    let m = flat_of.len();
    let dt = spec.dt();
    let dy = spec.dy();
    let mut volume = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut coo = CooMatrix::new(m, m);
    let mut fixed_links = Vec::new();
    let mut bottom = Vec::new();
    let mut link = |u: usize, other: usize, c: f64, diag: &mut Vec<f64>, coo: &mut CooMatrix<f64>| {
        diag[u] += c;
        match unknown[other] {
            Some(v) => coo.push(u, v, -c),
            None => fixed_links.push((u, other, c)),
        }
    };
    for (u, &idx) in flat_of.iter().enumerate() {
        let j = spec.unflat(idx, &mut xi);
        let mut xw = 1.0;
        for (k, &i) in xi.iter().enumerate() {
            xw *= spec.x_width(k, i);
        }
        let mj = spec.cell_measure(j);
        volume[u] = mj * xw;
        // x-fluxes
        for k in 0..dim {
            let h = spec.x_axes[k].step();
            let face = mj * xw / spec.x_width(k, xi[k]);
            for dir in [-1i64, 1] {
                let ni = xi[k] as i64 + dir;
                if ni < 0 || ni > spec.x_axes[k].cells as i64 {
                    continue;
                }
                let mut nx = xi.clone();
                nx[k] = ni as usize;
                let other = spec.flat(&nx, j);
                link(u, other, face / h, &mut diag, &mut coo);
            }
        }
        // y-fluxes
        if j + 1 < spec.y_cells {
            let c = spec.face_weight_between(j) * xw / dy;
            link(u, idx + 1, c, &mut diag, &mut coo);
        }
        if j > 0 {
            let c = spec.face_weight_between(j - 1) * xw / dy;
            link(u, idx - 1, c, &mut diag, &mut coo);
        } else {
            bottom.push((u, xw, idx / spec.y_cells));
        }
    }
    for u in 0..m {
        coo.push(u, u, diag[u] + volume[u] / dt);
    }
    let base = CscMatrix::from(&coo);
    let mut diag_pos = vec![0; m];
    for (col, c) in base.col_iter().enumerate() {
        let off = base.col_offsets()[col];
        for (p, &row) in c.row_indices().iter().enumerate() {
            if row == col {
                diag_pos[col] = off + p;
            }
        }
    }
    Assembly {
        unknown,
        flat_of,
        volume,
        fixed_links,
        bottom,
        base,
        diag_pos,
    }
}

fn matrix_values(asm: &Assembly, q: &PotentialField, per: usize, level: usize) -> Vec<f64> {
    let mut vals = asm.base.values().to_vec();
    for &(u, area, xf) in &asm.bottom {
        vals[asm.diag_pos[u]] -= q.at(per, level, xf) * area;
    }
    vals
}

fn spmv(a: &CscMatrix<f64>, vals: &[f64], x: &[f64], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for col in 0..a.ncols() {
        let lo = a.col_offsets()[col];
        let hi = a.col_offsets()[col + 1];
        let xc = x[col];
        for p in lo..hi {
            out[a.row_indices()[p]] += vals[p] * xc;
        }
    }
}

fn chol_solve(ch: &CscCholesky<f64>, b: &[f64]) -> Vec<f64> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b);
    ch.solve(&rhs).as_slice().to_vec()
}

/// Preconditioned CG on the current matrix, preconditioned by a reference factorization.
fn pcg(
    a: &CscMatrix<f64>,
    vals: &[f64],
    pre: &CscCholesky<f64>,
    b: &[f64],
    x0: Vec<f64>,
    tol: f64,
) -> std::result::Result<Vec<f64>, String> {
    let n = b.len();
    let mut x = x0;
    let mut ax = vec![0.0; n];
    spmv(a, vals, &x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
    let mut z = chol_solve(pre, &r);
    let mut p = z.clone();
    let mut rz: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
    for _ in 0..200 {
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn <= tol * bnorm {
            return Ok(x);
        }
        spmv(a, vals, &p, &mut ax);
        let pap: f64 = p.iter().zip(&ax).map(|(a, b)| a * b).sum();
        if !(pap > 0.0) {
            return Err("matrix is not positive definite".into());
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ax[i];
        }
        z = chol_solve(pre, &r);
        let rz_new: f64 = r.iter().zip(&z).map(|(a, b)| a * b).sum();
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err("conjugate gradients did not converge in 200 iterations".into())
}

/// Backward Euler in time, finite volumes in space.
pub fn solve_extension(data: &CylinderData, q: &PotentialField, spec: &GridSpec) -> Result<GridField> {
    spec.validate()?;
    let per = spec.level_len() / spec.y_cells;
    if q.samples.len() != per * spec.levels() {
        return Err(SolverError::Shape(format!(
            "potential has {} samples, grid needs {}",
            q.samples.len(),
            per * spec.levels()
        )));
    }
    let asm = assemble(spec);
    let mut field = GridField::zeros(spec, FieldRole::Raw);
    let n = spec.level_len();
    let dim = spec.dim_n();
    let mut xi = vec![0usize; dim];
    {
        let lvl = field.level_mut(0);
        for (idx, v) in lvl.iter_mut().enumerate() {
            let j = spec.unflat(idx, &mut xi);
            let p = spec.node_point(&xi, j);
            *v = (data.initial)(&p[..dim], p[dim]);
        }
    }
    // prescribed nodes, precomputed once
    let fixed: Vec<(usize, Vec<f64>)> = (0..n)
        .filter(|&idx| asm.unknown[idx].is_none())
        .map(|idx| {
            let j = spec.unflat(idx, &mut xi);
            (idx, spec.node_point(&xi, j))
        })
        .collect();
    let reference = matrix_values(&asm, q, per, 1);
    let pattern_matrix = CscMatrix::try_from_pattern_and_values(asm.base.pattern().clone(), reference.clone())
        .map_err(|e| SolverError::LinearSolve {
            step: 1,
            reason: e.to_string(),
        })?;
    let chol = CscCholesky::factor(&pattern_matrix).map_err(|e| SolverError::LinearSolve {
        step: 1,
        reason: format!("{e:?}"),
    })?;
    let dt = spec.dt();
    let m = asm.flat_of.len();
    let mut prev: Vec<f64> = asm.flat_of.iter().map(|&f| field.values[f]).collect();
    for step in 1..=spec.steps {
        let t = spec.time(step);
        let base = step * n;
        for (idx, p) in &fixed {
            field.values[base + idx] = match data.boundary {
                Some(g) => g(&p[..dim], p[dim], t),
                None => 0.0,
            };
        }
        let mut rhs: Vec<f64> = (0..m).map(|u| asm.volume[u] / dt * prev[u]).collect();
        for &(u, f, c) in &asm.fixed_links {
            rhs[u] += c * field.values[base + f];
        }
        let sol = if q.time_independent || step == 1 {
            chol_solve(&chol, &rhs)
        } else {
            let vals = matrix_values(&asm, q, per, step);
            pcg(&asm.base, &vals, &chol, &rhs, prev.clone(), 1e-14)
                .map_err(|reason| SolverError::LinearSolve { step, reason })?
        };
        for (u, &f) in asm.flat_of.iter().enumerate() {
            field.values[base + f] = sol[u];
        }
        prev = sol;
    }
    field.check_finite()?;
    Ok(field)
}

/// Smooth radial cutoff zeta(X) = phi(|X - center|^2 / R^2), phi = 1 below 1/4 and 0 above 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutoffSpec {
    /// spatial center x0 (y-center is always 0, keeping zeta even in y)
    pub center: Vec<f64>,
    pub radius: f64,
}

impl CutoffSpec {
    pub fn unit(dim_n: usize) -> Self {
        CutoffSpec {
            center: vec![0.0; dim_n],
            radius: 1.0,
        }
    }

    /// (phi, phi', phi'') at s = |X|^2 / R^2
    fn profile(s: f64) -> (f64, f64, f64) {
        if s <= 0.25 {
            return (1.0, 0.0, 0.0);
        }
        if s >= 1.0 {
            return (0.0, 0.0, 0.0);
        }
        // S(u) = f(u)/(f(u)+f(1-u)), f(u) = exp(-1/u), u = (1-s)/(3/4)
        let u = (1.0 - s) / 0.75;
        let du = -1.0 / 0.75;
        let f = |v: f64| (-1.0 / v).exp();
        let f1 = |v: f64| f(v) / (v * v);
        let f2 = |v: f64| f(v) * (1.0 / v.powi(4) - 2.0 / v.powi(3));
        let (g, g1, g2) = (f(u), f1(u), f2(u));
        let (h, h1, h2) = (f(1.0 - u), -f1(1.0 - u), f2(1.0 - u));
        let den = g + h;
        let den1 = g1 + h1;
        let den2 = g2 + h2;
        let sv = g / den;
        let s1 = (g1 * den - g * den1) / (den * den);
        let s2 = (g2 * den - g * den2) / (den * den) - 2.0 * s1 * den1 / den;
        (sv, s1 * du, s2 * du * du)
    }

    /// (zeta, grad zeta, y^{-a} div(y^a grad zeta)) at a point (x.., y)
    pub fn eval(&self, point: &[f64], a: f64) -> (f64, Vec<f64>, f64) {
        let n = self.center.len();
        let r2 = self.radius * self.radius;
        let mut rel: Vec<f64> = (0..n).map(|k| point[k] - self.center[k]).collect();
        rel.push(point[n]);
        let s = rel.iter().map(|v| v * v).sum::<f64>() / r2;
        let (p, p1, p2) = Self::profile(s);
        let grad: Vec<f64> = rel.iter().map(|v| 2.0 * p1 * v / r2).collect();
        // Laplacian in N+1 variables plus (a/y) d_y
        let lz = (2.0 * (n as f64 + 1.0 + a) * p1 + 4.0 * s * p2) / r2;
        (p, grad, lz)
    }
}

/// Centered differences of a level, one-sided at the lattice edges; the y = 0 side
/// uses the conormal flux -q u in place of the missing neighbor.
fn node_gradient(field: &GridField, q: Option<&PotentialField>, level: usize, xi: &[usize], j: usize) -> Vec<f64> {
    let spec = &field.spec;
    let dim = spec.dim_n();
    let u = field.get(level, xi, j);
    let mut g = Vec::with_capacity(dim + 1);
    let mut nx = xi.to_vec();
    for k in 0..dim {
        let ax = &spec.x_axes[k];
        let h = ax.step();
        let i = xi[k];
        let v = if i == 0 {
            nx[k] = 1;
            let d = (field.get(level, &nx, j) - u) / h;
            d
        } else if i == ax.cells {
            nx[k] = i - 1;
            (u - field.get(level, &nx, j)) / h
        } else {
            nx[k] = i + 1;
            let up = field.get(level, &nx, j);
            nx[k] = i - 1;
            (up - field.get(level, &nx, j)) / (2.0 * h)
        };
        nx[k] = i;
        g.push(v);
    }
    let dy = spec.dy();
    let gy = if j == 0 {
        let flux = match q {
            Some(q) => {
                let per = spec.level_len() / spec.y_cells;
                let xf = spec.flat(xi, 0) / spec.y_cells;
                -q.at(per, level, xf) * u / spec.y_center(0).powf(spec.a)
            }
            None => 0.0,
        };
        0.5 * ((field.get(level, xi, 1) - u) / dy + flux)
    } else if j + 1 == spec.y_cells {
        (u - field.get(level, xi, j - 1)) / dy
    } else {
        (field.get(level, xi, j + 1) - field.get(level, xi, j - 1)) / (2.0 * dy)
    };
    g.push(gy);
    g
}

/// W = zeta * v and F = 2 grad zeta . grad v + v * y^{-a} div(y^a grad zeta).
pub fn apply_cutoff(field: &GridField, q: Option<&PotentialField>, zeta: &CutoffSpec) -> Result<(GridField, GridField)> {
    let spec = &field.spec;
    let dim = spec.dim_n();
    if zeta.center.len() != dim {
        return Err(SolverError::Shape(format!(
            "cutoff center has {} coordinates, grid has {dim}",
            zeta.center.len()
        )));
    }
    let fits = spec
        .x_axes
        .iter()
        .zip(&zeta.center)
        .all(|(ax, c)| c - zeta.radius >= ax.lo && c + zeta.radius <= ax.hi)
        && zeta.radius <= spec.y_center(spec.y_cells - 1);
    if !fits {
        return Err(SolverError::CutoffSupport {
            center: zeta.center.clone(),
            radius: zeta.radius,
        });
    }
    let mut w = GridField::zeros(spec, FieldRole::Cutoff);
    let mut f = GridField::zeros(spec, FieldRole::Rhs);
    let n = spec.level_len();
    let mut xi = vec![0usize; dim];
    for idx in 0..n {
        let j = spec.unflat(idx, &mut xi);
        let p = spec.node_point(&xi, j);
        let (z, gz, lz) = zeta.eval(&p, spec.a);
        if z == 0.0 && gz.iter().all(|v| *v == 0.0) {
            continue;
        }
        let inner = gz.iter().all(|v| *v == 0.0) && lz == 0.0;
        for l in 0..spec.levels() {
            let v = field.values[l * n + idx];
            w.values[l * n + idx] = z * v;
            if !inner {
                let gv = node_gradient(field, q, l, &xi, j);
                let dot: f64 = gz.iter().zip(&gv).map(|(a, b)| a * b).sum();
                f.values[l * n + idx] = 2.0 * dot + v * lz;
            }
        }
    }
    Ok((w, f))
}

/// Multilinear interpolation in (x, y, t).
pub fn evaluate(field: &GridField, point: &[f64], t: f64) -> Result<f64> {
    let spec = &field.spec;
    let dim = spec.dim_n();
    if point.len() != dim + 1 {
        return Err(SolverError::Shape(format!(
            "point has {} coordinates, expected {}",
            point.len(),
            dim + 1
        )));
    }
    let oob = || SolverError::OutOfHull {
        point: point.to_vec(),
        t,
    };
    let (l0, wt) = locate_time(spec, t).ok_or_else(oob)?;
    let (j0, wy) = locate_y(spec, point[dim]).ok_or_else(oob)?;
    let mut corners = Vec::with_capacity(dim);
    for k in 0..dim {
        corners.push(locate_node(&spec.x_axes[k], point[k]).ok_or_else(oob)?);
    }
    let n = spec.level_len();
    let mut acc = 0.0;
    for corner in 0..(1usize << (dim + 1)) {
        let mut w = 1.0;
        let mut flat = 0;
        for k in 0..dim {
            let ax = &spec.x_axes[k];
            let (i, f) = corners[k];
            let bit = (corner >> k) & 1;
            w *= if bit == 1 { f } else { 1.0 - f };
            flat = flat * ax.nodes() + (i + bit).min(ax.cells);
        }
        let ybit = (corner >> dim) & 1;
        w *= if ybit == 1 { wy } else { 1.0 - wy };
        if w == 0.0 {
            continue;
        }
        flat = flat * spec.y_cells + (j0 + ybit).min(spec.y_cells - 1);
        let v0 = field.values[l0 * n + flat];
        let v = if wt > 0.0 {
            (1.0 - wt) * v0 + wt * field.values[(l0 + 1) * n + flat]
        } else {
            v0
        };
        acc += w * v;
    }
    Ok(acc)
}

/// Gradient (x.., y) by interpolating node gradients; the bottom row uses the flux value.
pub fn evaluate_gradient(field: &GridField, q: Option<&PotentialField>, point: &[f64], t: f64) -> Result<Vec<f64>> {
    let spec = &field.spec;
    let dim = spec.dim_n();
    let oob = || SolverError::OutOfHull {
        point: point.to_vec(),
        t,
    };
    let (l0, wt) = locate_time(spec, t).ok_or_else(oob)?;
    let (j0, wy) = locate_y(spec, point[dim]).ok_or_else(oob)?;
    let mut corners = Vec::with_capacity(dim);
    for k in 0..dim {
        corners.push(locate_node(&spec.x_axes[k], point[k]).ok_or_else(oob)?);
    }
    let mut acc = vec![0.0; dim + 1];
    let mut xi = vec![0usize; dim];
    for corner in 0..(1usize << (dim + 1)) {
        let mut w = 1.0;
        for k in 0..dim {
            let (i, f) = corners[k];
            let bit = (corner >> k) & 1;
            w *= if bit == 1 { f } else { 1.0 - f };
            xi[k] = (i + bit).min(spec.x_axes[k].cells);
        }
        let ybit = (corner >> dim) & 1;
        w *= if ybit == 1 { wy } else { 1.0 - wy };
        if w == 0.0 {
            continue;
        }
        let j = (j0 + ybit).min(spec.y_cells - 1);
        let g0 = node_gradient(field, q, l0, &xi, j);
        for (a, g) in acc.iter_mut().zip(&g0) {
            *a += w * (1.0 - wt) * g;
        }
        if wt > 0.0 {
            let g1 = node_gradient(field, q, l0 + 1, &xi, j);
            for (a, g) in acc.iter_mut().zip(&g1) {
                *a += w * wt * g;
            }
        }
    }
    Ok(acc)
}

/// Whether (point, t) lies in the interpolation hull.
pub fn in_hull(spec: &GridSpec, point: &[f64], t: f64) -> bool {
    let dim = spec.dim_n();
    locate_time(spec, t).is_some()
        && locate_y(spec, point[dim]).is_some()
        && (0..dim).all(|k| locate_node(&spec.x_axes[k], point[k]).is_some())
}

const MAGIC: &[u8; 8] = b"FHGRID01";

/// Little-endian layout:
/// magic "FHGRID01" | u32 role | u32 N | per axis (f64 lo, f64 hi, u64 cells) |
/// f64 y_max | u64 y_cells | f64 t_start | f64 t_end | u64 steps | f64 a |
/// u32 face weight | u32 lateral | u64 count | count f64 values.
pub fn write_binary(field: &GridField, mut out: impl Write) -> Result<()> {
    let s = &field.spec;
    out.write_all(MAGIC)?;
    out.write_all(&field.role.code().to_le_bytes())?;
    out.write_all(&(s.dim_n() as u32).to_le_bytes())?;
    for ax in &s.x_axes {
        out.write_all(&ax.lo.to_le_bytes())?;
        out.write_all(&ax.hi.to_le_bytes())?;
        out.write_all(&(ax.cells as u64).to_le_bytes())?;
    }
    out.write_all(&s.y_max.to_le_bytes())?;
    out.write_all(&(s.y_cells as u64).to_le_bytes())?;
    out.write_all(&s.t_start.to_le_bytes())?;
    out.write_all(&s.t_end.to_le_bytes())?;
    out.write_all(&(s.steps as u64).to_le_bytes())?;
    out.write_all(&s.a.to_le_bytes())?;
    let fw: u32 = match s.face_weight {
        FaceWeight::Exact => 0,
        FaceWeight::Geometric => 1,
    };
    let lat: u32 = match s.lateral {
        LateralCondition::Dirichlet => 0,
        LateralCondition::ZeroFlux => 1,
    };
    out.write_all(&fw.to_le_bytes())?;
    out.write_all(&lat.to_le_bytes())?;
    out.write_all(&(field.values.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(field.values.len() * 8);
    for v in &field.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_binary(mut input: impl Read) -> Result<GridField> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(SolverError::Format("bad magic".into()));
    }
    let role = FieldRole::from_code(read_u32(&mut input)?)?;
    let dim = read_u32(&mut input)? as usize;
    if dim == 0 || dim > 8 {
        return Err(SolverError::Format(format!("implausible dimension {dim}")));
    }
    let mut x_axes = Vec::with_capacity(dim);
    for _ in 0..dim {
        let lo = read_f64(&mut input)?;
        let hi = read_f64(&mut input)?;
        let cells = read_u64(&mut input)? as usize;
        x_axes.push(Axis { lo, hi, cells });
    }
    let y_max = read_f64(&mut input)?;
    let y_cells = read_u64(&mut input)? as usize;
    let t_start = read_f64(&mut input)?;
    let t_end = read_f64(&mut input)?;
    let steps = read_u64(&mut input)? as usize;
    let a = read_f64(&mut input)?;
    let face_weight = match read_u32(&mut input)? {
        0 => FaceWeight::Exact,
        1 => FaceWeight::Geometric,
        c => return Err(SolverError::Format(format!("unknown face weight code {c}"))),
    };
    let lateral = match read_u32(&mut input)? {
        0 => LateralCondition::Dirichlet,
        1 => LateralCondition::ZeroFlux,
        c => return Err(SolverError::Format(format!("unknown lateral code {c}"))),
    };
    let spec = GridSpec {
        x_axes,
        y_max,
        y_cells,
        t_start,
        t_end,
        steps,
        a,
        face_weight,
        lateral,
    };
    spec.validate()?;
    let count = read_u64(&mut input)? as usize;
    if count != spec.levels() * spec.level_len() {
        return Err(SolverError::Format(format!(
            "payload has {count} values, header implies {}",
            spec.levels() * spec.level_len()
        )));
    }
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(GridField { spec, role, values })
}

/// JSON sidecar written next to the binary payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub version: String,
    pub role: FieldRole,
    pub spec: GridSpec,
    pub layout: String,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Sidecar {
    pub fn for_field(field: &GridField, config: serde_json::Value) -> Self {
        Sidecar {
            version: env!("CARGO_PKG_VERSION").to_string(),
            role: field.role,
            spec: field.spec.clone(),
            layout: "level-major, x-axes row-major, y fastest; f64 little-endian".into(),
            config,
        }
    }
}
