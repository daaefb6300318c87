//! The nonlocal operator H^s = (d_t - Delta)^s through its space-time kernel, the
//! Poisson-kernel extension, and the conormal limit that links the two.
//!
//! Both integrals are written against the heat semigroup. With
//! g(tau) = u(x,t) - (G_tau * u(., t - tau))(x) and c = y^2/4,
//!
//!   H^s u            = 1/|Gamma(-s)| * int tau^{-1-s} g(tau) dtau
//!   u - ubar(x,y,t)  = c^s/Gamma(s)  * int tau^{-1-s} e^{-c/tau} g(tau) dtau
//!
//! so one routine evaluates `K_c = int tau^{-1-s} e^{-c/tau} g dtau` for every y >= 0.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gaussmeasure::{gauss_hermite, gauss_legendre, ExtensionParams, KahanSum, MeasureError};
use crate::specfun::{abs_gamma_neg, gamma};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtensionError {
    #[error("trace sample is not finite at x = {x:?}, t = {t}")]
    NonFinite { x: Vec<f64>, t: f64 },
    #[error("tail bound {bound:e} above requested tolerance {tol:e}")]
    TailTolerance { bound: f64, tol: f64 },
    #[error("singular-layer estimate {estimate:e} above tolerance {tol:e}")]
    SingularLayer { estimate: f64, tol: f64 },
    #[error("y must be positive, got {0}")]
    NonPositiveY(f64),
    #[error("s must lie in (0,1), got {0}")]
    BadOrder(f64),
    #[error("extrapolation did not converge: last two estimates {0} and {1}")]
    NonConvergent(f64, f64),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Truncation and quadrature controls for the kernel integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    /// lags beyond this use the fitted power-law tail
    pub t_back: f64,
    /// spatial half-width in standard deviations of the heat kernel
    pub r_sigmas: f64,
    /// lags below this use the Taylor model g(tau) = tau (d_t - Delta) u
    pub eps_layer: f64,
    /// panel width in log(tau)
    pub log_panel: f64,
    pub gl_time: usize,
    pub gl_space: usize,
    /// widest spatial panel for the composite Gauss-Legendre expectation
    pub space_panel: f64,
    /// below this standard deviation use Gauss-Hermite for the heat expectation
    pub hermite_sigma: f64,
    pub hermite_order: usize,
    /// finite-difference step for the Taylor model
    pub fd_step: f64,
    /// reject results whose tail bound exceeds this (None: report only)
    pub tail_tol: Option<f64>,
    /// reject results whose singular-layer contribution estimate exceeds this
    pub layer_tol: Option<f64>,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            t_back: 500.0,
            r_sigmas: 12.0,
            eps_layer: 1e-8,
            log_panel: 0.5,
            gl_time: 10,
            gl_space: 8,
            space_panel: 0.5,
            hermite_sigma: 0.1,
            hermite_order: 30,
            fd_step: 1e-3,
            tail_tol: None,
            layer_tol: None,
        }
    }
}

/// Value with the tail bound of the truncated lag integral.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub tail_bound: f64,
    pub layer: f64,
}

/// (G_tau * u(., t'))(x) = E u(x - z, t'), z ~ N(0, 2 tau I).
pub fn heat_mean(
    u: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    t: f64,
    tau: f64,
    cfg: &Truncation,
) -> Result<f64, ExtensionError> {
    let sigma = (2.0 * tau).sqrt();
    let n = x.len();
    let (nodes, weights): (Vec<f64>, Vec<f64>) = if sigma <= cfg.hermite_sigma {
        let gh = gauss_hermite(cfg.hermite_order)?;
        // gh nodes follow N(0, 2)
        (gh.nodes.iter().map(|z| z * tau.sqrt()).collect(), gh.weights.clone())
    } else {
        let gl = gauss_legendre(cfg.gl_space)?;
        let half = cfg.r_sigmas * sigma;
        let width = sigma.min(cfg.space_panel);
        let panels = ((2.0 * half) / width).ceil() as usize;
        let h = 2.0 * half / panels as f64;
        let norm = 1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt());
        let mut nodes = Vec::with_capacity(panels * gl.nodes.len());
        let mut weights = Vec::with_capacity(panels * gl.nodes.len());
        for k in 0..panels {
            let lo = -half + k as f64 * h;
            for (xi, wi) in gl.nodes.iter().zip(&gl.weights) {
                let z = lo + xi * h;
                nodes.push(z);
                weights.push(wi * h * norm * (-z * z / (2.0 * sigma * sigma)).exp());
            }
        }
        (nodes, weights)
    };
    let mut acc = KahanSum::default();
    let mut idx = vec![0usize; n];
    let mut pt = vec![0.0; n];
    loop {
        let mut w = 1.0;
        for k in 0..n {
            pt[k] = x[k] - nodes[idx[k]];
            w *= weights[idx[k]];
        }
        let v = u(&pt, t);
        if !v.is_finite() {
            return Err(ExtensionError::NonFinite { x: pt, t });
        }
        acc.add(w * v);
        let mut k = 0;
        loop {
            if k == n {
                return Ok(acc.value());
            }
            idx[k] += 1;
            if idx[k] < nodes.len() {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// (d_t - Delta) u at (x, t) by centered differences.
fn caloric_rate(u: &dyn Fn(&[f64], f64) -> f64, x: &[f64], t: f64, h: f64) -> f64 {
    let dt = (u(x, t + h) - u(x, t - h)) / (2.0 * h);
    let u0 = u(x, t);
    let mut lap = 0.0;
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + h;
        let up = u(&p, t);
        p[k] = x[k] - h;
        let um = u(&p, t);
        p[k] = x[k];
        lap += (up - 2.0 * u0 + um) / (h * h);
    }
    dt - lap
}

/// int_T^inf tau^{-1-q} e^{-c/tau} dtau
fn tail_kernel(q: f64, c: f64, t_back: f64) -> f64 {
    let z = c / t_back;
    if z < 1e-6 {
        t_back.powf(-q) * (1.0 / q - z / (q + 1.0) + z * z / (2.0 * (q + 2.0)))
    } else {
        c.powf(-q) * gamma(q) * statrs::function::gamma::gamma_lr(q, z)
    }
}

/// int_0^eps tau^{-s} e^{-c/tau} dtau
fn layer_kernel(s: f64, c: f64, eps: f64) -> Result<f64, ExtensionError> {
    if c == 0.0 {
        return Ok(eps.powf(1.0 - s) / (1.0 - s));
    }
    let gl = gauss_legendre(10)?;
    let hi = eps.ln();
    let lo = hi - 40.0;
    let panels = 80;
    let h = (hi - lo) / panels as f64;
    let mut acc = KahanSum::default();
    for k in 0..panels {
        for (xi, wi) in gl.nodes.iter().zip(&gl.weights) {
            let l = lo + (k as f64 + xi) * h;
            let tau = l.exp();
            acc.add(wi * h * tau.powf(1.0 - s) * (-c / tau).exp());
        }
    }
    Ok(acc.value())
}

/// K_c = int_0^inf tau^{-1-s} e^{-c/tau} g(tau) dtau.
pub fn kernel_integral(
    u: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    t: f64,
    s: f64,
    c: f64,
    cfg: &Truncation,
) -> Result<Estimate, ExtensionError> {
    if !(s > 0.0 && s < 1.0) {
        return Err(ExtensionError::BadOrder(s));
    }
    let u0 = u(x, t);
    if !u0.is_finite() {
        return Err(ExtensionError::NonFinite { x: x.to_vec(), t });
    }
    let rate = caloric_rate(u, x, t, cfg.fd_step);
    let layer = rate * layer_kernel(s, c, cfg.eps_layer)?;
    if let Some(tol) = cfg.layer_tol {
        // the Taylor model error is second order in the layer width
        let estimate = (layer * cfg.eps_layer).abs();
        if estimate > tol {
            return Err(ExtensionError::SingularLayer { estimate, tol });
        }
    }

    let gl = gauss_legendre(cfg.gl_time)?;
    let lo = cfg.eps_layer.ln();
    let hi = cfg.t_back.ln();
    let panels = ((hi - lo) / cfg.log_panel).ceil().max(1.0) as usize;
    let h = (hi - lo) / panels as f64;
    let mut acc = KahanSum::default();
    for k in 0..panels {
        for (xi, wi) in gl.nodes.iter().zip(&gl.weights) {
            let l = lo + (k as f64 + xi) * h;
            let tau = l.exp();
            let damp = if c > 0.0 { (-c / tau).exp() } else { 1.0 };
            if damp == 0.0 {
                continue;
            }
            let g = u0 - heat_mean(u, x, t - tau, tau, cfg)?;
            acc.add(wi * h * tau.powf(-s) * damp * g);
        }
    }

    // tail: u0 * int k_c - int k_c v with v(tau) ~ v(T) (T/tau)^beta
    let tb = cfg.t_back;
    let v_t = heat_mean(u, x, t - tb, tb, cfg)?;
    let v_h = heat_mean(u, x, t - tb / 2.0, tb / 2.0, cfg)?;
    let v_q = heat_mean(u, x, t - tb / 4.0, tb / 4.0, cfg)?;
    let fit = |near: f64, far: f64| -> Option<f64> {
        if far == 0.0 || near / far <= 0.0 {
            None
        } else {
            Some((near / far).ln().max(0.0) / 2f64.ln())
        }
    };
    let v_tail = |beta: Option<f64>| -> f64 {
        match beta {
            None => 0.0,
            Some(b) => v_t * tb.powf(b) * tail_kernel(s + b, c, tb),
        }
    };
    let beta = fit(v_h, v_t);
    let beta_prev = fit(v_q, v_h);
    let tail = u0 * tail_kernel(s, c, tb) - v_tail(beta);
    let tail_bound = match (beta, beta_prev) {
        (Some(_), Some(_)) | (None, None) => (v_tail(beta) - v_tail(beta_prev)).abs(),
        _ => v_t.abs() * tail_kernel(s, c, tb),
    };
    if let Some(tol) = cfg.tail_tol {
        if tail_bound > tol {
            return Err(ExtensionError::TailTolerance { bound: tail_bound, tol });
        }
    }
    Ok(Estimate {
        value: layer + acc.value() + tail,
        tail_bound,
        layer,
    })
}

/// H^s u(x, t).
pub fn fractional_heat(
    u: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    t: f64,
    s: f64,
    cfg: &Truncation,
) -> Result<Estimate, ExtensionError> {
    let k = kernel_integral(u, x, t, s, 0.0, cfg)?;
    let f = 1.0 / abs_gamma_neg(s);
    Ok(Estimate {
        value: k.value * f,
        tail_bound: k.tail_bound * f,
        layer: k.layer * f,
    })
}

/// Poisson-kernel extension ubar(x, y, t).
pub fn extend(
    u: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    y: f64,
    t: f64,
    p: &ExtensionParams,
    cfg: &Truncation,
) -> Result<Estimate, ExtensionError> {
    if !(y > 0.0) {
        return Err(ExtensionError::NonPositiveY(y));
    }
    let c = y * y / 4.0;
    let k = kernel_integral(u, x, t, p.s, c, cfg)?;
    let f = c.powf(p.s) / gamma(p.s);
    Ok(Estimate {
        value: u(x, t) - f * k.value,
        tail_bound: f * k.tail_bound,
        layer: f * k.layer,
    })
}

/// |Gamma(-s)| / (2^{2s} Gamma(s)), the factor linking the conormal limit to H^s.
pub fn conormal_constant(s: f64) -> f64 {
    abs_gamma_neg(s) / (4f64.powf(s) * gamma(s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderConfig {
    pub y0: f64,
    pub levels: usize,
    /// number of Richardson eliminations
    pub stages: usize,
    /// accepted relative gap between the last two fully extrapolated values
    pub tol: f64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            y0: 0.5,
            levels: 6,
            stages: 4,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConormalEstimate {
    pub value: f64,
    pub gap: f64,
    pub ys: Vec<f64>,
    pub quotients: Vec<f64>,
    pub exponents: Vec<f64>,
}

/// Powers of y in the small-y expansion of -(ubar - u)/y^{2s}:
/// 2 - 2s, 2, 4 - 2s, 4, ... in increasing order.
pub fn conormal_exponents(s: f64, count: usize) -> Vec<f64> {
    let mut e: Vec<f64> = (1..=count)
        .flat_map(|k| [2.0 * k as f64 - 2.0 * s, 2.0 * k as f64])
        .collect();
    e.sort_by(|l, r| l.partial_cmp(r).unwrap());
    e.dedup_by(|l, r| (*l - *r).abs() < 1e-12);
    e.truncate(count);
    e
}

/// Richardson elimination of known powers h^e on a ladder h_k = h_0 2^{-k}.
pub fn richardson(values: &[f64], exponents: &[f64]) -> Vec<Vec<f64>> {
    let mut table = vec![values.to_vec()];
    for &e in exponents {
        let prev = table.last().unwrap();
        if prev.len() < 2 {
            break;
        }
        let f = 2f64.powf(e);
        let next: Vec<f64> = prev.windows(2).map(|w| (f * w[1] - w[0]) / (f - 1.0)).collect();
        table.push(next);
    }
    table
}

/// -lim (ubar - u)/y^{1-a} from evaluations of ubar on a geometric y-ladder.
pub fn conormal_derivative(
    ubar: &dyn Fn(f64) -> Result<f64, ExtensionError>,
    trace: f64,
    p: &ExtensionParams,
    cfg: &LadderConfig,
) -> Result<ConormalEstimate, ExtensionError> {
    let b = 1.0 - p.a;
    let mut ys = Vec::with_capacity(cfg.levels);
    let mut qs = Vec::with_capacity(cfg.levels);
    for k in 0..cfg.levels {
        let y = cfg.y0 * 0.5f64.powi(k as i32);
        ys.push(y);
        qs.push(-(ubar(y)? - trace) / y.powf(b));
    }
    let exps = conormal_exponents(p.s, cfg.stages);
    let table = richardson(&qs, &exps);
    let last = table.last().unwrap();
    let value = *last.last().unwrap();
    let prev = if last.len() >= 2 { last[last.len() - 2] } else { value };
    let gap = (value - prev).abs();
    if gap > cfg.tol * value.abs().max(1.0) {
        return Err(ExtensionError::NonConvergent(prev, value));
    }
    Ok(ConormalEstimate {
        value,
        gap,
        ys,
        quotients: qs,
        exponents: exps,
    })
}

/// Conormal derivative of the Poisson extension of `u` at (x, t).
pub fn extension_conormal(
    u: &dyn Fn(&[f64], f64) -> f64,
    x: &[f64],
    t: f64,
    p: &ExtensionParams,
    trunc: &Truncation,
    ladder: &LadderConfig,
) -> Result<ConormalEstimate, ExtensionError> {
    let trace = u(x, t);
    conormal_derivative(&|y| Ok(extend(u, x, y, t, p, trunc)?.value), trace, p, ladder)
}
