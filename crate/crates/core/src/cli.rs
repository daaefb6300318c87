//! Command-line front end: a JSON config plus flag overrides, one subcommand per
//! pipeline, artifacts written to an output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::blowup::{self, Family, ScanLattice, TangentOptions};
use crate::extension::{self, LadderConfig, Truncation};
use crate::frequency::{self, FieldHandle, GridView, ProfileParams};
use crate::gaussmeasure::{build_quadrature_with, ExtensionParams, QuadratureRule, TracePoint, DEFAULT_ORDER};
use crate::poly::{GenPoly, TermSpec};
use crate::solver::{self, Axis, CutoffSpec, CylinderData, FaceWeight, GridSpec, LateralCondition, PotentialField};
use crate::spectral::{self, EigenIndex, PoincareKind, ProblemKind};

#[derive(Debug, Error)]
pub enum CliError {
    /// bad flags or config; exit code 2
    #[error("{0}")]
    Config(String),
    /// a computation failed or did not converge; exit code 3
    #[error("{0}")]
    Numeric(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

fn numeric(e: impl std::fmt::Display) -> CliError {
    CliError::Numeric(e.to_string())
}

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "fracheat", version, about = "Extension-problem toolkit for the fractional heat operator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Flags {
    /// JSON config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub a: Option<f64>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub s: Option<f64>,
    /// spatial dimension
    #[arg(long = "N", global = true)]
    pub n: Option<usize>,
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub kappa: Option<f64>,
    /// center as comma-separated x_1,..,x_N,t
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub p0: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// bundled polynomial: theta00, theta10, theta20, theta01, theta30, theta11, theta40,
    /// theta21, theta02 (fields) or x, x2-2t, 2t (traces)
    #[arg(long, global = true)]
    pub fixture: Option<String>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    /// eigenvalues, an eigenspace, and the Gram/residual report
    Spectrum,
    /// Gaussian-Poincare ratios over a random corpus plus the extremals
    Poincare,
    /// conormal derivative of the extension against the fractional heat operator
    ExtensionCheck,
    /// run the finite-volume solver and write the field
    Solve,
    /// frequency profile CSV at p0
    Frequency,
    /// tangent maps and classification at a list of points
    Blowup,
    /// locate nodal points of a trace on a lattice and classify them
    NodalScan,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s: Option<f64>,
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_axes: Vec<Axis>,
    pub y_max: f64,
    pub y_cells: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
    #[serde(default)]
    pub face_weight: FaceWeight,
    #[serde(default)]
    pub lateral: LateralCondition,
    #[serde(default)]
    pub initial: InitialConfig,
    /// cutoff for frequency and blow-up runs (default: unit ball at the origin)
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<CutoffSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// sin(pi x_1 / 2) cos(pi y / (2 y_max))
    #[default]
    SinCos,
    /// polynomial in (x, y, t), also used as lateral data
    Poly { terms: Vec<TermSpec> },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PotentialConfig {
    #[default]
    Zero,
    /// amplitude * cos(x_1) * exp(-t)
    CosDecay { amplitude: f64 },
    /// polynomial in (x, t)
    Poly { terms: Vec<TermSpec> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldConfig {
    Poly { terms: Vec<TermSpec> },
    Fixture { name: String },
    /// solve on `grid`, apply the cutoff and analyze the product
    Grid,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(rename = "C", default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p0: Option<TracePoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<TracePoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Family>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// size of the random Poincare corpus
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<ScanLattice>,
    /// quadrature order per axis
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub params: ParamsConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub potential: Option<PotentialConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldConfig>,
    /// trace polynomial u(x, t) for nodal scans
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<Vec<TermSpec>>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub outputs: OutputsConfig,
}

pub const DEFAULT_OUT: &str = "fracheat-out";

/// Merge flags into the config and fill in derived values.
pub fn resolve(mut cfg: Config, flags: &Flags) -> Result<Config> {
    if flags.a.is_some() && flags.s.is_some() {
        return Err(CliError::Config("give exactly one of --a and --s".into()));
    }
    if flags.a.is_some() || flags.s.is_some() {
        cfg.params.a = flags.a;
        cfg.params.s = flags.s;
    }
    let a = match (cfg.params.a, cfg.params.s) {
        (Some(_), Some(_)) => return Err(CliError::Config("params: give exactly one of a and s".into())),
        (Some(a), None) => a,
        (None, Some(s)) => {
            if !(s > 0.0 && s < 1.0) {
                return Err(CliError::Config(format!("s must lie in (0,1), got {s}")));
            }
            1.0 - 2.0 * s
        }
        (None, None) => 0.0,
    };
    if !(a > -1.0 && a < 1.0) {
        return Err(CliError::Config(format!("a must lie in (-1,1), got {a}")));
    }
    cfg.params.a = Some(a);
    cfg.params.s = Some((1.0 - a) / 2.0);
    if let Some(n) = flags.n {
        cfg.params.n = Some(n);
    }
    let n = *cfg.params.n.get_or_insert(1);
    if n == 0 {
        return Err(CliError::Config("N must be positive".into()));
    }
    if let Some(k) = flags.kappa {
        cfg.analysis.kappa = Some(k);
    }
    if let Some(seed) = flags.seed {
        cfg.analysis.seed = Some(seed);
    }
    if let Some(p) = &flags.p0 {
        cfg.analysis.p0 = Some(parse_point(p, n)?);
    }
    if let Some(dir) = &flags.out {
        cfg.outputs.dir = Some(dir.clone());
    }
    if let Some(name) = &flags.fixture {
        if is_trace_fixture(name) {
            cfg.trace = Some(trace_fixture(name, n, a)?.to_terms());
        } else {
            fixture(name, n, a)?;
            cfg.field = Some(FieldConfig::Fixture { name: name.clone() });
        }
    }
    if let Some(g) = &cfg.grid {
        if g.x_axes.len() != n {
            return Err(CliError::Config(format!("grid has {} x-axes but N = {n}", g.x_axes.len())));
        }
        grid_spec(g, a).validate().map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(cfg)
}

fn parse_point(s: &str, n: usize) -> Result<TracePoint> {
    let vals: std::result::Result<Vec<f64>, _> = s.split(',').map(|v| v.trim().parse::<f64>()).collect();
    let vals = vals.map_err(|e| CliError::Config(format!("--p0 {s}: {e}")))?;
    if vals.len() != n + 1 {
        return Err(CliError::Config(format!("--p0 needs {} comma-separated values", n + 1)));
    }
    Ok(TracePoint {
        x: vals[..n].to_vec(),
        t: vals[n],
    })
}

fn grid_spec(g: &GridConfig, a: f64) -> GridSpec {
    GridSpec {
        x_axes: g.x_axes.clone(),
        y_max: g.y_max,
        y_cells: g.y_cells,
        t_start: g.t_start,
        t_end: g.t_end,
        steps: g.steps,
        a,
        face_weight: g.face_weight,
        lateral: g.lateral,
    }
}

const FIXTURES: [(&str, u32, u32); 9] = [
    ("theta00", 0, 0),
    ("theta10", 1, 0),
    ("theta20", 2, 0),
    ("theta01", 0, 1),
    ("theta30", 3, 0),
    ("theta11", 1, 1),
    ("theta40", 4, 0),
    ("theta21", 2, 1),
    ("theta02", 0, 2),
];

/// Homogeneous Hermite-Laguerre polynomial t^kappa V_{n e_1, m}(X / sqrt t) and its kappa.
pub fn fixture(name: &str, dim_n: usize, a: f64) -> Result<(GenPoly, f64)> {
    let &(_, n, m) = FIXTURES
        .iter()
        .find(|f| f.0 == name)
        .ok_or_else(|| CliError::Config(format!("unknown fixture {name}")))?;
    let p = ExtensionParams::from_a(a, dim_n).map_err(|e| CliError::Config(e.to_string()))?;
    let mut alpha = vec![0; dim_n];
    alpha[0] = n;
    let idx = EigenIndex::new(ProblemKind::Neumann, alpha, m);
    let kappa = n as f64 / 2.0 + m as f64;
    let v = spectral::eigenfunction_poly(&idx, &p).map_err(numeric)?;
    Ok((v.homogenize(kappa).map_err(numeric)?, kappa))
}

fn is_trace_fixture(name: &str) -> bool {
    matches!(name, "x" | "x2-2t" | "2t")
}

fn trace_fixture(name: &str, n: usize, a: f64) -> Result<GenPoly> {
    let x = GenPoly::x(n, a, 0);
    let t = GenPoly::t(n, a);
    Ok(match name {
        "x" => x,
        "x2-2t" => x.mul(&x).sub(&t.scale(2.0)),
        "2t" => t.scale(2.0),
        _ => return Err(CliError::Config(format!("unknown trace fixture {name}"))),
    })
}

fn load_config(flags: &Flags) -> Result<Config> {
    let cfg = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Config::default(),
    };
    resolve(cfg, flags)
}

struct Ctx {
    cfg: Config,
    params: ExtensionParams,
    out: PathBuf,
}

impl Ctx {
    fn envelope(&self, result: impl Serialize) -> Result<String> {
        let v = json!({
            "version": env!("CARGO_PKG_VERSION"),
            "config": self.cfg,
            "result": result,
        });
        let mut s = serde_json::to_string_pretty(&v).map_err(numeric)?;
        s.push('\n');
        Ok(s)
    }

    fn write(&self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(name);
        fs::write(&path, contents)?;
        Ok(path)
    }

    fn rule(&self, family: Family) -> Result<QuadratureRule> {
        let order = self.cfg.analysis.order.unwrap_or(DEFAULT_ORDER);
        build_quadrature_with(&self.params, &[order], self.params.a, family.convention()).map_err(numeric)
    }

    fn family(&self) -> Family {
        self.cfg.analysis.family.unwrap_or(Family::Neumann)
    }

    fn p0(&self) -> TracePoint {
        self.cfg
            .analysis
            .p0
            .clone()
            .unwrap_or_else(|| TracePoint::origin(self.params.dim_n))
    }

    fn poly(&self, terms: &[TermSpec]) -> Result<GenPoly> {
        GenPoly::from_terms(self.params.dim_n, self.params.a, terms).map_err(|e| CliError::Config(e.to_string()))
    }
}

/// Run a parsed command line; returns the paths written.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>> {
    let cfg = load_config(&cli.flags)?;
    let a = cfg.params.a.unwrap_or(0.0);
    let n = cfg.params.n.unwrap_or(1);
    let params = ExtensionParams::from_a(a, n).map_err(|e| CliError::Config(e.to_string()))?;
    let out = cfg.outputs.dir.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let ctx = Ctx { cfg, params, out };
    match cli.command {
        Command::Spectrum => spectrum(&ctx),
        Command::Poincare => poincare(&ctx),
        Command::ExtensionCheck => extension_check(&ctx),
        Command::Solve => solve(&ctx),
        Command::Frequency => frequency_cmd(&ctx),
        Command::Blowup => blowup_cmd(&ctx),
        Command::NodalScan => nodal_scan(&ctx),
    }
}

/// Entry point for the binary: parse, run, report, and map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[derive(Serialize)]
struct IndexRow {
    kind: ProblemKind,
    alpha: Vec<u32>,
    m: u32,
    eigenvalue: f64,
}

fn spectrum(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let p = &ctx.params;
    let family = ctx.family();
    let cap = 8;
    let mut gram = Vec::new();
    for &kind in family.kinds() {
        let rule = ctx.rule(Family::for_kind(kind))?;
        let idx = spectral::indices_up_to(kind, p.dim_n, cap);
        let g = spectral::gram_matrix(&idx, &rule).map_err(numeric)?;
        let gram_err = (g - nalgebra::DMatrix::identity(idx.len(), idx.len())).abs().max();
        let mut residual: f64 = 0.0;
        for i in &idx {
            residual = residual.max(spectral::ou_residual(i, &rule, &idx).map_err(numeric)?);
        }
        gram.push(json!({"kind": kind, "cap": cap, "count": idx.len(), "gram_error": gram_err, "max_residual": residual}));
    }
    let mut rows = Vec::new();
    if let Some(kappa) = ctx.cfg.analysis.kappa {
        for &kind in family.kinds() {
            for idx in spectral::eigenspace(kappa, kind, p) {
                let eigenvalue = spectral::eigenvalue(&idx, p).map_err(numeric)?;
                println!("{:?} alpha={:?} m={} eigenvalue={}", kind, idx.alpha, idx.m, eigenvalue);
                rows.push(IndexRow {
                    kind,
                    alpha: idx.alpha,
                    m: idx.m,
                    eigenvalue,
                });
            }
        }
    } else {
        for &kind in family.kinds() {
            for idx in spectral::indices_up_to(kind, p.dim_n, cap) {
                let eigenvalue = spectral::eigenvalue(&idx, p).map_err(numeric)?;
                rows.push(IndexRow {
                    kind,
                    alpha: idx.alpha,
                    m: idx.m,
                    eigenvalue,
                });
            }
        }
    }
    let body = ctx.envelope(json!({"kappa": ctx.cfg.analysis.kappa, "indices": rows, "gram": gram}))?;
    Ok(vec![ctx.write("spectrum.json", body.as_bytes())?])
}

fn poincare(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let seed = ctx.cfg.analysis.seed.unwrap_or(0);
    let count = ctx.cfg.analysis.count.unwrap_or(100);
    let mut reports = Vec::new();
    let mut csv = String::from("kind,label,extremal,ratio,constant\n");
    for kind in [PoincareKind::HalfSpace, PoincareKind::WholeSpace, PoincareKind::Dirichlet] {
        let r = spectral::poincare_report(&ctx.params, kind, count, seed, 1e-6).map_err(numeric)?;
        for row in &r.rows {
            csv.push_str(&format!("{:?},{},{},{:e},{:e}\n", kind, row.label, row.extremal, row.ratio, r.constant));
        }
        println!(
            "{:?}: constant {} max ratio {} attained by {:?} verdict {}",
            kind, r.constant, r.max_ratio, r.attained_by, r.extremal_verdict
        );
        reports.push(json!({
            "kind": kind,
            "constant": r.constant,
            "max_ratio": r.max_ratio,
            "argmax": r.argmax,
            "attained_by": r.attained_by,
            "extremal_verdict": r.extremal_verdict,
        }));
    }
    let head = format!("# {}\n", serde_json::to_string(&json!({"version": env!("CARGO_PKG_VERSION"), "config": ctx.cfg})).map_err(numeric)?);
    let body = ctx.envelope(reports)?;
    Ok(vec![
        ctx.write("poincare.json", body.as_bytes())?,
        ctx.write("poincare.csv", (head + &csv).as_bytes())?,
    ])
}

/// The corpus used by `extension-check`: (label, u).
pub fn extension_corpus() -> Vec<(&'static str, fn(&[f64], f64) -> f64)> {
    fn cosx(x: &[f64], _t: f64) -> f64 {
        x[0].cos()
    }
    fn bump(x: &[f64], _t: f64) -> f64 {
        (-x[0] * x[0]).exp()
    }
    fn quad(x: &[f64], t: f64) -> f64 {
        x[0] * x[0] + 2.0 * t
    }
    vec![("cos x", cosx), ("exp(-x^2)", bump), ("x^2+2t", quad)]
}

pub const EXTENSION_POINTS: [(f64, f64); 5] = [(-1.0, 0.0), (-0.4, 0.3), (0.0, 0.0), (0.5, -0.2), (1.2, 0.1)];
pub const EXTENSION_S: [f64; 3] = [0.25, 0.5, 0.75];

fn extension_check(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let trunc = Truncation::default();
    let ladder = LadderConfig::default();
    let mut csv = String::from("u,s,x,t,conormal,rhs,abs_err,gap\n");
    let mut worst: f64 = 0.0;
    let s_list: Vec<f64> = match ctx.cfg.params.s {
        Some(s) if ctx.cfg.params.a != Some(0.0) => vec![s],
        _ => EXTENSION_S.to_vec(),
    };
    for (label, u) in extension_corpus() {
        for &s in &s_list {
            let p = ExtensionParams::from_s(s, 1).map_err(numeric)?;
            for &(x, t) in &EXTENSION_POINTS {
                let lhs = extension::extension_conormal(&u, &[x], t, &p, &trunc, &ladder).map_err(numeric)?;
                let rhs = extension::conormal_constant(s)
                    * extension::fractional_heat(&u, &[x], t, s, &trunc).map_err(numeric)?.value;
                let err = (lhs.value - rhs).abs();
                worst = worst.max(err);
                csv.push_str(&format!("{label},{s},{x},{t},{:e},{:e},{:e},{:e}\n", lhs.value, rhs, err, lhs.gap));
            }
        }
    }
    println!("max |conormal - c_s H^s u| = {worst:e}");
    let head = format!(
        "# {}\n",
        serde_json::to_string(&json!({"version": env!("CARGO_PKG_VERSION"), "config": ctx.cfg, "max_abs_err": worst}))
            .map_err(numeric)?
    );
    Ok(vec![ctx.write("extension-check.csv", (head + &csv).as_bytes())?])
}

struct Solved {
    raw: solver::GridField,
    q: PotentialField,
    q_present: bool,
}

fn run_solver(ctx: &Ctx) -> Result<Solved> {
    let g = ctx
        .cfg
        .grid
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs a grid section".into()))?;
    let spec = grid_spec(g, ctx.params.a);
    let n = ctx.params.dim_n;
    let (q, q_present) = match ctx.cfg.potential.clone().unwrap_or_default() {
        PotentialConfig::Zero => (PotentialField::zero(&spec), false),
        PotentialConfig::CosDecay { amplitude } => (
            PotentialField::from_fn(&spec, &|x, t| amplitude * x[0].cos() * (-t).exp()).map_err(numeric)?,
            amplitude != 0.0,
        ),
        PotentialConfig::Poly { terms } => {
            let qp = ctx.poly(&terms)?;
            let f = |x: &[f64], t: f64| {
                let mut p = x.to_vec();
                p.push(0.0);
                qp.eval(&p, t)
            };
            (PotentialField::from_fn(&spec, &f).map_err(numeric)?, !qp.is_empty())
        }
    };
    let raw = match &g.initial {
        InitialConfig::SinCos => {
            let ymax = spec.y_max;
            let init = move |x: &[f64], y: f64| {
                (std::f64::consts::PI * x[0] / 2.0).sin() * (std::f64::consts::PI * y / (2.0 * ymax)).cos()
            };
            let data = CylinderData {
                initial: &init,
                boundary: None,
            };
            solver::solve_extension(&data, &q, &spec).map_err(numeric)?
        }
        InitialConfig::Poly { terms } => {
            let w = ctx.poly(terms)?;
            let t0 = spec.t_start;
            let init = |x: &[f64], y: f64| {
                let mut p = x[..n].to_vec();
                p.push(y);
                w.eval(&p, t0)
            };
            let bdry = |x: &[f64], y: f64, t: f64| {
                let mut p = x[..n].to_vec();
                p.push(y);
                w.eval(&p, t)
            };
            let data = CylinderData {
                initial: &init,
                boundary: Some(&bdry),
            };
            solver::solve_extension(&data, &q, &spec).map_err(numeric)?
        }
    };
    Ok(Solved { raw, q, q_present })
}

fn solve(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let s = run_solver(ctx)?;
    let mut bin = Vec::new();
    solver::write_binary(&s.raw, &mut bin).map_err(numeric)?;
    let cfg = serde_json::to_value(&ctx.cfg).map_err(numeric)?;
    let side = solver::Sidecar::for_field(&s.raw, cfg);
    let mut js = serde_json::to_string_pretty(&side).map_err(numeric)?;
    js.push('\n');
    Ok(vec![
        ctx.write("solution.bin", &bin)?,
        ctx.write("solution.json", js.as_bytes())?,
    ])
}

/// The analyzed field: a polynomial from the config or a fixture, or a cut-off solver run.
fn field_handle(ctx: &Ctx, p0: &TracePoint) -> Result<FieldHandle> {
    let family = ctx.family();
    let wrap = |w: GenPoly| Ok(blowup::poly_handle(&w, p0, family));
    match ctx.cfg.field.clone().unwrap_or(FieldConfig::Fixture { name: "theta20".into() }) {
        FieldConfig::Poly { terms } => wrap(ctx.poly(&terms)?),
        FieldConfig::Fixture { name } => wrap(fixture(&name, ctx.params.dim_n, ctx.params.a)?.0),
        FieldConfig::Grid => {
            let s = run_solver(ctx)?;
            let cut = ctx
                .cfg
                .grid
                .as_ref()
                .and_then(|g| g.cutoff.clone())
                .unwrap_or_else(|| CutoffSpec::unit(ctx.params.dim_n));
            let q = s.q_present.then(|| Arc::new(s.q));
            let (w, f) = solver::apply_cutoff(&s.raw, q.as_deref(), &cut).map_err(numeric)?;
            let view = GridView::new(Arc::new(w), Arc::new(f), q, p0.clone()).map_err(numeric)?;
            Ok(FieldHandle::Grid(view))
        }
    }
}

fn ladder_for(ctx: &Ctx, w: &FieldHandle) -> Vec<f64> {
    ctx.cfg
        .analysis
        .radii
        .clone()
        .unwrap_or_else(|| frequency::default_ladder(w))
}

fn profile_params(ctx: &Ctx) -> ProfileParams {
    ProfileParams {
        sigma: ctx.cfg.analysis.sigma.unwrap_or(1.0),
        c: ctx.cfg.analysis.c,
        ..ProfileParams::default()
    }
}

fn frequency_cmd(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let p0 = ctx.p0();
    let w = field_handle(ctx, &p0)?;
    let rule = ctx.rule(ctx.family())?;
    let radii = ladder_for(ctx, &w);
    let prof = frequency::profile(&w, &radii, &profile_params(ctx), &rule).map_err(numeric)?;
    let cfg = serde_json::to_value(&ctx.cfg).map_err(numeric)?;
    let csv = prof.to_csv(&cfg);
    println!("C = {} monotone = {} N_I(0+) ~ {}", prof.c, prof.monotone, prof.phi_limit());
    Ok(vec![ctx.write("frequency.csv", csv.as_bytes())?])
}

fn points(ctx: &Ctx) -> Vec<TracePoint> {
    match (&ctx.cfg.analysis.points, &ctx.cfg.analysis.p0) {
        (Some(list), _) => list.clone(),
        (None, Some(p)) => vec![p.clone()],
        (None, None) => vec![TracePoint::origin(ctx.params.dim_n)],
    }
}

fn blowup_cmd(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let family = ctx.family();
    let rule = ctx.rule(family)?;
    let opts = TangentOptions {
        family,
        profile: profile_params(ctx),
        ..TangentOptions::default()
    };
    let mut results = Vec::new();
    let mut failed = 0;
    for p0 in points(ctx) {
        let w = field_handle(ctx, &p0)?;
        let radii = ladder_for(ctx, &w);
        let entry = match blowup::tangent_map(&w, &radii, &rule, &opts) {
            Ok(tm) => {
                let mut e = json!({"point": p0, "tangent": tm});
                if let FieldHandle::Poly(pf) = &w {
                    let theta = tm.polynomial(&rule.moment_table().map_err(numeric)?).map_err(numeric)?;
                    e["homogeneity_residual"] =
                        json!(blowup::homogeneity_residual(&theta, tm.kappa, &blowup::sample_box(ctx.params.dim_n, 5)));
                    e["spatial_dimension"] = json!(blowup::spatial_dimension(&theta, tm.kappa).ok());
                    // classify when the trace vanishes at p0
                    if let Ok(u) = pf.w.trace() {
                        let u = u.translate(&p0.x.iter().map(|v| -v).collect::<Vec<_>>(), -p0.t);
                        let sup = lattice_sup(&u, &ScanLattice::unit(ctx.params.dim_n));
                        if let Ok(r) = blowup::classify_nodal_point(&u, &p0, sup, &radii, &rule) {
                            e["class"] = json!(r.class);
                            e["gradient_consistent"] = json!(r.gradient_consistent);
                        }
                    }
                }
                e
            }
            Err(err) => {
                failed += 1;
                json!({"point": p0, "error": err.to_string()})
            }
        };
        results.push(entry);
    }
    let body = ctx.envelope(&results)?;
    let path = ctx.write("blowup.json", body.as_bytes())?;
    if failed > 0 {
        return Err(CliError::Numeric(format!(
            "{failed} point(s) failed; details in {}",
            path.display()
        )));
    }
    Ok(vec![path])
}

fn lattice_sup(u: &GenPoly, lattice: &ScanLattice) -> f64 {
    let n = u.dim_n;
    let total: usize = lattice.counts.iter().product();
    let mut sup: f64 = 0.0;
    for mut flat in 0..total {
        let mut pos = vec![0.0; n + 2];
        for k in (0..=n).rev() {
            let c = lattice.counts[k];
            let i = flat % c;
            flat /= c;
            let frac = if c > 1 { i as f64 / (c - 1) as f64 } else { 0.0 };
            pos[k] = lattice.lo[k] + (lattice.hi[k] - lattice.lo[k]) * frac;
        }
        let t = pos[n];
        pos[n] = 0.0;
        sup = sup.max(u.eval(&pos[..=n], t).abs());
    }
    sup
}

fn nodal_scan(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let n = ctx.params.dim_n;
    let u = match &ctx.cfg.trace {
        Some(terms) => ctx.poly(terms)?,
        None => trace_fixture("x2-2t", n, ctx.params.a)?,
    };
    let lattice = ctx.cfg.analysis.lattice.clone().unwrap_or_else(|| ScanLattice::unit(n));
    let radii = ctx.cfg.analysis.radii.clone().unwrap_or_else(blowup::poly_ladder);
    let rule = ctx.rule(Family::Neumann)?;
    let entries = blowup::nodal_scan(&u, &lattice, &radii, &rule).map_err(|e| match e {
        blowup::BlowupError::Shape(m) => CliError::Config(m),
        other => numeric(other),
    })?;
    let failed = entries.iter().filter(|e| e.report.is_err()).count();
    for e in &entries {
        match &e.report {
            Ok(r) => println!("{:?} {:?}", e.point, r.class),
            Err(m) => println!("{:?} error: {m}", e.point),
        }
    }
    let body = ctx.envelope(&entries)?;
    let path = ctx.write("nodal-scan.json", body.as_bytes())?;
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} point(s) failed; details in {}", path.display())));
    }
    Ok(vec![path])
}

/// Read a field written by `solve`.
pub fn read_field(path: &Path) -> Result<solver::GridField> {
    let f = fs::File::open(path)?;
    solver::read_binary(std::io::BufReader::new(f)).map_err(numeric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("fracheat").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn bad_exponent_is_a_config_error() {
        let cli = parse(&["spectrum", "--a", "1.5"]);
        let e = run(&cli).unwrap_err();
        assert_eq!(e.exit_code(), 2);
        assert!(e.to_string().contains("a must lie in (-1,1)"));
    }

    #[test]
    fn s_and_a_are_exclusive() {
        let cfg: Config = serde_json::from_str(r#"{"params": {"a": 0.2, "s": 0.4}}"#).unwrap();
        assert!(matches!(resolve(cfg, &Flags::default()), Err(CliError::Config(_))));
        let cfg: Config = serde_json::from_str(r#"{"params": {"s": 0.25}}"#).unwrap();
        let r = resolve(cfg, &Flags::default()).unwrap();
        assert_eq!(r.params.a, Some(0.5));
    }

    #[test]
    fn fixtures_match_closed_forms() {
        let a = 0.3;
        let (t20, k) = fixture("theta20", 1, a).unwrap();
        assert_eq!(k, 1.0);
        let x = GenPoly::x(1, a, 0);
        let t = GenPoly::t(1, a);
        assert!(t20.sub(&x.mul(&x).sub(&t.scale(2.0))).pruned(1e-14).is_empty());
        for (name, _, _) in FIXTURES {
            let (p, k) = fixture(name, 1, a).unwrap();
            assert!(p.z_operator().sub(&p.scale(2.0 * k)).pruned(1e-12).is_empty(), "{name}");
        }
    }

    #[test]
    fn negative_point_flag() {
        let cli = parse(&["frequency", "--p0", "-0.5,0.25"]);
        let cfg = resolve(Config::default(), &cli.flags).unwrap();
        assert_eq!(cfg.analysis.p0, Some(TracePoint { x: vec![-0.5], t: 0.25 }));
    }
}
