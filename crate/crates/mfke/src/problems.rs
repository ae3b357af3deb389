//! Problem definitions: the coefficient triple `(sigma, b, Lambda)`, the
//! initial or terminal law, and how the coefficients couple to the measure.
//!
//! A problem describes the equation
//!
//! ```text
//!     d/dt u = 1/2 dxx(sigma^2 u) - dx(b u) + Lambda u
//! ```
//!
//! where each coefficient may read the current solution value `u(t, x)`
//! (pointwise coupling through a mollified estimate), a convolution
//! `(K * u)(x)`, or nothing at all (linear problems). `Lambda` may also read
//! the gradient `du(t, x)`.
//!
//! `Lambda` values are capped at a configurable bound before they enter the
//! weights; the engine counts every clipped evaluation and reports it, so a
//! run that leans on the cap is visible in the diagnostics rather than
//! silently wrong.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

use crate::rng::{tag, Substream};
use crate::stats;

#[derive(Debug, Error)]
pub enum ProblemsError {
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("problem `{problem}` does not accept parameter `{key}`")]
    UnknownParam { problem: String, key: String },
    #[error("parameter `{key}`: {reason}")]
    BadParam { key: String, reason: String },
    #[error("conflicting parameters: {0}")]
    ConflictingParams(String),
    #[error("sampler: {0}")]
    BadSampler(String),
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
}

pub type Result<T> = std::result::Result<T, ProblemsError>;

/// Diffusion coefficient `sigma(t, x, v)`; `v` is the interaction value
/// (solution estimate or convolution), zero for uncoupled problems.
pub type SigmaFn = Arc<dyn Fn(f64, &[f64], f64) -> f64 + Send + Sync>;
/// Drift `b(t, x, v)`, written into `out` (one entry per dimension).
pub type DriftFn = Arc<dyn Fn(f64, &[f64], f64, &mut [f64]) + Send + Sync>;
/// Zero-order coefficient `Lambda(t, x, u, du)`.
pub type LambdaFn = Arc<dyn Fn(f64, &[f64], f64, &[f64]) -> f64 + Send + Sync>;
/// Interaction kernel `K(x)` for convolution coupling.
pub type ConvKernelFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
/// Space derivative of `sigma^2` at `(t, x)`, for time reversal.
pub type DSigma2Fn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// How the coefficients read the current measure.
#[derive(Clone)]
pub enum Interaction {
    /// Coefficients ignore the measure (linear problems).
    None,
    /// Coefficients see the mollified density at the particle's position.
    Pointwise,
    /// Coefficients see `(K * u)(x)`. `radius` bounds the support of `K`
    /// (evaluations beyond it are treated as zero).
    Convolution { kernel: ConvKernelFn, radius: f64 },
}

impl fmt::Debug for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interaction::None => write!(f, "None"),
            Interaction::Pointwise => write!(f, "Pointwise"),
            Interaction::Convolution { radius, .. } => {
                write!(f, "Convolution {{ radius: {radius} }}")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Samplers
// ---------------------------------------------------------------------------

/// A sampleable law for initial or terminal conditions.
///
/// Sampling is driven by the counter-based streams, so a law draws the same
/// particle positions for a given seed regardless of evaluation order.
#[derive(Clone, Debug)]
pub enum Sampler {
    /// Point mass.
    Dirac(Vec<f64>),
    /// Isotropic Gaussian (iid coordinates).
    Gaussian { mean: f64, sd: f64 },
    /// Uniform on a box (iid coordinates).
    Uniform { lo: f64, hi: f64 },
    /// One-dimensional law tabulated on a grid (piecewise-linear density).
    GridDensity(GridLaw),
}

impl Sampler {
    pub fn gaussian(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !sd.is_finite() || !mean.is_finite() {
            return Err(ProblemsError::BadSampler(format!(
                "gaussian requires finite mean and sd > 0, got mean {mean}, sd {sd}"
            )));
        }
        Ok(Sampler::Gaussian { mean, sd })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(ProblemsError::BadSampler(format!(
                "uniform requires lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(Sampler::Uniform { lo, hi })
    }

    pub fn dirac(point: Vec<f64>) -> Result<Self> {
        if point.is_empty() || point.iter().any(|x| !x.is_finite()) {
            return Err(ProblemsError::BadSampler("dirac point must be finite".into()));
        }
        Ok(Sampler::Dirac(point))
    }

    pub fn grid_density(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        Ok(Sampler::GridDensity(GridLaw::new(grid, values)?))
    }

    /// Whether this law can produce `dim`-dimensional samples.
    pub fn supports_dim(&self, dim: usize) -> bool {
        match self {
            Sampler::Dirac(p) => p.len() == dim,
            Sampler::Gaussian { .. } | Sampler::Uniform { .. } => true,
            Sampler::GridDensity(_) => dim == 1,
        }
    }

    /// Draws the position of particle `index` into `out`.
    pub fn sample_into(&self, seed: u64, index: u64, out: &mut [f64]) {
        let stream = Substream::new(seed, tag::INIT, index);
        match self {
            Sampler::Dirac(p) => out.copy_from_slice(p),
            Sampler::Gaussian { mean, sd } => {
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot = mean + sd * stream.normal(0, c as u64);
                }
            }
            Sampler::Uniform { lo, hi } => {
                for (c, slot) in out.iter_mut().enumerate() {
                    *slot = lo + (hi - lo) * stream.uniform(0, c as u64);
                }
            }
            Sampler::GridDensity(law) => {
                out[0] = law.quantile(stream.uniform(0, 0));
            }
        }
    }

    /// Density at a scalar point, when the law has one (1-d laws only).
    pub fn density(&self, x: f64) -> Option<f64> {
        match self {
            Sampler::Dirac(_) => None,
            Sampler::Gaussian { mean, sd } => Some(stats::gaussian_pdf(x, *mean, *sd)),
            Sampler::Uniform { lo, hi } => {
                Some(if x >= *lo && x <= *hi { 1.0 / (hi - lo) } else { 0.0 })
            }
            Sampler::GridDensity(law) => Some(law.pdf(x)),
        }
    }

    /// Distribution function at a scalar point, when the law has one.
    pub fn cdf(&self, x: f64) -> Option<f64> {
        match self {
            Sampler::Dirac(_) => None,
            Sampler::Gaussian { mean, sd } => Some(stats::normal_cdf((x - mean) / sd)),
            Sampler::Uniform { lo, hi } => {
                Some(((x - lo) / (hi - lo)).clamp(0.0, 1.0))
            }
            Sampler::GridDensity(law) => Some(law.cdf(x)),
        }
    }
}

/// Piecewise-linear density tabulated on a strictly increasing grid,
/// renormalized to unit mass on load. Sampling inverts the piecewise
/// quadratic distribution function cell by cell.
#[derive(Clone, Debug)]
pub struct GridLaw {
    grid: Vec<f64>,
    pdf: Vec<f64>,
    cdf: Vec<f64>,
}

/// Tabulated laws are renormalized on load; a total mass farther than this
/// from one is reported by `validate` rather than silently absorbed.
pub const GRID_LAW_MASS_TOL: f64 = 1e-8;

impl GridLaw {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() < 2 || grid.len() != values.len() {
            return Err(ProblemsError::BadSampler(
                "grid law needs matching grid/value arrays with at least 2 nodes".into(),
            ));
        }
        for i in 1..grid.len() {
            if !(grid[i] > grid[i - 1]) {
                return Err(ProblemsError::BadSampler(format!(
                    "grid not strictly increasing at index {i}"
                )));
            }
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ProblemsError::BadSampler("density values must be finite and >= 0".into()));
        }
        let total = crate::quad::trapezoid(&grid, &values);
        if !(total > 0.0) {
            return Err(ProblemsError::BadSampler("density integrates to zero".into()));
        }
        let pdf: Vec<f64> = values.iter().map(|v| v / total).collect();
        let mut cdf = vec![0.0; grid.len()];
        for i in 1..grid.len() {
            cdf[i] = cdf[i - 1] + 0.5 * (pdf[i] + pdf[i - 1]) * (grid[i] - grid[i - 1]);
        }
        // Pin the endpoint so quantile(1) is well defined.
        let last = cdf.len() - 1;
        cdf[last] = 1.0;
        Ok(GridLaw { grid, pdf, cdf })
    }

    /// Total mass of the raw values before renormalization, for diagnostics.
    pub fn raw_mass(grid: &[f64], values: &[f64]) -> f64 {
        crate::quad::trapezoid(grid, values)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x <= self.grid[0] || x >= self.grid[n - 1] {
            return 0.0;
        }
        let i = self.grid.partition_point(|&g| g <= x) - 1;
        let w = (x - self.grid[i]) / (self.grid[i + 1] - self.grid[i]);
        self.pdf[i] * (1.0 - w) + self.pdf[i + 1] * w
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let n = self.grid.len();
        if x <= self.grid[0] {
            return 0.0;
        }
        if x >= self.grid[n - 1] {
            return 1.0;
        }
        let i = self.grid.partition_point(|&g| g <= x) - 1;
        let dx = x - self.grid[i];
        let slope = (self.pdf[i + 1] - self.pdf[i]) / (self.grid[i + 1] - self.grid[i]);
        self.cdf[i] + self.pdf[i] * dx + 0.5 * slope * dx * dx
    }

    /// Inverse distribution function; `u` in [0, 1).
    pub fn quantile(&self, u: f64) -> f64 {
        let i = match self.cdf.partition_point(|&c| c <= u) {
            0 => 0,
            k if k >= self.cdf.len() => self.cdf.len() - 2,
            k => k - 1,
        };
        let target = u - self.cdf[i];
        let h = self.grid[i + 1] - self.grid[i];
        let p = self.pdf[i];
        let slope = (self.pdf[i + 1] - p) / h;
        // Solve p s + slope s^2 / 2 = target on [0, h].
        let s = if slope.abs() < 1e-14 * p.abs().max(1e-300) {
            if p > 0.0 {
                target / p
            } else {
                0.5 * h
            }
        } else {
            let disc = (p * p + 2.0 * slope * target).max(0.0);
            (disc.sqrt() - p) / slope
        };
        self.grid[i] + s.clamp(0.0, h)
    }
}

// ---------------------------------------------------------------------------
// Problem specification
// ---------------------------------------------------------------------------

/// Complete description of one equation instance.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dim: usize,
    horizon: f64,
    sigma: SigmaFn,
    dsigma2_dx: Option<DSigma2Fn>,
    drift: Option<DriftFn>,
    lambda: Option<LambdaFn>,
    lambda_max: Option<f64>,
    pub interaction: Interaction,
    pub initial_law: Option<Sampler>,
    pub terminal_law: Option<Sampler>,
    lambda_uses_value: bool,
    lambda_uses_gradient: bool,
}

impl fmt::Debug for ProblemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProblemSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("interaction", &self.interaction)
            .field("lambda_cap", &self.lambda_cap())
            .finish()
    }
}

/// Default bound on `|Lambda|` as a multiple of the inverse horizon: a
/// single weight cannot change by more than `e^50` over the run, which keeps
/// `exp` overflow structurally impossible while leaving bona fide bounded
/// integrands untouched.
pub const LAMBDA_CAP_HORIZONS: f64 = 50.0;

impl ProblemSpec {
    pub fn new(name: impl Into<String>, dim: usize, horizon: f64, sigma: SigmaFn) -> Result<Self> {
        if dim == 0 {
            return Err(ProblemsError::ZeroDimension);
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ProblemsError::BadHorizon(horizon));
        }
        Ok(ProblemSpec {
            name: name.into(),
            dim,
            horizon,
            sigma,
            dsigma2_dx: None,
            drift: None,
            lambda: None,
            lambda_max: None,
            interaction: Interaction::None,
            initial_law: Some(Sampler::Gaussian { mean: 0.0, sd: 1.0 }),
            terminal_law: None,
            lambda_uses_value: false,
            lambda_uses_gradient: false,
        })
    }

    pub fn with_drift(mut self, drift: DriftFn) -> Self {
        self.drift = Some(drift);
        self
    }

    pub fn with_lambda(mut self, lambda: LambdaFn, uses_value: bool, uses_gradient: bool) -> Self {
        self.lambda = Some(lambda);
        self.lambda_uses_value = uses_value;
        self.lambda_uses_gradient = uses_gradient;
        self
    }

    pub fn with_interaction(mut self, interaction: Interaction) -> Self {
        self.interaction = interaction;
        self
    }

    pub fn with_initial_law(mut self, law: Sampler) -> Self {
        self.initial_law = Some(law);
        self
    }

    pub fn with_terminal_law(mut self, law: Sampler) -> Self {
        self.terminal_law = Some(law);
        self
    }

    pub fn without_initial_law(mut self) -> Self {
        self.initial_law = None;
        self
    }

    pub fn with_lambda_max(mut self, cap: f64) -> Self {
        self.lambda_max = Some(cap);
        self
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(ProblemsError::BadHorizon(horizon));
        }
        self.horizon = horizon;
        Ok(self)
    }

    pub fn with_dsigma2_dx(mut self, d: DSigma2Fn) -> Self {
        self.dsigma2_dx = Some(d);
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Active bound on `|Lambda|`; explicit override or the default
    /// `50 / horizon`.
    pub fn lambda_cap(&self) -> f64 {
        self.lambda_max.unwrap_or(LAMBDA_CAP_HORIZONS / self.horizon)
    }

    #[inline]
    pub fn sigma(&self, t: f64, x: &[f64], v: f64) -> f64 {
        (self.sigma)(t, x, v)
    }

    #[inline]
    pub fn drift_into(&self, t: f64, x: &[f64], v: f64, out: &mut [f64]) {
        match &self.drift {
            Some(b) => b(t, x, v, out),
            None => out.fill(0.0),
        }
    }

    pub fn has_drift(&self) -> bool {
        self.drift.is_some()
    }

    pub fn has_lambda(&self) -> bool {
        self.lambda.is_some()
    }

    /// Raw (uncapped) integrand value; zero when the problem has none.
    #[inline]
    pub fn lambda(&self, t: f64, x: &[f64], u: f64, grad: &[f64]) -> f64 {
        match &self.lambda {
            Some(l) => l(t, x, u, grad),
            None => 0.0,
        }
    }

    pub fn lambda_uses_value(&self) -> bool {
        self.lambda_uses_value
    }

    pub fn lambda_uses_gradient(&self) -> bool {
        self.lambda_uses_gradient
    }

    /// Space derivative of `sigma^2` at `(t, x)` (1-d), zero by default.
    pub fn dsigma2_dx(&self, t: f64, x: f64) -> f64 {
        match &self.dsigma2_dx {
            Some(d) => d(t, x),
            None => 0.0,
        }
    }

    /// Whether the per-step loop needs a density estimate at particle
    /// positions.
    pub fn needs_density(&self) -> bool {
        matches!(self.interaction, Interaction::Pointwise)
            || self.lambda_uses_value
            || self.lambda_uses_gradient
    }

    pub fn needs_gradient(&self) -> bool {
        self.lambda_uses_gradient
    }
}

// ---------------------------------------------------------------------------
// Built-in problems
// ---------------------------------------------------------------------------

struct Params<'a> {
    problem: &'a str,
    map: &'a BTreeMap<String, f64>,
    allowed: &'a [&'a str],
}

impl<'a> Params<'a> {
    fn new(problem: &'a str, map: &'a BTreeMap<String, f64>, allowed: &'a [&'a str]) -> Result<Self> {
        for key in map.keys() {
            if !allowed.contains(&key.as_str()) {
                return Err(ProblemsError::UnknownParam {
                    problem: problem.into(),
                    key: key.clone(),
                });
            }
        }
        Ok(Params { problem: problem.into(), map, allowed })
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        debug_assert!(self.allowed.contains(&key), "{}: {key} not declared", self.problem);
        self.map.get(key).copied().unwrap_or(default)
    }

    fn opt(&self, key: &str) -> Option<f64> {
        self.map.get(key).copied()
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64> {
        let v = self.get(key, default);
        if !(v > 0.0) || !v.is_finite() {
            return Err(ProblemsError::BadParam {
                key: key.into(),
                reason: format!("must be positive and finite, got {v}"),
            });
        }
        Ok(v)
    }
}

fn with_common(spec: ProblemSpec, p: &Params) -> Result<ProblemSpec> {
    let mut spec = match p.opt("horizon") {
        Some(t) => spec.with_horizon(t)?,
        None => spec,
    };
    if let Some(cap) = p.opt("lambda_max") {
        if !(cap > 0.0) {
            return Err(ProblemsError::BadParam {
                key: "lambda_max".into(),
                reason: format!("must be positive, got {cap}"),
            });
        }
        spec = spec.with_lambda_max(cap);
    }
    Ok(spec)
}

/// Smoothed Heaviside used by the criticality problem.
pub fn smoothed_heaviside(r: f64, delta: f64) -> f64 {
    0.5 * (1.0 + (r / delta).tanh())
}

/// Constructs a problem from the built-in library.
///
/// Available names: `linear_fp`, `burgers_flux`, `burgers_fk`,
/// `burgers_huxley`, `porous_media`, `soc_heaviside`, `inventory_kpz`,
/// `terminal_fp`. Unknown names and unknown parameter keys are rejected.
pub fn builtin_problem(name: &str, params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    match name {
        "linear_fp" => linear_fp(params),
        "burgers_flux" => burgers_flux(params),
        "burgers_fk" => burgers_fk(params),
        "burgers_huxley" => burgers_huxley(params),
        "porous_media" => porous_media(params),
        "soc_heaviside" => soc_heaviside(params),
        "inventory_kpz" => inventory_kpz(params),
        "terminal_fp" => terminal_fp(params),
        other => Err(ProblemsError::UnknownProblem(other.into())),
    }
}

/// Constant coefficients; `Lambda` optionally constant, linear in time, or
/// the quadratic sink `-c x^2`. At most one of the three shapes.
fn linear_fp(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys =
        ["sigma", "b", "lambda_const", "lambda_t_coeff", "lambda_x2_coeff", "horizon", "lambda_max"];
    let p = Params::new("linear_fp", params, &keys)?;
    let sigma = p.positive("sigma", 1.0)?;
    let b = p.get("b", 0.0);
    let mut spec = ProblemSpec::new("linear_fp", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| sigma)
    })?;
    if b != 0.0 {
        spec = spec.with_drift(Arc::new(move |_t, _x, _v, out| out.fill(b)));
    }
    let shapes = [
        p.opt("lambda_const").is_some(),
        p.opt("lambda_t_coeff").is_some(),
        p.opt("lambda_x2_coeff").is_some(),
    ];
    if shapes.iter().filter(|&&s| s).count() > 1 {
        return Err(ProblemsError::ConflictingParams(
            "at most one of lambda_const, lambda_t_coeff, lambda_x2_coeff".into(),
        ));
    }
    if let Some(c) = p.opt("lambda_const") {
        spec = spec.with_lambda(Arc::new(move |_t, _x, _u, _g| c), false, false);
    } else if let Some(a) = p.opt("lambda_t_coeff") {
        spec = spec.with_lambda(Arc::new(move |t, _x, _u, _g| a * t), false, false);
    } else if let Some(c) = p.opt("lambda_x2_coeff") {
        if !(c > 0.0) {
            return Err(ProblemsError::BadParam {
                key: "lambda_x2_coeff".into(),
                reason: format!("must be positive, got {c}"),
            });
        }
        spec = spec.with_lambda(
            Arc::new(move |_t, x, _u, _g| {
                let r2: f64 = x.iter().map(|c| c * c).sum();
                -c * r2
            }),
            false,
            false,
        );
    }
    with_common(spec, &p)
}

/// Viscous conservation law written through its flux: `b(u) = u / 2`.
fn burgers_flux(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["nu", "horizon", "lambda_max"];
    let p = Params::new("burgers_flux", params, &keys)?;
    let nu = p.positive("nu", 1.0)?;
    let spec = ProblemSpec::new("burgers_flux", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| nu)
    })?
    .with_drift(Arc::new(|_t, _x, v, out| out[0] = 0.5 * v))
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// The same conservation law written through the zero-order term:
/// `Lambda = -du`. The sign makes the weighted representation solve
/// `d/dt u = (nu^2/2) dxx u - u dx u`, matching the flux form above.
fn burgers_fk(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["nu", "horizon", "lambda_max"];
    let p = Params::new("burgers_fk", params, &keys)?;
    let nu = p.positive("nu", 1.0)?;
    let spec = ProblemSpec::new("burgers_fk", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| nu)
    })?
    .with_lambda(Arc::new(|_t, _x, _u, g| -g[0]), false, true)
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// Reaction equation with both a nonlinear flux and a KPP-type source.
fn burgers_huxley(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["nu", "alpha", "beta", "gamma", "n", "horizon", "lambda_max"];
    let p = Params::new("burgers_huxley", params, &keys)?;
    let nu = p.positive("nu", 1.0)?;
    let alpha = p.get("alpha", 1.0);
    let beta = p.get("beta", 1.0);
    let gamma = p.get("gamma", 0.5);
    let n = p.positive("n", 1.0)?;
    let spec = ProblemSpec::new("burgers_huxley", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| nu)
    })?
    .with_drift(Arc::new(move |_t, _x, v, out| {
        out[0] = alpha * v.max(0.0).powf(n) / (n + 1.0);
    }))
    .with_lambda(
        Arc::new(move |_t, _x, u, _g| {
            let un = u.max(0.0).powf(n);
            beta * (1.0 - un) * (un - gamma)
        }),
        true,
        false,
    )
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// Degenerate diffusion `sigma(u) = u^q`, `q > 0`.
fn porous_media(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["q", "horizon", "lambda_max"];
    let p = Params::new("porous_media", params, &keys)?;
    let q = p.get("q", 2.0);
    if !(q > 0.0) || !q.is_finite() {
        return Err(ProblemsError::BadParam {
            key: "q".into(),
            reason: format!("must be positive, got {q}"),
        });
    }
    let spec = ProblemSpec::new("porous_media", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, v| v.max(0.0).powf(q))
    })?
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// Criticality-type diffusion switched on above the threshold `e_c`. The
/// Heaviside factor is smoothed with width `delta`; `validate` reports the
/// near-discontinuity.
fn soc_heaviside(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["gamma", "e_c", "delta", "horizon", "lambda_max"];
    let p = Params::new("soc_heaviside", params, &keys)?;
    let gamma = p.positive("gamma", 1.0)?;
    let e_c = p.get("e_c", 0.5);
    let delta = p.positive("delta", 1e-2)?;
    let spec = ProblemSpec::new("soc_heaviside", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, v| gamma * smoothed_heaviside(v - e_c, delta))
    })?
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// Value floor inside the control-problem integrand: divisions by the
/// solution estimate are floored here.
pub const KPZ_VALUE_FLOOR: f64 = 1e-6;

/// Stochastic-control toy problem: constant volatility, deterministic
/// reference drift `D`, running cost `h(x) = h0 + h1 x + h2 x^2`, integrand
/// `|z|^2 / (4y) - h(x) / y` with the value floored at `1e-6`.
fn inventory_kpz(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["sigma", "d_const", "h0", "h1", "h2", "horizon", "lambda_max"];
    let p = Params::new("inventory_kpz", params, &keys)?;
    let sigma = p.positive("sigma", 1.0)?;
    let d_const = p.get("d_const", 0.0);
    let (h0, h1, h2) = (p.get("h0", 0.0), p.get("h1", 0.0), p.get("h2", 0.0));
    let spec = ProblemSpec::new("inventory_kpz", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| sigma)
    })?
    .with_drift(Arc::new(move |_t, _x, _v, out| out[0] = -d_const))
    .with_lambda(
        Arc::new(move |_t, x, u, g| {
            let y = u.max(KPZ_VALUE_FLOOR);
            let z = g[0];
            let h = h0 + h1 * x[0] + h2 * x[0] * x[0];
            z * z / (4.0 * y) - h / y
        }),
        true,
        true,
    )
    .with_interaction(Interaction::Pointwise);
    with_common(spec, &p)
}

/// Linear problem posed from its terminal law (time-reversal input):
/// `b(x) = b_const - b_lin x`, constant `sigma`.
fn terminal_fp(params: &BTreeMap<String, f64>) -> Result<ProblemSpec> {
    let keys = ["sigma", "b_lin", "b_const", "horizon", "lambda_max"];
    let p = Params::new("terminal_fp", params, &keys)?;
    let sigma = p.positive("sigma", 1.0)?;
    let b_lin = p.get("b_lin", 1.0);
    let b_const = p.get("b_const", 0.0);
    let spec = ProblemSpec::new("terminal_fp", 1, p.get("horizon", 1.0), {
        Arc::new(move |_t, _x, _v| sigma)
    })?
    .with_drift(Arc::new(move |_t, x, _v, out| out[0] = b_const - b_lin * x[0]))
    .without_initial_law()
    .with_terminal_law(Sampler::Gaussian { mean: 0.0, sd: 1.0 });
    with_common(spec, &p)
}

// ---------------------------------------------------------------------------
// Validation probes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Severity {
    Note,
    Warning,
}

#[derive(Clone, Debug)]
pub struct Diagnostic {
    pub severity: Severity,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Note => "note",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

/// Numeric sanity probes over a sample box of `(t, x, u, du)` values.
///
/// These are advisory: a problem that trips a probe still runs, but the
/// run's operator sees what the scheme is up against (near-discontinuous
/// diffusion, integrands relying on the cap, degenerate diffusion at small
/// densities).
pub fn validate(spec: &ProblemSpec) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let x0 = vec![0.0; spec.dim];
    let cap = spec.lambda_cap();

    // Steepness of sigma in the solution value over a density-scale range.
    let mut max_slope = 0.0_f64;
    let mut min_sigma = f64::INFINITY;
    let h = 1e-4;
    let mut u = 0.0;
    while u <= 2.0 {
        let s0 = spec.sigma(0.0, &x0, u);
        let s1 = spec.sigma(0.0, &x0, u + h);
        if s0.is_finite() && s1.is_finite() {
            max_slope = max_slope.max(((s1 - s0) / h).abs());
            min_sigma = min_sigma.min(s0);
        }
        u += 1e-3;
    }
    if max_slope > 20.0 {
        out.push(Diagnostic {
            severity: Severity::Warning,
            message: "discontinuous \u{3c3}: smoothing applied".into(),
        });
    }
    if min_sigma <= 0.0 {
        out.push(Diagnostic {
            severity: Severity::Warning,
            message: format!(
                "degenerate diffusion: \u{3c3} reaches {min_sigma:.3e} on the probe box"
            ),
        });
    }

    if spec.has_lambda() {
        // Growth of Lambda in the gradient argument.
        if spec.lambda_uses_gradient() {
            let mut g = vec![0.0; spec.dim];
            g[0] = 1e3;
            let big = spec.lambda(0.0, &x0, 1.0, &g).abs();
            if big > cap {
                out.push(Diagnostic {
                    severity: Severity::Note,
                    message: format!(
                        "\u{39b} unbounded in \u{2207}u: clipping at \u{39b}_max active (cap {cap:.3})"
                    ),
                });
            }
        }
        // Growth of Lambda at small solution values.
        if spec.lambda_uses_value() {
            let g = vec![0.0; spec.dim];
            let mut x1 = vec![0.0; spec.dim];
            x1[0] = 1.0;
            let near_zero = spec.lambda(0.0, &x1, 1e-9, &g).abs();
            let at_one = spec.lambda(0.0, &x1, 1.0, &g).abs();
            if near_zero > 100.0 * at_one.max(1.0) && near_zero > cap {
                out.push(Diagnostic {
                    severity: Severity::Note,
                    message: "\u{39b} grows at small u: value floor and cap active".into(),
                });
            }
        }
        // Space growth beyond the cap.
        let g = vec![0.0; spec.dim];
        let mut far = vec![0.0; spec.dim];
        far[0] = 10.0;
        if spec.lambda(0.0, &far, 1.0, &g).abs() > cap {
            out.push(Diagnostic {
                severity: Severity::Note,
                message: format!(
                    "\u{39b} exceeds the cap on the probe box: clipping at \u{39b}_max active (cap {cap:.3})"
                ),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn all_builtins_construct_with_defaults() {
        for name in [
            "linear_fp",
            "burgers_flux",
            "burgers_fk",
            "burgers_huxley",
            "porous_media",
            "soc_heaviside",
            "inventory_kpz",
            "terminal_fp",
        ] {
            let spec = builtin_problem(name, &BTreeMap::new()).unwrap();
            assert_eq!(spec.name, name);
            assert!(spec.initial_law.is_some() || spec.terminal_law.is_some());
        }
    }

    #[test]
    fn unknown_problem_and_param_are_rejected() {
        assert!(matches!(
            builtin_problem("heat_eq", &BTreeMap::new()),
            Err(ProblemsError::UnknownProblem(_))
        ));
        assert!(matches!(
            builtin_problem("linear_fp", &params(&[("nu", 1.0)])),
            Err(ProblemsError::UnknownParam { .. })
        ));
    }

    #[test]
    fn out_of_range_parameters_are_rejected() {
        assert!(builtin_problem("porous_media", &params(&[("q", 0.0)])).is_err());
        assert!(builtin_problem("porous_media", &params(&[("q", -1.0)])).is_err());
        assert!(builtin_problem("burgers_flux", &params(&[("nu", -0.5)])).is_err());
        assert!(builtin_problem("soc_heaviside", &params(&[("delta", 0.0)])).is_err());
    }

    #[test]
    fn conflicting_lambda_shapes_are_rejected() {
        let p = params(&[("lambda_const", -1.0), ("lambda_t_coeff", 1.0)]);
        assert!(matches!(
            builtin_problem("linear_fp", &p),
            Err(ProblemsError::ConflictingParams(_))
        ));
    }

    #[test]
    fn porous_media_q1_sigma_is_identity() {
        let spec = builtin_problem("porous_media", &params(&[("q", 1.0)])).unwrap();
        assert_eq!(spec.sigma(0.0, &[0.0], 1.0), 1.0);
        assert_eq!(spec.sigma(0.3, &[2.0], 0.25), 0.25);
    }

    #[test]
    fn control_integrand_reference_point() {
        // h = 0, y = 1, z = 2: the quadratic term alone gives exactly 1.
        let spec = builtin_problem("inventory_kpz", &BTreeMap::new()).unwrap();
        assert_eq!(spec.lambda(0.0, &[0.0], 1.0, &[2.0]), 1.0);
    }

    #[test]
    fn control_integrand_floors_small_values() {
        let spec = builtin_problem("inventory_kpz", &params(&[("h2", 1.0)])).unwrap();
        let v = spec.lambda(0.0, &[1.0], 0.0, &[0.0]);
        assert_eq!(v, -1.0 / KPZ_VALUE_FLOOR);
    }

    #[test]
    fn burgers_variants_agree_on_their_coefficients() {
        let flux = builtin_problem("burgers_flux", &params(&[("nu", 2.0)])).unwrap();
        assert_eq!(flux.sigma(0.0, &[0.0], 0.0), 2.0);
        let mut b = [0.0];
        flux.drift_into(0.0, &[0.0], 3.0, &mut b);
        assert_eq!(b[0], 1.5);

        let fk = builtin_problem("burgers_fk", &params(&[("nu", 2.0)])).unwrap();
        assert_eq!(fk.lambda(0.0, &[0.0], 1.0, &[0.7]), -0.7);
        assert!(fk.lambda_uses_gradient());
        assert!(!fk.lambda_uses_value());
    }

    #[test]
    fn lambda_cap_default_and_override() {
        let spec = builtin_problem("linear_fp", &params(&[("horizon", 2.0)])).unwrap();
        assert_eq!(spec.lambda_cap(), 25.0);
        let spec = builtin_problem("linear_fp", &params(&[("lambda_max", 7.0)])).unwrap();
        assert_eq!(spec.lambda_cap(), 7.0);
    }

    #[test]
    fn gaussian_sampler_moments() {
        let law = Sampler::gaussian(1.0, 2.0).unwrap();
        let n = 20_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut x = [0.0];
        for i in 0..n {
            law.sample_into(7, i, &mut x);
            sum += x[0];
            sumsq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
        assert!((var - 4.0).abs() < 0.15, "var {var}");
    }

    #[test]
    fn uniform_sampler_stays_in_box() {
        let law = Sampler::uniform(-0.5, 0.25).unwrap();
        let mut x = [0.0];
        for i in 0..1000 {
            law.sample_into(3, i, &mut x);
            assert!(x[0] >= -0.5 && x[0] < 0.25);
        }
    }

    #[test]
    fn sampler_validation() {
        assert!(Sampler::gaussian(0.0, 0.0).is_err());
        assert!(Sampler::uniform(1.0, 1.0).is_err());
        assert!(Sampler::dirac(vec![f64::NAN]).is_err());
        assert!(Sampler::grid_density(vec![0.0, 1.0], vec![-1.0, 1.0]).is_err());
    }

    #[test]
    fn grid_law_quantile_inverts_cdf() {
        // Triangle density on [0, 2] peaking at 1.
        let grid: Vec<f64> = (0..=40).map(|i| i as f64 * 0.05).collect();
        let vals: Vec<f64> = grid.iter().map(|&x| if x <= 1.0 { x } else { 2.0 - x }).collect();
        let law = GridLaw::new(grid, vals).unwrap();
        for &u in &[0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99] {
            let x = law.quantile(u);
            assert!((law.cdf(x) - u).abs() < 1e-12, "u={u}, x={x}");
        }
        // Median of the symmetric triangle is its peak.
        assert!((law.quantile(0.5) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn grid_law_renormalizes() {
        let grid = vec![0.0, 1.0];
        let law_small = GridLaw::new(grid.clone(), vec![0.5, 0.5]).unwrap();
        let law_big = GridLaw::new(grid, vec![5.0, 5.0]).unwrap();
        assert!((law_small.pdf(0.5) - 1.0).abs() < 1e-12);
        assert!((law_big.pdf(0.5) - 1.0).abs() < 1e-12);
        assert!((law_big.quantile(0.25) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn grid_density_sampler_matches_law() {
        let law = Sampler::grid_density(vec![0.0, 1.0, 2.0], vec![0.0, 1.0, 0.0]).unwrap();
        let n = 40_000;
        let mut x = [0.0];
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for i in 0..n {
            law.sample_into(11, i, &mut x);
            assert!((0.0..=2.0).contains(&x[0]));
            sum += x[0];
            sumsq += x[0] * x[0];
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        // Symmetric triangle on [0, 2]: variance 1/6.
        assert!((var - 1.0 / 6.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn validate_is_quiet_for_constant_coefficients() {
        let spec = builtin_problem("linear_fp", &BTreeMap::new()).unwrap();
        assert!(validate(&spec).is_empty());
    }

    #[test]
    fn validate_flags_near_discontinuous_sigma() {
        let spec = builtin_problem("soc_heaviside", &BTreeMap::new()).unwrap();
        let diags = validate(&spec);
        assert!(
            diags
                .iter()
                .any(|d| d.severity == Severity::Warning
                    && d.message.contains("discontinuous \u{3c3}")),
            "got {diags:?}"
        );
    }

    #[test]
    fn validate_flags_unbounded_gradient_integrand() {
        let spec = builtin_problem("burgers_fk", &BTreeMap::new()).unwrap();
        let diags = validate(&spec);
        assert!(
            diags
                .iter()
                .any(|d| d.message.contains("unbounded in \u{2207}u")),
            "got {diags:?}"
        );
    }

    #[test]
    fn sampler_density_and_cdf() {
        let g = Sampler::gaussian(0.0, 1.0).unwrap();
        assert!((g.density(0.0).unwrap() - stats::INV_SQRT_2PI).abs() < 1e-15);
        assert!((g.cdf(0.0).unwrap() - 0.5).abs() < 1e-15);
        let u = Sampler::uniform(0.0, 2.0).unwrap();
        assert_eq!(u.density(1.0).unwrap(), 0.5);
        assert_eq!(u.cdf(3.0).unwrap(), 1.0);
        let d = Sampler::dirac(vec![0.0]).unwrap();
        assert!(d.density(0.0).is_none());
    }
}
