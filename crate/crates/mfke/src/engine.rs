//! Weighted-particle time stepping.
//!
//! The engine advances `N` particles with exponential weights:
//!
//! ```text
//!     xi_{k+1} = xi_k + b(t_k, xi_k, v_k) dt + sigma(t_k, xi_k, v_k) sqrt(dt) G_k
//!     log w_{k+1} = log w_k + Lambda(t_k, xi_k, u_k, du_k) dt
//! ```
//!
//! where `v_k`, `u_k`, `du_k` are read from the mollified density of the
//! ensemble *before* the step (one frozen field per step, shared by the
//! position and weight updates). Test integrals of the solution are then
//! weighted averages `(1/N) sum_j w_j phi(xi_j)`.
//!
//! Reproducibility contract: every random increment comes from a
//! counter-based stream keyed by `(seed, role, particle, step)`, and every
//! floating-point reduction runs in a fixed order, so a run is a pure
//! function of its configuration. The thread count changes wall time only.
//!
//! `Lambda` is clamped to `[-cap, cap]` before it enters the weights; the
//! clamp count is part of the diagnostics. Weights are carried in log space
//! and mass summaries factor out the largest log weight, which makes the
//! conservative identities exact: with no zero-order term the mean weight
//! is `1.0` bitwise, and a space-independent `Lambda(t)` yields the same
//! deterministic product of `exp` factors for every seed.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::measures::{
    kde_density, kde_gradient, BinnedKde1d, DensitySnapshot, KernelFamily, MeasuresError,
    Mollifier, ParticleEnsemble,
};
use crate::problems::{Interaction, ProblemsError, ProblemSpec, Sampler};
use crate::rng::{tag, Substream};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Measures(#[from] MeasuresError),
    #[error(transparent)]
    Problems(#[from] ProblemsError),
    #[error("dt {dt} does not divide the horizon {horizon} into whole steps")]
    BadTimeStep { dt: f64, horizon: f64 },
    #[error("config horizon {config} differs from problem horizon {problem}")]
    HorizonMismatch { config: f64, problem: f64 },
    #[error("snapshot time {0} is not a multiple of dt")]
    SnapshotOffGrid(f64),
    #[error("snapshot times were requested but no output grid was given")]
    MissingGrid,
    #[error("problem has no initial law to sample")]
    MissingInitialLaw,
    #[error("initial law cannot produce {dim}-dimensional samples")]
    LawDimension { dim: usize },
    #[error("binned interaction evaluation needs dimension 1, problem has {dim}")]
    BinnedNeedsDim1 { dim: usize },
    #[error("particle {particle} left the finite range at step {step}")]
    NonFinitePosition { particle: usize, step: usize },
    #[error("integrand returned a non-finite value for particle {particle} at step {step}")]
    NonFiniteIntegrand { particle: usize, step: usize },
    #[error("log weight of particle {particle} reached {log_weight:.1} at step {step}")]
    WeightOverflow { particle: usize, step: usize, log_weight: f64 },
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Hard bound on log weights; beyond this `exp` overflows and every mass
/// summary would be infinite anyway.
pub const LOG_WEIGHT_LIMIT: f64 = 700.0;

/// Mollifier bandwidth selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BandwidthPolicy {
    Fixed(f64),
    /// `1.06 sd N^{-1/(d+4)}` from the unweighted particle spread,
    /// recomputed every step.
    Silverman,
}

/// How per-particle interaction values are evaluated each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InteractionEval {
    /// Direct kernel sums (windowed in 1-d). Cost grows with `N^2`.
    Exact,
    /// Linear binning plus one tabulated-kernel convolution on an auxiliary
    /// grid with `cells_per_bandwidth` nodes per bandwidth, then linear
    /// interpolation back to the particles. 1-d only.
    Binned { cells_per_bandwidth: usize },
}

impl Default for InteractionEval {
    fn default() -> Self {
        InteractionEval::Binned { cells_per_bandwidth: 10 }
    }
}

/// Uniform output grid for density snapshots.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(min: f64, max: f64, points: usize) -> Result<Self> {
        if !(min < max) || points < 2 {
            return Err(EngineError::Measures(MeasuresError::GridNotIncreasing(0)));
        }
        Ok(GridSpec { min, max, points })
    }

    pub fn to_vec(self) -> Vec<f64> {
        let step = (self.max - self.min) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.min + i as f64 * step).collect()
    }
}

/// One simulation run: particle count, step size, outputs, and seed.
#[derive(Clone, Debug)]
pub struct SimConfig {
    pub n_particles: usize,
    pub dt: f64,
    pub horizon: f64,
    pub seed: u64,
    pub kernel: KernelFamily,
    pub bandwidth: BandwidthPolicy,
    pub interaction_eval: InteractionEval,
    /// Times at which to tabulate the density; each must sit on the step
    /// grid. Requires `grid`.
    pub snapshot_times: Vec<f64>,
    pub grid: Option<GridSpec>,
}

impl SimConfig {
    pub fn new(n_particles: usize, dt: f64, horizon: f64, seed: u64) -> Self {
        SimConfig {
            n_particles,
            dt,
            horizon,
            seed,
            kernel: KernelFamily::Gaussian,
            bandwidth: BandwidthPolicy::Silverman,
            interaction_eval: InteractionEval::default(),
            snapshot_times: Vec::new(),
            grid: None,
        }
    }

    pub fn with_snapshots(mut self, times: Vec<f64>, grid: GridSpec) -> Self {
        self.snapshot_times = times;
        self.grid = Some(grid);
        self
    }
}

/// Numeric record of one run.
#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    pub seed: u64,
    pub n_particles: usize,
    pub steps: usize,
    pub dt: f64,
    /// Evaluations of the zero-order term that hit the cap.
    pub clip_events: u64,
    /// Extremes of the log weights over the whole run.
    pub min_log_weight: f64,
    pub max_log_weight: f64,
    /// Mollifier bandwidth used on the last step (0 when never needed).
    pub last_bandwidth: f64,
    /// `(t, mean weight)` after every step, starting at `(0, 1)`.
    pub mass_curve: Vec<(f64, f64)>,
    pub wall_time_s: f64,
}

/// Output of a run: requested grid snapshots, the terminal weighted cloud,
/// and diagnostics.
pub struct Trajectory {
    pub snapshots: Vec<DensitySnapshot>,
    pub final_ensemble: ParticleEnsemble,
    pub diagnostics: Diagnostics,
}

/// Interaction data for one step, evaluated on the pre-step ensemble.
pub(crate) struct Field {
    /// Mollified density at each particle.
    pub values: Option<Vec<f64>>,
    /// Mollified density gradient at each particle (flat, `dim` per particle).
    pub grads: Option<Vec<f64>>,
    /// Convolution `(K * u)` at each particle.
    pub conv: Option<Vec<f64>>,
    pub bandwidth: f64,
}

impl Field {
    pub(crate) fn empty() -> Self {
        Field { values: None, grads: None, conv: None, bandwidth: 0.0 }
    }

    /// Value seen by `sigma` and `b` for particle `j`.
    #[inline]
    pub(crate) fn coefficient_value(&self, j: usize) -> f64 {
        if let Some(c) = &self.conv {
            c[j]
        } else if let Some(v) = &self.values {
            v[j]
        } else {
            0.0
        }
    }
}

/// Number of steps implied by `dt` and `horizon`; rejects pairs that do not
/// meet at a whole number of steps.
pub fn resolve_steps(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) || !dt.is_finite() || !(horizon > 0.0) || !horizon.is_finite() {
        return Err(EngineError::BadTimeStep { dt, horizon });
    }
    let steps = (horizon / dt).round();
    if steps < 1.0 || (steps * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(EngineError::BadTimeStep { dt, horizon });
    }
    Ok(steps as usize)
}

/// Step index of a snapshot time, or an error if it sits off the grid.
pub(crate) fn snapshot_step(t: f64, dt: f64, steps: usize) -> Result<usize> {
    let k = (t / dt).round();
    if k < 0.0 || k > steps as f64 || (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
        return Err(EngineError::SnapshotOffGrid(t));
    }
    Ok(k as usize)
}

/// Samples `n` particles from `law` at time `t0`.
pub(crate) fn sample_ensemble(
    law: &Sampler,
    n: usize,
    dim: usize,
    seed: u64,
    t0: f64,
) -> Result<ParticleEnsemble> {
    if !law.supports_dim(dim) {
        return Err(EngineError::LawDimension { dim });
    }
    let mut positions = vec![0.0; n * dim];
    positions.par_chunks_mut(dim).enumerate().for_each(|(j, chunk)| {
        law.sample_into(seed, j as u64, chunk);
    });
    let ens = ParticleEnsemble::new(dim, positions, t0)?;
    Ok(ens)
}

/// Unweighted Silverman bandwidth for the current cloud.
pub(crate) fn bandwidth_for(policy: BandwidthPolicy, ens: &ParticleEnsemble) -> f64 {
    match policy {
        BandwidthPolicy::Fixed(eps) => eps,
        BandwidthPolicy::Silverman => {
            let n = ens.len();
            let d = ens.dim();
            let pos = ens.positions();
            let mut pooled = 0.0;
            for c in 0..d {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                let mut i = c;
                while i < pos.len() {
                    sum += pos[i];
                    sumsq += pos[i] * pos[i];
                    i += d;
                }
                let mean = sum / n as f64;
                pooled += (sumsq / n as f64 - mean * mean).max(0.0);
            }
            let sd = (pooled / d as f64).sqrt().max(1e-9);
            1.06 * sd * (n as f64).powf(-1.0 / (d as f64 + 4.0))
        }
    }
}

/// Direct convolution `(K * u)(xi_i) = (1/N) sum_j w_j K(xi_i - xi_j)`,
/// windowed by the declared kernel radius in one dimension.
fn convolution_values(
    ens: &ParticleEnsemble,
    kernel: &crate::problems::ConvKernelFn,
    radius: f64,
) -> Vec<f64> {
    let n = ens.len();
    let d = ens.dim();
    let inv_n = 1.0 / n as f64;
    let weights = ens.weights();
    if d == 1 {
        let pos = ens.positions();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| pos[a].total_cmp(&pos[b]));
        let sorted_pos: Vec<f64> = idx.iter().map(|&j| pos[j]).collect();
        let sorted_w: Vec<f64> = idx.iter().map(|&j| weights[j]).collect();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let q = pos[i];
                let lo = sorted_pos.partition_point(|&p| p < q - radius);
                let hi = sorted_pos.partition_point(|&p| p <= q + radius);
                let mut acc = 0.0;
                for j in lo..hi {
                    acc += sorted_w[j] * kernel(&[q - sorted_pos[j]]);
                }
                acc * inv_n
            })
            .collect()
    } else {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let q = ens.position(i);
                let mut offset = vec![0.0; d];
                let mut acc = 0.0;
                for j in 0..n {
                    let xj = ens.position(j);
                    for k in 0..d {
                        offset[k] = q[k] - xj[k];
                    }
                    acc += weights[j] * kernel(&offset);
                }
                acc * inv_n
            })
            .collect()
    }
}

/// Evaluates whatever the coefficients need from the pre-step ensemble.
pub(crate) fn compute_field(
    spec: &ProblemSpec,
    ens: &ParticleEnsemble,
    policy: BandwidthPolicy,
    family: KernelFamily,
    eval: InteractionEval,
) -> Result<Field> {
    let needs_value = spec.needs_density();
    let needs_grad = spec.needs_gradient();
    let conv_spec = match &spec.interaction {
        Interaction::Convolution { kernel, radius } => Some((kernel.clone(), *radius)),
        _ => None,
    };
    if !needs_value && !needs_grad && conv_spec.is_none() {
        return Ok(Field::empty());
    }

    let mut field = Field::empty();
    if needs_value || needs_grad {
        let eps = bandwidth_for(policy, ens);
        field.bandwidth = eps;
        let kernel = Mollifier::new(family, eps, ens.dim())?;
        match eval {
            InteractionEval::Exact => {
                field.values = Some(kde_density(ens, &kernel, ens.positions())?);
                if needs_grad {
                    field.grads = Some(kde_gradient(ens, &kernel, ens.positions())?);
                }
            }
            InteractionEval::Binned { cells_per_bandwidth } => {
                if ens.dim() != 1 {
                    return Err(EngineError::BinnedNeedsDim1 { dim: ens.dim() });
                }
                let weights = ens.weights();
                let binned =
                    BinnedKde1d::new(ens.positions(), &weights, &kernel, cells_per_bandwidth)?;
                let pos = ens.positions();
                field.values = Some(
                    pos.par_iter().map(|&x| binned.density_at(x)).collect(),
                );
                if needs_grad {
                    field.grads = Some(
                        pos.par_iter().map(|&x| binned.gradient_at(x)).collect(),
                    );
                }
            }
        }
    }
    if let Some((kernel, radius)) = conv_spec {
        field.conv = Some(convolution_values(ens, &kernel, radius));
    }
    Ok(field)
}

/// One Euler-Maruyama position update, in place. `step` is the index of the
/// step being taken; increments come from the per-particle diffusion stream
/// at that index.
pub(crate) fn euler_step(
    spec: &ProblemSpec,
    ens: &mut ParticleEnsemble,
    field: &Field,
    t: f64,
    dt: f64,
    seed: u64,
    step: usize,
) -> Result<()> {
    let dim = ens.dim();
    let sqrt_dt = dt.sqrt();
    let positions = ens.positions_mut();
    positions.par_chunks_mut(dim).enumerate().for_each_init(
        || vec![0.0; dim],
        |drift, (j, x)| {
            let v = field.coefficient_value(j);
            spec.drift_into(t, x, v, drift);
            let s = spec.sigma(t, x, v);
            let stream = Substream::new(seed, tag::DIFFUSION, j as u64);
            for (c, xc) in x.iter_mut().enumerate() {
                let g = stream.normal(step as u64, c as u64);
                *xc += drift[c] * dt + s * sqrt_dt * g;
            }
        },
    );
    if let Some(particle) = first_non_finite(ens.positions(), dim) {
        return Err(EngineError::NonFinitePosition { particle, step });
    }
    Ok(())
}

pub(crate) fn first_non_finite(flat: &[f64], dim: usize) -> Option<usize> {
    if flat.par_iter().all(|x| x.is_finite()) {
        return None;
    }
    flat.iter().position(|x| !x.is_finite()).map(|i| i / dim)
}

/// Summary of one weight update.
pub(crate) struct WeightUpdate {
    pub clip_events: u64,
    pub min_log_weight: f64,
    pub max_log_weight: f64,
}

/// Adds `Lambda dt` (clamped) to every log weight, using pre-step positions
/// and the frozen field. Fails on non-finite integrand values or log
/// weights beyond the overflow limit.
pub(crate) fn weight_step(
    spec: &ProblemSpec,
    ens: &mut ParticleEnsemble,
    field: &Field,
    t: f64,
    dt: f64,
    step: usize,
) -> Result<WeightUpdate> {
    let n = ens.len();
    let dim = ens.dim();
    let cap = spec.lambda_cap();
    let zero_grad = vec![0.0; dim];
    let lam: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            let x = ens.position(j);
            let u = field.values.as_ref().map_or(0.0, |v| v[j]);
            let g = field
                .grads
                .as_ref()
                .map_or(&zero_grad[..], |gr| &gr[j * dim..(j + 1) * dim]);
            spec.lambda(t, x, u, g)
        })
        .collect();
    if let Some(particle) = lam.iter().position(|l| !l.is_finite()) {
        return Err(EngineError::NonFiniteIntegrand { particle, step });
    }
    let clip_events = lam.par_iter().filter(|l| l.abs() > cap).count() as u64;

    let log_weights = ens.log_weights_mut();
    log_weights
        .par_iter_mut()
        .zip(lam.par_iter())
        .for_each(|(lw, &l)| *lw += dt * l.clamp(-cap, cap));

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &lw in ens.log_weights() {
        lo = lo.min(lw);
        hi = hi.max(lw);
    }
    if !(hi <= LOG_WEIGHT_LIMIT) {
        let particle = ens
            .log_weights()
            .iter()
            .position(|&lw| !(lw <= LOG_WEIGHT_LIMIT))
            .unwrap_or(0);
        return Err(EngineError::WeightOverflow {
            particle,
            step,
            log_weight: ens.log_weights()[particle],
        });
    }
    Ok(WeightUpdate { clip_events, min_log_weight: lo, max_log_weight: hi })
}

/// Tabulates the weighted density of `ens` on `grid` with the exact
/// evaluator and the given bandwidth policy.
pub(crate) fn snapshot_on_grid(
    ens: &ParticleEnsemble,
    family: KernelFamily,
    policy: BandwidthPolicy,
    grid: &[f64],
) -> Result<DensitySnapshot> {
    let eps = bandwidth_for(policy, ens);
    let kernel = Mollifier::new(family, eps, ens.dim())?;
    let values = kde_density(ens, &kernel, grid)?;
    let snap = DensitySnapshot::new(ens.time(), grid.to_vec(), values, ens.mean_weight())?;
    Ok(snap)
}

/// Runs the weighted particle system for one problem and configuration.
pub fn simulate(spec: &ProblemSpec, cfg: &SimConfig) -> Result<Trajectory> {
    let start = Instant::now();
    if (cfg.horizon - spec.horizon()).abs() > 1e-9 * spec.horizon().max(1.0) {
        return Err(EngineError::HorizonMismatch {
            config: cfg.horizon,
            problem: spec.horizon(),
        });
    }
    let steps = resolve_steps(cfg.dt, cfg.horizon)?;
    let law = spec.initial_law.as_ref().ok_or(EngineError::MissingInitialLaw)?;

    // Map snapshot times onto step indices up front so a bad time fails
    // before any work is done.
    let mut snap_steps: Vec<(usize, f64)> = Vec::new();
    if !cfg.snapshot_times.is_empty() && cfg.grid.is_none() {
        return Err(EngineError::MissingGrid);
    }
    for &t in &cfg.snapshot_times {
        snap_steps.push((snapshot_step(t, cfg.dt, steps)?, t));
    }
    snap_steps.sort_by(|a, b| a.0.cmp(&b.0));
    snap_steps.dedup_by_key(|e| e.0);
    let grid = cfg.grid.map(GridSpec::to_vec);

    let mut ens = sample_ensemble(law, cfg.n_particles, spec.dim, cfg.seed, 0.0)?;
    if let Some(particle) = first_non_finite(ens.positions(), spec.dim) {
        return Err(EngineError::NonFinitePosition { particle, step: 0 });
    }

    let mut diag = Diagnostics {
        seed: cfg.seed,
        n_particles: cfg.n_particles,
        steps,
        dt: cfg.dt,
        clip_events: 0,
        min_log_weight: 0.0,
        max_log_weight: 0.0,
        last_bandwidth: 0.0,
        mass_curve: Vec::with_capacity(steps + 1),
        wall_time_s: 0.0,
    };
    diag.mass_curve.push((0.0, 1.0));

    let mut snapshots = Vec::with_capacity(snap_steps.len());
    let emit = |ens: &ParticleEnsemble, snaps: &mut Vec<DensitySnapshot>| -> Result<()> {
        snaps.push(snapshot_on_grid(
            ens,
            cfg.kernel,
            cfg.bandwidth,
            grid.as_ref().expect("grid presence checked above"),
        )?);
        Ok(())
    };
    if snap_steps.first().map(|e| e.0) == Some(0) {
        emit(&ens, &mut snapshots)?;
    }

    for k in 0..steps {
        let t = k as f64 * cfg.dt;
        let field = compute_field(spec, &ens, cfg.bandwidth, cfg.kernel, cfg.interaction_eval)?;
        if field.bandwidth > 0.0 {
            diag.last_bandwidth = field.bandwidth;
        }
        if spec.has_lambda() {
            let upd = weight_step(spec, &mut ens, &field, t, cfg.dt, k)?;
            diag.clip_events += upd.clip_events;
            diag.min_log_weight = diag.min_log_weight.min(upd.min_log_weight);
            diag.max_log_weight = diag.max_log_weight.max(upd.max_log_weight);
        }
        euler_step(spec, &mut ens, &field, t, cfg.dt, cfg.seed, k)?;
        ens.set_time((k + 1) as f64 * cfg.dt);

        let mass = if spec.has_lambda() { ens.mean_weight() } else { 1.0 };
        diag.mass_curve.push((ens.time(), mass));
        if snap_steps.iter().any(|e| e.0 == k + 1) {
            emit(&ens, &mut snapshots)?;
        }
    }

    diag.wall_time_s = start.elapsed().as_secs_f64();
    Ok(Trajectory { snapshots, final_ensemble: ens, diagnostics: diag })
}
