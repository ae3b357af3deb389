//! Terminal-value problems solved by time reversal.
//!
//! For a conservative linear problem (no zero-order term, no interaction)
//! posed with terminal data `u_T`, the solver runs the reversed-clock
//! McKean system on `s in [0, T]`:
//!
//! ```text
//!     tilde_b(s, y; v) = ( sigma^2(T-s, y) v'(y) + d(sigma^2)/dx (T-s, y) v(y) )
//!                        / max(v(y), v_min)  -  b(T-s, y)
//!
//!     dY_s = tilde_b(s, Y_s; v_s) ds + sigma(T-s, Y_s) dbeta_s,   Y_0 ~ u_T,
//! ```
//!
//! where `v_s`, the density of `Y_s`, is closed by the kernel estimate of
//! the current cloud, frozen once per step like the forward engine. The
//! recovered solution is the relabeling `u(t, .) = v(T-t, .)`.
//!
//! The drift divides by the estimated density, so evaluations are floored
//! at `v_min = 1e-6 x (peak of the current estimate)`; floor activations
//! are counted and a run whose fraction exceeds 10% carries a vacuum
//! warning in its diagnostics. Particles stay unweighted: the reversed flow
//! is conservative by construction.
//!
//! `weak_form_residuals` checks a recovered trajectory against the
//! governing equation in weak form on compactly supported bumps, which is
//! the module's self-validation hook alongside the forward reference run.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{
    bandwidth_for, first_non_finite, resolve_steps, sample_ensemble, simulate, snapshot_on_grid,
    snapshot_step, BandwidthPolicy, EngineError, GridSpec, InteractionEval, SimConfig, Trajectory,
};
use crate::measures::{
    kde_density, kde_gradient, BinnedKde1d, DensitySnapshot, KernelFamily, MeasuresError,
    Mollifier, ParticleEnsemble,
};
use crate::problems::{Interaction, ProblemSpec};
use crate::quad::trapezoid;
use crate::rng::{tag, Substream};

#[derive(Debug, Error)]
pub enum ReversalError {
    #[error(
        "problem `{name}` carries a zero-order term; time reversal here handles \
         conservative problems only"
    )]
    LambdaPresent { name: String },
    #[error("problem `{name}`: time reversal needs interaction-free coefficients")]
    InteractingProblem { name: String },
    #[error("time reversal is implemented in dimension 1; problem `{name}` has dimension {dim}")]
    UnsupportedDimension { name: String, dim: usize },
    #[error("problem `{name}` has no terminal law to sample from")]
    MissingTerminalLaw { name: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Measures(#[from] MeasuresError),
}

pub type Result<T> = std::result::Result<T, ReversalError>;

/// Numeric record of one backward run.
#[derive(Clone, Debug, Serialize)]
pub struct ReversalDiagnostics {
    pub seed: u64,
    pub n_particles: usize,
    pub steps: usize,
    pub dt: f64,
    /// Drift evaluations whose density estimate sat below the floor.
    pub floor_activations: u64,
    /// Total drift evaluations (`N x steps`).
    pub drift_evaluations: u64,
    /// `floor_activations / drift_evaluations`.
    pub floor_fraction: f64,
    /// Set when more than 10% of drift evaluations hit the floor.
    pub vacuum_warning: Option<String>,
    /// Bandwidth of the drift estimate on the last step.
    pub last_bandwidth: f64,
    pub wall_time_s: f64,
}

/// Output of a backward run. `v_snapshots` live on the reversed clock `s`;
/// `u_snapshots` are the same profiles relabeled to `t = T - s` and sorted
/// by `t`.
pub struct BackwardTrajectory {
    pub v_snapshots: Vec<DensitySnapshot>,
    pub u_snapshots: Vec<DensitySnapshot>,
    pub final_ensemble: ParticleEnsemble,
    pub diagnostics: ReversalDiagnostics,
}

/// Reversed-clock drift at one point, from the estimated density value `v`
/// and gradient `v_grad` there. The density enters through
/// `max(v, floor)`, so vacuum cannot produce an infinite drift.
pub fn reversed_drift(
    spec: &ProblemSpec,
    s: f64,
    y: f64,
    v: f64,
    v_grad: f64,
    floor: f64,
) -> f64 {
    let tf = spec.horizon() - s;
    let x = [y];
    let sig = spec.sigma(tf, &x, 0.0);
    let mut b = [0.0];
    spec.drift_into(tf, &x, 0.0, &mut b);
    (sig * sig * v_grad + spec.dsigma2_dx(tf, y) * v) / v.max(floor) - b[0]
}

/// Time reversal handles conservative linear problems in dimension 1.
fn validate_reversal_problem(spec: &ProblemSpec) -> Result<()> {
    if spec.has_lambda() {
        return Err(ReversalError::LambdaPresent { name: spec.name.clone() });
    }
    if !matches!(spec.interaction, Interaction::None) {
        return Err(ReversalError::InteractingProblem { name: spec.name.clone() });
    }
    if spec.dim != 1 {
        return Err(ReversalError::UnsupportedDimension { name: spec.name.clone(), dim: spec.dim });
    }
    Ok(())
}

/// Density value and gradient of the cloud at every particle, plus the
/// bandwidth used. Same evaluator split as the forward engine, but both
/// value and gradient are always produced because the reversed drift needs
/// them.
fn density_field(
    ens: &ParticleEnsemble,
    family: KernelFamily,
    policy: BandwidthPolicy,
    eval: InteractionEval,
) -> Result<(Vec<f64>, Vec<f64>, f64)> {
    let eps = bandwidth_for(policy, ens);
    let kernel = Mollifier::new(family, eps, 1)?;
    match eval {
        InteractionEval::Exact => Ok((
            kde_density(ens, &kernel, ens.positions())?,
            kde_gradient(ens, &kernel, ens.positions())?,
            eps,
        )),
        InteractionEval::Binned { cells_per_bandwidth } => {
            let weights = ens.weights();
            let binned = BinnedKde1d::new(ens.positions(), &weights, &kernel, cells_per_bandwidth)?;
            let pos = ens.positions();
            let values: Vec<f64> = pos.par_iter().map(|&x| binned.density_at(x)).collect();
            let grads: Vec<f64> = pos.par_iter().map(|&x| binned.gradient_at(x)).collect();
            Ok((values, grads, eps))
        }
    }
}

/// Runs the reversed-clock system from the terminal law and returns the
/// solution on both clocks.
///
/// `cfg.snapshot_times` are reversed-clock times `s`; each `v` snapshot at
/// `s` reappears among the `u` snapshots at `t = T - s`.
pub fn solve_backward(spec: &ProblemSpec, cfg: &SimConfig) -> Result<BackwardTrajectory> {
    let start = Instant::now();
    validate_reversal_problem(spec)?;
    if (cfg.horizon - spec.horizon()).abs() > 1e-9 * spec.horizon().max(1.0) {
        return Err(EngineError::HorizonMismatch {
            config: cfg.horizon,
            problem: spec.horizon(),
        }
        .into());
    }
    let steps = resolve_steps(cfg.dt, cfg.horizon)?;
    let law = spec
        .terminal_law
        .as_ref()
        .ok_or_else(|| ReversalError::MissingTerminalLaw { name: spec.name.clone() })?;

    let mut snap_steps: Vec<(usize, f64)> = Vec::new();
    if !cfg.snapshot_times.is_empty() && cfg.grid.is_none() {
        return Err(EngineError::MissingGrid.into());
    }
    for &s in &cfg.snapshot_times {
        snap_steps.push((snapshot_step(s, cfg.dt, steps)?, s));
    }
    snap_steps.sort_by(|a, b| a.0.cmp(&b.0));
    snap_steps.dedup_by_key(|e| e.0);
    let grid = cfg.grid.map(GridSpec::to_vec);

    let mut ens = sample_ensemble(law, cfg.n_particles, 1, cfg.seed, 0.0)?;
    if let Some(particle) = first_non_finite(ens.positions(), 1) {
        return Err(EngineError::NonFinitePosition { particle, step: 0 }.into());
    }

    let horizon = spec.horizon();
    let sqrt_dt = cfg.dt.sqrt();
    let mut floor_activations = 0_u64;
    let mut last_bandwidth = 0.0;

    let mut v_snapshots = Vec::with_capacity(snap_steps.len());
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
        emit(&ens, &mut v_snapshots)?;
    }

    for k in 0..steps {
        let s = k as f64 * cfg.dt;
        let (values, grads, eps) =
            density_field(&ens, cfg.kernel, cfg.bandwidth, cfg.interaction_eval)?;
        last_bandwidth = eps;
        let peak = values.iter().cloned().fold(0.0_f64, f64::max);
        let v_min = 1e-6 * peak;
        floor_activations += values.par_iter().filter(|&&v| v < v_min).count() as u64;

        let positions = ens.positions();
        let drifts: Vec<f64> = (0..ens.len())
            .into_par_iter()
            .map(|j| reversed_drift(spec, s, positions[j], values[j], grads[j], v_min))
            .collect();

        let tf = horizon - s;
        let seed = cfg.seed;
        let dt = cfg.dt;
        ens.positions_mut().par_iter_mut().enumerate().for_each(|(j, y)| {
            let x = [*y];
            let sig = spec.sigma(tf, &x, 0.0);
            let g = Substream::new(seed, tag::DIFFUSION, j as u64).normal(k as u64, 0);
            *y += drifts[j] * dt + sig * sqrt_dt * g;
        });
        if let Some(particle) = first_non_finite(ens.positions(), 1) {
            return Err(EngineError::NonFinitePosition { particle, step: k }.into());
        }
        ens.set_time((k + 1) as f64 * cfg.dt);
        if snap_steps.iter().any(|e| e.0 == k + 1) {
            emit(&ens, &mut v_snapshots)?;
        }
    }

    let drift_evaluations = (cfg.n_particles * steps) as u64;
    let floor_fraction = if drift_evaluations == 0 {
        0.0
    } else {
        floor_activations as f64 / drift_evaluations as f64
    };
    let vacuum_warning = (floor_fraction > 0.1).then(|| {
        format!(
            "reversed drift unreliable in vacuum: {:.1}% of drift evaluations hit the \
             density floor",
            100.0 * floor_fraction
        )
    });

    let u_snapshots = v_snapshots
        .iter()
        .rev()
        .map(|snap| {
            DensitySnapshot::new(
                horizon - snap.time,
                snap.grid().to_vec(),
                snap.values().to_vec(),
                snap.mass(),
            )
            .expect("relabeling a valid snapshot keeps it valid")
        })
        .collect();

    let diagnostics = ReversalDiagnostics {
        seed: cfg.seed,
        n_particles: cfg.n_particles,
        steps,
        dt: cfg.dt,
        floor_activations,
        drift_evaluations,
        floor_fraction,
        vacuum_warning,
        last_bandwidth,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(BackwardTrajectory { v_snapshots, u_snapshots, final_ensemble: ens, diagnostics })
}

/// Plain forward run of the same problem from its initial law; its
/// marginals are the validation target for the backward solver.
pub fn forward_reference(spec: &ProblemSpec, cfg: &SimConfig) -> Result<Trajectory> {
    Ok(simulate(spec, cfg)?)
}

/// Compactly supported C^2 bump `(1 - z^2)^3` on `|z| < 1`,
/// `z = (x - center) / radius`.
#[derive(Clone, Copy, Debug)]
pub struct BumpTestFn {
    pub center: f64,
    pub radius: f64,
}

impl BumpTestFn {
    pub fn value(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.radius;
        let m = 1.0 - z * z;
        if m <= 0.0 {
            0.0
        } else {
            m * m * m
        }
    }

    pub fn first_derivative(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.radius;
        let m = 1.0 - z * z;
        if m <= 0.0 {
            0.0
        } else {
            -6.0 * z * m * m / self.radius
        }
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.radius;
        let m = 1.0 - z * z;
        if m <= 0.0 {
            0.0
        } else {
            6.0 * m * (5.0 * z * z - 1.0) / (self.radius * self.radius)
        }
    }
}

/// Grid pairing `<f, snap>` by trapezoid quadrature.
fn pairing<F: Fn(f64) -> f64>(snap: &DensitySnapshot, f: F) -> f64 {
    let vals: Vec<f64> =
        snap.grid().iter().zip(snap.values()).map(|(&x, &u)| f(x) * u).collect();
    trapezoid(snap.grid(), &vals)
}

/// Weak-form residuals of the terminal-value equation on one bump:
///
/// ```text
///     r_i = | <phi, u(t_i)> - <phi, u(T)>
///             + int_{t_i}^T <(1/2) sigma^2 phi'' + b phi', u(s)> ds |
/// ```
///
/// with the time integral a trapezoid rule over the snapshot times.
/// Snapshots must be ascending in time with the last one at the horizon;
/// the last residual is zero by construction.
pub fn weak_form_residuals(
    spec: &ProblemSpec,
    u_snapshots: &[DensitySnapshot],
    phi: &BumpTestFn,
) -> Vec<f64> {
    let n = u_snapshots.len();
    if n == 0 {
        return Vec::new();
    }
    let gen: Vec<f64> = u_snapshots
        .iter()
        .map(|snap| {
            pairing(snap, |x| {
                let xs = [x];
                let sig = spec.sigma(snap.time, &xs, 0.0);
                let mut b = [0.0];
                spec.drift_into(snap.time, &xs, 0.0, &mut b);
                0.5 * sig * sig * phi.second_derivative(x) + b[0] * phi.first_derivative(x)
            })
        })
        .collect();
    let phi_terminal = pairing(&u_snapshots[n - 1], |x| phi.value(x));
    (0..n)
        .map(|i| {
            let mut integral = 0.0;
            for j in i..n - 1 {
                let span = u_snapshots[j + 1].time - u_snapshots[j].time;
                integral += 0.5 * span * (gen[j] + gen[j + 1]);
            }
            (pairing(&u_snapshots[i], |x| phi.value(x)) - phi_terminal + integral).abs()
        })
        .collect()
}
