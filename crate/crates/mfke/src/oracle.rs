//! Independent reference solvers: grid finite differences and closed-form
//! quadrature, for validating the particle engine.
//!
//! Three oracles:
//!
//! * [`fd_solve`]: Crank-Nicolson finite differences for the 1-d equation
//!   `d/dt u = 1/2 dxx(sigma^2 u) - dx(b u) + Lambda u`, assembled in flux
//!   form with no-flux boundaries; nonlinear coefficients are lagged one
//!   step.
//! * [`cole_hopf_burgers`]: the exact solution of the viscous conservation
//!   law `d/dt u = (nu^2/2) dxx u - u dx u` evaluated by adaptive
//!   heat-kernel quadrature.
//! * [`hjb_fd_solve`]: IMEX finite differences for the reversed-time
//!   control equation `d/dt u = 1/4 (dx u)^2 + (sigma^2/2) dxx u + D dx u
//!   - h`, reporting the value function `v(t,.) = u(T-t,.)` and the
//!   optimal feedback `alpha(t,.) = D + 1/2 dx v(t,.)`.
//!
//! None of this shares discretization machinery with the particle engine,
//! so agreement between the two exercises genuinely different numerics.
//! Grid solvers expect a window wide enough that the solution is
//! negligible at the boundary (eight standard deviations beyond the data
//! support is the convention used by the callers); the no-flux closure
//! then perturbs the interior only through exponentially small tails.

use rayon::prelude::*;

use crate::measures::{DensitySnapshot, MeasuresError};
use crate::problems::{Interaction, ProblemSpec};
use crate::quad::{adaptive_simpson, trapezoid};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("grid must be uniform and increasing: spacing deviates at index {index}")]
    NonUniformGrid { index: usize },
    #[error("grid needs at least {needed} points, got {got}")]
    GridTooSmall { needed: usize, got: usize },
    #[error("initial data length {got} does not match grid length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("initial data must be finite, found a bad entry at index {0}")]
    BadInitialData(usize),
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("snapshot times must be strictly increasing multiples of dt, starting at or after zero; offending time {0}")]
    BadSnapshotTime(f64),
    #[error("grid solver requires dimension 1, got {0}")]
    UnsupportedDimension(usize),
    #[error("scheme unstable at step {step}; reduce the time step to about {suggested_dt:.3e}")]
    Instability { step: usize, suggested_dt: f64 },
    #[error("quadrature did not converge at x = {x}: window disagreement {delta:.3e}")]
    QuadratureDiverged { x: f64, delta: f64 },
    #[error("bad parameter {name}: {reason}")]
    BadParameter { name: &'static str, reason: String },
    #[error(transparent)]
    Measures(#[from] MeasuresError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Checks that `grid` is strictly increasing with uniform spacing (to a
/// relative 1e-9) and returns that spacing.
fn uniform_spacing(grid: &[f64]) -> Result<f64> {
    if grid.len() < 3 {
        return Err(OracleError::GridTooSmall { needed: 3, got: grid.len() });
    }
    let dx = grid[1] - grid[0];
    if !(dx > 0.0) || !dx.is_finite() {
        return Err(OracleError::NonUniformGrid { index: 1 });
    }
    for i in 2..grid.len() {
        if ((grid[i] - grid[i - 1]) - dx).abs() > 1e-9 * dx {
            return Err(OracleError::NonUniformGrid { index: i });
        }
    }
    Ok(dx)
}

/// Maps `t` to the nearest step index under step size `dt`, or `None` when
/// `t` is negative or not a multiple of `dt` within 1e-9 relative.
fn step_index(t: f64, dt: f64) -> Option<usize> {
    if !t.is_finite() || t < 0.0 {
        return None;
    }
    let k = (t / dt).round();
    if (k * dt - t).abs() > 1e-9 * t.abs().max(1.0) {
        return None;
    }
    Some(k as usize)
}

/// Resolves snapshot times to step indices, enforcing strict increase.
fn snapshot_steps(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(OracleError::BadParameter {
            name: "snapshot_times",
            reason: "need at least one snapshot time".into(),
        });
    }
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let k = step_index(t, dt).ok_or(OracleError::BadSnapshotTime(t))?;
        if let Some(&prev) = steps.last() {
            if k <= prev {
                return Err(OracleError::BadSnapshotTime(t));
            }
        }
        steps.push(k);
    }
    Ok(steps)
}

/// Solves a tridiagonal system by the Thomas algorithm. All four slices
/// have the same length; `sub[0]` and `sup[last]` are ignored.
fn thomas(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Vec<f64> {
    let m = diag.len();
    let mut c = vec![0.0; m];
    let mut x = vec![0.0; m];
    c[0] = sup[0] / diag[0];
    x[0] = rhs[0] / diag[0];
    for i in 1..m {
        let denom = diag[i] - sub[i] * c[i - 1];
        if i + 1 < m {
            c[i] = sup[i] / denom;
        }
        x[i] = (rhs[i] - sub[i] * x[i - 1]) / denom;
    }
    for i in (0..m - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    x
}

/// Central differences with one-sided ends.
fn grid_gradient(u: &[f64], dx: f64) -> Vec<f64> {
    let m = u.len();
    let mut g = vec![0.0; m];
    g[0] = (u[1] - u[0]) / dx;
    for i in 1..m - 1 {
        g[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
    }
    g[m - 1] = (u[m - 1] - u[m - 2]) / dx;
    g
}

/// Direct quadrature of `(K * u)(x_i)` on the grid; the kernel is treated
/// as zero beyond `radius`.
fn convolve_grid(
    grid: &[f64],
    u: &[f64],
    kernel: &(dyn Fn(&[f64]) -> f64 + Send + Sync),
    radius: f64,
    dx: f64,
) -> Vec<f64> {
    let m = grid.len();
    let mut out = vec![0.0; m];
    for i in 0..m {
        let mut acc = 0.0;
        // Trapezoid weights: halved at the window ends.
        for j in 0..m {
            let d = grid[i] - grid[j];
            if d.abs() > radius {
                continue;
            }
            let w = if j == 0 || j == m - 1 { 0.5 * dx } else { dx };
            acc += w * kernel(&[d]) * u[j];
        }
        out[i] = acc;
    }
    out
}

/// One step's operator rows in flux form, plus the largest drift speed
/// (for the stability refusal). With `a = sigma^2`, `alpha = a/(2 dx)` and
/// `beta = b/2`, the interface flux is
///
/// ```text
///     F_{i+1/2} = u_{i+1} (alpha_{i+1} - beta_{i+1}) - u_i (alpha_i + beta_i)
/// ```
///
/// and `(L u)_i = (F_{i+1/2} - F_{i-1/2}) / dx + Lambda_i u_i` with `F = 0`
/// at both ends, so the rows sum to `sum(Lambda_i u_i)` and the update
/// conserves `sum(u) dx` exactly when `Lambda` vanishes.
struct OperatorRows {
    lower: Vec<f64>,
    diag: Vec<f64>,
    upper: Vec<f64>,
    max_speed: f64,
}

fn flux_operator(spec: &ProblemSpec, t: f64, grid: &[f64], u: &[f64], dx: f64) -> OperatorRows {
    let m = grid.len();
    let coupling: Vec<f64> = match &spec.interaction {
        Interaction::None => vec![0.0; m],
        Interaction::Pointwise => u.to_vec(),
        Interaction::Convolution { kernel, radius } => {
            convolve_grid(grid, u, kernel.as_ref(), *radius, dx)
        }
    };
    let grad = grid_gradient(u, dx);
    let cap = spec.lambda_cap();
    let mut alpha = vec![0.0; m];
    let mut beta = vec![0.0; m];
    let mut lam = vec![0.0; m];
    let mut bbuf = [0.0];
    let mut max_speed = 0.0f64;
    for i in 0..m {
        let x = &grid[i..=i];
        let s = spec.sigma(t, x, coupling[i]);
        spec.drift_into(t, x, coupling[i], &mut bbuf);
        max_speed = max_speed.max(bbuf[0].abs());
        alpha[i] = s * s / (2.0 * dx);
        beta[i] = 0.5 * bbuf[0];
        if spec.has_lambda() {
            lam[i] = spec.lambda(t, x, u[i], &grad[i..=i]).clamp(-cap, cap);
        }
    }
    let mut lower = vec![0.0; m];
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    for i in 0..m {
        let outflow_left = if i > 0 { alpha[i] - beta[i] } else { 0.0 };
        let outflow_right = if i + 1 < m { alpha[i] + beta[i] } else { 0.0 };
        diag[i] = -(outflow_left + outflow_right) / dx + lam[i];
        if i > 0 {
            lower[i] = (alpha[i - 1] + beta[i - 1]) / dx;
        }
        if i + 1 < m {
            upper[i] = (alpha[i + 1] - beta[i + 1]) / dx;
        }
    }
    OperatorRows { lower, diag, upper, max_speed }
}

/// Crank-Nicolson solution of `d/dt u = 1/2 dxx(sigma^2 u) - dx(b u) +
/// Lambda u` on a uniform grid with no-flux boundaries.
///
/// Coefficients that read the solution (pointwise or convolution coupling,
/// value- or gradient-dependent `Lambda`) are evaluated on the start-of-step
/// solution, so the scheme is linearly implicit with first-order lag error
/// in the nonlinearity. `Lambda` is clamped at the problem's cap, matching
/// what the particle weights integrate.
///
/// Snapshots are emitted at the requested times; the last one sets the
/// horizon. A drift too fast for the grid (`dt |b| > dx`) is refused with a
/// workable step suggestion rather than integrated into garbage.
pub fn fd_solve(
    spec: &ProblemSpec,
    u0: &[f64],
    grid: &[f64],
    dt: f64,
    snapshot_times: &[f64],
) -> Result<Vec<DensitySnapshot>> {
    if spec.dim != 1 {
        return Err(OracleError::UnsupportedDimension(spec.dim));
    }
    let dx = uniform_spacing(grid)?;
    if u0.len() != grid.len() {
        return Err(OracleError::LengthMismatch { expected: grid.len(), got: u0.len() });
    }
    if let Some(i) = u0.iter().position(|v| !v.is_finite()) {
        return Err(OracleError::BadInitialData(i));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(OracleError::BadTimeStep(dt));
    }
    let snap_steps = snapshot_steps(snapshot_times, dt)?;
    let total_steps = *snap_steps.last().expect("nonempty by construction");

    let m = grid.len();
    let mut u = u0.to_vec();
    let mut out = Vec::with_capacity(snap_steps.len());
    let mut next_snap = 0;
    let mut emit = |k: usize, u: &[f64], next_snap: &mut usize| -> Result<()> {
        if *next_snap < snap_steps.len() && snap_steps[*next_snap] == k {
            let t = k as f64 * dt;
            let mass = trapezoid(grid, u);
            out.push(DensitySnapshot::from_grid_solution(t, grid.to_vec(), u.to_vec(), mass)?);
            *next_snap += 1;
        }
        Ok(())
    };
    emit(0, &u, &mut next_snap)?;

    let half = 0.5 * dt;
    for k in 0..total_steps {
        let t = k as f64 * dt;
        let rows = flux_operator(spec, t, grid, &u, dx);
        if dt * rows.max_speed > dx {
            return Err(OracleError::Instability {
                step: k,
                suggested_dt: 0.5 * dx / rows.max_speed,
            });
        }
        let mut rhs = vec![0.0; m];
        let mut sub = vec![0.0; m];
        let mut diag = vec![0.0; m];
        let mut sup = vec![0.0; m];
        for i in 0..m {
            let mut lu = rows.diag[i] * u[i];
            if i > 0 {
                lu += rows.lower[i] * u[i - 1];
            }
            if i + 1 < m {
                lu += rows.upper[i] * u[i + 1];
            }
            rhs[i] = u[i] + half * lu;
            sub[i] = -half * rows.lower[i];
            diag[i] = 1.0 - half * rows.diag[i];
            sup[i] = -half * rows.upper[i];
        }
        u = thomas(&sub, &diag, &sup, &rhs);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Instability { step: k, suggested_dt: 0.5 * dt });
        }
        emit(k + 1, &u, &mut next_snap)?;
    }
    Ok(out)
}

/// Exact solution of `d/dt u = (nu^2/2) dxx u - u dx u` at time `t > 0`
/// by the logarithmic substitution that linearizes the equation to heat
/// flow. With `U0` an antiderivative of the initial profile and
///
/// ```text
///     G(x, y) = U0(y) + (x - y)^2 / (2 t)
/// ```
///
/// the solution is the ratio of two heat-kernel integrals,
///
/// ```text
///     u(t, x) = [ integral ((x - y)/t) exp(-G/nu^2) dy ]
///             / [ integral            exp(-G/nu^2) dy ].
/// ```
///
/// Both integrands are shifted by `min G` before exponentiation, so the
/// ratio is overflow-free for any profile scale. Integration runs over a
/// window sized from the observed growth of `U0` plus nine diffusion
/// widths `nu sqrt(t)`; every value is recomputed on a 1.5x window and a
/// disagreement beyond 1e-6 (relative) reports divergence instead of a
/// silently wrong number, as does an integrand whose minimum escapes the
/// scan window (initial data growing too fast for the quadratic term).
pub fn cole_hopf_burgers<F>(nu: f64, u0_antideriv: F, t: f64, grid: &[f64]) -> Result<DensitySnapshot>
where
    F: Fn(f64) -> f64 + Sync,
{
    if !(nu > 0.0) || !nu.is_finite() {
        return Err(OracleError::BadParameter {
            name: "nu",
            reason: format!("must be positive and finite, got {nu}"),
        });
    }
    if !(t > 0.0) || !t.is_finite() {
        return Err(OracleError::BadParameter {
            name: "t",
            reason: format!("must be positive and finite, got {t}"),
        });
    }
    if grid.is_empty() {
        return Err(OracleError::GridTooSmall { needed: 1, got: 0 });
    }
    for i in 1..grid.len() {
        if !(grid[i] > grid[i - 1]) {
            return Err(OracleError::NonUniformGrid { index: i });
        }
    }

    let nu2 = nu * nu;
    let width = nu * t.sqrt();

    // Largest |u0| observed over the padded grid span; bounds how far the
    // stationary point of G can sit from x.
    let pad = 12.0 * width + 1.0;
    let lo = grid[0] - pad;
    let hi = grid[grid.len() - 1] + pad;
    let samples = 512;
    let mut slope_max = 0.0f64;
    let dy = (hi - lo) / samples as f64;
    let mut prev = u0_antideriv(lo);
    for k in 1..=samples {
        let y = lo + k as f64 * dy;
        let cur = u0_antideriv(y);
        slope_max = slope_max.max(((cur - prev) / dy).abs());
        prev = cur;
    }
    let base_window = t * slope_max + 12.0 * width + 1.0;

    let value_at = |x: f64, window: f64| -> Result<f64> {
        let g_of = |y: f64| u0_antideriv(y) + (x - y) * (x - y) / (2.0 * t);
        // Locate min G on a coarse scan, then refine one level. The shift
        // only needs to be near the minimum, not exact.
        let n_scan = 1024;
        let step = 2.0 * window / n_scan as f64;
        let mut best_k = 0;
        let mut best_g = f64::INFINITY;
        for k in 0..=n_scan {
            let g = g_of(x - window + k as f64 * step);
            if g < best_g {
                best_g = g;
                best_k = k;
            }
        }
        if best_k == 0 || best_k == n_scan {
            // The integrand keeps growing toward the window edge: no
            // quadratic confinement, the integrals do not exist.
            return Err(OracleError::QuadratureDiverged { x, delta: f64::INFINITY });
        }
        let center = x - window + best_k as f64 * step;
        let mut g_min = best_g;
        for k in 0..=64 {
            let g = g_of(center - step + k as f64 * step / 32.0);
            g_min = g_min.min(g);
        }

        // Panel-wise adaptive quadrature: panels no wider than half the
        // diffusion width, so the bump cannot slip between sample points.
        let a = x - window;
        let b = x + window;
        let panel = (0.5 * width).max((b - a) / 4096.0);
        let n_panels = ((b - a) / panel).ceil() as usize;
        let den_tol = 1e-13 * (1.0 + width);
        let num_tol = den_tol * (1.0 + window / t);
        let mut den = 0.0;
        let mut num = 0.0;
        for p in 0..n_panels {
            let pa = a + (b - a) * p as f64 / n_panels as f64;
            let pb = a + (b - a) * (p + 1) as f64 / n_panels as f64;
            den += adaptive_simpson(|y| (-(g_of(y) - g_min) / nu2).exp(), pa, pb, den_tol, 18);
            num += adaptive_simpson(
                |y| (x - y) / t * (-(g_of(y) - g_min) / nu2).exp(),
                pa,
                pb,
                num_tol,
                18,
            );
        }
        Ok(num / den)
    };

    let results: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&x| {
            let narrow = value_at(x, base_window)?;
            let wide = value_at(x, 1.5 * base_window)?;
            let delta = (narrow - wide).abs();
            if delta > 1e-6 * (1.0 + narrow.abs()) {
                return Err(OracleError::QuadratureDiverged { x, delta });
            }
            Ok(wide)
        })
        .collect();
    let mut values = Vec::with_capacity(grid.len());
    for r in results {
        values.push(r?);
    }
    let mass = trapezoid(grid, &values);
    Ok(DensitySnapshot::from_grid_solution(t, grid.to_vec(), values, mass)?)
}

/// Value function and optimal feedback of the quadratic-Hamiltonian
/// control problem, on a grid.
///
/// `v[j]` and `alpha[j]` are rows over `grid` at control time `times[j]`.
#[derive(Clone, Debug)]
pub struct HjbSolution {
    pub grid: Vec<f64>,
    pub times: Vec<f64>,
    pub v: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
}

/// Solves the reversed-time equation
///
/// ```text
///     d/ds u = 1/4 (dx u)^2 + (sigma^2/2) dxx u + D(s) dx u - h(x),
///     u(0, .) = g
/// ```
///
/// forward on `[0, horizon]` and reports the value function
/// `v(t, .) = u(horizon - t, .)` together with the optimal feedback
/// `alpha(t, .) = D + 1/2 dx v(t, .)` at the requested control times.
///
/// Diffusion and linear advection are Crank-Nicolson; the squared-gradient
/// source and `h` are explicit on the start-of-step solution. Boundaries
/// are reflecting (mirror). `d_of_t` is read on the reversed clock `s`;
/// the feedback rows use `d_of_t(horizon - t)`.
pub fn hjb_fd_solve(
    sigma: f64,
    d_of_t: impl Fn(f64) -> f64,
    h: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    grid: &[f64],
    dt: f64,
    horizon: f64,
    v_times: &[f64],
) -> Result<HjbSolution> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(OracleError::BadParameter {
            name: "sigma",
            reason: format!("must be positive and finite, got {sigma}"),
        });
    }
    let dx = uniform_spacing(grid)?;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(OracleError::BadTimeStep(dt));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(OracleError::BadParameter {
            name: "horizon",
            reason: format!("must be positive and finite, got {horizon}"),
        });
    }
    let steps = step_index(horizon, dt).ok_or(OracleError::BadTimeStep(dt))?;
    if steps == 0 {
        return Err(OracleError::BadTimeStep(dt));
    }
    if v_times.is_empty() {
        return Err(OracleError::BadParameter {
            name: "v_times",
            reason: "need at least one report time".into(),
        });
    }
    // Control times map to reversed-clock steps k = steps - t/dt.
    let mut emit_steps: Vec<(usize, usize)> = Vec::with_capacity(v_times.len());
    for (j, &tv) in v_times.iter().enumerate() {
        if j > 0 && tv <= v_times[j - 1] {
            return Err(OracleError::BadSnapshotTime(tv));
        }
        let back = step_index(tv, dt).ok_or(OracleError::BadSnapshotTime(tv))?;
        if back > steps {
            return Err(OracleError::BadSnapshotTime(tv));
        }
        emit_steps.push((steps - back, j));
    }
    emit_steps.sort_unstable();

    let m = grid.len();
    let h_vals: Vec<f64> = grid.iter().map(|&x| h(x)).collect();
    let mut u: Vec<f64> = grid.iter().map(|&x| g(x)).collect();
    if let Some(i) = u.iter().chain(h_vals.iter()).position(|v| !v.is_finite()) {
        return Err(OracleError::BadInitialData(i % m));
    }

    // Mirror-boundary gradient: zero at both ends.
    let mirror_grad = |u: &[f64]| -> Vec<f64> {
        let mut gr = vec![0.0; m];
        for i in 1..m - 1 {
            gr[i] = (u[i + 1] - u[i - 1]) / (2.0 * dx);
        }
        gr
    };

    let mut rows: Vec<Option<Vec<f64>>> = vec![None; v_times.len()];
    let mut pending = emit_steps.iter().peekable();
    while let Some(&&(k, j)) = pending.peek() {
        if k == 0 {
            rows[j] = Some(u.clone());
            pending.next();
        } else {
            break;
        }
    }

    let a2 = sigma * sigma;
    let pc = a2 / (2.0 * dx * dx);
    let half = 0.5 * dt;
    for k in 0..steps {
        let s = k as f64 * dt;
        let grad = mirror_grad(&u);
        let speed = 0.5 * grad.iter().fold(0.0f64, |acc, g| acc.max(g.abs()));
        if dt * speed > dx {
            return Err(OracleError::Instability { step: k, suggested_dt: 0.5 * dx / speed });
        }
        let dmid = d_of_t(s + half);
        let qc = dmid / (2.0 * dx);
        let mut sub = vec![0.0; m];
        let diag = vec![-2.0 * pc; m];
        let mut sup = vec![0.0; m];
        for i in 1..m - 1 {
            sub[i] = pc - qc;
            sup[i] = pc + qc;
        }
        sup[0] = 2.0 * pc;
        sub[m - 1] = 2.0 * pc;

        let mut rhs = vec![0.0; m];
        for i in 0..m {
            let mut au = diag[i] * u[i];
            if i > 0 {
                au += sub[i] * u[i - 1];
            }
            if i + 1 < m {
                au += sup[i] * u[i + 1];
            }
            rhs[i] = u[i] + half * au + dt * (0.25 * grad[i] * grad[i] - h_vals[i]);
        }
        let mut lsub = vec![0.0; m];
        let mut ldiag = vec![0.0; m];
        let mut lsup = vec![0.0; m];
        for i in 0..m {
            lsub[i] = -half * sub[i];
            ldiag[i] = 1.0 - half * diag[i];
            lsup[i] = -half * sup[i];
        }
        u = thomas(&lsub, &ldiag, &lsup, &rhs);
        if u.iter().any(|v| !v.is_finite()) {
            return Err(OracleError::Instability { step: k, suggested_dt: 0.5 * dt });
        }
        while let Some(&&(ke, j)) = pending.peek() {
            if ke == k + 1 {
                rows[j] = Some(u.clone());
                pending.next();
            } else {
                break;
            }
        }
    }

    let mut v = Vec::with_capacity(v_times.len());
    let mut alpha = Vec::with_capacity(v_times.len());
    for (j, &tv) in v_times.iter().enumerate() {
        let row = rows[j].take().expect("every report time resolved to a step");
        let d_now = d_of_t(horizon - tv);
        let grad = grid_gradient(&row, dx);
        alpha.push(grad.iter().map(|gr| d_now + 0.5 * gr).collect());
        v.push(row);
    }
    Ok(HjbSolution { grid: grid.to_vec(), times: v_times.to_vec(), v, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::builtin_problem;
    use crate::stats::{gaussian_pdf, normal_cdf};
    use std::collections::BTreeMap;

    fn uniform_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
        let step = (max - min) / (points - 1) as f64;
        (0..points).map(|i| min + i as f64 * step).collect()
    }

    fn params(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|&(k, v)| (k.to_string(), v)).collect()
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
    }

    #[test]
    fn heat_matches_gaussian_and_conserves_mass() {
        let spec = builtin_problem("linear_fp", &params(&[("sigma", 1.0), ("b", 0.0)])).unwrap();
        let grid = uniform_grid(-9.0, 9.0, 2000);
        let sd0 = 0.5;
        let u0: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, sd0)).collect();
        let snaps = fd_solve(&spec, &u0, &grid, 2e-4, &[0.0, 0.5]).unwrap();
        assert_eq!(snaps.len(), 2);

        // Variance grows by sigma^2 t.
        let sd_t = (sd0 * sd0 + 0.5f64).sqrt();
        let exact: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, sd_t)).collect();
        let err = linf(snaps[1].values(), &exact);
        assert!(err <= 1e-4, "heat solution off by {err:.3e}");

        // Flux form telescopes: only roundoff moves the mass.
        let drift = (snaps[1].mass() - snaps[0].mass()).abs();
        assert!(drift <= 1e-10, "mass drifted by {drift:.3e}");
    }

    #[test]
    fn zero_initial_data_stays_zero() {
        let spec = builtin_problem("burgers_flux", &params(&[("nu", 1.0)])).unwrap();
        let grid = uniform_grid(-3.0, 3.0, 401);
        let u0 = vec![0.0; grid.len()];
        let snaps = fd_solve(&spec, &u0, &grid, 1e-3, &[0.5]).unwrap();
        assert!(snaps[0].values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_sink_decays_mass_exponentially() {
        let spec =
            builtin_problem("linear_fp", &params(&[("sigma", 1.0), ("lambda_const", -1.0)]))
                .unwrap();
        let grid = uniform_grid(-10.0, 10.0, 1501);
        let u0: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, 0.5)).collect();
        let snaps = fd_solve(&spec, &u0, &grid, 1e-3, &[1.0]).unwrap();
        let err = (snaps[0].mass() - (-1.0f64).exp()).abs();
        assert!(err <= 1e-4, "mass off by {err:.3e}");
    }

    #[test]
    fn nonuniform_grid_rejected() {
        let spec = builtin_problem("linear_fp", &params(&[])).unwrap();
        let grid = [0.0, 0.1, 0.3, 0.4];
        let got = fd_solve(&spec, &[0.0; 4], &grid, 1e-3, &[0.1]);
        assert!(matches!(got, Err(OracleError::NonUniformGrid { index: 2 })));
    }

    #[test]
    fn fast_drift_refused_with_suggestion() {
        let spec = builtin_problem("linear_fp", &params(&[("sigma", 1.0), ("b", 50.0)])).unwrap();
        let grid = uniform_grid(-1.0, 1.0, 201);
        let u0 = vec![1.0; grid.len()];
        match fd_solve(&spec, &u0, &grid, 0.01, &[0.1]) {
            Err(OracleError::Instability { step: 0, suggested_dt }) => {
                assert!(suggested_dt > 0.0 && suggested_dt < 0.01);
            }
            other => panic!("expected instability refusal, got {other:?}"),
        }
    }

    #[test]
    fn off_grid_snapshot_time_rejected() {
        let spec = builtin_problem("linear_fp", &params(&[])).unwrap();
        let grid = uniform_grid(-1.0, 1.0, 11);
        let got = fd_solve(&spec, &[0.0; 11], &grid, 0.1, &[0.25]);
        assert!(matches!(got, Err(OracleError::BadSnapshotTime(t)) if t == 0.25));
    }

    #[test]
    fn cole_hopf_constant_profile_is_stationary() {
        // u0 = c travels into itself: G completes the square around
        // y = x - c t and the ratio of integrals is exactly c.
        let c = 0.7;
        let grid = uniform_grid(-2.0, 2.0, 101);
        let snap = cole_hopf_burgers(0.8, |y| c * y, 0.3, &grid).unwrap();
        for &v in snap.values() {
            assert!((v - c).abs() <= 1e-6, "constant profile drifted to {v}");
        }
    }

    #[test]
    fn cole_hopf_agrees_with_flux_form_fd() {
        let nu = 1.0;
        let sd0 = 0.5;
        let t = 0.5;
        let grid = uniform_grid(-9.0, 9.0, 2000);
        let u0: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, sd0)).collect();
        let spec = builtin_problem("burgers_flux", &params(&[("nu", nu)])).unwrap();
        let fd = fd_solve(&spec, &u0, &grid, 2.5e-4, &[t]).unwrap();
        let ch = cole_hopf_burgers(nu, |y| normal_cdf(y / sd0), t, &grid).unwrap();
        let err = linf(fd[0].values(), ch.values());
        assert!(err <= 1e-3, "flux-form solver vs quadrature: {err:.3e}");
    }

    #[test]
    fn cole_hopf_agrees_with_zero_order_form_fd() {
        // Same equation routed through the gradient-dependent zero-order
        // coefficient instead of the flux; different discretization of the
        // same nonlinearity.
        let nu = 1.0;
        let sd0 = 0.5;
        let t = 0.5;
        let grid = uniform_grid(-9.0, 9.0, 2000);
        let u0: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, sd0)).collect();
        let spec = builtin_problem("burgers_fk", &params(&[("nu", nu)])).unwrap();
        let fd = fd_solve(&spec, &u0, &grid, 2.5e-4, &[t]).unwrap();
        let ch = cole_hopf_burgers(nu, |y| normal_cdf(y / sd0), t, &grid).unwrap();
        let err = linf(fd[0].values(), ch.values());
        assert!(err <= 2e-3, "zero-order solver vs quadrature: {err:.3e}");
    }

    #[test]
    fn cole_hopf_large_viscosity_approaches_heat_flow() {
        // The advective term is O(u / nu^2) relative to diffusion; at
        // nu = 8 the solution is within 1e-3 of plain heat evolution.
        let nu = 8.0;
        let sd0 = 0.5;
        let t = 0.5;
        let grid = uniform_grid(-15.0, 15.0, 301);
        let snap = cole_hopf_burgers(nu, |y| normal_cdf(y / sd0), t, &grid).unwrap();
        let sd_t = (sd0 * sd0 + nu * nu * t).sqrt();
        let heat: Vec<f64> = grid.iter().map(|&x| gaussian_pdf(x, 0.0, sd_t)).collect();
        let err = linf(snap.values(), &heat);
        assert!(err <= 1e-3, "heat limit violated: {err:.3e}");
    }

    #[test]
    fn cole_hopf_reports_divergence_for_exploding_data() {
        // U0 = -y^2 decays faster than the quadratic term grows at t = 1:
        // the heat-kernel integrals do not exist.
        let grid = [0.0, 0.5, 1.0];
        match cole_hopf_burgers(1.0, |y| -(y * y), 1.0, &grid) {
            Err(OracleError::QuadratureDiverged { .. }) => {}
            other => panic!("expected divergence report, got {other:?}"),
        }
    }

    #[test]
    fn hjb_constant_data_is_stationary() {
        // g constant, h = 0: every term of the equation vanishes, v stays
        // flat and the feedback reduces to the drift coefficient.
        let grid = uniform_grid(-4.0, 4.0, 401);
        let sol = hjb_fd_solve(
            1.0,
            |_t| 0.3,
            |_x| 0.0,
            |_x| 2.0,
            &grid,
            1e-3,
            0.5,
            &[0.0, 0.25, 0.5],
        )
        .unwrap();
        for row in &sol.v {
            for &v in row {
                assert!((v - 2.0).abs() <= 1e-9, "flat solution drifted to {v}");
            }
        }
        for row in &sol.alpha {
            for &a in row {
                assert!((a - 0.3).abs() <= 1e-8, "feedback drifted to {a}");
            }
        }
    }

    #[test]
    fn hjb_symmetric_problem_has_zero_feedback_at_center() {
        let grid = uniform_grid(-6.0, 6.0, 601);
        let sol = hjb_fd_solve(
            1.0,
            |_t| 0.0,
            |x| x * x,
            |x| gaussian_pdf(x, 0.0, 1.0),
            &grid,
            2.5e-4,
            0.5,
            &[0.0, 0.5],
        )
        .unwrap();
        let center = grid.len() / 2;
        assert_eq!(sol.grid[center], 0.0);
        for row in &sol.alpha {
            assert!(row[center].abs() <= 1e-9, "asymmetry at center: {}", row[center]);
        }
    }

    #[test]
    fn hjb_matches_exponential_linearization() {
        // exp(u / (2 sigma^2)) turns the squared-gradient equation into a
        // linear one with sink h / (2 sigma^2); solving that with the flux
        // solver and taking logs must agree away from the boundaries
        // (the two schemes close the window differently).
        use crate::problems::ProblemSpec;
        use std::sync::Arc;

        let sigma = 1.0f64;
        let dcoef = 0.1;
        let horizon = 0.5;
        let grid = uniform_grid(-6.0, 6.0, 1201);
        let dt = 1e-4;

        let sol = hjb_fd_solve(
            sigma,
            |_t| dcoef,
            |x| x * x,
            |x| gaussian_pdf(x, 0.0, 1.0),
            &grid,
            dt,
            horizon,
            &[0.0],
        )
        .unwrap();

        let scale = 2.0 * sigma * sigma;
        let spec = ProblemSpec::new("linearized", 1, horizon, Arc::new(move |_t, _x, _v| sigma))
            .unwrap()
            .with_drift(Arc::new(move |_t, _x, _v, out| out[0] = -dcoef))
            .with_lambda(
                Arc::new(move |_t, x: &[f64], _u, _g| -(x[0] * x[0]) / scale),
                false,
                false,
            );
        let w0: Vec<f64> =
            grid.iter().map(|&x| (gaussian_pdf(x, 0.0, 1.0) / scale).exp()).collect();
        let w = fd_solve(&spec, &w0, &grid, dt, &[horizon]).unwrap();
        let u_lin: Vec<f64> = w[0].values().iter().map(|&wv| scale * wv.ln()).collect();

        let mut err = 0.0f64;
        for (i, &x) in grid.iter().enumerate() {
            if x.abs() <= 3.0 {
                err = err.max((sol.v[0][i] - u_lin[i]).abs());
            }
        }
        assert!(err <= 1e-3, "linearization cross-check: {err:.3e}");
    }

    /// Reference instance whose t = 0 value function is pinned as a
    /// fixture: quadratic running cost, constant drift, unit noise,
    /// standard normal terminal weight.
    fn fixture_solution() -> HjbSolution {
        let grid = uniform_grid(-6.0, 6.0, 1201);
        hjb_fd_solve(
            1.0,
            |_t| 0.1,
            |x| x * x,
            |x| gaussian_pdf(x, 0.0, 1.0),
            &grid,
            1e-4,
            0.5,
            &[0.0],
        )
        .unwrap()
    }

    fn fixture_path() -> std::path::PathBuf {
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/hjb_v0.csv")
    }

    /// Regenerates the pinned value function. Run explicitly
    /// (`cargo test -- --ignored regenerate_hjb_fixture`) after a
    /// deliberate change to the solver, then review the diff.
    #[test]
    #[ignore]
    fn regenerate_hjb_fixture() {
        let sol = fixture_solution();
        let mut out = String::from("x,v\n");
        for (x, v) in sol.grid.iter().zip(&sol.v[0]) {
            out.push_str(&format!("{x},{v}\n"));
        }
        std::fs::write(fixture_path(), out).unwrap();
    }

    #[test]
    fn hjb_fixture_regression() {
        let text = std::fs::read_to_string(fixture_path()).expect("fixture present in repo");
        let mut xs = Vec::new();
        let mut vs = Vec::new();
        for line in text.lines().skip(1) {
            let (x, v) = line.split_once(',').expect("two columns");
            xs.push(x.parse::<f64>().unwrap());
            vs.push(v.parse::<f64>().unwrap());
        }
        let sol = fixture_solution();
        assert_eq!(xs.len(), sol.grid.len());
        let err = linf(&sol.v[0], &vs);
        assert!(err <= 1e-9, "fixture drifted by {err:.3e}");
    }
}
