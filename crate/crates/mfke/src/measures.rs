//! Weighted particle clouds and the measure operations built on them.
//!
//! A solution estimate at time `t` is the weighted empirical measure
//!
//! ```text
//!     u(t, dx)  ~  (1/N) sum_j  w_j  K_eps(x - xi_j) dx
//! ```
//!
//! where `K_eps(x) = eps^-d K(x/eps)` is a mollifier and the weights `w_j`
//! carry the accumulated Feynman-Kac factor. Weights are stored in log space
//! so that long runs with strongly negative integrands underflow gracefully;
//! they are exposed as strictly positive reals.
//!
//! The module provides exact kernel density evaluation (`kde_density`,
//! `kde_gradient`), a binned evaluator for the per-step interaction loop
//! ([`BinnedKde1d`]), grid snapshots with CSV round-tripping
//! ([`DensitySnapshot`]), and the exact 1-d Wasserstein-1 distance between
//! weighted atom clouds ([`wasserstein1`]).

use rayon::prelude::*;
use std::io::{BufRead, Write};
use thiserror::Error;

use crate::stats::INV_SQRT_2PI;

#[derive(Debug, Error)]
pub enum MeasuresError {
    #[error("ensemble is empty")]
    EmptyEnsemble,
    #[error("bandwidth must be positive and finite, got {0}")]
    BadBandwidth(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("position buffer length {len} is not a multiple of dimension {dim}")]
    RaggedPositions { len: usize, dim: usize },
    #[error("expected {expected} entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("weight at index {0} is not strictly positive")]
    NonPositiveWeight(usize),
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error("grid must be strictly increasing (violation at index {0})")]
    GridNotIncreasing(usize),
    #[error("operation requires dimension 1, got {0}")]
    UnsupportedDimension(usize),
    #[error("kernel dimension {kernel} does not match data dimension {data}")]
    DimensionMismatch { kernel: usize, data: usize },
    #[error("binned evaluator would need {0} nodes; bandwidth too small for the spread")]
    BinnedGridTooLarge(usize),
    #[error("snapshot csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, MeasuresError>;

// ---------------------------------------------------------------------------
// Mollifiers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KernelFamily {
    /// Standard Gaussian; smooth, unbounded support.
    Gaussian,
    /// Epanechnikov (parabolic); compact support `[-eps, eps]` per coordinate.
    Epanechnikov,
}

/// A scaled smoothing kernel `K_eps(x) = eps^-d K(x/eps)`.
///
/// In several dimensions both families act as products over coordinates, so
/// the kernel always integrates to one.
#[derive(Clone, Copy, Debug)]
pub struct Mollifier {
    family: KernelFamily,
    bandwidth: f64,
    dim: usize,
}

impl Mollifier {
    pub fn new(family: KernelFamily, bandwidth: f64, dim: usize) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(MeasuresError::BadBandwidth(bandwidth));
        }
        if dim == 0 {
            return Err(MeasuresError::ZeroDimension);
        }
        Ok(Mollifier { family, bandwidth, dim })
    }

    pub fn gaussian(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, bandwidth, dim)
    }

    pub fn epanechnikov(bandwidth: f64, dim: usize) -> Result<Self> {
        Self::new(KernelFamily::Epanechnikov, bandwidth, dim)
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Radius beyond which the kernel is treated as zero. Exact for
    /// Epanechnikov; for the Gaussian, `8 eps` truncates a relative tail mass
    /// of about 1e-15, far below every tolerance used in this crate.
    pub fn support_radius(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian => 8.0 * self.bandwidth,
            KernelFamily::Epanechnikov => self.bandwidth,
        }
    }

    /// One-dimensional kernel value at offset `x` (i.e. query minus atom).
    #[inline]
    pub fn density1(&self, x: f64) -> f64 {
        let eps = self.bandwidth;
        let u = x / eps;
        match self.family {
            KernelFamily::Gaussian => INV_SQRT_2PI / eps * (-0.5 * u * u).exp(),
            KernelFamily::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u) / eps
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative of [`Self::density1`]. The Epanechnikov kernel has a kink
    /// at `|x| = eps`; the derivative there takes the outer value, zero.
    #[inline]
    pub fn grad1(&self, x: f64) -> f64 {
        let eps = self.bandwidth;
        let u = x / eps;
        match self.family {
            KernelFamily::Gaussian => -u / eps * (INV_SQRT_2PI / eps) * (-0.5 * u * u).exp(),
            KernelFamily::Epanechnikov => {
                if u.abs() < 1.0 {
                    -1.5 * u / (eps * eps)
                } else {
                    0.0
                }
            }
        }
    }

    /// Kernel value at a d-dimensional offset.
    pub fn density(&self, offset: &[f64]) -> f64 {
        debug_assert_eq!(offset.len(), self.dim);
        offset.iter().map(|&c| self.density1(c)).product()
    }

    /// Kernel gradient at a d-dimensional offset, written into `out`.
    pub fn gradient_into(&self, offset: &[f64], out: &mut [f64]) {
        debug_assert_eq!(offset.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        // Product rule over coordinates; factors are cached per coordinate.
        let vals: Vec<f64> = offset.iter().map(|&c| self.density1(c)).collect();
        for k in 0..self.dim {
            let mut g = self.grad1(offset[k]);
            for (j, &v) in vals.iter().enumerate() {
                if j != k {
                    g *= v;
                }
            }
            out[k] = g;
        }
    }
}

// ---------------------------------------------------------------------------
// Particle ensembles
// ---------------------------------------------------------------------------

/// A weighted particle cloud at a fixed time.
///
/// Positions are stored flat, `dim` entries per particle. Weights live in
/// log space; `weights()` exposes `exp(log w)`, which is strictly positive
/// by construction.
#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<f64>,
    log_weights: Vec<f64>,
    time: f64,
}

impl ParticleEnsemble {
    /// Cloud with unit weights.
    pub fn new(dim: usize, positions: Vec<f64>, time: f64) -> Result<Self> {
        let n = Self::check_positions(dim, &positions)?;
        Ok(ParticleEnsemble { dim, positions, log_weights: vec![0.0; n], time })
    }

    pub fn with_log_weights(
        dim: usize,
        positions: Vec<f64>,
        log_weights: Vec<f64>,
        time: f64,
    ) -> Result<Self> {
        let n = Self::check_positions(dim, &positions)?;
        if log_weights.len() != n {
            return Err(MeasuresError::LengthMismatch { expected: n, got: log_weights.len() });
        }
        if let Some(i) = log_weights.iter().position(|w| !w.is_finite()) {
            return Err(MeasuresError::NonFinite(i));
        }
        Ok(ParticleEnsemble { dim, positions, log_weights, time })
    }

    pub fn with_weights(
        dim: usize,
        positions: Vec<f64>,
        weights: &[f64],
        time: f64,
    ) -> Result<Self> {
        if let Some(i) = weights.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(MeasuresError::NonPositiveWeight(i));
        }
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Self::with_log_weights(dim, positions, log_weights, time)
    }

    fn check_positions(dim: usize, positions: &[f64]) -> Result<usize> {
        if dim == 0 {
            return Err(MeasuresError::ZeroDimension);
        }
        if positions.is_empty() {
            return Err(MeasuresError::EmptyEnsemble);
        }
        if positions.len() % dim != 0 {
            return Err(MeasuresError::RaggedPositions { len: positions.len(), dim });
        }
        if let Some(i) = positions.iter().position(|x| !x.is_finite()) {
            return Err(MeasuresError::NonFinite(i));
        }
        Ok(positions.len() / dim)
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub(crate) fn positions_mut(&mut self) -> &mut [f64] {
        &mut self.positions
    }

    pub(crate) fn log_weights_mut(&mut self) -> &mut [f64] {
        &mut self.log_weights
    }

    pub(crate) fn set_time(&mut self, t: f64) {
        self.time = t;
    }

    /// Total mass `(1/N) sum_j w_j`.
    ///
    /// Computed with the largest log weight factored out. When every log
    /// weight is equal (conservative runs, or space-independent integrands)
    /// the inner sum adds exact ones and the result is `exp(log w)` with no
    /// accumulation error at all; this is what makes the exact mass
    /// identities of the engine hold bitwise.
    pub fn mean_weight(&self) -> f64 {
        let max_lw = self.log_weights.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for &lw in &self.log_weights {
            sum += (lw - max_lw).exp();
        }
        max_lw.exp() * (sum / self.len() as f64)
    }

    /// Weighted average `(1/N) sum_j w_j phi(xi_j)`, with the same
    /// max-shifted evaluation as [`Self::mean_weight`].
    pub fn test_functional<F: Fn(&[f64]) -> f64>(&self, phi: F) -> f64 {
        let max_lw = self.log_weights.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (j, &lw) in self.log_weights.iter().enumerate() {
            sum += (lw - max_lw).exp() * phi(self.position(j));
        }
        max_lw.exp() * (sum / self.len() as f64)
    }
}

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

/// Sorted view of a 1-d ensemble used by the windowed exact evaluator.
struct Sorted1d {
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl Sorted1d {
    fn build(ensemble: &ParticleEnsemble) -> Self {
        let mut idx: Vec<usize> = (0..ensemble.len()).collect();
        let pos = ensemble.positions();
        idx.sort_by(|&a, &b| pos[a].total_cmp(&pos[b]));
        let positions = idx.iter().map(|&j| pos[j]).collect();
        let weights = idx.iter().map(|&j| ensemble.log_weights[j].exp()).collect();
        Sorted1d { positions, weights }
    }

    /// Indices of atoms within `radius` of `q`.
    fn window(&self, q: f64, radius: f64) -> std::ops::Range<usize> {
        let lo = self.positions.partition_point(|&p| p < q - radius);
        let hi = self.positions.partition_point(|&p| p <= q + radius);
        lo..hi
    }
}

fn check_kde_args(
    ensemble: &ParticleEnsemble,
    kernel: &Mollifier,
    queries: &[f64],
) -> Result<usize> {
    if ensemble.is_empty() {
        return Err(MeasuresError::EmptyEnsemble);
    }
    if kernel.dim() != ensemble.dim() {
        return Err(MeasuresError::DimensionMismatch {
            kernel: kernel.dim(),
            data: ensemble.dim(),
        });
    }
    if queries.len() % ensemble.dim() != 0 {
        return Err(MeasuresError::RaggedPositions { len: queries.len(), dim: ensemble.dim() });
    }
    Ok(queries.len() / ensemble.dim())
}

/// Density estimate `(1/N) sum_j w_j K_eps(q - xi_j)` at each query point.
///
/// Queries are evaluated in parallel; within one query the atoms are summed
/// in a fixed (sorted) order, so the result does not depend on the thread
/// count. In one dimension atoms outside the kernel support radius are
/// skipped, which is exact for Epanechnikov and drops a relative tail of
/// ~1e-15 for the Gaussian.
pub fn kde_density(
    ensemble: &ParticleEnsemble,
    kernel: &Mollifier,
    queries: &[f64],
) -> Result<Vec<f64>> {
    let m = check_kde_args(ensemble, kernel, queries)?;
    let inv_n = 1.0 / ensemble.len() as f64;
    if ensemble.dim() == 1 {
        let sorted = Sorted1d::build(ensemble);
        let radius = kernel.support_radius();
        Ok((0..m)
            .into_par_iter()
            .map(|qi| {
                let q = queries[qi];
                let mut acc = 0.0;
                for j in sorted.window(q, radius) {
                    acc += sorted.weights[j] * kernel.density1(q - sorted.positions[j]);
                }
                acc * inv_n
            })
            .collect())
    } else {
        let d = ensemble.dim();
        let weights = ensemble.weights();
        Ok((0..m)
            .into_par_iter()
            .map(|qi| {
                let q = &queries[qi * d..(qi + 1) * d];
                let mut acc = 0.0;
                let mut offset = vec![0.0; d];
                for j in 0..ensemble.len() {
                    let xi = ensemble.position(j);
                    for k in 0..d {
                        offset[k] = q[k] - xi[k];
                    }
                    acc += weights[j] * kernel.density(&offset);
                }
                acc * inv_n
            })
            .collect())
    }
}

/// Gradient of the density estimate at each query point (flat, `dim` entries
/// per query).
pub fn kde_gradient(
    ensemble: &ParticleEnsemble,
    kernel: &Mollifier,
    queries: &[f64],
) -> Result<Vec<f64>> {
    let m = check_kde_args(ensemble, kernel, queries)?;
    let inv_n = 1.0 / ensemble.len() as f64;
    if ensemble.dim() == 1 {
        let sorted = Sorted1d::build(ensemble);
        let radius = kernel.support_radius();
        Ok((0..m)
            .into_par_iter()
            .map(|qi| {
                let q = queries[qi];
                let mut acc = 0.0;
                for j in sorted.window(q, radius) {
                    acc += sorted.weights[j] * kernel.grad1(q - sorted.positions[j]);
                }
                acc * inv_n
            })
            .collect())
    } else {
        let d = ensemble.dim();
        let weights = ensemble.weights();
        let flat: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|qi| {
                let q = &queries[qi * d..(qi + 1) * d];
                let mut acc = vec![0.0; d];
                let mut offset = vec![0.0; d];
                let mut grad = vec![0.0; d];
                for j in 0..ensemble.len() {
                    let xi = ensemble.position(j);
                    for k in 0..d {
                        offset[k] = q[k] - xi[k];
                    }
                    kernel.gradient_into(&offset, &mut grad);
                    for k in 0..d {
                        acc[k] += weights[j] * grad[k];
                    }
                }
                acc.iter_mut().for_each(|g| *g *= inv_n);
                acc
            })
            .collect();
        Ok(flat.into_iter().flatten().collect())
    }
}

// ---------------------------------------------------------------------------
// Binned evaluator (engine interaction loop)
// ---------------------------------------------------------------------------

/// Density and gradient tables on a fine auxiliary grid, queried by linear
/// interpolation.
///
/// The per-step interaction loop needs `u` (and possibly `du`) at every
/// particle position; the exact evaluator would cost `O(N^2)` per step. This
/// evaluator deposits the weights onto a grid with spacing `eps / cells`
/// (linear binning), convolves once with the tabulated kernel, and
/// interpolates. With the default 10 cells per bandwidth the relative error
/// is a few 1e-3, far below the statistical error of the cloud itself, and
/// every stage is a fixed-order loop, so results are independent of the
/// thread count.
pub struct BinnedKde1d {
    lo: f64,
    step: f64,
    density: Vec<f64>,
    gradient: Vec<f64>,
}

/// Hard cap on the auxiliary grid size; reached only when the bandwidth is
/// absurdly small for the cloud spread.
const MAX_BIN_NODES: usize = 1 << 23;

impl BinnedKde1d {
    pub fn new(
        positions: &[f64],
        weights: &[f64],
        kernel: &Mollifier,
        cells_per_bandwidth: usize,
    ) -> Result<Self> {
        if positions.is_empty() {
            return Err(MeasuresError::EmptyEnsemble);
        }
        if kernel.dim() != 1 {
            return Err(MeasuresError::UnsupportedDimension(kernel.dim()));
        }
        if positions.len() != weights.len() {
            return Err(MeasuresError::LengthMismatch {
                expected: positions.len(),
                got: weights.len(),
            });
        }
        let cells = cells_per_bandwidth.max(2);
        let step = kernel.bandwidth() / cells as f64;
        let radius = kernel.support_radius();
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in positions {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
        }
        let lo = min_x - radius - step;
        let hi = max_x + radius + step;
        let n_nodes = ((hi - lo) / step).ceil() as usize + 2;
        if n_nodes > MAX_BIN_NODES {
            return Err(MeasuresError::BinnedGridTooLarge(n_nodes));
        }

        // Linear binning: each atom splits its weight between the two
        // enclosing nodes. Sequential loop, deterministic order.
        let mut node_mass = vec![0.0; n_nodes];
        for (&x, &w) in positions.iter().zip(weights) {
            let s = (x - lo) / step;
            let i = s.floor() as usize;
            let frac = s - i as f64;
            node_mass[i] += w * (1.0 - frac);
            node_mass[i + 1] += w * frac;
        }

        // Tabulated kernel on node offsets.
        let w_cells = (radius / step).ceil() as i64;
        let k_tab: Vec<f64> = (-w_cells..=w_cells)
            .map(|o| kernel.density1(o as f64 * step))
            .collect();
        let g_tab: Vec<f64> = (-w_cells..=w_cells)
            .map(|o| kernel.grad1(o as f64 * step))
            .collect();

        let inv_n = 1.0 / positions.len() as f64;
        let pairs: Vec<(f64, f64)> = (0..n_nodes)
            .into_par_iter()
            .map(|i| {
                let mut d = 0.0;
                let mut g = 0.0;
                let lo_o = (-(w_cells)).max(i as i64 - (n_nodes as i64 - 1));
                let hi_o = w_cells.min(i as i64);
                let mut o = lo_o;
                while o <= hi_o {
                    let m = node_mass[(i as i64 - o) as usize];
                    let ti = (o + w_cells) as usize;
                    d += m * k_tab[ti];
                    g += m * g_tab[ti];
                    o += 1;
                }
                (d * inv_n, g * inv_n)
            })
            .collect();
        let density = pairs.iter().map(|p| p.0).collect();
        let gradient = pairs.iter().map(|p| p.1).collect();
        Ok(BinnedKde1d { lo, step, density, gradient })
    }

    #[inline]
    fn interp(&self, table: &[f64], x: f64) -> f64 {
        let s = (x - self.lo) / self.step;
        if s < 0.0 || s >= (table.len() - 1) as f64 {
            return 0.0;
        }
        let i = s.floor() as usize;
        let frac = s - i as f64;
        table[i] * (1.0 - frac) + table[i + 1] * frac
    }

    #[inline]
    pub fn density_at(&self, x: f64) -> f64 {
        self.interp(&self.density, x)
    }

    #[inline]
    pub fn gradient_at(&self, x: f64) -> f64 {
        self.interp(&self.gradient, x)
    }

    /// Largest node density; used as the reference scale for floors.
    pub fn peak(&self) -> f64 {
        self.density.iter().fold(0.0_f64, |a, &b| a.max(b))
    }
}

// ---------------------------------------------------------------------------
// Grid snapshots
// ---------------------------------------------------------------------------

/// A density tabulated on a strictly increasing 1-d grid, together with the
/// total mass carried by the particle weights at that time.
///
/// For non-conservative problems `values` integrates (approximately) to
/// `mass`; `normalize` splits the snapshot into a probability profile and
/// the scalar mass factor.
#[derive(Clone, Debug)]
pub struct DensitySnapshot {
    pub time: f64,
    grid: Vec<f64>,
    values: Vec<f64>,
    mass: f64,
}

impl DensitySnapshot {
    pub fn new(time: f64, grid: Vec<f64>, values: Vec<f64>, mass: f64) -> Result<Self> {
        if grid.is_empty() {
            return Err(MeasuresError::EmptyEnsemble);
        }
        if values.len() != grid.len() {
            return Err(MeasuresError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        for i in 1..grid.len() {
            if !(grid[i] > grid[i - 1]) {
                return Err(MeasuresError::GridNotIncreasing(i));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeasuresError::NonFinite(i));
        }
        if !(mass > 0.0) || !mass.is_finite() {
            return Err(MeasuresError::NonPositiveMass(mass));
        }
        Ok(DensitySnapshot { time, grid, values, mass })
    }

    /// Grid-solver snapshots may carry zero or signed values (linearized
    /// equations, value functions), so this constructor only requires the
    /// mass to be finite. `normalize` still refuses nonpositive mass.
    pub(crate) fn from_grid_solution(
        time: f64,
        grid: Vec<f64>,
        values: Vec<f64>,
        mass: f64,
    ) -> Result<Self> {
        if grid.is_empty() {
            return Err(MeasuresError::EmptyEnsemble);
        }
        if values.len() != grid.len() {
            return Err(MeasuresError::LengthMismatch { expected: grid.len(), got: values.len() });
        }
        for i in 1..grid.len() {
            if !(grid[i] > grid[i - 1]) {
                return Err(MeasuresError::GridNotIncreasing(i));
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeasuresError::NonFinite(i));
        }
        if !mass.is_finite() {
            return Err(MeasuresError::NonPositiveMass(mass));
        }
        Ok(DensitySnapshot { time, grid, values, mass })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// Trapezoid integral of the tabulated values over the grid.
    pub fn integral(&self) -> f64 {
        crate::quad::trapezoid(&self.grid, &self.values)
    }

    /// Splits off the mass factor: returns the snapshot with values divided
    /// by `mass` and mass set to one, together with the extracted factor.
    pub fn normalize(mut self) -> Result<(DensitySnapshot, f64)> {
        let m = self.mass;
        if !(m > 0.0) {
            return Err(MeasuresError::NonPositiveMass(m));
        }
        for v in &mut self.values {
            *v /= m;
        }
        self.mass = 1.0;
        Ok((self, m))
    }

    /// Writes `t,x,u,mass` rows. `f64` values print in shortest
    /// round-trip decimal form, so a parse of the output reproduces the
    /// exact bits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "t,x,u,mass")?;
        for (x, u) in self.grid.iter().zip(&self.values) {
            writeln!(out, "{},{},{},{}", self.time, x, u, self.mass)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate();
        let header = match lines.next() {
            Some((_, Ok(h))) => h,
            _ => return Err(MeasuresError::Csv("missing header".into())),
        };
        if header.trim() != "t,x,u,mass" {
            return Err(MeasuresError::Csv(format!("unexpected header `{header}`")));
        }
        let mut time = None;
        let mut mass = None;
        let mut grid = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| MeasuresError::Csv(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let mut next = |name: &str| -> Result<f64> {
                fields
                    .next()
                    .ok_or_else(|| {
                        MeasuresError::Csv(format!("line {}: missing {name}", lineno + 1))
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| MeasuresError::Csv(format!("line {}: {name}: {e}", lineno + 1)))
            };
            let t = next("t")?;
            let x = next("x")?;
            let u = next("u")?;
            let m = next("mass")?;
            match time {
                None => time = Some(t),
                Some(t0) if t0 == t => {}
                Some(t0) => {
                    return Err(MeasuresError::Csv(format!(
                        "line {}: time {t} differs from {t0}",
                        lineno + 1
                    )))
                }
            }
            match mass {
                None => mass = Some(m),
                Some(m0) if m0 == m => {}
                Some(m0) => {
                    return Err(MeasuresError::Csv(format!(
                        "line {}: mass {m} differs from {m0}",
                        lineno + 1
                    )))
                }
            }
            grid.push(x);
            values.push(u);
        }
        let time = time.ok_or_else(|| MeasuresError::Csv("no data rows".into()))?;
        let mass = mass.unwrap();
        DensitySnapshot::new(time, grid, values, mass)
    }
}

// ---------------------------------------------------------------------------
// Wasserstein-1 distance (dimension 1)
// ---------------------------------------------------------------------------

/// A finite weighted sample on the real line. Weights need not be
/// normalized; the distance below normalizes internally.
#[derive(Clone, Debug)]
pub struct WeightedSample {
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if positions.is_empty() {
            return Err(MeasuresError::EmptyEnsemble);
        }
        if positions.len() != weights.len() {
            return Err(MeasuresError::LengthMismatch {
                expected: positions.len(),
                got: weights.len(),
            });
        }
        if let Some(i) = positions.iter().position(|x| !x.is_finite()) {
            return Err(MeasuresError::NonFinite(i));
        }
        let mut total = 0.0;
        for (i, &w) in weights.iter().enumerate() {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(MeasuresError::NonPositiveWeight(i));
            }
            total += w;
        }
        if !(total > 0.0) {
            return Err(MeasuresError::NonPositiveMass(total));
        }
        Ok(WeightedSample { positions, weights })
    }

    /// Atoms of a 1-d ensemble with their current weights.
    pub fn from_ensemble(ensemble: &ParticleEnsemble) -> Result<Self> {
        if ensemble.dim() != 1 {
            return Err(MeasuresError::UnsupportedDimension(ensemble.dim()));
        }
        Self::new(ensemble.positions().to_vec(), ensemble.weights())
    }

    /// Grid nodes of a snapshot weighted by trapezoid cell masses. Negative
    /// tabulated values (FD undershoots) are clamped to zero.
    pub fn from_snapshot(snapshot: &DensitySnapshot) -> Result<Self> {
        let g = snapshot.grid();
        let v = snapshot.values();
        let n = g.len();
        let mut weights = vec![0.0; n];
        for i in 0..n {
            let left = if i > 0 { g[i] - g[i - 1] } else { 0.0 };
            let right = if i + 1 < n { g[i + 1] - g[i] } else { 0.0 };
            weights[i] = v[i].max(0.0) * 0.5 * (left + right);
        }
        Self::new(g.to_vec(), weights)
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Exact Wasserstein-1 distance between two weighted atom clouds on the
/// line: the integral of the absolute difference of their (normalized)
/// distribution functions, evaluated by a merged sweep over the sorted
/// atoms.
pub fn wasserstein1(a: &WeightedSample, b: &WeightedSample) -> f64 {
    let order = |s: &WeightedSample| {
        let mut idx: Vec<usize> = (0..s.positions.len()).collect();
        idx.sort_by(|&i, &j| s.positions[i].total_cmp(&s.positions[j]));
        idx
    };
    let ia = order(a);
    let ib = order(b);
    let tot_a: f64 = a.weights.iter().sum();
    let tot_b: f64 = b.weights.iter().sum();

    let mut pa = 0;
    let mut pb = 0;
    let (mut fa, mut fb) = (0.0_f64, 0.0_f64);
    let mut prev: Option<f64> = None;
    let mut dist = 0.0;
    while pa < ia.len() || pb < ib.len() {
        let xa = if pa < ia.len() { a.positions[ia[pa]] } else { f64::INFINITY };
        let xb = if pb < ib.len() { b.positions[ib[pb]] } else { f64::INFINITY };
        let x = xa.min(xb);
        if let Some(p) = prev {
            dist += (x - p) * (fa - fb).abs();
        }
        while pa < ia.len() && a.positions[ia[pa]] <= x {
            fa += a.weights[ia[pa]] / tot_a;
            pa += 1;
        }
        while pb < ib.len() && b.positions[ib[pb]] <= x {
            fb += b.weights[ib[pb]] / tot_b;
            pb += 1;
        }
        prev = Some(x);
    }
    dist
}
