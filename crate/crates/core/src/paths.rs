//! Path generation and integration: Brownian drivers with iterated
//! integrals, the Euler–Maruyama scheme for the stochastic system, fixed-step
//! RK4 for the deterministic system, and the smoothed-noise construction
//! Y^m_t = ∫₀ᵗ √m (W_{ms+1} − W_{ms}) ds together with the ODE it drives.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::stream_rng;
use crate::sde_core::{norm, stratonovich_drift, ControlSystem};

/// State norm beyond which integration aborts with a divergence error.
/// Blowing-up systems are run on purpose, so this is a graceful error,
/// not a panic.
pub const BLOWUP_NORM: f64 = 1e8;

// ---------------------------------------------------------------------------
// TimeGrid
// ---------------------------------------------------------------------------

/// Uniform grid on [0, T]: nodes t_k = k·dt for k = 0..=steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// `dt` must divide `horizon` within 1e-12 (relative to the horizon).
    pub fn new(horizon: f64, dt: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon {horizon} must be positive")));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidGrid(format!("dt {dt} must be positive")));
        }
        let steps_f = horizon / dt;
        let steps = steps_f.round();
        if steps < 1.0 {
            return Err(Error::InvalidGrid(format!("dt {dt} exceeds horizon {horizon}")));
        }
        if (steps * dt - horizon).abs() > 1e-12 * horizon.max(1.0) {
            return Err(Error::InvalidGrid(format!(
                "dt {dt} does not divide horizon {horizon}"
            )));
        }
        Ok(TimeGrid {
            dt,
            steps: steps as usize,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn node_count(&self) -> usize {
        self.steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Node index of time `t`, requiring `t` to land on the grid within 1e-9.
    pub fn node_index(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if (k * self.dt - t).abs() > 1e-9 * self.horizon().max(1.0) || k < 0.0 {
            return Err(Error::InvalidGrid(format!(
                "time {t} does not land on a node of the grid (dt = {})",
                self.dt
            )));
        }
        let k = k as usize;
        if k > self.steps {
            return Err(Error::InvalidGrid(format!(
                "time {t} beyond the grid horizon {}",
                self.horizon()
            )));
        }
        Ok(k)
    }
}

// ---------------------------------------------------------------------------
// NoiseBundle
// ---------------------------------------------------------------------------

/// One Brownian driver on a grid, together with its running path and the
/// left-point iterated integrals I[i][j](t_k) ≈ ∫₀^{t_k} Wⁱ dWʲ. The bundle
/// is shared across integrators so every estimator sees identical
/// randomness. Immutable after construction.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    grid: TimeGrid,
    dim: usize,
    seed: u64,
    /// increments[k][i] ~ Normal(0, dt), k = 0..steps.
    increments: Vec<Vec<f64>>,
    /// path[k][i] = Σ_{l<k} increments[l][i]; path[0] = 0.
    path: Vec<Vec<f64>>,
    /// iterated[i*d + j][k] = Σ_{l<k} path[l][i]·increments[l][j].
    iterated: Vec<Vec<f64>>,
}

/// Samples a `d`-dimensional Brownian driver on `grid`. Increments are drawn
/// step-major, coordinate-minor from the ChaCha8 stream of `seed`, so the
/// bundle is fully reproducible from (d, grid, seed).
pub fn sample_noise(d: usize, grid: &TimeGrid, seed: u64) -> Result<NoiseBundle> {
    if d == 0 {
        return Err(Error::InvalidInput("noise dimension must be ≥ 1".into()));
    }
    let mut rng = stream_rng(seed, 0);
    let sqrt_dt = grid.dt().sqrt();
    let steps = grid.steps();
    let mut increments = Vec::with_capacity(steps);
    for _ in 0..steps {
        let row: Vec<f64> = (0..d)
            .map(|_| sqrt_dt * rng.sample::<f64, _>(StandardNormal))
            .collect();
        increments.push(row);
    }
    Ok(NoiseBundle::from_increments(grid.clone(), d, seed, increments))
}

/// A driver with all increments zero, for running the integrators with the
/// noise switched off under the exact same code path.
pub fn zero_noise(d: usize, grid: &TimeGrid) -> Result<NoiseBundle> {
    if d == 0 {
        return Err(Error::InvalidInput("noise dimension must be ≥ 1".into()));
    }
    Ok(NoiseBundle::from_increments(
        grid.clone(),
        d,
        0,
        vec![vec![0.0; d]; grid.steps()],
    ))
}

impl NoiseBundle {
    fn from_increments(
        grid: TimeGrid,
        dim: usize,
        seed: u64,
        increments: Vec<Vec<f64>>,
    ) -> NoiseBundle {
        let steps = grid.steps();
        let mut path = vec![vec![0.0; dim]];
        for k in 0..steps {
            let prev = &path[k];
            let next: Vec<f64> = (0..dim).map(|i| prev[i] + increments[k][i]).collect();
            path.push(next);
        }
        let mut iterated = vec![vec![0.0; steps + 1]; dim * dim];
        for k in 0..steps {
            for i in 0..dim {
                for j in 0..dim {
                    let idx = i * dim + j;
                    iterated[idx][k + 1] = iterated[idx][k] + path[k][i] * increments[k][j];
                }
            }
        }
        NoiseBundle {
            grid,
            dim,
            seed,
            increments,
            path,
            iterated,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increment(&self, k: usize) -> &[f64] {
        &self.increments[k]
    }

    /// W(t_k).
    pub fn w_at(&self, k: usize) -> &[f64] {
        &self.path[k]
    }

    pub fn w_terminal(&self) -> &[f64] {
        self.path.last().expect("nonempty path")
    }

    /// I[i][j](t_k) ≈ ∫₀^{t_k} Wⁱ dWʲ (left-point Itô sum).
    pub fn iterated_at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.iterated[i * self.dim + j][k]
    }

    /// Same driver path restricted to a grid coarsened by `factor` (adjacent
    /// increments summed). Used for scheme-refinement oracles.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseBundle> {
        if factor == 0 || self.grid.steps() % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "coarsening factor {factor} does not divide {} steps",
                self.grid.steps()
            )));
        }
        let coarse_grid = TimeGrid {
            dt: self.grid.dt() * factor as f64,
            steps: self.grid.steps() / factor,
        };
        let mut increments = Vec::with_capacity(coarse_grid.steps());
        for block in self.increments.chunks(factor) {
            let mut row = vec![0.0; self.dim];
            for inc in block {
                for i in 0..self.dim {
                    row[i] += inc[i];
                }
            }
            increments.push(row);
        }
        Ok(NoiseBundle::from_increments(
            coarse_grid,
            self.dim,
            self.seed,
            increments,
        ))
    }
}

/// Lévy area L^{ij} = ∫₀¹ Wⁱ dWʲ − ∫₀¹ Wʲ dWⁱ. Requires i ≠ j and a horizon
/// covering t = 1. Antisymmetric in (i, j) exactly.
pub fn levy_area(bundle: &NoiseBundle, i: usize, j: usize) -> Result<f64> {
    if i == j {
        return Err(Error::InvalidInput(
            "levy_area requires distinct indices".into(),
        ));
    }
    let d = bundle.dim();
    if i >= d || j >= d {
        return Err(Error::IndexOutOfRange {
            what: "levy_area index".into(),
            index: i.max(j),
            limit: d,
        });
    }
    let k = bundle.grid().node_index(1.0)?;
    Ok(bundle.iterated_at(i, j, k) - bundle.iterated_at(j, i, k))
}

// ---------------------------------------------------------------------------
// Policies and sample paths
// ---------------------------------------------------------------------------

/// Control policy for stochastic runs: constant, piecewise constant in time,
/// or state feedback.
#[derive(Clone)]
pub enum Policy {
    Constant(Vec<f64>),
    /// u(t) = values[k] on [breaks[k], breaks[k+1]), last value afterwards.
    PiecewiseConstant {
        breaks: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    Feedback(std::sync::Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::Constant(u) => write!(f, "Constant({u:?})"),
            Policy::PiecewiseConstant { breaks, .. } => {
                write!(f, "PiecewiseConstant({} pieces)", breaks.len())
            }
            Policy::Feedback(_) => write!(f, "Feedback"),
        }
    }
}

impl Policy {
    pub fn control_at(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            Policy::Constant(u) => u.clone(),
            Policy::PiecewiseConstant { breaks, values } => {
                let mut idx = 0;
                while idx + 1 < breaks.len() && t >= breaks[idx + 1] {
                    idx += 1;
                }
                values[idx.min(values.len() - 1)].clone()
            }
            Policy::Feedback(f) => f(t, x),
        }
    }

    /// Short description used in serialized reports.
    pub fn describe(&self) -> String {
        match self {
            Policy::Constant(u) => format!("constant{u:?}"),
            Policy::PiecewiseConstant { values, .. } => {
                format!("piecewise-constant({} pieces)", values.len())
            }
            Policy::Feedback(_) => "feedback".into(),
        }
    }
}

/// One trajectory on a grid together with the control values realized along
/// it (empty for deterministic solves without a sampled control).
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub grid: TimeGrid,
    /// states[k] = X(t_k); states[0] is the requested initial state.
    pub states: Vec<Vec<f64>>,
    /// controls[k] is the control applied on [t_k, t_{k+1}).
    pub controls: Vec<Vec<f64>>,
}

impl SamplePath {
    pub fn terminal(&self) -> &[f64] {
        self.states.last().expect("nonempty path")
    }

    pub fn state_at(&self, k: usize) -> &[f64] {
        &self.states[k]
    }

    /// CSV export: header `t,x1,...,xn`, every value printed with
    /// 17 significant decimal digits.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let n = self.states[0].len();
        write!(out, "t")?;
        for i in 1..=n {
            write!(out, ",x{i}")?;
        }
        writeln!(out)?;
        for (k, state) in self.states.iter().enumerate() {
            write!(out, "{:.16e}", self.grid.time(k))?;
            for v in state {
                write!(out, ",{v:.16e}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Euler–Maruyama
// ---------------------------------------------------------------------------

/// X_{k+1} = X_k + b(X_k, u_k)·dt + σ(X_k, u_k)·ΔW_k on the bundle's grid.
pub fn euler_maruyama(
    sys: &ControlSystem,
    x0: &[f64],
    policy: &Policy,
    bundle: &NoiseBundle,
) -> Result<SamplePath> {
    if x0.len() != sys.state_dim() {
        return Err(Error::InvalidInput(format!(
            "initial state has dimension {}, system expects {}",
            x0.len(),
            sys.state_dim()
        )));
    }
    if bundle.dim() != sys.noise_dim() {
        return Err(Error::InvalidInput(format!(
            "noise bundle dimension {} does not match system noise dimension {}",
            bundle.dim(),
            sys.noise_dim()
        )));
    }
    let grid = bundle.grid().clone();
    let dt = grid.dt();
    let n = sys.state_dim();
    let mut states = Vec::with_capacity(grid.node_count());
    let mut controls = Vec::with_capacity(grid.steps());
    let mut x = x0.to_vec();
    states.push(x.clone());
    for k in 0..grid.steps() {
        let t = grid.time(k);
        let u = policy.control_at(t, &x);
        let b = sys.drift(&x, &u)?;
        let sigma = sys.diffusion(&x, &u)?;
        let dw = bundle.increment(k);
        for i in 0..n {
            let mut noise = 0.0;
            for j in 0..sys.noise_dim() {
                noise += sigma.get(i, j) * dw[j];
            }
            x[i] += b[i] * dt + noise;
        }
        let nrm = norm(&x);
        if !nrm.is_finite() || nrm > BLOWUP_NORM {
            return Err(Error::Divergence { step: k, norm: nrm });
        }
        controls.push(u);
        states.push(x.clone());
    }
    Ok(SamplePath {
        grid,
        states,
        controls,
    })
}

// ---------------------------------------------------------------------------
// RK4
// ---------------------------------------------------------------------------

/// Classical fixed-step RK4 for x′ = field(t, x). No adaptivity: fixed steps
/// keep runs reproducible and make convergence accounting trivial.
pub fn ode_solve<F>(field: F, x0: &[f64], grid: &TimeGrid) -> Result<SamplePath>
where
    F: Fn(f64, &[f64]) -> Result<Vec<f64>>,
{
    let n = x0.len();
    let dt = grid.dt();
    let mut states = Vec::with_capacity(grid.node_count());
    let mut x = x0.to_vec();
    states.push(x.clone());
    let add_scaled = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + s * b).collect()
    };
    for step in 0..grid.steps() {
        let t = grid.time(step);
        let k1 = field(t, &x)?;
        let k2 = field(t + 0.5 * dt, &add_scaled(&x, &k1, 0.5 * dt))?;
        let k3 = field(t + 0.5 * dt, &add_scaled(&x, &k2, 0.5 * dt))?;
        let k4 = field(t + dt, &add_scaled(&x, &k3, dt))?;
        for i in 0..n {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        let nrm = norm(&x);
        if !nrm.is_finite() || nrm > BLOWUP_NORM {
            return Err(Error::Divergence {
                step,
                norm: nrm,
            });
        }
        states.push(x.clone());
    }
    Ok(SamplePath {
        grid: grid.clone(),
        states,
        controls: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Smoothed noise (Wong–Zakai construction)
// ---------------------------------------------------------------------------

/// Differentiable approximation Y^m of a Brownian path on [0, T], its
/// derivative η^m at the grid nodes, and the rescaled driver it tracks.
///
/// With V the driver path on [0, mT + 1], the derivative is
/// η^m(t) = √m·(V(mt + 1) − V(mt)) and Y^m(t) = ∫₀ᵗ η^m. The Brownian motion
/// Y^m approximates is the rescaling B(t) = V(mt)/√m (itself standard by
/// Brownian scaling); sup_{t≤T} |Y^m − B| shrinks as m grows.
///
/// Between grid nodes η^m is taken piecewise linear, which makes the stored
/// trapezoid values of Y^m the exact integral of the η^m the ODE solver sees.
#[derive(Debug, Clone)]
pub struct SmoothedPath {
    pub grid: TimeGrid,
    /// values[k][i] = Y^m_i(t_k), trapezoid quadrature of η^m.
    pub values: Vec<Vec<f64>>,
    /// derivatives[k][i] = η^m_i(t_k).
    pub derivatives: Vec<Vec<f64>>,
    /// brownian[k][i] = V_i(m t_k)/√m, the path Y^m converges to.
    pub brownian: Vec<Vec<f64>>,
}

impl SmoothedPath {
    pub fn dim(&self) -> usize {
        self.values[0].len()
    }

    /// η^m(t) by linear interpolation between grid nodes.
    pub fn eta_at(&self, t: f64) -> Vec<f64> {
        let dt = self.grid.dt();
        let pos = (t / dt).clamp(0.0, self.grid.steps() as f64);
        let k = (pos.floor() as usize).min(self.grid.steps() - 1);
        let w = pos - k as f64;
        (0..self.dim())
            .map(|i| (1.0 - w) * self.derivatives[k][i] + w * self.derivatives[k + 1][i])
            .collect()
    }

    /// sup over grid nodes of the euclidean gap |Y^m(t_k) − B(t_k)|.
    pub fn sup_gap(&self) -> f64 {
        self.values
            .iter()
            .zip(&self.brownian)
            .map(|(y, b)| {
                y.iter()
                    .zip(b)
                    .map(|(a, c)| (a - c) * (a - c))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }
}

/// Builds Y^m on `out_grid` from a driver bundle sampled on [0, m·T + 1].
///
/// Preconditions: the driver grid must contain the unit lag and every
/// m·t_k as exact nodes, and its step must satisfy dt ≤ 1/(10m).
pub fn wong_zakai_smooth(
    bundle: &NoiseBundle,
    m: usize,
    out_grid: &TimeGrid,
) -> Result<SmoothedPath> {
    if m == 0 {
        return Err(Error::InvalidInput("smoothing level m must be ≥ 1".into()));
    }
    let dt_v = bundle.grid().dt();
    let required = 1.0 / (10.0 * m as f64);
    if dt_v > required * (1.0 + 1e-9) {
        return Err(Error::ResolutionTooCoarse {
            required,
            actual: dt_v,
        });
    }
    let needed_horizon = m as f64 * out_grid.horizon() + 1.0;
    if bundle.grid().horizon() < needed_horizon - 1e-9 {
        return Err(Error::InvalidGrid(format!(
            "driver horizon {} too short: the smoothing needs [0, {needed_horizon}]",
            bundle.grid().horizon()
        )));
    }
    // unit lag in driver nodes
    let lag_f = 1.0 / dt_v;
    let lag = lag_f.round();
    if (lag - lag_f).abs() > 1e-9 * lag_f {
        return Err(Error::ResolutionTooCoarse {
            required: 1.0 / lag_f.floor().max(1.0),
            actual: dt_v,
        });
    }
    let lag = lag as usize;
    // out node stride in driver nodes
    let stride_f = m as f64 * out_grid.dt() / dt_v;
    let stride = stride_f.round();
    if (stride - stride_f).abs() > 1e-9 * stride_f.max(1.0) || stride < 1.0 {
        return Err(Error::ResolutionTooCoarse {
            required: m as f64 * out_grid.dt(),
            actual: dt_v,
        });
    }
    let stride = stride as usize;

    let d = bundle.dim();
    let sqrt_m = (m as f64).sqrt();
    let nodes = out_grid.node_count();
    let mut derivatives: Vec<Vec<f64>> = Vec::with_capacity(nodes);
    let mut brownian: Vec<Vec<f64>> = Vec::with_capacity(nodes);
    for k in 0..nodes {
        let idx = k * stride;
        let w0 = bundle.w_at(idx);
        let w1 = bundle.w_at(idx + lag);
        derivatives.push((0..d).map(|i| sqrt_m * (w1[i] - w0[i])).collect());
        brownian.push((0..d).map(|i| w0[i] / sqrt_m).collect());
    }
    let mut values = vec![vec![0.0; d]];
    for k in 0..out_grid.steps() {
        let prev = &values[k];
        let next: Vec<f64> = (0..d)
            .map(|i| {
                prev[i] + 0.5 * out_grid.dt() * (derivatives[k][i] + derivatives[k + 1][i])
            })
            .collect();
        values.push(next);
    }
    Ok(SmoothedPath {
        grid: out_grid.clone(),
        values,
        derivatives,
        brownian,
    })
}

/// Solves x′ = b̃(x, u) + σ(x, u)·η^m(t) with RK4 on `out_grid` for a
/// constant control `u`.
pub fn wong_zakai_solve(
    sys: &ControlSystem,
    x0: &[f64],
    u: &[f64],
    m: usize,
    bundle: &NoiseBundle,
    out_grid: &TimeGrid,
) -> Result<(SamplePath, SmoothedPath)> {
    if bundle.dim() != sys.noise_dim() {
        return Err(Error::InvalidInput(format!(
            "driver dimension {} does not match system noise dimension {}",
            bundle.dim(),
            sys.noise_dim()
        )));
    }
    let smooth = wong_zakai_smooth(bundle, m, out_grid)?;
    let field = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
        let mut v = stratonovich_drift(sys, x, u)?;
        let sigma = sys.diffusion(x, u)?;
        let eta = smooth.eta_at(t);
        for i in 0..sys.state_dim() {
            let mut drive = 0.0;
            for j in 0..sys.noise_dim() {
                drive += sigma.get(i, j) * eta[j];
            }
            v[i] += drive;
        }
        Ok(v)
    };
    let path = ode_solve(field, x0, out_grid)?;
    Ok((path, smooth))
}

/// Convenience: σσᵀ-free check that two paths share a grid, then the max
/// euclidean distance between matching nodes.
pub fn max_node_distance(a: &SamplePath, b: &SamplePath) -> Result<f64> {
    if a.grid != b.grid {
        return Err(Error::InvalidGrid(
            "paths live on different grids".into(),
        ));
    }
    Ok(a.states
        .iter()
        .zip(&b.states)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::numerics::{par_map_ordered, rng_split, Mat};
    use approx::assert_relative_eq;

    #[test]
    fn grid_rejects_non_dividing_dt() {
        assert!(TimeGrid::new(1.0, 0.3).is_err());
        assert!(TimeGrid::new(1.0, -0.1).is_err());
        assert!(TimeGrid::new(0.0, 0.1).is_err());
        let g = TimeGrid::new(1.0, 1e-3).unwrap();
        assert_eq!(g.steps(), 1000);
        assert_eq!(g.node_count(), 1001);
        assert_relative_eq!(g.horizon(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn noise_is_reproducible() {
        let grid = TimeGrid::new(1.0, 1e-2).unwrap();
        let a = sample_noise(2, &grid, 99).unwrap();
        let b = sample_noise(2, &grid, 99).unwrap();
        assert_eq!(a.increments, b.increments);
        let c = sample_noise(2, &grid, 100).unwrap();
        assert_ne!(a.increments, c.increments);
    }

    #[test]
    fn noise_terminal_mean_and_iterated_variance() {
        // CLT bound on mean of W(1); Itô isometry for Var ∫W¹dW² = 1/2.
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let n = 2000;
        let stats: Vec<(f64, f64, f64)> = par_map_ordered(n, |i| {
            let bundle = sample_noise(2, &grid, rng_split(2024, i as u64)).unwrap();
            let w = bundle.w_terminal();
            let k = bundle.grid().steps();
            (w[0], w[1], bundle.iterated_at(0, 1, k))
        });
        let mean0: f64 = stats.iter().map(|s| s.0).sum::<f64>() / n as f64;
        let mean1: f64 = stats.iter().map(|s| s.1).sum::<f64>() / n as f64;
        let bound = 3.0 / (n as f64).sqrt();
        assert!(mean0.abs() <= bound, "mean {mean0} exceeds CLT bound {bound}");
        assert!(mean1.abs() <= bound, "mean {mean1} exceeds CLT bound {bound}");
        let iterated_mean: f64 = stats.iter().map(|s| s.2).sum::<f64>() / n as f64;
        let var: f64 = stats
            .iter()
            .map(|s| (s.2 - iterated_mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64;
        assert!(
            (var - 0.5).abs() <= 0.1,
            "Var ∫W¹dW² = {var}, expected 1/2 within 20%"
        );
    }

    #[test]
    fn ito_identity_improves_under_refinement() {
        // I[i][i](T) - ((WᵢT)² - T)/2 = (ΣΔW² - T)/2 → 0 as the same driver
        // path is read on finer grids.
        let fine = TimeGrid::new(1.0, 1e-4).unwrap();
        let mut med = Vec::new();
        for factor in [100usize, 10, 1] {
            let mut devs = Vec::new();
            for path in 0..50 {
                let bundle = sample_noise(1, &fine, rng_split(7, path)).unwrap();
                let coarse = bundle.coarsen(factor).unwrap();
                let k = coarse.grid().steps();
                let w = coarse.w_terminal()[0];
                let dev = coarse.iterated_at(0, 0, k) - 0.5 * (w * w - 1.0);
                devs.push(dev.abs());
            }
            devs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            med.push(devs[devs.len() / 2]);
        }
        assert!(
            med[0] > med[1] && med[1] > med[2],
            "medians must decrease under refinement: {med:?}"
        );
        // L² scale of the deviation is √(2 t dt)/2
        assert!(med[2] <= 5.0 * 0.5 * (2.0_f64 * 1e-4).sqrt());
    }

    #[test]
    fn levy_area_antisymmetry_and_errors() {
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let bundle = sample_noise(2, &grid, 5).unwrap();
        let l01 = levy_area(&bundle, 0, 1).unwrap();
        let l10 = levy_area(&bundle, 1, 0).unwrap();
        assert_eq!(l01, -l10);
        assert!(levy_area(&bundle, 0, 0).is_err());
        assert!(levy_area(&bundle, 0, 2).is_err());
        let short = sample_noise(2, &TimeGrid::new(0.5, 1e-3).unwrap(), 5).unwrap();
        assert!(levy_area(&short, 0, 1).is_err());
    }

    #[test]
    fn levy_area_mean_and_variance() {
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let n = 2000;
        let samples: Vec<f64> = par_map_ordered(n, |i| {
            let b = sample_noise(2, &grid, rng_split(31415, i as u64)).unwrap();
            levy_area(&b, 0, 1).unwrap()
        });
        let mean: f64 = samples.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() <= 3.0 / (n as f64).sqrt() * 1.0_f64.max(1.0));
        let var: f64 = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        assert!((var - 1.0).abs() <= 0.2, "Var L = {var}, expected 1 within 20%");
    }

    #[test]
    fn euler_constant_cases() {
        let sys = crate::sde_core::ControlSystem::new(
            "still",
            2,
            1,
            std::sync::Arc::new(|_: &[f64], _: &[f64]| Ok(vec![0.0, 0.0])),
            std::sync::Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(2, 1))),
            std::sync::Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
            vec![vec![0.0]],
            crate::sde_core::DerivativeKind::Analytic,
        )
        .unwrap();
        let grid = TimeGrid::new(1.0, 1e-2).unwrap();
        let bundle = sample_noise(1, &grid, 3).unwrap();
        let path = euler_maruyama(&sys, &[0.4, -0.2], &Policy::Constant(vec![0.0]), &bundle).unwrap();
        for s in &path.states {
            assert_eq!(s, &vec![0.4, -0.2]);
        }

        // constant drift is integrated exactly
        let sys_b = crate::sde_core::ControlSystem::new(
            "translate",
            2,
            1,
            std::sync::Arc::new(|_: &[f64], _: &[f64]| Ok(vec![1.0, 0.0])),
            std::sync::Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(2, 1))),
            std::sync::Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
            vec![vec![0.0]],
            crate::sde_core::DerivativeKind::Analytic,
        )
        .unwrap();
        let path = euler_maruyama(&sys_b, &[0.0, 0.0], &Policy::Constant(vec![0.0]), &bundle).unwrap();
        assert_relative_eq!(path.terminal()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(path.terminal()[1], 0.0);
    }

    #[test]
    fn euler_circle_stays_near_circle() {
        let sys = catalog::system("circle").unwrap();
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let n = 200;
        let errs: Vec<f64> = par_map_ordered(n, |i| {
            let bundle = sample_noise(1, &grid, rng_split(77, i as u64)).unwrap();
            let path =
                euler_maruyama(&sys, &[1.0, 0.0], &Policy::Constant(vec![0.0]), &bundle).unwrap();
            (norm(path.terminal()) - 1.0).abs()
        });
        let mean = errs.iter().sum::<f64>() / n as f64;
        assert!(mean <= 0.05, "mean | |X(1)| - 1 | = {mean}");
    }

    #[test]
    fn euler_divergence_is_reported() {
        let sys = crate::sde_core::ControlSystem::new(
            "explode",
            1,
            1,
            std::sync::Arc::new(|x: &[f64], _: &[f64]| Ok(vec![x[0] * x[0] * 10.0 + 1.0])),
            std::sync::Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(1, 1))),
            std::sync::Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(1, 1))),
            vec![vec![0.0]],
            crate::sde_core::DerivativeKind::Analytic,
        )
        .unwrap();
        let grid = TimeGrid::new(10.0, 1e-2).unwrap();
        let bundle = sample_noise(1, &grid, 1).unwrap();
        match euler_maruyama(&sys, &[1.0], &Policy::Constant(vec![0.0]), &bundle) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn euler_strong_self_convergence_rate() {
        // halving dt should shrink the dt-vs-dt/4 gap by roughly √2
        let sys = catalog::system("circle").unwrap();
        let fine = TimeGrid::new(1.0, 2.5e-4).unwrap();
        let n = 100;
        let pairs: Vec<(f64, f64)> = par_map_ordered(n, |i| {
            let driver = sample_noise(1, &fine, rng_split(4242, i as u64)).unwrap();
            let u = Policy::Constant(vec![0.0]);
            let at = |factor: usize| {
                let b = driver.coarsen(factor).unwrap();
                euler_maruyama(&sys, &[1.0, 0.0], &u, &b)
                    .unwrap()
                    .terminal()
                    .to_vec()
            };
            // dt = 2e-3 vs its dt/4 = 5e-4; dt = 1e-3 vs its dt/4 = 2.5e-4
            let coarse1 = at(8);
            let ref1 = at(2);
            let coarse2 = at(4);
            let ref2 = at(1);
            let e1 = coarse1
                .iter()
                .zip(&ref1)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let e2 = coarse2
                .iter()
                .zip(&ref2)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            (e1, e2)
        });
        let m1: f64 = pairs.iter().map(|p| p.0).sum::<f64>() / n as f64;
        let m2: f64 = pairs.iter().map(|p| p.1).sum::<f64>() / n as f64;
        let ratio = m1 / m2;
        assert!(
            (1.2..=3.5).contains(&ratio),
            "halving dt gave error ratio {ratio} (errors {m1:.3e}, {m2:.3e})"
        );
    }

    #[test]
    fn rk4_zero_field_constant() {
        let grid = TimeGrid::new(1.0, 1e-2).unwrap();
        let path = ode_solve(|_, _| Ok(vec![0.0, 0.0]), &[1.0, 2.0], &grid).unwrap();
        assert_eq!(path.terminal(), &[1.0, 2.0]);
    }

    #[test]
    fn rk4_rotation_quarter_turn() {
        let steps = 1571;
        let t_end = std::f64::consts::FRAC_PI_2;
        let grid = TimeGrid::new(t_end, t_end / steps as f64).unwrap();
        let path = ode_solve(|_, x| Ok(vec![-x[1], x[0]]), &[1.0, 0.0], &grid).unwrap();
        assert!((path.terminal()[0]).abs() <= 1e-6);
        assert!((path.terminal()[1] - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rk4_exponential_decay_accuracy() {
        let grid = TimeGrid::new(1.0, 1e-3).unwrap();
        let path = ode_solve(|_, x| Ok(vec![-x[0]]), &[1.0], &grid).unwrap();
        assert!((path.terminal()[0] - (-1.0_f64).exp()).abs() <= 1e-8);
    }

    #[test]
    fn rk4_self_convergence_fourth_order() {
        // smooth nonlinear field: halving dt should cut the self-gap ~16x
        let field = |_t: f64, x: &[f64]| Ok(vec![x[1], -x[0].sin()]);
        let run = |dt: f64| {
            let grid = TimeGrid::new(2.0, dt).unwrap();
            ode_solve(field, &[1.0, 0.3], &grid).unwrap().terminal().to_vec()
        };
        let a = run(2e-2);
        let b = run(1e-2);
        let c = run(5e-3);
        let gap = |x: &Vec<f64>, y: &Vec<f64>| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        };
        let g1 = gap(&a, &b);
        let g2 = gap(&b, &c);
        let ratio = g1 / g2;
        assert!(
            (8.0..=32.0).contains(&ratio),
            "expected ~16x gap reduction, got {ratio} ({g1:.3e} vs {g2:.3e})"
        );
    }

    #[test]
    fn smooth_zero_driver_is_zero() {
        // W ≡ 0 driver: the unit-lag normalization is degenerate on
        // deterministic inputs, so the zero path is the meaningful fixture.
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver_grid = TimeGrid::new(5.0, 1e-3).unwrap();
        let zero = zero_noise(1, &driver_grid).unwrap();
        let s = wong_zakai_smooth(&zero, 4, &out).unwrap();
        assert!(s.values.iter().all(|row| row[0] == 0.0));
        assert!(s.derivatives.iter().all(|row| row[0] == 0.0));
        assert_eq!(s.values[0][0], 0.0);
    }

    #[test]
    fn smooth_starts_at_zero_and_requires_resolution() {
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver = sample_noise(1, &TimeGrid::new(5.0, 1e-3).unwrap(), 21).unwrap();
        let s = wong_zakai_smooth(&driver, 4, &out).unwrap();
        assert_eq!(s.values[0], vec![0.0]);
        // m = 200 would need dt ≤ 1/2000
        match wong_zakai_smooth(&driver, 200, &out) {
            Err(Error::ResolutionTooCoarse { .. }) => {}
            other => panic!("expected resolution error, got {other:?}"),
        }
        // horizon too short for m = 16 (needs [0, 17])
        match wong_zakai_smooth(&driver, 16, &out) {
            Err(Error::InvalidGrid(_)) => {}
            other => panic!("expected horizon error, got {other:?}"),
        }
    }

    #[test]
    fn smooth_gap_decreases_in_m() {
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver_grid = TimeGrid::new(65.0, 1e-3).unwrap();
        let ms = [4usize, 16, 64];
        let n = 100;
        let gaps: Vec<Vec<f64>> = par_map_ordered(n, |i| {
            let driver = sample_noise(1, &driver_grid, rng_split(555, i as u64)).unwrap();
            ms.iter()
                .map(|&m| wong_zakai_smooth(&driver, m, &out).unwrap().sup_gap())
                .collect()
        });
        let mut medians = Vec::new();
        for j in 0..ms.len() {
            let mut col: Vec<f64> = gaps.iter().map(|g| g[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(col[n / 2]);
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "sup-gap medians must decrease in m: {medians:?}"
        );
    }

    #[test]
    fn wz_solve_pure_drift_matches_ode() {
        // σ ≡ 0: the smoothed drive disappears and the solve is the plain ODE.
        let sys = catalog::system("inward-drift").unwrap();
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver = sample_noise(1, &TimeGrid::new(17.0, 1e-3).unwrap(), 8).unwrap();
        let (path, _) = wong_zakai_solve(&sys, &[0.5, 0.0], &[0.0], 16, &driver, &out).unwrap();
        let reference = ode_solve(
            |_, x| Ok(vec![-x[0], -x[1]]),
            &[0.5, 0.0],
            &out,
        )
        .unwrap();
        let gap = max_node_distance(&path, &reference).unwrap();
        assert!(gap <= 1e-12, "gap {gap}");
    }

    #[test]
    fn wz_solve_circle_is_rotation_by_smoothed_path() {
        let sys = catalog::system("circle").unwrap();
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver = sample_noise(1, &TimeGrid::new(17.0, 1e-3).unwrap(), 91).unwrap();
        let (path, smooth) =
            wong_zakai_solve(&sys, &[1.0, 0.0], &[0.0], 16, &driver, &out).unwrap();
        let mut worst = 0.0_f64;
        for k in 0..out.node_count() {
            let expect = catalog::rotate2(&[1.0, 0.0], smooth.values[k][0]);
            let got = path.state_at(k);
            let gap = ((got[0] - expect[0]).powi(2) + (got[1] - expect[1]).powi(2)).sqrt();
            worst = worst.max(gap);
        }
        assert!(worst <= 1e-6, "rotation oracle gap {worst}");
    }

    #[test]
    fn wz_solve_endpoint_converges_to_rotation_by_brownian() {
        let sys = catalog::system("circle").unwrap();
        let out = TimeGrid::new(1.0, 1e-3).unwrap();
        let driver_grid = TimeGrid::new(65.0, 1e-3).unwrap();
        let ms = [4usize, 16, 64];
        let n = 100;
        let gaps: Vec<Vec<f64>> = par_map_ordered(n, |i| {
            let driver = sample_noise(1, &driver_grid, rng_split(808, i as u64)).unwrap();
            ms.iter()
                .map(|&m| {
                    let (path, smooth) =
                        wong_zakai_solve(&sys, &[1.0, 0.0], &[0.0], m, &driver, &out).unwrap();
                    let w1 = smooth.brownian.last().unwrap()[0];
                    let expect = catalog::rotate2(&[1.0, 0.0], w1);
                    let got = path.terminal();
                    ((got[0] - expect[0]).powi(2) + (got[1] - expect[1]).powi(2)).sqrt()
                })
                .collect()
        });
        let mut medians = Vec::new();
        for j in 0..ms.len() {
            let mut col: Vec<f64> = gaps.iter().map(|g| g[j]).collect();
            col.sort_by(|a, b| a.partial_cmp(b).unwrap());
            medians.push(col[n / 2]);
        }
        assert!(
            medians[0] > medians[1] && medians[1] > medians[2],
            "endpoint medians must decrease in m: {medians:?}"
        );
        assert!(medians[2] <= 0.15, "median at m=64 is {}", medians[2]);
    }

    #[test]
    fn csv_export_format() {
        let grid = TimeGrid::new(0.2, 0.1).unwrap();
        let path = SamplePath {
            grid,
            states: vec![vec![1.0, 0.0], vec![0.5, 0.25], vec![0.125, -1.0]],
            controls: vec![],
        };
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,x1,x2");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0].parse::<f64>().unwrap(), 0.0);
        assert_eq!(first[1].parse::<f64>().unwrap(), 1.0);
        assert_eq!(first[2].parse::<f64>().unwrap(), 0.0);
        // 17 significant digits: mantissa with 16 fractional digits
        assert!(first[1].starts_with("1.0000000000000000e"));
    }

    #[test]
    fn policy_kinds() {
        let pw = Policy::PiecewiseConstant {
            breaks: vec![0.0, 0.5],
            values: vec![vec![1.0], vec![2.0]],
        };
        assert_eq!(pw.control_at(0.2, &[]), vec![1.0]);
        assert_eq!(pw.control_at(0.7, &[]), vec![2.0]);
        let fb = Policy::Feedback(std::sync::Arc::new(|_t, x: &[f64]| vec![x[0]]));
        assert_eq!(fb.control_at(0.0, &[3.0]), vec![3.0]);
    }
}
