//! Invariance checking proper: analytic boundary conditions on the
//! generators and the boundary matrix, simulation-based checks of the
//! stochastic and deterministic systems, and an audit that requires every
//! route to return the same verdict.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::sorted_json;
use crate::numerics::{par_map_ordered, rng_split, stream_rng, symmetric_eigenvalues};
use crate::paths::{
    euler_maruyama, ode_solve, sample_noise, wong_zakai_solve, Policy, TimeGrid,
};
use crate::sde_core::{
    dot, generator_first_order, generator_second_order, norm, sigma_apply, stratonovich_drift,
    ClosedSet, ControlSystem, TestFunction, Tolerances,
};

// ---------------------------------------------------------------------------
// Boundary points
// ---------------------------------------------------------------------------

/// A point on ∂K = {g = 0} with nondegenerate gradient, paired with the
/// canonical test function φ = g (which attains its maximum over K, namely
/// 0, exactly there).
#[derive(Clone)]
pub struct BoundaryPoint {
    pub x: Vec<f64>,
    pub g_value: f64,
    pub grad_norm: f64,
    pub phi: TestFunction,
}

impl std::fmt::Debug for BoundaryPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BoundaryPoint")
            .field("x", &self.x)
            .field("g_value", &self.g_value)
            .field("grad_norm", &self.grad_norm)
            .finish()
    }
}

impl BoundaryPoint {
    /// Boundary point with a user-supplied test function instead of the
    /// canonical φ = g. The point must lie on ∂K, the set gradient must be
    /// nondegenerate there, and φ must attain its maximum over K at x
    /// (spot-checked: φ(x) must dominate φ at inward-perturbed probes).
    pub fn with_test_function(
        set: &ClosedSet,
        x: Vec<f64>,
        phi: TestFunction,
        tol: &Tolerances,
    ) -> Result<Self> {
        let g_value = set.g(&x)?;
        if g_value.abs() > tol.tol_set {
            return Err(Error::InvalidInput(format!(
                "point is not on the boundary: g = {g_value}"
            )));
        }
        let grad = set.grad(&x)?;
        let grad_norm = norm(&grad);
        if grad_norm < tol.grad_floor {
            return Err(Error::InvalidInput(format!(
                "degenerate boundary gradient |grad g| = {grad_norm}"
            )));
        }
        let phi_x = phi.value(&x)?;
        for step in [1e-3, 1e-2, 1e-1] {
            let probe: Vec<f64> = x
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| xi - step * gi / grad_norm)
                .collect();
            if set.g(&probe)? <= tol.tol_set && phi.value(&probe)? > phi_x + 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "test function does not attain its maximum over K at {x:?} \
                     (larger value at an inward probe)"
                )));
            }
        }
        Ok(BoundaryPoint {
            x,
            g_value,
            grad_norm,
            phi,
        })
    }
}

/// Newton-projects random ambient samples onto {g = 0} and keeps the points
/// where |g| ≤ tol_set and |∇g| ≥ grad_floor.
///
/// The Newton budget is 12 iterations: quadratic convergence reaches machine
/// precision well within that, while the linear contraction typical of
/// degenerate boundaries (vanishing gradient) cannot, so such sets are
/// rejected instead of silently accepted. Points that fail are skipped; if
/// every attempt fails the scan errors out.
pub fn boundary_scan(
    set: &ClosedSet,
    n_points: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<Vec<BoundaryPoint>> {
    let n = set.dim();
    let mut rng = stream_rng(seed, 0);
    let mut points = Vec::with_capacity(n_points);
    let max_attempts = n_points.max(1) * 50;
    let mut attempts = 0;
    while points.len() < n_points && attempts < max_attempts {
        attempts += 1;
        let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut converged = false;
        for _ in 0..12 {
            let g = match set.g(&x) {
                Ok(v) => v,
                Err(_) => break,
            };
            if g.abs() <= tol.tol_set {
                converged = true;
                break;
            }
            let grad = match set.grad(&x) {
                Ok(v) => v,
                Err(_) => break,
            };
            let gg = dot(&grad, &grad);
            if gg < 1e-18 {
                break;
            }
            for i in 0..n {
                x[i] -= g * grad[i] / gg;
            }
        }
        if !converged {
            continue;
        }
        let g_value = set.g(&x)?;
        let grad = set.grad(&x)?;
        let grad_norm = norm(&grad);
        if grad_norm < tol.grad_floor {
            continue;
        }
        points.push(BoundaryPoint {
            x,
            g_value,
            grad_norm,
            phi: set.as_test_function(),
        });
    }
    if points.is_empty() {
        return Err(Error::ScanFailed { attempts });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Condition reports
// ---------------------------------------------------------------------------

/// The (point, control) achieving the worst violation, and for the
/// unbounded-direction failure the direction itself.
#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
    pub sub_condition: String,
}

/// Structured verdict for one analytic condition at one boundary point.
#[derive(Debug, Clone, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub pass: bool,
    /// Per-sub-condition pass flags.
    pub sub_conditions: BTreeMap<String, bool>,
    /// Raw measured quantities behind the flags.
    pub measures: BTreeMap<String, f64>,
    /// How far the worst constraint is exceeded (0 when everything passes).
    pub worst_violation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
    pub tol: f64,
}

impl ConditionReport {
    fn build(
        condition: &str,
        sub_conditions: BTreeMap<String, bool>,
        measures: BTreeMap<String, f64>,
        worst_violation: f64,
        witness: Option<Witness>,
        tol: f64,
    ) -> Self {
        let pass = sub_conditions.values().all(|&b| b);
        ConditionReport {
            condition: condition.into(),
            pass,
            sub_conditions,
            measures,
            worst_violation,
            witness,
            tol,
        }
    }
}

struct WorstTracker {
    violation: f64,
    witness: Option<Witness>,
}

impl WorstTracker {
    fn new() -> Self {
        WorstTracker {
            violation: 0.0,
            witness: None,
        }
    }

    fn update(&mut self, violation: f64, witness: Witness) {
        if violation > self.violation {
            self.violation = violation;
            self.witness = Some(witness);
        }
    }
}

/// Condition on the second-order generator at a boundary maximum:
/// sup_u L_{x,u}φ ≤ 0 and ⟨σⁱ(x,u), Dφ(x)⟩ = 0 for every column and control.
pub fn condition_b_check(
    sys: &ControlSystem,
    bp: &BoundaryPoint,
    tol: &Tolerances,
) -> Result<ConditionReport> {
    let eq = tol.tol_eq_for(sys);
    let mut sup_generator = f64::NEG_INFINITY;
    let mut max_orth = 0.0_f64;
    let mut worst = WorstTracker::new();
    for u in sys.controls() {
        let l = generator_second_order(sys, &bp.phi, &bp.x, u)?;
        sup_generator = sup_generator.max(l);
        worst.update(
            l - eq,
            Witness {
                x: bp.x.clone(),
                u: u.clone(),
                v: None,
                sub_condition: "generator".into(),
            },
        );
        for i in 0..sys.noise_dim() {
            let s = sigma_apply(sys, &bp.phi, &bp.x, u, i)?.abs();
            max_orth = max_orth.max(s);
            worst.update(
                s - eq,
                Witness {
                    x: bp.x.clone(),
                    u: u.clone(),
                    v: None,
                    sub_condition: "orthogonality".into(),
                },
            );
        }
    }
    let mut subs = BTreeMap::new();
    subs.insert("generator".into(), sup_generator <= eq);
    subs.insert("orthogonality".into(), max_orth <= eq);
    let mut measures = BTreeMap::new();
    measures.insert("sup_generator".into(), sup_generator);
    measures.insert("max_orthogonality".into(), max_orth);
    let pass_all = subs.values().all(|&b| b);
    Ok(ConditionReport::build(
        "b",
        subs,
        measures,
        if pass_all { 0.0 } else { worst.violation },
        if pass_all { None } else { worst.witness },
        eq,
    ))
}

/// Condition on the first-order operator plus the boundary matrix:
/// sup_u L′φ ≤ 0, orthogonality of every column, and A symmetric negative
/// semidefinite for every control.
pub fn condition_c_check(
    sys: &ControlSystem,
    bp: &BoundaryPoint,
    tol: &Tolerances,
) -> Result<ConditionReport> {
    let eq = tol.tol_eq_for(sys);
    let mut sup_first = f64::NEG_INFINITY;
    let mut max_orth = 0.0_f64;
    let mut max_asym = 0.0_f64;
    let mut max_lambda = f64::NEG_INFINITY;
    let mut worst = WorstTracker::new();
    for u in sys.controls() {
        let l = generator_first_order(sys, &bp.phi, &bp.x, u)?;
        sup_first = sup_first.max(l);
        worst.update(
            l - eq,
            Witness {
                x: bp.x.clone(),
                u: u.clone(),
                v: None,
                sub_condition: "first_order".into(),
            },
        );
        for i in 0..sys.noise_dim() {
            let s = sigma_apply(sys, &bp.phi, &bp.x, u, i)?.abs();
            max_orth = max_orth.max(s);
            worst.update(
                s - eq,
                Witness {
                    x: bp.x.clone(),
                    u: u.clone(),
                    v: None,
                    sub_condition: "orthogonality".into(),
                },
            );
        }
        let a = crate::sde_core::assemble_a_matrix(sys, &bp.phi, &bp.x, u)?;
        let spectrum = symmetric_eigenvalues(&a)?;
        max_asym = max_asym.max(spectrum.max_asymmetry);
        max_lambda = max_lambda.max(spectrum.lambda_max());
        worst.update(
            spectrum.max_asymmetry - eq,
            Witness {
                x: bp.x.clone(),
                u: u.clone(),
                v: None,
                sub_condition: "a_symmetry".into(),
            },
        );
        worst.update(
            spectrum.lambda_max() - eq,
            Witness {
                x: bp.x.clone(),
                u: u.clone(),
                v: None,
                sub_condition: "a_nsd".into(),
            },
        );
    }
    let mut subs = BTreeMap::new();
    subs.insert("first_order".into(), sup_first <= eq);
    subs.insert("orthogonality".into(), max_orth <= eq);
    subs.insert("a_symmetry".into(), max_asym <= eq);
    subs.insert("a_nsd".into(), max_lambda <= eq);
    let mut measures = BTreeMap::new();
    measures.insert("sup_first_order".into(), sup_first);
    measures.insert("max_orthogonality".into(), max_orth);
    measures.insert("max_a_asymmetry".into(), max_asym);
    measures.insert("max_a_lambda_max".into(), max_lambda);
    let pass_all = subs.values().all(|&b| b);
    Ok(ConditionReport::build(
        "c",
        subs,
        measures,
        if pass_all { 0.0 } else { worst.violation },
        if pass_all { None } else { worst.witness },
        eq,
    ))
}

/// Condition with the unbounded deterministic control: the supremum of
/// L′φ + ⟨σ(x,u)v, Dφ⟩ over all v ∈ ℝᵈ is finite only if σ(x,u)ᵀDφ(x) = 0,
/// so that orthogonality is checked symbolically and the remaining condition
/// is sup_u L′φ ≤ 0. `v_probe_radius` only scales the reported witness
/// direction.
pub fn condition_e_check(
    sys: &ControlSystem,
    bp: &BoundaryPoint,
    v_probe_radius: f64,
    tol: &Tolerances,
) -> Result<ConditionReport> {
    let eq = tol.tol_eq_for(sys);
    let grad = bp.phi.grad(&bp.x)?;
    let mut sup_first = f64::NEG_INFINITY;
    let mut max_sigma_grad = 0.0_f64;
    let mut worst = WorstTracker::new();
    for u in sys.controls() {
        let l = generator_first_order(sys, &bp.phi, &bp.x, u)?;
        sup_first = sup_first.max(l);
        worst.update(
            l - eq,
            Witness {
                x: bp.x.clone(),
                u: u.clone(),
                v: None,
                sub_condition: "first_order".into(),
            },
        );
        let sigma = sys.diffusion(&bp.x, u)?;
        let w = sigma.t_matvec(&grad);
        let wn = norm(&w);
        max_sigma_grad = max_sigma_grad.max(wn);
        if wn > eq {
            // the supremum over v is +∞ along this direction
            let direction: Vec<f64> = w.iter().map(|c| v_probe_radius * c / wn).collect();
            worst.update(
                wn - eq,
                Witness {
                    x: bp.x.clone(),
                    u: u.clone(),
                    v: Some(direction),
                    sub_condition: "finite_supremum".into(),
                },
            );
        }
    }
    let mut subs = BTreeMap::new();
    subs.insert("finite_supremum".into(), max_sigma_grad <= eq);
    subs.insert("first_order".into(), sup_first <= eq);
    let mut measures = BTreeMap::new();
    measures.insert("max_sigma_grad".into(), max_sigma_grad);
    measures.insert("sup_first_order".into(), sup_first);
    let pass_all = subs.values().all(|&b| b);
    Ok(ConditionReport::build(
        "e",
        subs,
        measures,
        if pass_all { 0.0 } else { worst.violation },
        if pass_all { None } else { worst.witness },
        eq,
    ))
}

// ---------------------------------------------------------------------------
// Deterministic controls
// ---------------------------------------------------------------------------

/// Locally integrable deterministic control v: [0, ∞) → ℝᵈ, supplied as a
/// bounded callable.
#[derive(Clone)]
pub struct VControl {
    f: Arc<dyn Fn(f64) -> Vec<f64> + Send + Sync>,
    description: String,
}

impl std::fmt::Debug for VControl {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "VControl({})", self.description)
    }
}

impl VControl {
    pub fn constant(v: Vec<f64>) -> Self {
        let desc = format!("constant{v:?}");
        VControl {
            f: Arc::new(move |_| v.clone()),
            description: desc,
        }
    }

    pub fn piecewise(breaks: Vec<f64>, values: Vec<Vec<f64>>) -> Self {
        let desc = format!("piecewise({} pieces)", values.len());
        VControl {
            f: Arc::new(move |t| {
                let mut idx = 0;
                while idx + 1 < breaks.len() && t >= breaks[idx + 1] {
                    idx += 1;
                }
                values[idx.min(values.len() - 1)].clone()
            }),
            description: desc,
        }
    }

    pub fn from_fn(
        f: impl Fn(f64) -> Vec<f64> + Send + Sync + 'static,
        description: impl Into<String>,
    ) -> Self {
        VControl {
            f: Arc::new(f),
            description: description.into(),
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        (self.f)(t)
    }

    pub fn describe(&self) -> &str {
        &self.description
    }
}

/// Pointwise projection of a control onto the closed ball of radius `n`:
/// v ↦ v if |v| ≤ n, else n·v/|v|. Idempotent and nonexpansive.
pub fn truncate_control(v_ctrl: &VControl, n: usize) -> Result<VControl> {
    if n < 1 {
        return Err(Error::InvalidInput("truncation radius must be ≥ 1".into()));
    }
    let inner = v_ctrl.f.clone();
    let radius = n as f64;
    let description = format!("truncate({}, {})", v_ctrl.description, n);
    Ok(VControl {
        f: Arc::new(move |t| project_ball(&inner(t), radius)),
        description,
    })
}

/// Projection of one vector onto the closed ball of the given radius.
pub fn project_ball(v: &[f64], radius: f64) -> Vec<f64> {
    let nv = norm(v);
    if nv <= radius {
        v.to_vec()
    } else {
        v.iter().map(|c| c * radius / nv).collect()
    }
}

/// Integrates x′ = b̃(x, u(t,x)) + σ(x, u(t,x))·v(t) from x0 ∈ K and returns
/// the largest distance to K observed along the trajectory.
#[allow(clippy::too_many_arguments)]
pub fn deterministic_invariance_check(
    sys: &ControlSystem,
    set: &ClosedSet,
    x0: &[f64],
    u_ctrl: &Policy,
    v_ctrl: &VControl,
    horizon: f64,
    dt: f64,
    tol: &Tolerances,
) -> Result<f64> {
    if set.g(x0)? > tol.tol_set {
        return Err(Error::InvalidInput(format!(
            "deterministic check needs x0 ∈ K (g(x0) = {})",
            set.g(x0)?
        )));
    }
    let grid = TimeGrid::new(horizon, dt)?;
    let field = |t: f64, x: &[f64]| -> Result<Vec<f64>> {
        let u = u_ctrl.control_at(t, x);
        let mut f = stratonovich_drift(sys, x, &u)?;
        let sigma = sys.diffusion(x, &u)?;
        let v = v_ctrl.at(t);
        for i in 0..sys.state_dim() {
            let mut drive = 0.0;
            for j in 0..sys.noise_dim() {
                drive += sigma.get(i, j) * v[j];
            }
            f[i] += drive;
        }
        Ok(f)
    };
    let path = ode_solve(field, x0, &grid)?;
    let mut max_d = 0.0_f64;
    for state in &path.states {
        max_d = max_d.max(set.distance(state)?);
    }
    Ok(max_d)
}

// ---------------------------------------------------------------------------
// Monte-Carlo invariance
// ---------------------------------------------------------------------------

/// Monte-Carlo distance statistics along Euler paths with checkpoints at
/// T/4, T/2, 3T/4, T.
#[derive(Debug, Clone, Serialize)]
pub struct McInvarianceReport {
    pub mean_final_distance: f64,
    pub max_checkpoint_mean: f64,
    /// Fraction of paths with d_K(X_T) > epsilon.
    pub fraction_exceeding: f64,
    pub epsilon: f64,
    pub checkpoint_times: Vec<f64>,
    pub checkpoint_means: Vec<f64>,
    pub divergent_paths: usize,
    pub n_paths: usize,
    pub seed: u64,
}

impl McInvarianceReport {
    /// Invariance verdict at the given tolerances.
    pub fn is_invariant(&self, tol: &Tolerances) -> bool {
        self.mean_final_distance <= tol.mc_mean_tol
            && self.max_checkpoint_mean <= tol.mc_mean_tol
            && self.fraction_exceeding <= tol.mc_frac_tol
            && self.divergent_paths == 0
    }
}

/// Runs N Euler paths from x0 ∈ K and reports mean distances at the
/// checkpoints plus the fraction of final excursions beyond ε. Divergent
/// paths are counted separately, not silently dropped.
#[allow(clippy::too_many_arguments)]
pub fn mc_invariance_estimate(
    sys: &ControlSystem,
    set: &ClosedSet,
    x0: &[f64],
    policy: &Policy,
    horizon: f64,
    dt: f64,
    n_paths: usize,
    seed: u64,
    tol: &Tolerances,
) -> Result<McInvarianceReport> {
    if set.g(x0)? > tol.tol_set {
        return Err(Error::InvalidInput(format!(
            "Monte-Carlo check needs x0 ∈ K (g(x0) = {})",
            set.g(x0)?
        )));
    }
    let grid = TimeGrid::new(horizon, dt)?;
    let steps = grid.steps();
    let checkpoints: Vec<usize> = (1..=4)
        .map(|q| (steps * q) / 4)
        .filter(|&k| k > 0)
        .collect();
    let per_path: Vec<Result<Option<Vec<f64>>>> = par_map_ordered(n_paths, |i| {
        let bundle = sample_noise(sys.noise_dim(), &grid, rng_split(seed, i as u64))?;
        match euler_maruyama(sys, x0, policy, &bundle) {
            Ok(path) => {
                let mut dists = Vec::with_capacity(checkpoints.len());
                for &k in &checkpoints {
                    dists.push(set.distance(path.state_at(k))?);
                }
                Ok(Some(dists))
            }
            Err(Error::Divergence { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    });
    let mut divergent = 0usize;
    let mut sums = vec![0.0; checkpoints.len()];
    let mut exceed = 0usize;
    let mut ok_paths = 0usize;
    for r in per_path {
        match r? {
            None => divergent += 1,
            Some(dists) => {
                ok_paths += 1;
                for (s, d) in sums.iter_mut().zip(&dists) {
                    *s += d;
                }
                if *dists.last().unwrap() > tol.mc_epsilon {
                    exceed += 1;
                }
            }
        }
    }
    if ok_paths == 0 {
        return Err(Error::InsufficientSamples {
            what: "Monte-Carlo invariance (all paths divergent)".into(),
            needed: 1,
            got: 0,
        });
    }
    let means: Vec<f64> = sums.iter().map(|s| s / ok_paths as f64).collect();
    Ok(McInvarianceReport {
        mean_final_distance: *means.last().unwrap(),
        max_checkpoint_mean: means.iter().cloned().fold(0.0, f64::max),
        fraction_exceeding: exceed as f64 / ok_paths as f64,
        epsilon: tol.mc_epsilon,
        checkpoint_times: checkpoints.iter().map(|&k| grid.time(k)).collect(),
        checkpoint_means: means,
        divergent_paths: divergent,
        n_paths,
        seed,
    })
}

/// Smoothed-noise invariance: mean over sampled drivers of the largest
/// distance along the solution of x′ = b̃(x,u) + σ(x,u)η^m. For
/// deterministically invariant systems this stays at the ODE tolerance,
/// independent of m.
#[derive(Debug, Clone, Serialize)]
pub struct WzInvarianceReport {
    pub mean_max_distance: f64,
    pub m: usize,
    pub n_paths: usize,
    pub seed: u64,
}

#[allow(clippy::too_many_arguments)]
pub fn wong_zakai_invariance_estimate(
    sys: &ControlSystem,
    set: &ClosedSet,
    x0: &[f64],
    u: &[f64],
    m: usize,
    n_paths: usize,
    seed: u64,
    horizon: f64,
    dt: f64,
) -> Result<WzInvarianceReport> {
    let out_grid = TimeGrid::new(horizon, dt)?;
    let driver_grid = TimeGrid::new(m as f64 * horizon + 1.0, dt)?;
    let maxes: Vec<Result<f64>> = par_map_ordered(n_paths, |i| {
        let driver = sample_noise(sys.noise_dim(), &driver_grid, rng_split(seed, i as u64))?;
        let (path, _) = wong_zakai_solve(sys, x0, u, m, &driver, &out_grid)?;
        let mut max_d = 0.0_f64;
        for state in &path.states {
            max_d = max_d.max(set.distance(state)?);
        }
        Ok(max_d)
    });
    let mut sum = 0.0;
    for v in maxes {
        sum += v?;
    }
    Ok(WzInvarianceReport {
        mean_max_distance: sum / n_paths as f64,
        m,
        n_paths,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Equivalence audit
// ---------------------------------------------------------------------------

/// Simulation budget for one audit.
#[derive(Debug, Clone, Serialize)]
pub struct AuditBudget {
    pub horizon: f64,
    pub dt: f64,
    pub mc_paths: usize,
    pub wz_paths: usize,
    pub wz_m: usize,
    /// Number of deterministic control probes v (constants, random
    /// piecewise-constant schedules, and one truncated schedule).
    pub det_probes: usize,
    pub max_starts: usize,
    pub max_controls: usize,
}

impl Default for AuditBudget {
    fn default() -> Self {
        AuditBudget {
            horizon: 1.0,
            dt: 1e-3,
            mc_paths: 500,
            wz_paths: 20,
            wz_m: 16,
            det_probes: 5,
            max_starts: 3,
            max_controls: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PointAudit {
    pub x: Vec<f64>,
    pub b: ConditionReport,
    pub c: ConditionReport,
    pub e: ConditionReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct DynamicsReport {
    pub mc: bool,
    pub ode: bool,
    pub wz: bool,
    pub mc_reports: Vec<McInvarianceReport>,
    pub ode_max_distance: f64,
    pub ode_runs: usize,
    pub wz_reports: Vec<WzInvarianceReport>,
}

/// Full audit result: per-point analytic verdicts, aggregated condition
/// verdicts, dynamic verdicts, and the consistency conclusion.
#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub system: String,
    pub set: String,
    pub seed: u64,
    pub n_boundary_points: usize,
    pub points: Vec<PointAudit>,
    pub conditions: BTreeMap<String, bool>,
    pub dynamics: DynamicsReport,
    pub verdict: String,
    pub consistent: bool,
    pub invariant: Option<bool>,
    pub tolerances: Tolerances,
    pub budget: AuditBudget,
    /// The analytic checks quantify over the canonical test functions φ = g
    /// at scanned boundary points, not over all of C²; see the docs.
    pub completeness_caveat: String,
}

impl AuditReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

/// Deterministic control probes: two constants, random piecewise-constant
/// schedules, and one truncation of a larger schedule.
pub fn deterministic_probes(d: usize, horizon: f64, count: usize, seed: u64) -> Vec<VControl> {
    let mut rng = stream_rng(seed, 1);
    let mut probes = Vec::with_capacity(count);
    probes.push(VControl::constant(vec![1.2; d]));
    if count > 1 {
        probes.push(VControl::constant(vec![-1.2; d]));
    }
    let pieces = 8;
    let breaks: Vec<f64> = (0..pieces).map(|k| horizon * k as f64 / pieces as f64).collect();
    while probes.len() < count.saturating_sub(1) {
        let values: Vec<Vec<f64>> = (0..pieces)
            .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        probes.push(VControl::piecewise(breaks.clone(), values));
    }
    if probes.len() < count {
        let values: Vec<Vec<f64>> = (0..pieces)
            .map(|_| (0..d).map(|_| rng.gen_range(-4.0..4.0)).collect())
            .collect();
        let wide = VControl::piecewise(breaks, values);
        probes.push(truncate_control(&wide, 1).expect("radius 1 is valid"));
    }
    probes.truncate(count);
    probes
}

/// Runs every analytic check at every scanned boundary point and every
/// dynamic check from boundary and interior starts, then requires all six
/// verdicts to agree.
pub fn equivalence_audit(
    sys: &ControlSystem,
    set: &ClosedSet,
    n_boundary: usize,
    seed: u64,
    budget: &AuditBudget,
    tol: &Tolerances,
) -> Result<AuditReport> {
    if sys.state_dim() != set.dim() {
        return Err(Error::InvalidInput(format!(
            "system dimension {} does not match set dimension {}",
            sys.state_dim(),
            set.dim()
        )));
    }
    let points = boundary_scan(set, n_boundary, rng_split(seed, 0), tol)?;

    // analytic conditions at every point
    let mut point_audits = Vec::with_capacity(points.len());
    for bp in &points {
        point_audits.push(PointAudit {
            x: bp.x.clone(),
            b: condition_b_check(sys, bp, tol)?,
            c: condition_c_check(sys, bp, tol)?,
            e: condition_e_check(sys, bp, 1.0, tol)?,
        });
    }
    let cond_b = point_audits.iter().all(|p| p.b.pass);
    let cond_c = point_audits.iter().all(|p| p.c.pass);
    let cond_e = point_audits.iter().all(|p| p.e.pass);

    // starts: boundary points plus inward nudges along -∇g
    let mut starts: Vec<Vec<f64>> = Vec::new();
    for bp in points.iter().take(budget.max_starts.max(1)) {
        starts.push(bp.x.clone());
        let grad = set.grad(&bp.x)?;
        let gn = norm(&grad);
        if gn > 0.0 {
            let inner: Vec<f64> = bp
                .x
                .iter()
                .zip(&grad)
                .map(|(xi, gi)| xi - 0.25 * gi / gn)
                .collect();
            if set.g(&inner)? <= tol.tol_set {
                starts.push(inner);
            }
        }
        if starts.len() >= budget.max_starts {
            break;
        }
    }
    starts.truncate(budget.max_starts.max(1));

    // control policies: constant controls plus one cycling schedule
    let controls: Vec<Vec<f64>> = sys
        .controls()
        .iter()
        .take(budget.max_controls.max(1))
        .cloned()
        .collect();
    let mut policies: Vec<Policy> = controls.iter().cloned().map(Policy::Constant).collect();
    if sys.controls().len() > 1 {
        let pieces: Vec<Vec<f64>> = sys.controls().to_vec();
        let breaks: Vec<f64> = (0..pieces.len())
            .map(|k| budget.horizon * k as f64 / pieces.len() as f64)
            .collect();
        policies.push(Policy::PiecewiseConstant {
            breaks,
            values: pieces,
        });
    }

    // Monte-Carlo stochastic checks
    let mut mc_reports = Vec::new();
    let mut mc_ok = true;
    for (si, start) in starts.iter().enumerate() {
        for (pi, policy) in policies.iter().enumerate() {
            let report = mc_invariance_estimate(
                sys,
                set,
                start,
                policy,
                budget.horizon,
                budget.dt,
                budget.mc_paths,
                rng_split(seed, 1000 + (si * policies.len() + pi) as u64),
                tol,
            )?;
            mc_ok &= report.is_invariant(tol);
            mc_reports.push(report);
        }
    }

    // deterministic checks with v probes
    let probes = deterministic_probes(
        sys.noise_dim(),
        budget.horizon,
        budget.det_probes,
        rng_split(seed, 2000),
    );
    let mut ode_max = 0.0_f64;
    let mut ode_runs = 0usize;
    for start in &starts {
        for policy in &policies {
            for v in &probes {
                let d = deterministic_invariance_check(
                    sys,
                    set,
                    start,
                    policy,
                    v,
                    budget.horizon,
                    budget.dt,
                    tol,
                )?;
                ode_max = ode_max.max(d);
                ode_runs += 1;
            }
        }
    }
    let ode_ok = ode_max <= tol.det_tol;

    // smoothed-noise checks with constant controls
    let mut wz_reports = Vec::new();
    let mut wz_ok = true;
    for (si, start) in starts.iter().take(2).enumerate() {
        for (ci, u) in controls.iter().enumerate() {
            let report = wong_zakai_invariance_estimate(
                sys,
                set,
                start,
                u,
                budget.wz_m,
                budget.wz_paths,
                rng_split(seed, 3000 + (si * controls.len() + ci) as u64),
                budget.horizon,
                budget.dt,
            )?;
            wz_ok &= report.mean_max_distance <= tol.wz_tol;
            wz_reports.push(report);
        }
    }

    let verdicts = [cond_b, cond_c, cond_e, mc_ok, ode_ok, wz_ok];
    let consistent = verdicts.iter().all(|&v| v) || verdicts.iter().all(|&v| !v);
    let verdict = if consistent && cond_b {
        "invariant, all checks agree".to_string()
    } else if consistent {
        "non-invariant, all checks agree".to_string()
    } else {
        format!(
            "inconsistent: b={cond_b} c={cond_c} e={cond_e} mc={mc_ok} ode={ode_ok} wz={wz_ok}"
        )
    };

    let mut conditions = BTreeMap::new();
    conditions.insert("b".to_string(), cond_b);
    conditions.insert("c".to_string(), cond_c);
    conditions.insert("e".to_string(), cond_e);

    Ok(AuditReport {
        system: sys.name().to_string(),
        set: set.name().to_string(),
        seed,
        n_boundary_points: points.len(),
        points: point_audits,
        conditions,
        dynamics: DynamicsReport {
            mc: mc_ok,
            ode: ode_ok,
            wz: wz_ok,
            mc_reports,
            ode_max_distance: ode_max,
            ode_runs,
            wz_reports,
        },
        verdict,
        consistent,
        invariant: if consistent { Some(cond_b) } else { None },
        tolerances: tol.clone(),
        budget: budget.clone(),
        completeness_caveat:
            "analytic conditions are checked for the canonical test function phi = g at sampled \
             boundary points; this family is a documented heuristic, not an exhaustive \
             quantification over C2 functions"
                .into(),
    })
}
