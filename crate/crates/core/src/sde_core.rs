//! System and set definitions and the differential operators acting on test
//! functions: the diffusion generator, the first-order operator of the
//! associated deterministic system, the Stratonovich drift correction, and
//! the second Lie-type derivatives assembled into the boundary matrix.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exprlang::{self, Dims, Expr, Wrt};
use crate::numerics::{self, Mat};

/// Evaluator closures. All return `Result` so expression-defined systems can
/// surface domain errors; catalog systems never fail.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> Result<Mat> + Send + Sync>;
pub type DriftFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<Vec<f64>> + Send + Sync>;
pub type DiffusionFn = Arc<dyn Fn(&[f64], &[f64]) -> Result<Mat> + Send + Sync>;
pub type DiffusionJacobianFn = Arc<dyn Fn(&[f64], &[f64], usize) -> Result<Mat> + Send + Sync>;

/// How a system's derivatives are produced; selects the matching equality
/// tolerance in the checkers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DerivativeKind {
    /// Hand-written closed-form derivatives.
    Analytic,
    /// Dual-number differentiation of parsed expressions.
    DualNumber,
}

/// Tolerances shared by the checkers. Everything is configurable; defaults
/// follow the derivative path: analytic derivatives keep noise near machine
/// precision, dual/finite-difference paths get looser equality bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Equality tolerance for analytic-derivative systems.
    pub tol_eq_analytic: f64,
    /// Equality tolerance for dual-number / finite-difference systems.
    pub tol_eq_dual: f64,
    /// Set membership: x counts as inside K when g(x) ≤ tol_set.
    pub tol_set: f64,
    /// Minimum |∇g| on the boundary; below this the scan rejects the point.
    pub grad_floor: f64,
    /// Max distance along a deterministic trajectory still counted invariant.
    pub det_tol: f64,
    /// Max mean of max-distance over smoothed-noise runs still counted invariant.
    pub wz_tol: f64,
    /// Max Monte-Carlo mean distance at checkpoints still counted invariant.
    pub mc_mean_tol: f64,
    /// Max fraction of paths with final distance above `mc_epsilon`.
    pub mc_frac_tol: f64,
    /// Distance threshold defining an excursion in the Monte-Carlo check.
    pub mc_epsilon: f64,
    /// Slack for the discounted-cost bound check.
    pub hjb_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_eq_analytic: 1e-8,
            tol_eq_dual: 1e-4,
            tol_set: 1e-12,
            grad_floor: 1e-6,
            det_tol: 1e-6,
            wz_tol: 1e-3,
            mc_mean_tol: 0.05,
            mc_frac_tol: 0.1,
            mc_epsilon: 0.1,
            hjb_slack: 0.02,
        }
    }
}

impl Tolerances {
    /// Equality tolerance appropriate for the given system's derivatives.
    pub fn tol_eq_for(&self, sys: &ControlSystem) -> f64 {
        match sys.derivative_kind() {
            DerivativeKind::Analytic => self.tol_eq_analytic,
            DerivativeKind::DualNumber => self.tol_eq_dual,
        }
    }
}

// ---------------------------------------------------------------------------
// ControlSystem
// ---------------------------------------------------------------------------

/// A controlled diffusion dX = b(X,u)dt + σ(X,u)dW with the column Jacobians
/// of σ available, plus a finite sample of the compact control set U.
///
/// All suprema over U in the checkers become maxima over `controls`. Fields
/// are immutable after construction; evaluation is pure, so values can be
/// shared freely across worker threads.
#[derive(Clone)]
pub struct ControlSystem {
    name: String,
    n: usize,
    d: usize,
    control_dim: usize,
    drift: DriftFn,
    diffusion: DiffusionFn,
    diffusion_jacobian: DiffusionJacobianFn,
    controls: Vec<Vec<f64>>,
    control_bounds: Option<(Vec<f64>, Vec<f64>)>,
    derivative_kind: DerivativeKind,
}

impl std::fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("d", &self.d)
            .field("control_dim", &self.control_dim)
            .field("controls", &self.controls.len())
            .field("derivative_kind", &self.derivative_kind)
            .finish()
    }
}

impl ControlSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        n: usize,
        d: usize,
        drift: DriftFn,
        diffusion: DiffusionFn,
        diffusion_jacobian: DiffusionJacobianFn,
        controls: Vec<Vec<f64>>,
        derivative_kind: DerivativeKind,
    ) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidInput(
                "state and noise dimensions must be positive".into(),
            ));
        }
        if controls.is_empty() {
            return Err(Error::InvalidInput(
                "the control sample must contain at least one point".into(),
            ));
        }
        let control_dim = controls[0].len();
        if controls.iter().any(|u| u.len() != control_dim) {
            return Err(Error::InvalidInput(
                "control points must share one dimension".into(),
            ));
        }
        Ok(ControlSystem {
            name: name.into(),
            n,
            d,
            control_dim,
            drift,
            diffusion,
            diffusion_jacobian,
            controls,
            control_bounds: None,
            derivative_kind,
        })
    }

    /// Builds a system from componentwise expressions: `b` has n entries,
    /// `sigma` is n rows by d columns. Column Jacobians come from dual-number
    /// differentiation of the σ entries.
    pub fn from_expressions(
        name: impl Into<String>,
        n: usize,
        d: usize,
        b_sources: &[String],
        sigma_sources: &[Vec<String>],
        controls: Vec<Vec<f64>>,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidInput(
                "the control sample must contain at least one point".into(),
            ));
        }
        let k = controls[0].len();
        let dims = Dims { n, k };
        if b_sources.len() != n {
            return Err(Error::InvalidInput(format!(
                "drift needs {} component expressions, got {}",
                n,
                b_sources.len()
            )));
        }
        if sigma_sources.len() != n || sigma_sources.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidInput(format!(
                "diffusion needs {}x{} entry expressions",
                n, d
            )));
        }
        let b_exprs: Vec<Expr> = b_sources
            .iter()
            .map(|s| exprlang::parse(s, dims))
            .collect::<std::result::Result<_, _>>()?;
        let sigma_exprs: Vec<Vec<Expr>> = sigma_sources
            .iter()
            .map(|row| {
                row.iter()
                    .map(|s| exprlang::parse(s, dims))
                    .collect::<std::result::Result<Vec<_>, _>>()
            })
            .collect::<std::result::Result<_, _>>()?;
        // σ gets differentiated; reject abs up front rather than at first use
        for row in &sigma_exprs {
            for e in row {
                if e.abs_offset().is_some() {
                    return Err(Error::InvalidInput(format!(
                        "`abs` is not allowed inside sigma entries (entry `{}`)",
                        e.source()
                    )));
                }
            }
        }

        let b = b_exprs.clone();
        let drift: DriftFn = Arc::new(move |x, u| {
            b.iter()
                .map(|e| exprlang::eval(e, x, u).map_err(Error::from))
                .collect()
        });
        let s = sigma_exprs.clone();
        let diffusion: DiffusionFn = Arc::new(move |x, u| {
            let mut m = Mat::zeros(s.len(), s[0].len());
            for (r, row) in s.iter().enumerate() {
                for (c, e) in row.iter().enumerate() {
                    m.set(r, c, exprlang::eval(e, x, u)?);
                }
            }
            Ok(m)
        });
        let s = sigma_exprs;
        let diffusion_jacobian: DiffusionJacobianFn = Arc::new(move |x, u, col| {
            if col >= s[0].len() {
                return Err(Error::IndexOutOfRange {
                    what: "diffusion column".into(),
                    index: col,
                    limit: s[0].len(),
                });
            }
            let n = s.len();
            let mut jac = Mat::zeros(n, n);
            for (r, row) in s.iter().enumerate() {
                let dual = exprlang::eval_dual(&row[col], x, u, Wrt::X)?;
                for c in 0..n {
                    jac.set(r, c, dual.partials[c]);
                }
            }
            Ok(jac)
        });

        ControlSystem::new(
            name,
            n,
            d,
            drift,
            diffusion,
            diffusion_jacobian,
            controls,
            DerivativeKind::DualNumber,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn noise_dim(&self) -> usize {
        self.d
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn controls(&self) -> &[Vec<f64>] {
        &self.controls
    }

    pub fn control_bounds(&self) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.control_bounds.as_ref()
    }

    pub fn with_control_bounds(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        self.control_bounds = Some((lower, upper));
        self
    }

    pub fn derivative_kind(&self) -> DerivativeKind {
        self.derivative_kind
    }

    /// b(x, u), with a finiteness check.
    pub fn drift(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        let v = (self.drift)(x, u)?;
        if v.len() != self.n || v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("drift of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    /// σ(x, u) as an n×d matrix, with a finiteness check.
    pub fn diffusion(&self, x: &[f64], u: &[f64]) -> Result<Mat> {
        let m = (self.diffusion)(x, u)?;
        if m.rows() != self.n || m.cols() != self.d || !m.is_finite() {
            return Err(Error::NonFinite {
                context: format!("diffusion of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(m)
    }

    /// Jacobian in x of the diffusion column `col` (0-based), n×n.
    pub fn diffusion_jacobian(&self, x: &[f64], u: &[f64], col: usize) -> Result<Mat> {
        if col >= self.d {
            return Err(Error::IndexOutOfRange {
                what: "diffusion column".into(),
                index: col,
                limit: self.d,
            });
        }
        let m = (self.diffusion_jacobian)(x, u, col)?;
        if m.rows() != self.n || m.cols() != self.n || !m.is_finite() {
            return Err(Error::NonFinite {
                context: format!("diffusion jacobian of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(m)
    }

    /// Smoke checks for the standing assumptions: the column Jacobians must
    /// agree with central finite differences of σ, and sampled Lipschitz
    /// quotients of b, σ and Dσ must stay bounded on a probe box.
    pub fn consistency_check(&self, n_probes: usize, seed: u64) -> Result<()> {
        use rand::Rng;
        let mut rng = numerics::stream_rng(seed, 0);
        let h = 1e-5;
        let lipschitz_cap = 1e3;
        let sample_point = |rng: &mut rand_chacha::ChaCha8Rng, dim: usize| -> Vec<f64> {
            (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        for probe in 0..n_probes {
            let x = sample_point(&mut rng, self.n);
            let u = self.controls[probe % self.controls.len()].clone();
            let jac_err = self.jacobian_fd_error(&x, &u, h)?;
            if jac_err > 1e-5 {
                return Err(Error::InvalidInput(format!(
                    "diffusion jacobian of `{}` disagrees with finite differences ({}  > 1e-5) at {:?}",
                    self.name, jac_err, x
                )));
            }
            // Lipschitz quotients on a nearby pair
            let y = sample_point(&mut rng, self.n);
            let dist: f64 = x
                .iter()
                .zip(&y)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-9 {
                continue;
            }
            let bx = self.drift(&x, &u)?;
            let by = self.drift(&y, &u)?;
            let qb = norm_diff(&bx, &by) / dist;
            let sx = self.diffusion(&x, &u)?;
            let sy = self.diffusion(&y, &u)?;
            let qs = mat_norm_diff(&sx, &sy) / dist;
            let mut qds: f64 = 0.0;
            for col in 0..self.d {
                let jx = self.diffusion_jacobian(&x, &u, col)?;
                let jy = self.diffusion_jacobian(&y, &u, col)?;
                qds = qds.max(mat_norm_diff(&jx, &jy) / dist);
            }
            if qb > lipschitz_cap || qs > lipschitz_cap || qds > lipschitz_cap {
                return Err(Error::InvalidInput(format!(
                    "sampled Lipschitz quotient of `{}` exceeds {} (b: {qb:.2e}, sigma: {qs:.2e}, dsigma: {qds:.2e})",
                    self.name, lipschitz_cap
                )));
            }
        }
        Ok(())
    }

    /// Max abs difference between `diffusion_jacobian` and a columnwise
    /// central finite difference of `diffusion` at one point.
    pub fn jacobian_fd_error(&self, x: &[f64], u: &[f64], h: f64) -> Result<f64> {
        let mut worst = 0.0_f64;
        for col in 0..self.d {
            let jac = self.diffusion_jacobian(x, u, col)?;
            for var in 0..self.n {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[var] += h;
                xm[var] -= h;
                let sp = self.diffusion(&xp, u)?;
                let sm = self.diffusion(&xm, u)?;
                for row in 0..self.n {
                    let fd = (sp.get(row, col) - sm.get(row, col)) / (2.0 * h);
                    worst = worst.max((fd - jac.get(row, var)).abs());
                }
            }
        }
        Ok(worst)
    }
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mat_norm_diff(a: &Mat, b: &Mat) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

// ---------------------------------------------------------------------------
// ClosedSet
// ---------------------------------------------------------------------------

/// A closed set K = {g ≤ 0} with a C² defining function and a distance
/// oracle. Catalog sets ship analytic distances; expression-defined sets use
/// a Newton-projection approximation.
#[derive(Clone)]
pub struct ClosedSet {
    name: String,
    n: usize,
    g: ScalarFn,
    dg: VectorFn,
    d2g: MatrixFn,
    distance: ScalarFn,
}

impl std::fmt::Debug for ClosedSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ClosedSet")
            .field("name", &self.name)
            .field("n", &self.n)
            .finish()
    }
}

impl ClosedSet {
    pub fn new(
        name: impl Into<String>,
        n: usize,
        g: ScalarFn,
        dg: VectorFn,
        d2g: MatrixFn,
        distance: ScalarFn,
    ) -> Self {
        ClosedSet {
            name: name.into(),
            n,
            g,
            dg,
            d2g,
            distance,
        }
    }

    /// Builds a set from an expression for g; gradient and Hessian come from
    /// dual numbers and the distance from Newton projection onto {g = 0}.
    pub fn from_expression(name: impl Into<String>, n: usize, g_source: &str) -> Result<Self> {
        let dims = Dims { n, k: 0 };
        let expr = exprlang::parse(g_source, dims)?;
        if expr.abs_offset().is_some() {
            return Err(Error::InvalidInput(
                "`abs` is not allowed in a set-defining function (it gets differentiated)".into(),
            ));
        }
        let e = expr.clone();
        let g: ScalarFn = Arc::new(move |x| exprlang::eval(&e, x, &[]).map_err(Error::from));
        let e = expr.clone();
        let dg: VectorFn = Arc::new(move |x| {
            Ok(exprlang::eval_dual(&e, x, &[], Wrt::X)?.partials)
        });
        let e = expr.clone();
        let d2g: MatrixFn = Arc::new(move |x| {
            let (_, _, h) = exprlang::eval_hessian(&e, x, &[])?;
            Ok(h)
        });

        let g2 = g.clone();
        let dg2 = dg.clone();
        let distance: ScalarFn = Arc::new(move |x| {
            if g2(x)? <= 1e-12 {
                return Ok(0.0);
            }
            // projected descent: Newton iterations toward {g = 0}
            let mut z = x.to_vec();
            for _ in 0..64 {
                let gz = g2(&z)?;
                if gz.abs() <= 1e-12 {
                    break;
                }
                let grad = dg2(&z)?;
                let gg = dot(&grad, &grad);
                if gg < 1e-18 {
                    return Err(Error::InvalidInput(format!(
                        "distance projection stalled: |grad g| ~ 0 at {z:?}"
                    )));
                }
                for i in 0..z.len() {
                    z[i] -= gz * grad[i] / gg;
                }
            }
            Ok(norm_diff(x, &z))
        });
        Ok(ClosedSet::new(name, n, g, dg, d2g, distance))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn g(&self, x: &[f64]) -> Result<f64> {
        let v = (self.g)(x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("g of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = (self.dg)(x)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("grad g of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Mat> {
        let m = (self.d2g)(x)?;
        if !m.is_finite() {
            return Err(Error::NonFinite {
                context: format!("hessian g of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(m)
    }

    /// d_K(x) ≥ 0.
    pub fn distance(&self, x: &[f64]) -> Result<f64> {
        let v = (self.distance)(x)?;
        if !v.is_finite() || v < 0.0 {
            return Err(Error::NonFinite {
                context: format!("distance of `{}`", self.name),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn contains(&self, x: &[f64], tol_set: f64) -> Result<bool> {
        Ok(self.g(x)? <= tol_set)
    }

    /// The canonical test function φ = g: it attains its maximum over
    /// K = {g ≤ 0}, namely 0, at every boundary point.
    pub fn as_test_function(&self) -> TestFunction {
        TestFunction {
            value: self.g.clone(),
            grad: self.dg.clone(),
            hess: self.d2g.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// TestFunction
// ---------------------------------------------------------------------------

/// A C² scalar test function with value, gradient, and Hessian evaluators.
#[derive(Clone)]
pub struct TestFunction {
    value: ScalarFn,
    grad: VectorFn,
    hess: MatrixFn,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("TestFunction")
    }
}

impl TestFunction {
    pub fn new(value: ScalarFn, grad: VectorFn, hess: MatrixFn) -> Self {
        TestFunction { value, grad, hess }
    }

    /// φ(x) = ½ xᵀQx + pᵀx + c with exact derivatives. Q is symmetrized.
    pub fn quadratic(q: Mat, p: Vec<f64>, c: f64) -> Self {
        let qs = q.symmetrize();
        let q1 = qs.clone();
        let p1 = p.clone();
        let value: ScalarFn = Arc::new(move |x| {
            let qx = q1.matvec(x);
            Ok(0.5 * dot(x, &qx) + dot(&p1, x) + c)
        });
        let q2 = qs.clone();
        let grad: VectorFn = Arc::new(move |x| {
            let mut v = q2.matvec(x);
            for (vi, pi) in v.iter_mut().zip(&p) {
                *vi += pi;
            }
            Ok(v)
        });
        let hess: MatrixFn = Arc::new(move |_| Ok(qs.clone()));
        TestFunction { value, grad, hess }
    }

    /// Gaussian bump φ(x) = s·exp(−|x − a|²) with exact derivatives.
    pub fn gaussian_bump(center: Vec<f64>, scale: f64) -> Self {
        let a1 = center.clone();
        let value: ScalarFn = Arc::new(move |x| {
            let r2: f64 = x.iter().zip(&a1).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum();
            Ok(scale * (-r2).exp())
        });
        let a2 = center.clone();
        let grad: VectorFn = Arc::new(move |x| {
            let r2: f64 = x.iter().zip(&a2).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum();
            let v = scale * (-r2).exp();
            Ok(x.iter().zip(&a2).map(|(xi, ai)| -2.0 * (xi - ai) * v).collect())
        });
        let a3 = center;
        let hess: MatrixFn = Arc::new(move |x| {
            let n = x.len();
            let r2: f64 = x.iter().zip(&a3).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum();
            let v = scale * (-r2).exp();
            let mut h = Mat::zeros(n, n);
            for i in 0..n {
                for j in 0..n {
                    let mut e = 4.0 * (x[i] - a3[i]) * (x[j] - a3[j]) * v;
                    if i == j {
                        e -= 2.0 * v;
                    }
                    h.set(i, j, e);
                }
            }
            Ok(h)
        });
        TestFunction { value, grad, hess }
    }

    /// Parses φ from an expression over x1..xn; derivatives via dual numbers.
    pub fn from_expression(n: usize, source: &str) -> Result<Self> {
        let expr = exprlang::parse(source, Dims { n, k: 0 })?;
        if expr.abs_offset().is_some() {
            return Err(Error::InvalidInput(
                "`abs` is not allowed in a test function (it gets differentiated)".into(),
            ));
        }
        let e = expr.clone();
        let value: ScalarFn = Arc::new(move |x| exprlang::eval(&e, x, &[]).map_err(Error::from));
        let e = expr.clone();
        let grad: VectorFn =
            Arc::new(move |x| Ok(exprlang::eval_dual(&e, x, &[], Wrt::X)?.partials));
        let e = expr;
        let hess: MatrixFn = Arc::new(move |x| {
            let (_, _, h) = exprlang::eval_hessian(&e, x, &[])?;
            Ok(h)
        });
        Ok(TestFunction { value, grad, hess })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let v = (self.value)(x)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: "test function value".into(),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        let v = (self.grad)(x)?;
        if v.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite {
                context: "test function gradient".into(),
                point: x.to_vec(),
            });
        }
        Ok(v)
    }

    pub fn hessian(&self, x: &[f64]) -> Result<Mat> {
        let m = (self.hess)(x)?;
        if !m.is_finite() {
            return Err(Error::NonFinite {
                context: "test function hessian".into(),
                point: x.to_vec(),
            });
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Operators
// ---------------------------------------------------------------------------

/// Stratonovich drift b̃(x,u) = b(x,u) − ½ Σᵢ (Dσⁱ)(x,u) · σⁱ(x,u).
///
/// When σ is constant in x every Jacobian vanishes and b̃ = b exactly.
pub fn stratonovich_drift(sys: &ControlSystem, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    let mut out = sys.drift(x, u)?;
    let sigma = sys.diffusion(x, u)?;
    for col in 0..sys.noise_dim() {
        let jac = sys.diffusion_jacobian(x, u, col)?;
        let s_col = sigma.column(col);
        let correction = jac.matvec(&s_col);
        for i in 0..sys.state_dim() {
            out[i] -= 0.5 * correction[i];
        }
    }
    Ok(out)
}

/// Second-order generator L_{x,u}φ = ⟨b(x,u), Dφ(x)⟩ + ½ tr(D²φ(x) σσ*(x,u)).
///
/// Satisfies the trace identity Lφ = L′φ + ½ tr A with A from
/// [`assemble_a_matrix`].
pub fn generator_second_order(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
) -> Result<f64> {
    let b = sys.drift(x, u)?;
    let grad = phi.grad(x)?;
    let hess = phi.hessian(x)?;
    let sigma = sys.diffusion(x, u)?;
    // tr(D²φ σσ*) = Σ_i ⟨σ^i, D²φ σ^i⟩
    let mut trace = 0.0;
    for col in 0..sys.noise_dim() {
        let s_col = sigma.column(col);
        trace += dot(&s_col, &hess.matvec(&s_col));
    }
    let value = dot(&b, &grad) + 0.5 * trace;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "second-order generator".into(),
            point: x.to_vec(),
        });
    }
    Ok(value)
}

/// First-order operator L′_{x,u}φ = ⟨b̃(x,u), Dφ(x)⟩.
pub fn generator_first_order(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
) -> Result<f64> {
    let bt = stratonovich_drift(sys, x, u)?;
    let grad = phi.grad(x)?;
    let value = dot(&bt, &grad);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "first-order operator".into(),
            point: x.to_vec(),
        });
    }
    Ok(value)
}

/// σⁱ_u φ(x) = ⟨σⁱ(x,u), Dφ(x)⟩ for the 0-based column `i`.
pub fn sigma_apply(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    i: usize,
) -> Result<f64> {
    if i >= sys.noise_dim() {
        return Err(Error::IndexOutOfRange {
            what: "sigma_apply column".into(),
            index: i,
            limit: sys.noise_dim(),
        });
    }
    let sigma = sys.diffusion(x, u)?;
    let grad = phi.grad(x)?;
    Ok(dot(&sigma.column(i), &grad))
}

/// σⁱ_u σʲ_u φ(x) = ⟨σⁱ, (Dσʲ)ᵀ Dφ + D²φ σʲ⟩ — the derivative of
/// x ↦ ⟨σʲ(x,u), Dφ(x)⟩ along σⁱ(x,u).
pub fn sigma_second_apply(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    i: usize,
    j: usize,
) -> Result<f64> {
    let d = sys.noise_dim();
    if i >= d || j >= d {
        return Err(Error::IndexOutOfRange {
            what: "sigma_second_apply column".into(),
            index: i.max(j),
            limit: d,
        });
    }
    let sigma = sys.diffusion(x, u)?;
    let grad = phi.grad(x)?;
    let hess = phi.hessian(x)?;
    let jac_j = sys.diffusion_jacobian(x, u, j)?;
    let s_i = sigma.column(i);
    let s_j = sigma.column(j);
    // D⟨σ^j, Dφ⟩ = (Dσ^j)ᵀ Dφ + D²φ σ^j
    let mut inner = jac_j.t_matvec(&grad);
    let hs = hess.matvec(&s_j);
    for (a, b) in inner.iter_mut().zip(&hs) {
        *a += b;
    }
    let value = dot(&s_i, &inner);
    if !value.is_finite() {
        return Err(Error::NonFinite {
            context: "sigma_second_apply".into(),
            point: x.to_vec(),
        });
    }
    Ok(value)
}

/// The d×d boundary matrix with entries A[i][j] = σⁱ_u σʲ_u φ(x). Raw values,
/// no symmetrization: symmetry is one of the conditions being checked.
pub fn assemble_a_matrix(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
) -> Result<Mat> {
    let d = sys.noise_dim();
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            a.set(i, j, sigma_second_apply(sys, phi, x, u, i, j)?);
        }
    }
    Ok(a)
}
