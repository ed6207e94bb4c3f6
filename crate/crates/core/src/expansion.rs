//! Stochastic Taylor expansion machinery: the coefficient set
//! (α, β, γ, δ) of the expansion
//!
//! ```text
//! φ(X_t) = φ(x) + Σᵢ αᵢ Wⁱ_t + Σᵢ βᵢ (Wⁱ_t)² + Σ_{i≠j} γᵢⱼ ∫₀ᵗ Wⁱ dWʲ + δ·t + R_t
//! ```
//!
//! sampled remainders R_t, a decay test for R_t/t → 0 in probability, and a
//! Monte-Carlo falsifier for the coefficient inequality S_t ≤ 0 with its
//! structural conclusions (α = 0, γ symmetric, A negative semidefinite,
//! δ ≤ 0).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{self, par_map_ordered, rng_split, Mat};
use crate::paths::{euler_maruyama, sample_noise, Policy, TimeGrid};
use crate::sde_core::{
    generator_first_order, sigma_apply, sigma_second_apply, ControlSystem, TestFunction,
};

/// Verdict threshold for the falsifier: valid coefficient sets stay below a
/// few percent (pure iterated-integral discretization), violated ones exceed
/// 0.2 at some time.
pub const FALSIFIER_VERDICT_THRESHOLD: f64 = 0.1;

// ---------------------------------------------------------------------------
// TaylorCoefficients
// ---------------------------------------------------------------------------

/// Coefficients of the expansion at a point (x, u):
/// αᵢ = σⁱ_u φ(x), βᵢ = ½(σⁱ_u)²φ(x), γᵢⱼ = σʲ_u σⁱ_u φ(x) for i ≠ j
/// (the coefficient of ∫Wⁱ dWʲ, in that operator order), δ = b̃_u φ(x).
///
/// βᵢ carries the ½ so that the conclusion matrix with A_ii = 2βᵢ coincides
/// with the boundary matrix of [`crate::sde_core::assemble_a_matrix`].
#[derive(Debug, Clone, Serialize)]
pub struct TaylorCoefficients {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// d×d with a structurally zero diagonal.
    gamma: Vec<Vec<f64>>,
    pub delta: f64,
}

impl TaylorCoefficients {
    /// Builds a coefficient set from raw parts. The γ diagonal must be zero
    /// (there is no ∫Wⁱ dWⁱ term; that weight lives in β).
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>, gamma: Vec<Vec<f64>>, delta: f64) -> Result<Self> {
        let d = alpha.len();
        if d == 0 {
            return Err(Error::InvalidInput("coefficients need dimension ≥ 1".into()));
        }
        if beta.len() != d || gamma.len() != d || gamma.iter().any(|row| row.len() != d) {
            return Err(Error::InvalidInput(format!(
                "coefficient dimensions disagree (alpha: {}, beta: {}, gamma: {}x?)",
                d,
                beta.len(),
                gamma.len()
            )));
        }
        let all = alpha
            .iter()
            .chain(beta.iter())
            .chain(gamma.iter().flatten())
            .chain(std::iter::once(&delta));
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("coefficients must be finite".into()));
        }
        if (0..d).any(|i| gamma[i][i] != 0.0) {
            return Err(Error::InvalidInput(
                "gamma has no diagonal: diagonal entries must be zero".into(),
            ));
        }
        Ok(TaylorCoefficients {
            alpha,
            beta,
            gamma,
            delta,
        })
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    /// γᵢⱼ for i ≠ j.
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        debug_assert_ne!(i, j, "gamma has no diagonal");
        self.gamma[i][j]
    }

    pub fn gamma_rows(&self) -> &[Vec<f64>] {
        &self.gamma
    }

    /// S_t for one realized driver: requires W(t) and the iterated integrals
    /// I[i][j](t) evaluated on the same grid.
    pub fn inequality_value(&self, w: &[f64], iterated: &dyn Fn(usize, usize) -> f64, t: f64) -> f64 {
        let d = self.dim();
        let mut s = self.delta * t;
        for i in 0..d {
            s += self.alpha[i] * w[i] + self.beta[i] * w[i] * w[i];
        }
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    s += self.gamma[i][j] * iterated(i, j);
                }
            }
        }
        s
    }
}

/// Coefficients of the stochastic Taylor expansion of φ(X^{x,u}_t) at (x, u)
/// for a constant control, via the differential operators of the system.
pub fn taylor_coefficients(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
) -> Result<TaylorCoefficients> {
    let d = sys.noise_dim();
    let mut alpha = Vec::with_capacity(d);
    let mut beta = Vec::with_capacity(d);
    let mut gamma = vec![vec![0.0; d]; d];
    for i in 0..d {
        alpha.push(sigma_apply(sys, phi, x, u, i)?);
        beta.push(0.5 * sigma_second_apply(sys, phi, x, u, i, i)?);
        for j in 0..d {
            if i != j {
                // coefficient of ∫Wⁱ dWʲ is σʲ_u σⁱ_u φ
                gamma[i][j] = sigma_second_apply(sys, phi, x, u, j, i)?;
            }
        }
    }
    let delta = generator_first_order(sys, phi, x, u)?;
    TaylorCoefficients::new(alpha, beta, gamma, delta)
}

// ---------------------------------------------------------------------------
// Remainder sampling
// ---------------------------------------------------------------------------

/// One realized remainder R_t = φ(X_t) − φ(x) − (expansion terms).
#[derive(Debug, Clone, Serialize)]
pub struct RemainderSample {
    pub t: f64,
    pub r: f64,
    pub seed: u64,
}

/// Samples N remainders at time `t` by simulating X with Euler–Maruyama on a
/// grid with dt = t/1000 and reading W and its iterated integrals off the
/// same noise bundle.
pub fn taylor_remainder_samples(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    t: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RemainderSample>> {
    taylor_remainder_samples_with_dt(sys, phi, x, u, t, t / 1000.0, n_samples, seed)
}

/// Same with an explicit step; `dt` must not exceed t/1000.
#[allow(clippy::too_many_arguments)]
pub fn taylor_remainder_samples_with_dt(
    sys: &ControlSystem,
    phi: &TestFunction,
    x: &[f64],
    u: &[f64],
    t: f64,
    dt: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<RemainderSample>> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("time {t} must be positive")));
    }
    if dt > t / 1000.0 + 1e-15 {
        return Err(Error::InvalidInput(format!(
            "remainder sampling needs dt ≤ t/1000 (got dt = {dt}, t = {t})"
        )));
    }
    let grid = TimeGrid::new(t, dt)?;
    let coeffs = taylor_coefficients(sys, phi, x, u)?;
    let phi_x = phi.value(x)?;
    let policy = Policy::Constant(u.to_vec());
    let results: Vec<Result<RemainderSample>> = par_map_ordered(n_samples, |i| {
        let path_seed = rng_split(seed, i as u64);
        let bundle = sample_noise(sys.noise_dim(), &grid, path_seed)?;
        let path = euler_maruyama(sys, x, &policy, &bundle)?;
        let k = grid.steps();
        let w = bundle.w_at(k);
        let s = coeffs.inequality_value(w, &|a, b| bundle.iterated_at(a, b, k), t);
        let r = phi.value(path.terminal())? - phi_x - s;
        Ok(RemainderSample {
            t,
            r,
            seed: path_seed,
        })
    });
    results.into_iter().collect()
}

/// Report of the remainder decay test: empirical P[|R_t|/t > ε] per time.
#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub epsilon: f64,
    /// Statistical slack 2/√N used in the monotonicity comparison.
    pub slack: f64,
    pub verdict: String,
    pub pass: bool,
}

impl DecayReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

/// Tests that P[|R_t|/t > ε] decays as t ↓ 0: the sequence (ordered by
/// decreasing t) must be nonincreasing within slack 2/√N and must end at a
/// statistically-zero level (final probability ≤ 2/√N).
pub fn remainder_decay_test(samples_by_time: &[Vec<RemainderSample>], epsilon: f64) -> Result<DecayReport> {
    if samples_by_time.len() < 3 {
        return Err(Error::InsufficientSamples {
            what: "remainder decay test (need ≥ 3 times)".into(),
            needed: 3,
            got: samples_by_time.len(),
        });
    }
    let mut times = Vec::new();
    let mut probabilities = Vec::new();
    let mut min_n = usize::MAX;
    for group in samples_by_time {
        if group.len() < 500 {
            return Err(Error::InsufficientSamples {
                what: "remainder decay test (per-time sample count)".into(),
                needed: 500,
                got: group.len(),
            });
        }
        min_n = min_n.min(group.len());
        let t = group[0].t;
        if group.iter().any(|s| s.t != t) {
            return Err(Error::InvalidInput(
                "each sample group must share one time".into(),
            ));
        }
        times.push(t);
        let hits = group.iter().filter(|s| (s.r / t).abs() > epsilon).count();
        probabilities.push(hits as f64 / group.len() as f64);
    }
    if !times.windows(2).all(|w| w[0] > w[1]) {
        return Err(Error::InvalidInput(
            "times must be strictly decreasing".into(),
        ));
    }
    let slack = 2.0 / (min_n as f64).sqrt();
    let monotone = probabilities
        .windows(2)
        .all(|w| w[1] <= w[0] + slack);
    let vanishing = *probabilities.last().unwrap() <= slack;
    let pass = monotone && vanishing;
    Ok(DecayReport {
        times,
        probabilities,
        epsilon,
        slack,
        verdict: if pass {
            "remainder decays".into()
        } else {
            "remainder does not decay".into()
        },
        pass,
    })
}

// ---------------------------------------------------------------------------
// Conclusion matrix and structural checks
// ---------------------------------------------------------------------------

/// The conclusion matrix: A_ii = 2βᵢ, A_ij = γᵢⱼ off the diagonal.
pub fn assemble_a(coeffs: &TaylorCoefficients) -> Mat {
    let d = coeffs.dim();
    let mut a = Mat::zeros(d, d);
    for i in 0..d {
        a.set(i, i, 2.0 * coeffs.beta[i]);
        for j in 0..d {
            if i != j {
                a.set(i, j, coeffs.gamma(i, j));
            }
        }
    }
    a
}

/// Structural conclusions drawn from a coefficient set.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaVerdict {
    pub alpha_zero: bool,
    pub gamma_symmetric: bool,
    pub a_nsd: bool,
    pub delta_nonpositive: bool,
    pub max_abs_alpha: f64,
    pub max_gamma_asymmetry: f64,
    pub lambda_max: f64,
    pub delta: f64,
    pub tol: f64,
}

impl LemmaVerdict {
    pub fn all_pass(&self) -> bool {
        self.alpha_zero && self.gamma_symmetric && self.a_nsd && self.delta_nonpositive
    }
}

/// Checks the conclusions: max|αᵢ| ≤ tol, max|γᵢⱼ − γⱼᵢ| ≤ tol,
/// λ_max(sym A) ≤ tol, δ ≤ tol.
pub fn lemma_conclusion_check(coeffs: &TaylorCoefficients, tol: f64) -> Result<LemmaVerdict> {
    let d = coeffs.dim();
    let max_abs_alpha = coeffs.alpha.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut max_gamma_asymmetry = 0.0_f64;
    for i in 0..d {
        for j in (i + 1)..d {
            max_gamma_asymmetry =
                max_gamma_asymmetry.max((coeffs.gamma(i, j) - coeffs.gamma(j, i)).abs());
        }
    }
    let a = assemble_a(coeffs);
    let spectrum = numerics::symmetric_eigenvalues(&a)?;
    let lambda_max = spectrum.lambda_max();
    Ok(LemmaVerdict {
        alpha_zero: max_abs_alpha <= tol,
        gamma_symmetric: max_gamma_asymmetry <= tol,
        a_nsd: lambda_max <= tol,
        delta_nonpositive: coeffs.delta <= tol,
        max_abs_alpha,
        max_gamma_asymmetry,
        lambda_max,
        delta: coeffs.delta,
        tol,
    })
}

// ---------------------------------------------------------------------------
// Falsifier
// ---------------------------------------------------------------------------

/// Monte-Carlo estimates of P[S_t > 0] per requested time.
#[derive(Debug, Clone, Serialize)]
pub struct FalsifierReport {
    pub times: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub max_probability: f64,
    pub verdict: String,
    pub seed: u64,
    pub n_samples: usize,
}

impl FalsifierReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

/// Estimates P[S_t > 0] for S_t = Σαᵢ Wⁱ_t + Σβᵢ (Wⁱ_t)² + Σ γᵢⱼ ∫Wⁱ dWʲ + δt
/// by direct sampling with fresh paths per time (grid step t/1000, so the
/// discretization noise of the iterated integrals scales with t).
///
/// If the structural conclusions hold exactly and γ is symmetric, then
/// S_t = ½⟨W_t, A W_t⟩ + δt ≤ 0 pathwise and the estimates stay at the
/// discretization floor; if any conclusion fails, some small-t estimate
/// exceeds 0.2.
pub fn lemma_falsifier(
    coeffs: &TaylorCoefficients,
    times: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<FalsifierReport> {
    if times.is_empty() {
        return Err(Error::InvalidInput("falsifier needs at least one time".into()));
    }
    if times.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
        return Err(Error::InvalidInput("falsifier times must be positive".into()));
    }
    if n_samples < 1000 {
        return Err(Error::InsufficientSamples {
            what: "lemma falsifier".into(),
            needed: 1000,
            got: n_samples,
        });
    }
    let d = coeffs.dim();
    let mut probabilities = Vec::with_capacity(times.len());
    for (t_idx, &t) in times.iter().enumerate() {
        let grid = TimeGrid::new(t, t / 1000.0)?;
        let time_seed = rng_split(seed, t_idx as u64);
        let hits: Vec<Result<bool>> = par_map_ordered(n_samples, |i| {
            let bundle = sample_noise(d, &grid, rng_split(time_seed, i as u64))?;
            let k = grid.steps();
            let w = bundle.w_at(k);
            let s = coeffs.inequality_value(w, &|a, b| bundle.iterated_at(a, b, k), t);
            Ok(s > 0.0)
        });
        let mut count = 0usize;
        for h in hits {
            if h? {
                count += 1;
            }
        }
        probabilities.push(count as f64 / n_samples as f64);
    }
    let max_probability = probabilities.iter().cloned().fold(0.0, f64::max);
    Ok(FalsifierReport {
        times: times.to_vec(),
        probabilities,
        max_probability,
        verdict: if max_probability <= FALSIFIER_VERDICT_THRESHOLD {
            "hypothesis plausible".into()
        } else {
            "hypothesis violated".into()
        },
        seed,
        n_samples,
    })
}

/// JSON with deterministically sorted keys.
pub(crate) fn sorted_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable report");
    serde_json::to_string_pretty(&v).expect("printable report")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::sde_core::{assemble_a_matrix, DerivativeKind};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    fn disk_phi() -> TestFunction {
        catalog::set("disk").unwrap().as_test_function()
    }

    #[test]
    fn coefficients_vanish_for_conserved_function() {
        let sys = catalog::system("circle").unwrap();
        let c = taylor_coefficients(&sys, &disk_phi(), &[1.0, 0.0], &[0.0]).unwrap();
        assert_eq!(c.dim(), 1);
        assert_relative_eq!(c.alpha[0], 0.0);
        assert_relative_eq!(c.beta[0], 0.0);
        assert_relative_eq!(c.delta, 0.0);
    }

    #[test]
    fn coefficients_pure_drift() {
        let sys = crate::sde_core::ControlSystem::new(
            "pure-drift",
            2,
            1,
            Arc::new(|_: &[f64], _: &[f64]| Ok(vec![0.7, -0.3])),
            Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(2, 1))),
            Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
            vec![vec![0.0]],
            DerivativeKind::Analytic,
        )
        .unwrap();
        let phi = disk_phi();
        let x = [0.2, 0.5];
        let c = taylor_coefficients(&sys, &phi, &x, &[0.0]).unwrap();
        assert_relative_eq!(c.alpha[0], 0.0);
        assert_relative_eq!(c.beta[0], 0.0);
        let grad = phi.grad(&x).unwrap();
        assert_relative_eq!(c.delta, 0.7 * grad[0] - 0.3 * grad[1], epsilon = 1e-14);
    }

    #[test]
    fn coefficients_scalar_additive_noise() {
        // n=d=1, σ=1, b=0, φ(x)=x at x=0: α=(1), β=(0), δ=0
        let sys = scalar_additive();
        let phi = TestFunction::quadratic(Mat::zeros(1, 1), vec![1.0], 0.0);
        let c = taylor_coefficients(&sys, &phi, &[0.0], &[0.0]).unwrap();
        assert_relative_eq!(c.alpha[0], 1.0);
        assert_relative_eq!(c.beta[0], 0.0);
        assert_relative_eq!(c.delta, 0.0);
    }

    fn scalar_additive() -> ControlSystem {
        crate::sde_core::ControlSystem::new(
            "scalar-additive",
            1,
            1,
            Arc::new(|_: &[f64], _: &[f64]| Ok(vec![0.0])),
            Arc::new(|_: &[f64], _: &[f64]| {
                let mut m = Mat::zeros(1, 1);
                m.set(0, 0, 1.0);
                Ok(m)
            }),
            Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(1, 1))),
            vec![vec![0.0]],
            DerivativeKind::Analytic,
        )
        .unwrap()
    }

    #[test]
    fn conclusion_matrix_matches_boundary_matrix_on_catalog() {
        // assemble_a(taylor_coefficients) equals the operator-built matrix,
        // with the diagonal through 2βᵢ, for the canonical φ = g.
        for entry in catalog::entries() {
            let sys = catalog::system(entry.system_name).unwrap();
            let set = catalog::set(entry.set_name).unwrap();
            let phi = set.as_test_function();
            let mut rng = crate::numerics::stream_rng(17, 0);
            use rand::Rng;
            for _ in 0..20 {
                let x: Vec<f64> = (0..sys.state_dim())
                    .map(|_| rng.gen_range(-1.5..1.5))
                    .collect();
                for u in sys.controls() {
                    let c = taylor_coefficients(&sys, &phi, &x, u).unwrap();
                    let from_coeffs = assemble_a(&c);
                    let direct = assemble_a_matrix(&sys, &phi, &x, u).unwrap();
                    for i in 0..sys.noise_dim() {
                        for j in 0..sys.noise_dim() {
                            assert!(
                                (from_coeffs.get(i, j) - direct.get(i, j)).abs() <= 1e-8,
                                "{}: A mismatch at ({i},{j})",
                                entry.system_name
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn assemble_a_shapes() {
        let c = TaylorCoefficients::new(vec![0.0], vec![-1.0], vec![vec![0.0]], -1.0).unwrap();
        let a = assemble_a(&c);
        assert_relative_eq!(a.get(0, 0), -2.0);

        let c = TaylorCoefficients::new(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
            0.0,
        )
        .unwrap();
        let a = assemble_a(&c);
        let spec = numerics::symmetric_eigenvalues(&a).unwrap();
        assert_eq!(spec.max_asymmetry, 0.0);
        // eigenvalues ±1: symmetric but not negative semidefinite
        assert_relative_eq!(spec.eigenvalues[0], -1.0, epsilon = 1e-12);
        assert_relative_eq!(spec.eigenvalues[1], 1.0, epsilon = 1e-12);
        assert!(!lemma_conclusion_check(&c, 1e-10).unwrap().a_nsd);
    }

    #[test]
    fn conclusion_check_cases() {
        let pass = TaylorCoefficients::new(vec![0.0], vec![-1.0], vec![vec![0.0]], -1.0).unwrap();
        let v = lemma_conclusion_check(&pass, 1e-12).unwrap();
        assert!(v.all_pass());

        let bad_alpha =
            TaylorCoefficients::new(vec![1.0, 0.0], vec![0.0, 0.0], vec![vec![0.0; 2]; 2], 0.0)
                .unwrap();
        let v = lemma_conclusion_check(&bad_alpha, 1e-12).unwrap();
        assert!(!v.alpha_zero);
        assert!(v.gamma_symmetric && v.delta_nonpositive);

        let antisym = TaylorCoefficients::new(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            0.0,
        )
        .unwrap();
        let v = lemma_conclusion_check(&antisym, 1e-12).unwrap();
        assert!(!v.gamma_symmetric);

        // circle boundary case: A = [0], the NSD boundary
        let sys = catalog::system("circle").unwrap();
        let c = taylor_coefficients(&sys, &disk_phi(), &[1.0, 0.0], &[0.0]).unwrap();
        let v = lemma_conclusion_check(&c, 1e-10).unwrap();
        assert!(v.all_pass());
        assert_relative_eq!(v.lambda_max, 0.0);
    }

    #[test]
    fn gamma_diagonal_rejected() {
        assert!(TaylorCoefficients::new(vec![0.0], vec![0.0], vec![vec![1.0]], 0.0).is_err());
        assert!(TaylorCoefficients::new(vec![f64::NAN], vec![0.0], vec![vec![0.0]], 0.0).is_err());
    }

    #[test]
    fn remainder_exact_cases() {
        // σ≡0, constant b, affine φ: the expansion is exact
        let sys = crate::sde_core::ControlSystem::new(
            "translate",
            2,
            1,
            Arc::new(|_: &[f64], _: &[f64]| Ok(vec![0.4, -0.2])),
            Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(2, 1))),
            Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
            vec![vec![0.0]],
            DerivativeKind::Analytic,
        )
        .unwrap();
        let phi = TestFunction::quadratic(Mat::zeros(2, 2), vec![1.0, 2.0], 0.5);
        let samples =
            taylor_remainder_samples(&sys, &phi, &[0.1, 0.1], &[0.0], 0.5, 10, 5).unwrap();
        for s in samples {
            assert!(s.r.abs() <= 1e-12, "remainder {}", s.r);
        }

        // n=d=1, σ=1, b=0, φ(x)=x: Euler is exact and the expansion is linear
        let sys = scalar_additive();
        let phi = TestFunction::quadratic(Mat::zeros(1, 1), vec![1.0], 0.0);
        let samples = taylor_remainder_samples(&sys, &phi, &[0.0], &[0.0], 0.2, 10, 6).unwrap();
        for s in samples {
            assert!(s.r.abs() <= 1e-10, "remainder {}", s.r);
        }
    }

    #[test]
    fn remainder_decay_direction_on_circle() {
        // φ(x) = x₁ has a genuinely nonzero remainder on the circle:
        // R_t = cos(W_t) − 1 + W_t²/2 ≈ W_t⁴/24, so |R_t|/t shrinks
        // linearly in t and the upper percentile must drop with t.
        let sys = catalog::system("circle").unwrap();
        let phi = TestFunction::quadratic(Mat::zeros(2, 2), vec![1.0, 0.0], 0.0);
        let pct90 = |t: f64| {
            let samples = taylor_remainder_samples_with_dt(
                &sys,
                &phi,
                &[1.0, 0.0],
                &[0.0],
                t,
                t / 10_000.0,
                400,
                2024,
            )
            .unwrap();
            let mut vals: Vec<f64> = samples.iter().map(|s| (s.r / t).abs()).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            vals[(vals.len() * 9) / 10]
        };
        let high = pct90(0.1);
        let low = pct90(0.025);
        assert!(
            high > low,
            "90th percentile of |R_t|/t must drop with t: {high} vs {low}"
        );
    }

    #[test]
    fn decay_test_trivial_and_synthetic_cases() {
        let zeros = |t: f64| -> Vec<RemainderSample> {
            (0..600)
                .map(|i| RemainderSample { t, r: 0.0, seed: i })
                .collect()
        };
        let report =
            remainder_decay_test(&[zeros(0.1), zeros(0.05), zeros(0.025)], 0.5).unwrap();
        assert!(report.pass);
        assert!(report.probabilities.iter().all(|&p| p == 0.0));

        // deterministic R_t = t with ε = 0.5: all probabilities 1 → fail
        let linear = |t: f64| -> Vec<RemainderSample> {
            (0..600)
                .map(|i| RemainderSample { t, r: t, seed: i })
                .collect()
        };
        let report =
            remainder_decay_test(&[linear(0.1), linear(0.05), linear(0.025)], 0.5).unwrap();
        assert!(report.probabilities.iter().all(|&p| p == 1.0));
        assert!(!report.pass);

        // too few groups / too few samples
        assert!(remainder_decay_test(&[zeros(0.1), zeros(0.05)], 0.5).is_err());
        let small: Vec<RemainderSample> = (0..10)
            .map(|i| RemainderSample {
                t: 0.1,
                r: 0.0,
                seed: i,
            })
            .collect();
        assert!(remainder_decay_test(&[small.clone(), small.clone(), small], 0.5).is_err());
    }

    #[test]
    fn decay_test_circle_passes() {
        let sys = catalog::system("circle").unwrap();
        let phi = disk_phi();
        let groups: Vec<Vec<RemainderSample>> = [0.1, 0.05, 0.025]
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                taylor_remainder_samples(&sys, &phi, &[1.0, 0.0], &[0.0], t, 1000, 90 + i as u64)
                    .unwrap()
            })
            .collect();
        let report = remainder_decay_test(&groups, 0.1).unwrap();
        assert!(report.pass, "report: {report:?}");
    }

    #[test]
    fn falsifier_requires_inputs() {
        let c = TaylorCoefficients::new(vec![0.0], vec![0.0], vec![vec![0.0]], 0.0).unwrap();
        assert!(lemma_falsifier(&c, &[], 2000, 1).is_err());
        assert!(lemma_falsifier(&c, &[0.1], 100, 1).is_err());
    }

    #[test]
    fn falsifier_negative_definite_case() {
        // S_t = -(W_t)² - t: pathwise negative up to discretization noise
        let c = TaylorCoefficients::new(vec![0.0], vec![-1.0], vec![vec![0.0]], -1.0).unwrap();
        let r = lemma_falsifier(&c, &[0.01, 0.1, 1.0], 1000, 11).unwrap();
        assert!(
            r.max_probability <= 0.01,
            "probabilities {:?}",
            r.probabilities
        );
        assert_eq!(r.verdict, "hypothesis plausible");
    }

    #[test]
    fn falsifier_pure_alpha_is_a_coin_flip() {
        let c = TaylorCoefficients::new(vec![1.0], vec![0.0], vec![vec![0.0]], 0.0).unwrap();
        let r = lemma_falsifier(&c, &[0.01], 4000, 12).unwrap();
        assert!(
            (0.45..=0.55).contains(&r.probabilities[0]),
            "P[W > 0] estimate {}",
            r.probabilities[0]
        );
        assert_eq!(r.verdict, "hypothesis violated");
    }

    #[test]
    fn falsifier_positive_delta_always_fires() {
        let c = TaylorCoefficients::new(vec![0.0], vec![0.0], vec![vec![0.0]], 1.0).unwrap();
        let r = lemma_falsifier(&c, &[0.05, 0.5], 1000, 13).unwrap();
        assert!(r.probabilities.iter().all(|&p| p == 1.0));
    }

    #[test]
    fn falsifier_antisymmetric_gamma_detected() {
        // S_1 = L^{12}: the Lévy area has a symmetric unbounded law
        let c = TaylorCoefficients::new(
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![vec![0.0, 1.0], vec![-1.0, 0.0]],
            0.0,
        )
        .unwrap();
        let r = lemma_falsifier(&c, &[1.0], 1000, 14).unwrap();
        assert!(
            r.probabilities[0] >= 0.3,
            "Lévy-area case gave {}",
            r.probabilities[0]
        );
    }

    #[test]
    fn falsifier_random_symmetric_nsd_cases_stay_low() {
        use rand::Rng;
        let mut rng = crate::numerics::stream_rng(2025, 3);
        for case in 0..3 {
            let d = 2 + case % 2;
            // A = -(M Mᵀ + margin·I) is strictly negative definite
            let mut m = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    m.set(i, j, rng.gen_range(-1.0..1.0));
                }
            }
            let mut a = Mat::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    let mut v = 0.0;
                    for k in 0..d {
                        v += m.get(i, k) * m.get(j, k);
                    }
                    a.set(i, j, -v - if i == j { 0.5 } else { 0.0 });
                }
            }
            let beta: Vec<f64> = (0..d).map(|i| 0.5 * a.get(i, i)).collect();
            let mut gamma = vec![vec![0.0; d]; d];
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        gamma[i][j] = a.get(i, j);
                    }
                }
            }
            let delta = -rng.gen_range(0.1..1.0);
            let c = TaylorCoefficients::new(vec![0.0; d], beta, gamma, delta).unwrap();
            assert!(lemma_conclusion_check(&c, 1e-12).unwrap().all_pass());
            let r = lemma_falsifier(&c, &[0.01, 0.1, 1.0], 1000, 100 + case as u64).unwrap();
            assert!(
                r.max_probability <= 0.02,
                "case {case}: probabilities {:?}",
                r.probabilities
            );
        }
    }

    #[test]
    fn reports_serialize_with_sorted_keys() {
        let c = TaylorCoefficients::new(vec![0.0], vec![0.0], vec![vec![0.0]], 1.0).unwrap();
        let r = lemma_falsifier(&c, &[0.05], 1000, 13).unwrap();
        let json = r.to_json();
        let max_pos = json.find("\"max_probability\"").unwrap();
        let times_pos = json.find("\"times\"").unwrap();
        let seed_pos = json.find("\"seed\"").unwrap();
        assert!(max_pos < seed_pos && seed_pos < times_pos);
    }
}
