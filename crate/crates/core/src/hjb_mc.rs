//! Monte-Carlo estimator of the discounted value
//! V(x) = sup_u E[∫₀^∞ e^{-Cs} g_cost(X^{x,u}_s) ds], used to check the
//! bound V ≤ f with f = 1 − 1_K: a start in K must accumulate essentially
//! no discounted cost under any admissible control.
//!
//! The supremum over all adapted controls is lower-bounded by maximizing
//! over a finite policy list (always including every constant control from
//! the U-sample), so the check tests a necessary condition of the bound.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::expansion::sorted_json;
use crate::numerics::{par_map_ordered, rng_split};
use crate::paths::{euler_maruyama, sample_noise, Policy, TimeGrid};
use crate::sde_core::{ClosedSet, ControlSystem, ScalarFn, Tolerances};

/// Discounted running-cost problem: g_cost maps into [0, 1], vanishes
/// exactly on K, the discount is at least 1, and the horizon is truncated
/// where the tail e^{-C·T}/C is negligible.
#[derive(Clone)]
pub struct DiscountedProblem {
    sys: ControlSystem,
    set: ClosedSet,
    g_cost: ScalarFn,
    discount: f64,
    t_trunc: f64,
}

impl std::fmt::Debug for DiscountedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiscountedProblem")
            .field("system", &self.sys.name())
            .field("set", &self.set.name())
            .field("discount", &self.discount)
            .field("t_trunc", &self.t_trunc)
            .finish()
    }
}

impl DiscountedProblem {
    /// Default cost g_cost = min(d_K, 1): uniformly continuous, in [0, 1],
    /// zero exactly on K, and tied to the set geometry (modulus = identity).
    pub fn new(sys: ControlSystem, set: ClosedSet, discount: f64, t_trunc: f64) -> Result<Self> {
        if discount < 1.0 {
            return Err(Error::InvalidInput(format!(
                "discount {discount} must be ≥ 1"
            )));
        }
        if !(t_trunc > 0.0) {
            return Err(Error::InvalidInput("truncation horizon must be positive".into()));
        }
        let s = set.clone();
        let g_cost: ScalarFn = Arc::new(move |x| Ok(s.distance(x)?.min(1.0)));
        Ok(DiscountedProblem {
            sys,
            set,
            g_cost,
            discount,
            t_trunc,
        })
    }

    /// Replaces the running cost. The closure must map into [0, 1] and
    /// vanish exactly on K; `validate` spot-checks this.
    pub fn with_cost(mut self, g_cost: ScalarFn) -> Self {
        self.g_cost = g_cost;
        self
    }

    pub fn system(&self) -> &ControlSystem {
        &self.sys
    }

    pub fn set(&self) -> &ClosedSet {
        &self.set
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn t_trunc(&self) -> f64 {
        self.t_trunc
    }

    pub fn cost(&self, x: &[f64]) -> Result<f64> {
        (self.g_cost)(x)
    }

    /// Deterministic bound on the truncated tail: ∫_T^∞ e^{-Cs}·1 ds.
    pub fn tail_bound(&self) -> f64 {
        (-self.discount * self.t_trunc).exp() / self.discount
    }

    /// Sampled hypothesis checks: 0 ≤ g_cost ≤ 1 everywhere, g_cost = 0 iff
    /// x ∈ K, and g_cost ≤ C·f with f = 1 − 1_K.
    pub fn validate(&self, n_probes: usize, seed: u64, tol: &Tolerances) -> Result<()> {
        use rand::Rng;
        let mut rng = crate::numerics::stream_rng(seed, 0);
        for _ in 0..n_probes {
            let x: Vec<f64> = (0..self.sys.state_dim())
                .map(|_| rng.gen_range(-2.5..2.5))
                .collect();
            let g = self.cost(&x)?;
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::InvalidInput(format!(
                    "g_cost({x:?}) = {g} outside [0, 1]"
                )));
            }
            let inside = self.set.contains(&x, tol.tol_set)?;
            if inside && g > tol.tol_set.max(1e-9) {
                return Err(Error::InvalidInput(format!(
                    "g_cost({x:?}) = {g} but the point is in K"
                )));
            }
            if !inside && g == 0.0 && self.set.distance(&x)? > 1e-9 {
                return Err(Error::InvalidInput(format!(
                    "g_cost vanishes at {x:?} outside K"
                )));
            }
            // g ≤ C·f: outside K f = 1 and g ≤ 1 ≤ C; inside K both vanish
            let f = if inside { 0.0 } else { 1.0 };
            if g > self.discount * f + tol.tol_set.max(1e-9) {
                return Err(Error::InvalidInput(format!(
                    "g_cost({x:?}) = {g} exceeds C·f = {}",
                    self.discount * f
                )));
            }
        }
        Ok(())
    }
}

/// One discounted-cost estimate with its statistical and truncation errors.
#[derive(Debug, Clone, Serialize)]
pub struct CostEstimate {
    pub estimate: f64,
    pub std_error: f64,
    /// Deterministic bound on the discarded tail beyond t_trunc.
    pub tail_bound: f64,
    pub n_paths: usize,
    pub seed: u64,
}

/// Trapezoid quadrature of e^{-Cs}·g_cost(X_s) along Euler paths.
///
/// The truncation horizon must satisfy e^{-C·T}/C ≤ 1e-4 so the discarded
/// tail is negligible next to the reported statistics; the bound itself is
/// returned separately rather than folded into the estimate.
pub fn discounted_cost_estimate(
    prob: &DiscountedProblem,
    x0: &[f64],
    policy: &Policy,
    n_paths: usize,
    dt: f64,
    seed: u64,
) -> Result<CostEstimate> {
    if prob.tail_bound() > 1e-4 {
        return Err(Error::InvalidInput(format!(
            "truncation horizon too short: tail bound {} exceeds 1e-4",
            prob.tail_bound()
        )));
    }
    if n_paths == 0 {
        return Err(Error::InsufficientSamples {
            what: "discounted cost estimate".into(),
            needed: 1,
            got: 0,
        });
    }
    let grid = TimeGrid::new(prob.t_trunc(), dt)?;
    let c = prob.discount();
    let integrals: Vec<Result<f64>> = par_map_ordered(n_paths, |i| {
        let bundle = sample_noise(
            prob.system().noise_dim(),
            &grid,
            rng_split(seed, i as u64),
        )?;
        let path = euler_maruyama(prob.system(), x0, policy, &bundle)?;
        let mut integral = 0.0;
        for k in 0..grid.node_count() {
            let t = grid.time(k);
            let weight = if k == 0 || k == grid.steps() {
                0.5 * dt
            } else {
                dt
            };
            integral += weight * (-c * t).exp() * prob.cost(path.state_at(k))?;
        }
        Ok(integral)
    });
    let values: Vec<f64> = integrals.into_iter().collect::<Result<_>>()?;
    let mean = values.iter().sum::<f64>() / n_paths as f64;
    let variance = if n_paths > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_paths - 1) as f64
    } else {
        0.0
    };
    Ok(CostEstimate {
        estimate: mean,
        std_error: (variance / n_paths as f64).sqrt(),
        tail_bound: prob.tail_bound(),
        n_paths,
        seed,
    })
}

/// Value-bound report over a grid of starts and policies.
#[derive(Debug, Clone, Serialize)]
pub struct ValueBoundReport {
    pub starts: Vec<Vec<f64>>,
    pub policies: Vec<String>,
    /// estimates[s][p] for start s under policy p.
    pub estimates: Vec<Vec<f64>>,
    pub stderrs: Vec<Vec<f64>>,
    pub tail: f64,
    /// max over (start, policy) of estimate − 3·stderr − tail.
    pub worst_excess: f64,
    pub slack: f64,
    pub verdict: String,
    pub pass: bool,
    pub seed: u64,
}

impl ValueBoundReport {
    pub fn to_json(&self) -> String {
        sorted_json(self)
    }
}

/// Checks V ≤ f on starts inside K: every policy (all constant controls
/// from the U-sample plus any extras) must keep the discounted cost at the
/// noise floor, i.e. estimate − 3·stderr − tail ≤ slack.
#[allow(clippy::too_many_arguments)]
pub fn value_bound_check(
    prob: &DiscountedProblem,
    starts: &[Vec<f64>],
    extra_policies: &[Policy],
    n_paths: usize,
    dt: f64,
    seed: u64,
    tol: &Tolerances,
) -> Result<ValueBoundReport> {
    if starts.is_empty() {
        return Err(Error::InvalidInput("value bound check needs starts".into()));
    }
    for s in starts {
        if prob.set().g(s)? > tol.tol_set {
            return Err(Error::InvalidInput(format!(
                "start {s:?} is not in K (g = {})",
                prob.set().g(s)?
            )));
        }
    }
    let mut policies: Vec<Policy> = prob
        .system()
        .controls()
        .iter()
        .cloned()
        .map(Policy::Constant)
        .collect();
    policies.extend(extra_policies.iter().cloned());

    let mut estimates = Vec::with_capacity(starts.len());
    let mut stderrs = Vec::with_capacity(starts.len());
    let mut worst = f64::NEG_INFINITY;
    for (si, start) in starts.iter().enumerate() {
        let mut row_e = Vec::with_capacity(policies.len());
        let mut row_s = Vec::with_capacity(policies.len());
        for (pi, policy) in policies.iter().enumerate() {
            let est = discounted_cost_estimate(
                prob,
                start,
                policy,
                n_paths,
                dt,
                rng_split(seed, (si * policies.len() + pi) as u64),
            )?;
            worst = worst.max(est.estimate - 3.0 * est.std_error - est.tail_bound);
            row_e.push(est.estimate);
            row_s.push(est.std_error);
        }
        estimates.push(row_e);
        stderrs.push(row_s);
    }
    let pass = worst <= tol.hjb_slack;
    Ok(ValueBoundReport {
        starts: starts.to_vec(),
        policies: policies.iter().map(|p| p.describe()).collect(),
        estimates,
        stderrs,
        tail: prob.tail_bound(),
        worst_excess: worst,
        slack: tol.hjb_slack,
        verdict: if pass {
            "value bound holds".into()
        } else {
            "value bound violated".into()
        },
        pass,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::numerics::Mat;
    use crate::sde_core::DerivativeKind;
    use approx::assert_relative_eq;

    fn tols() -> Tolerances {
        Tolerances::default()
    }

    fn still_system(n: usize) -> ControlSystem {
        ControlSystem::new(
            "still",
            n,
            1,
            Arc::new(move |_: &[f64], _: &[f64]| Ok(vec![0.0; n])),
            Arc::new(move |_: &[f64], _: &[f64]| Ok(Mat::zeros(n, 1))),
            Arc::new(move |_: &[f64], _: &[f64], _| Ok(Mat::zeros(n, n))),
            vec![vec![0.0]],
            DerivativeKind::Analytic,
        )
        .unwrap()
    }

    #[test]
    fn problem_validation() {
        let prob = DiscountedProblem::new(
            catalog::system("circle").unwrap(),
            catalog::set("disk").unwrap(),
            1.0,
            10.0,
        )
        .unwrap();
        prob.validate(200, 3, &tols()).unwrap();
        assert!(prob.tail_bound() <= 1e-4);
        assert!(DiscountedProblem::new(
            catalog::system("circle").unwrap(),
            catalog::set("disk").unwrap(),
            0.5,
            10.0
        )
        .is_err());
    }

    #[test]
    fn short_horizon_rejected() {
        let prob = DiscountedProblem::new(
            catalog::system("circle").unwrap(),
            catalog::set("disk").unwrap(),
            1.0,
            2.0,
        )
        .unwrap();
        assert!(discounted_cost_estimate(
            &prob,
            &[1.0, 0.0],
            &Policy::Constant(vec![0.0]),
            10,
            1e-2,
            1
        )
        .is_err());
    }

    #[test]
    fn constant_cost_integrates_the_discount() {
        // g_cost ≡ 1: the estimate is the deterministic ∫₀^T e^{-s} ds
        let prob = DiscountedProblem::new(still_system(2), catalog::set("disk").unwrap(), 1.0, 10.0)
            .unwrap()
            .with_cost(Arc::new(|_| Ok(1.0)));
        let est = discounted_cost_estimate(
            &prob,
            &[2.0, 0.0],
            &Policy::Constant(vec![0.0]),
            20,
            1e-3,
            7,
        )
        .unwrap();
        let expect = 1.0 - (-10.0_f64).exp();
        assert!(
            (est.estimate - expect).abs() <= 3.0 * est.std_error + 1e-5,
            "estimate {} vs {}",
            est.estimate,
            expect
        );
    }

    #[test]
    fn frozen_point_outside_k() {
        // σ≡0, b≡0, start outside K: estimate = g_cost(x0)·(1 − e^{-T})
        let set = catalog::set("disk").unwrap();
        let prob = DiscountedProblem::new(still_system(2), set.clone(), 1.0, 10.0).unwrap();
        let x0 = [1.5, 0.0];
        let c0 = set.distance(&x0).unwrap().min(1.0);
        assert_relative_eq!(c0, 0.5, epsilon = 1e-12);
        let est = discounted_cost_estimate(
            &prob,
            &x0,
            &Policy::Constant(vec![0.0]),
            5,
            1e-3,
            8,
        )
        .unwrap();
        let expect = c0 * (1.0 - (-10.0_f64).exp());
        assert!((est.estimate - expect).abs() <= 1e-6, "estimate {}", est.estimate);
        assert_eq!(est.std_error, 0.0);
    }

    #[test]
    fn estimate_range_and_discount_monotonicity() {
        let sys = catalog::system("halfspace-crossing").unwrap();
        let set = catalog::set("halfspace").unwrap();
        let run = |c: f64| {
            let prob = DiscountedProblem::new(sys.clone(), set.clone(), c, 10.0).unwrap();
            discounted_cost_estimate(
                &prob,
                &[0.0, 0.0],
                &Policy::Constant(vec![0.0]),
                200,
                1e-2,
                99,
            )
            .unwrap()
        };
        let e1 = run(1.0);
        let e2 = run(2.0);
        // same seeds → same paths → pathwise smaller integrand under larger C
        assert!(e2.estimate <= e1.estimate);
        for e in [&e1, &e2] {
            assert!(e.estimate >= 0.0);
        }
        assert!(e1.estimate <= 1.0 / 1.0 + 0.01);
        assert!(e2.estimate <= 1.0 / 2.0 + 0.01);
    }

    #[test]
    fn value_bound_on_invariant_and_crossing_systems() {
        let t = tols();
        // circle: paths stay near the disk, cost is scheme noise
        let prob = DiscountedProblem::new(
            catalog::system("circle").unwrap(),
            catalog::set("disk").unwrap(),
            1.0,
            10.0,
        )
        .unwrap();
        let report = value_bound_check(
            &prob,
            &[vec![1.0, 0.0], vec![0.5, 0.5]],
            &[],
            200,
            1e-3,
            41,
            &t,
        )
        .unwrap();
        assert!(report.pass, "worst excess {}", report.worst_excess);

        // σ ≡ 0 inward drift: cost is numerically zero
        let prob = DiscountedProblem::new(
            catalog::system("inward-drift").unwrap(),
            catalog::set("disk").unwrap(),
            1.0,
            10.0,
        )
        .unwrap();
        let report =
            value_bound_check(&prob, &[vec![1.0, 0.0]], &[], 50, 1e-3, 42, &t).unwrap();
        assert!(report.pass);
        assert!(report.estimates[0].iter().all(|&e| e <= 1e-6 + prob.tail_bound()));

        // crossing noise from the boundary start accumulates real cost
        let prob = DiscountedProblem::new(
            catalog::system("halfspace-crossing").unwrap(),
            catalog::set("halfspace").unwrap(),
            1.0,
            10.0,
        )
        .unwrap();
        let report =
            value_bound_check(&prob, &[vec![0.0, 0.0]], &[], 500, 1e-3, 43, &t).unwrap();
        assert!(!report.pass);
        assert!(
            report.worst_excess >= 0.05,
            "worst excess {}",
            report.worst_excess
        );
        // starts outside K are rejected
        assert!(value_bound_check(&prob, &[vec![0.5, 0.0]], &[], 10, 1e-2, 44, &t).is_err());
    }

    #[test]
    fn zero_cost_consistency_with_mc_distances() {
        // if the Monte-Carlo check sees distances ≤ δ then the discounted
        // cost is at most about δ/C + tail (the cost modulus is the identity)
        let t = tols();
        let sys = catalog::system("circle").unwrap();
        let set = catalog::set("disk").unwrap();
        let mc = crate::invariance::mc_invariance_estimate(
            &sys,
            &set,
            &[1.0, 0.0],
            &Policy::Constant(vec![0.0]),
            10.0,
            1e-3,
            100,
            51,
            &t,
        )
        .unwrap();
        let prob = DiscountedProblem::new(sys, set, 1.0, 10.0).unwrap();
        let est = discounted_cost_estimate(
            &prob,
            &[1.0, 0.0],
            &Policy::Constant(vec![0.0]),
            100,
            1e-3,
            51,
        )
        .unwrap();
        let delta = mc.max_checkpoint_mean;
        assert!(
            est.estimate <= 2.0 * delta + est.tail_bound + 0.005,
            "estimate {} vs modulus bound from δ = {delta}",
            est.estimate
        );
    }
}
