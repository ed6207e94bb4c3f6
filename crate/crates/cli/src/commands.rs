//! The six subcommands: audit, simulate, wz, lemma, taylor, hjb. Each loads
//! its inputs from the config, drives the library, and writes JSON (and for
//! simulate, CSV) reports with deterministically sorted keys.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use invlab_core::catalog;
use invlab_core::expansion::{
    lemma_conclusion_check, lemma_falsifier, remainder_decay_test, taylor_remainder_samples,
    TaylorCoefficients,
};
use invlab_core::hjb_mc::{value_bound_check, DiscountedProblem};
use invlab_core::invariance::{boundary_scan, equivalence_audit, AuditBudget};
use invlab_core::numerics::{par_map_ordered, rng_split};
use invlab_core::paths::{
    euler_maruyama, sample_noise, wong_zakai_solve, zero_noise, Policy, TimeGrid,
};
use invlab_core::sde_core::norm;

use crate::config::{Config, ConfigError, DriverKind};

/// Writes `value` as pretty-printed JSON with sorted keys plus a trailing
/// newline (serde_json maps are BTree-backed, so the key order is canonical).
fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ConfigError> {
    let v = serde_json::to_value(value)
        .map_err(|e| ConfigError(format!("cannot serialize report: {e}")))?;
    let text = serde_json::to_string_pretty(&v)
        .map_err(|e| ConfigError(format!("cannot serialize report: {e}")))?;
    fs::write(path, text + "\n")
        .map_err(|e| ConfigError(format!("cannot write {}: {e}", path.display())))
}

fn ensure_out_dir(out: &Path) -> Result<(), ConfigError> {
    fs::create_dir_all(out)
        .map_err(|e| ConfigError(format!("cannot create output dir {}: {e}", out.display())))
}

fn constant_policy(cfg: &Config, sys: &invlab_core::sde_core::ControlSystem) -> Result<Policy, ConfigError> {
    let idx = cfg.control_index.unwrap_or(0);
    let controls = sys.controls();
    if idx >= controls.len() {
        return Err(ConfigError(format!(
            "control_index {idx} out of range ({} control points)",
            controls.len()
        )));
    }
    Ok(Policy::Constant(controls[idx].clone()))
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values[values.len() / 2]
}

// ---------------------------------------------------------------------------
// audit
// ---------------------------------------------------------------------------

/// Runs the full equivalence audit. Exit code 0 when all six verdicts agree
/// (in either direction), 2 when they disagree.
pub fn cmd_audit(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let sys = cfg.build_system()?;
    let set = cfg.build_set(sys.state_dim())?;
    let tol = cfg.tolerances()?;
    let budget = AuditBudget {
        horizon: cfg.horizon(),
        dt: cfg.dt(),
        mc_paths: cfg.n_paths.unwrap_or(500),
        wz_m: cfg.wz_m.unwrap_or(16),
        ..AuditBudget::default()
    };
    let n_boundary = cfg.n_boundary.unwrap_or(16);
    let report = equivalence_audit(&sys, &set, n_boundary, seed, &budget, &tol)
        .map_err(|e| ConfigError(format!("audit failed: {e}")))?;
    ensure_out_dir(out)?;
    write_json(&out.join("audit.json"), &report)?;
    println!("audit: {}", report.verdict);
    Ok(if report.consistent { 0 } else { 2 })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct SimulateSummary {
    csv_files: Vec<String>,
    driver: String,
    dt: f64,
    horizon: f64,
    mean_final_distance: f64,
    max_final_distance: f64,
    refined: Option<RefinedSummary>,
    seed: u64,
    system: String,
    set: String,
}

#[derive(Serialize)]
struct RefinedSummary {
    dt: f64,
    mean_final_distance: f64,
}

/// Simulates `n_paths` trajectories, writes one CSV per path plus a summary
/// JSON. With `"driver": "none"` the increments are zero, which makes the
/// run the deterministic twin of the stochastic one (byte-identical CSVs
/// whenever σ ≡ 0). With `"compare_refined": true` the same drivers are
/// re-run at dt/2 and the refined mean distance is reported alongside.
pub fn cmd_simulate(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let sys = cfg.build_system()?;
    let set = cfg.build_set(sys.state_dim())?;
    let x0 = cfg.start(&sys)?;
    let policy = constant_policy(cfg, &sys)?;
    let n_paths = cfg.n_paths.unwrap_or(3);
    let dt = cfg.dt();
    let horizon = cfg.horizon();
    let driver = cfg.driver.clone().unwrap_or(DriverKind::Brownian);
    let refine = cfg.compare_refined.unwrap_or(false);

    // sampling happens on the half grid so the refined comparison can reuse
    // the exact same driver path
    let fine_grid = TimeGrid::new(horizon, dt / 2.0)
        .map_err(|e| ConfigError(format!("dt/horizon: {e}")))?;
    ensure_out_dir(out)?;

    struct PathOutcome {
        csv: String,
        final_distance: f64,
        refined_distance: Option<f64>,
    }

    let runs: Vec<Result<PathOutcome, String>> = par_map_ordered(n_paths, |i| {
        let fine_bundle = match driver {
            DriverKind::Brownian => sample_noise(sys.noise_dim(), &fine_grid, rng_split(seed, i as u64)),
            DriverKind::None => zero_noise(sys.noise_dim(), &fine_grid),
        }
        .map_err(|e| e.to_string())?;
        let coarse_bundle = fine_bundle.coarsen(2).map_err(|e| e.to_string())?;
        let path = euler_maruyama(&sys, &x0, &policy, &coarse_bundle).map_err(|e| e.to_string())?;
        let final_distance = set.distance(path.terminal()).map_err(|e| e.to_string())?;
        let refined_distance = if refine {
            let fine_path =
                euler_maruyama(&sys, &x0, &policy, &fine_bundle).map_err(|e| e.to_string())?;
            Some(set.distance(fine_path.terminal()).map_err(|e| e.to_string())?)
        } else {
            None
        };
        let mut buf = Vec::new();
        path.write_csv(&mut buf).map_err(|e| e.to_string())?;
        Ok(PathOutcome {
            csv: String::from_utf8(buf).expect("csv is ascii"),
            final_distance,
            refined_distance,
        })
    });

    let mut csv_files = Vec::with_capacity(n_paths);
    let mut final_distances = Vec::with_capacity(n_paths);
    let mut refined_distances = Vec::new();
    for (i, run) in runs.into_iter().enumerate() {
        let outcome = run.map_err(|e| ConfigError(format!("path {i}: {e}")))?;
        let name = format!("path_{i:03}.csv");
        fs::write(out.join(&name), outcome.csv)
            .map_err(|e| ConfigError(format!("cannot write {name}: {e}")))?;
        csv_files.push(name);
        final_distances.push(outcome.final_distance);
        if let Some(r) = outcome.refined_distance {
            refined_distances.push(r);
        }
    }

    let mean = final_distances.iter().sum::<f64>() / n_paths as f64;
    let summary = SimulateSummary {
        csv_files,
        driver: match driver {
            DriverKind::Brownian => "brownian".into(),
            DriverKind::None => "none".into(),
        },
        dt,
        horizon,
        mean_final_distance: mean,
        max_final_distance: final_distances.iter().cloned().fold(0.0, f64::max),
        refined: if refine {
            Some(RefinedSummary {
                dt: dt / 2.0,
                mean_final_distance: refined_distances.iter().sum::<f64>()
                    / refined_distances.len() as f64,
            })
        } else {
            None
        },
        seed,
        system: sys.name().to_string(),
        set: set.name().to_string(),
    };
    write_json(&out.join("simulate.json"), &summary)?;
    println!("simulate: {n_paths} paths, mean final distance {mean:.6e}");
    Ok(0)
}

// ---------------------------------------------------------------------------
// wz
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WzRow {
    m: usize,
    median_sup_gap: f64,
    median_max_distance: f64,
    median_endpoint_gap: Option<f64>,
}

/// Smoothed-noise convergence table over the configured m values: per path
/// one driver covers the largest m, and each m reports the median sup-gap
/// to the rescaled Brownian target plus the median distance excursion. For
/// the catalog circle the exact rotation solution provides an endpoint gap.
pub fn cmd_wz(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let sys = cfg.build_system()?;
    let set = cfg.build_set(sys.state_dim())?;
    let x0 = cfg.start(&sys)?;
    let m_list = cfg.m_list.clone().unwrap_or_else(|| vec![4, 16, 64]);
    if m_list.is_empty() {
        return Err(ConfigError("m_list must be nonempty".into()));
    }
    if m_list.contains(&0) {
        return Err(ConfigError("m_list entries must be ≥ 1".into()));
    }
    let m_max = *m_list.iter().max().unwrap();
    let dt = cfg.dt();
    let horizon = cfg.horizon();
    if dt > 1.0 / (10.0 * m_max as f64) {
        return Err(ConfigError(format!(
            "dt = {dt} too coarse for m = {m_max}: need dt ≤ {}",
            1.0 / (10.0 * m_max as f64)
        )));
    }
    let n_paths = cfg.n_paths.unwrap_or(100);
    let u = match constant_policy(cfg, &sys)? {
        Policy::Constant(u) => u,
        _ => unreachable!(),
    };
    let out_grid =
        TimeGrid::new(horizon, dt).map_err(|e| ConfigError(format!("dt/horizon: {e}")))?;
    let driver_grid = TimeGrid::new(m_max as f64 * horizon + 1.0, dt)
        .map_err(|e| ConfigError(format!("driver grid: {e}")))?;
    let has_rotation_oracle = sys.name() == "circle";

    let per_path: Vec<Result<Vec<(f64, f64, Option<f64>)>, String>> =
        par_map_ordered(n_paths, |i| {
            let driver = sample_noise(sys.noise_dim(), &driver_grid, rng_split(seed, i as u64))
                .map_err(|e| e.to_string())?;
            m_list
                .iter()
                .map(|&m| {
                    let (path, smooth) = wong_zakai_solve(&sys, &x0, &u, m, &driver, &out_grid)
                        .map_err(|e| e.to_string())?;
                    let mut max_d = 0.0_f64;
                    for state in &path.states {
                        max_d = max_d.max(set.distance(state).map_err(|e| e.to_string())?);
                    }
                    let endpoint = if has_rotation_oracle {
                        let w1 = smooth.brownian.last().unwrap()[0];
                        let expect = catalog::rotate2(&x0, w1);
                        let got = path.terminal();
                        Some(
                            ((got[0] - expect[0]).powi(2) + (got[1] - expect[1]).powi(2)).sqrt(),
                        )
                    } else {
                        None
                    };
                    Ok((smooth.sup_gap(), max_d, endpoint))
                })
                .collect()
        });

    let mut collected: Vec<Vec<(f64, f64, Option<f64>)>> = Vec::with_capacity(n_paths);
    for (i, r) in per_path.into_iter().enumerate() {
        collected.push(r.map_err(|e| ConfigError(format!("path {i}: {e}")))?);
    }
    let rows: Vec<WzRow> = m_list
        .iter()
        .enumerate()
        .map(|(j, &m)| {
            let mut sup: Vec<f64> = collected.iter().map(|c| c[j].0).collect();
            let mut dist: Vec<f64> = collected.iter().map(|c| c[j].1).collect();
            let endpoint = if has_rotation_oracle {
                let mut e: Vec<f64> = collected.iter().map(|c| c[j].2.unwrap()).collect();
                Some(median(&mut e))
            } else {
                None
            };
            WzRow {
                m,
                median_sup_gap: median(&mut sup),
                median_max_distance: median(&mut dist),
                median_endpoint_gap: endpoint,
            }
        })
        .collect();

    ensure_out_dir(out)?;
    let report = json!({
        "system": sys.name(),
        "set": set.name(),
        "seed": seed,
        "n_paths": n_paths,
        "horizon": horizon,
        "dt": dt,
        "rows": serde_json::to_value(&rows).unwrap(),
    });
    write_json(&out.join("wz.json"), &report)?;
    for r in &rows {
        println!(
            "wz: m={:<4} median sup|Y^m - W| = {:.4e}  median max d_K = {:.4e}",
            r.m, r.median_sup_gap, r.median_max_distance
        );
    }
    Ok(0)
}

// ---------------------------------------------------------------------------
// lemma
// ---------------------------------------------------------------------------

/// Structural conclusion check plus the sampling falsifier for a coefficient
/// set given in the config.
pub fn cmd_lemma(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let spec = cfg
        .coefficients
        .as_ref()
        .ok_or_else(|| ConfigError("missing required field `coefficients`".into()))?;
    let coeffs = TaylorCoefficients::new(
        spec.alpha.clone(),
        spec.beta.clone(),
        spec.gamma.clone(),
        spec.delta,
    )
    .map_err(|e| ConfigError(format!("coefficients: {e}")))?;
    let times = cfg.times.clone().unwrap_or_else(|| vec![0.01, 0.1, 1.0]);
    let n = cfg.n_paths.unwrap_or(4000);
    if n < 1000 {
        return Err(ConfigError(format!(
            "n_paths = {n} too small for the falsifier (need ≥ 1000)"
        )));
    }
    let tol = cfg.tolerances()?;
    let conclusions = lemma_conclusion_check(&coeffs, tol.tol_eq_analytic)
        .map_err(|e| ConfigError(format!("conclusion check: {e}")))?;
    let falsifier = lemma_falsifier(&coeffs, &times, n, seed)
        .map_err(|e| ConfigError(format!("falsifier: {e}")))?;
    ensure_out_dir(out)?;
    let report = json!({
        "coefficients": serde_json::to_value(&coeffs).unwrap(),
        "conclusions": serde_json::to_value(&conclusions).unwrap(),
        "falsifier": serde_json::to_value(&falsifier).unwrap(),
    });
    write_json(&out.join("lemma.json"), &report)?;
    println!(
        "lemma: conclusions {} / falsifier {}",
        if conclusions.all_pass() { "hold" } else { "fail" },
        falsifier.verdict
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// taylor
// ---------------------------------------------------------------------------

/// Remainder decay report for the canonical test function φ = g of the
/// configured set, expanded at x0.
pub fn cmd_taylor(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let sys = cfg.build_system()?;
    let set = cfg.build_set(sys.state_dim())?;
    let x0 = cfg.start(&sys)?;
    let phi = set.as_test_function();
    let u = match constant_policy(cfg, &sys)? {
        Policy::Constant(u) => u,
        _ => unreachable!(),
    };
    let times = cfg.times.clone().unwrap_or_else(|| vec![0.1, 0.05, 0.025]);
    let n = cfg.n_paths.unwrap_or(1000);
    let epsilon = cfg.epsilon.unwrap_or(0.1);
    let mut groups = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        let samples =
            taylor_remainder_samples(&sys, &phi, &x0, &u, t, n, rng_split(seed, i as u64))
                .map_err(|e| ConfigError(format!("remainder sampling at t = {t}: {e}")))?;
        groups.push(samples);
    }
    let report = remainder_decay_test(&groups, epsilon)
        .map_err(|e| ConfigError(format!("decay test: {e}")))?;
    ensure_out_dir(out)?;
    let mut full = serde_json::to_value(&report).unwrap();
    let extra = json!({
        "system": sys.name(),
        "set": set.name(),
        "x0": x0,
        "control": u,
        "n_paths": n,
        "seed": seed,
    });
    for (k, v) in extra.as_object().unwrap() {
        full[k] = v.clone();
    }
    write_json(&out.join("taylor.json"), &full)?;
    println!("taylor: {} (probabilities {:?})", report.verdict, report.probabilities);
    Ok(0)
}

// ---------------------------------------------------------------------------
// hjb
// ---------------------------------------------------------------------------

/// Discounted value-bound check from the configured start plus scanned
/// boundary starts.
pub fn cmd_hjb(cfg: &Config, seed: u64, out: &Path) -> Result<i32, ConfigError> {
    let sys = cfg.build_system()?;
    let set = cfg.build_set(sys.state_dim())?;
    let tol = cfg.tolerances()?;
    let x0 = cfg.start(&sys)?;
    let mut starts = vec![x0];
    let n_extra = cfg.n_boundary.unwrap_or(2).min(4);
    if n_extra > 0 {
        if let Ok(points) = boundary_scan(&set, n_extra, rng_split(seed, 900), &tol) {
            for p in points {
                if norm(&p.x) < 1e6 {
                    starts.push(p.x);
                }
            }
        }
    }
    let prob = DiscountedProblem::new(
        sys,
        set,
        cfg.discount.unwrap_or(1.0),
        cfg.t_trunc.unwrap_or(10.0),
    )
    .map_err(|e| ConfigError(format!("problem: {e}")))?;
    let report = value_bound_check(
        &prob,
        &starts,
        &[],
        cfg.n_paths.unwrap_or(500),
        cfg.dt(),
        seed,
        &tol,
    )
    .map_err(|e| ConfigError(format!("value bound check: {e}")))?;
    ensure_out_dir(out)?;
    write_json(&out.join("hjb.json"), &report)?;
    println!("hjb: {} (worst excess {:.4e})", report.verdict, report.worst_excess);
    Ok(0)
}

// ---------------------------------------------------------------------------
// shared entry
// ---------------------------------------------------------------------------

pub fn default_out_dir(flag: Option<PathBuf>, cfg: &Config) -> PathBuf {
    flag.or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("invlab-out"))
}
