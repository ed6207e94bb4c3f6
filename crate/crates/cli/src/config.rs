//! Config file loading and validation. Configs are JSON; systems and sets
//! are either catalog names or expression-defined objects. The seed is
//! mandatory: no wall-clock defaults anywhere.

use std::path::Path;

use serde::Deserialize;

use invlab_core::catalog;
use invlab_core::sde_core::{ClosedSet, ControlSystem, Tolerances};

/// Error carrying the exit-code-1 semantics of usage/config problems.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SystemSpec {
    Catalog(String),
    Expression {
        n: usize,
        d: usize,
        b: Vec<String>,
        sigma: Vec<Vec<String>>,
        controls: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum SetSpec {
    Catalog(String),
    Expression {
        g: String,
        #[serde(default)]
        n: Option<usize>,
    },
}

/// Partial tolerance overrides; unset fields keep their defaults.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    pub tol_eq_analytic: Option<f64>,
    pub tol_eq_dual: Option<f64>,
    pub tol_set: Option<f64>,
    pub grad_floor: Option<f64>,
    pub det_tol: Option<f64>,
    pub wz_tol: Option<f64>,
    pub mc_mean_tol: Option<f64>,
    pub mc_frac_tol: Option<f64>,
    pub mc_epsilon: Option<f64>,
    pub hjb_slack: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriverKind {
    /// Brownian increments.
    Brownian,
    /// All increments zero: the deterministic twin of a simulate run.
    None,
}

/// Lemma coefficient specification: gamma is a full d×d array whose diagonal
/// must be zero.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientSpec {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<Vec<f64>>,
    pub delta: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub system: Option<SystemSpec>,
    #[serde(default)]
    pub set: Option<SetSpec>,
    /// Mandatory master seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub horizon: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub n_paths: Option<usize>,
    #[serde(default)]
    pub m_list: Option<Vec<usize>>,
    #[serde(default)]
    pub wz_m: Option<usize>,
    #[serde(default)]
    pub times: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub n_boundary: Option<usize>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub control_index: Option<usize>,
    #[serde(default)]
    pub discount: Option<f64>,
    #[serde(default)]
    pub t_trunc: Option<f64>,
    #[serde(default)]
    pub coefficients: Option<CoefficientSpec>,
    #[serde(default)]
    pub driver: Option<DriverKind>,
    #[serde(default)]
    pub compare_refined: Option<bool>,
    #[serde(default)]
    pub tolerances: Option<ToleranceOverrides>,
    #[serde(default)]
    pub out: Option<String>,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))
    }

    /// All-defaults config for flag-only catalog runs.
    pub fn empty() -> Config {
        serde_json::from_str("{}").expect("empty config parses")
    }

    pub fn set_catalog_system(&mut self, name: &str) {
        self.system = Some(SystemSpec::Catalog(name.to_string()));
    }

    pub fn set_catalog_set(&mut self, name: &str) {
        self.set = Some(SetSpec::Catalog(name.to_string()));
    }

    /// The mandatory seed, after any --seed override.
    pub fn seed(&self, flag_override: Option<u64>) -> Result<u64, ConfigError> {
        flag_override
            .or(self.seed)
            .ok_or_else(|| ConfigError("missing required field `seed`".into()))
    }

    pub fn horizon(&self) -> f64 {
        self.horizon.unwrap_or(1.0)
    }

    pub fn dt(&self) -> f64 {
        self.dt.unwrap_or(1e-3)
    }

    pub fn build_system(&self) -> Result<ControlSystem, ConfigError> {
        let spec = self
            .system
            .as_ref()
            .ok_or_else(|| ConfigError("missing required field `system`".into()))?;
        match spec {
            SystemSpec::Catalog(name) => {
                catalog::system(name).map_err(|e| ConfigError(format!("system: {e}")))
            }
            SystemSpec::Expression {
                n,
                d,
                b,
                sigma,
                controls,
            } => ControlSystem::from_expressions("config-system", *n, *d, b, sigma, controls.clone())
                .map_err(|e| ConfigError(format!("system: {e}"))),
        }
    }

    pub fn build_set(&self, state_dim: usize) -> Result<ClosedSet, ConfigError> {
        let spec = self
            .set
            .as_ref()
            .ok_or_else(|| ConfigError("missing required field `set`".into()))?;
        let set = match spec {
            SetSpec::Catalog(name) => {
                catalog::set(name).map_err(|e| ConfigError(format!("set: {e}")))?
            }
            SetSpec::Expression { g, n } => {
                ClosedSet::from_expression("config-set", n.unwrap_or(state_dim), g)
                    .map_err(|e| ConfigError(format!("set.g: {e}")))?
            }
        };
        if set.dim() != state_dim {
            return Err(ConfigError(format!(
                "set dimension {} does not match system dimension {state_dim}",
                set.dim()
            )));
        }
        Ok(set)
    }

    /// Initial state: explicit x0, else the catalog start for named systems.
    pub fn start(&self, sys: &ControlSystem) -> Result<Vec<f64>, ConfigError> {
        if let Some(x0) = &self.x0 {
            if x0.len() != sys.state_dim() {
                return Err(ConfigError(format!(
                    "x0 has dimension {}, system expects {}",
                    x0.len(),
                    sys.state_dim()
                )));
            }
            return Ok(x0.clone());
        }
        if let Some(entry) = catalog::entry(sys.name()) {
            return Ok(entry.start);
        }
        Err(ConfigError(
            "missing required field `x0` (no catalog default for this system)".into(),
        ))
    }

    /// Effective tolerances: defaults, then config overrides, then the
    /// `INVLAB_TOL` environment variable (which overrides both equality
    /// tolerances).
    pub fn tolerances(&self) -> Result<Tolerances, ConfigError> {
        let mut t = Tolerances::default();
        if let Some(o) = &self.tolerances {
            if let Some(v) = o.tol_eq_analytic {
                t.tol_eq_analytic = v;
            }
            if let Some(v) = o.tol_eq_dual {
                t.tol_eq_dual = v;
            }
            if let Some(v) = o.tol_set {
                t.tol_set = v;
            }
            if let Some(v) = o.grad_floor {
                t.grad_floor = v;
            }
            if let Some(v) = o.det_tol {
                t.det_tol = v;
            }
            if let Some(v) = o.wz_tol {
                t.wz_tol = v;
            }
            if let Some(v) = o.mc_mean_tol {
                t.mc_mean_tol = v;
            }
            if let Some(v) = o.mc_frac_tol {
                t.mc_frac_tol = v;
            }
            if let Some(v) = o.mc_epsilon {
                t.mc_epsilon = v;
            }
            if let Some(v) = o.hjb_slack {
                t.hjb_slack = v;
            }
        }
        if let Ok(raw) = std::env::var("INVLAB_TOL") {
            let v: f64 = raw
                .parse()
                .map_err(|_| ConfigError(format!("INVLAB_TOL must be a float, got `{raw}`")))?;
            if !(v > 0.0) {
                return Err(ConfigError("INVLAB_TOL must be positive".into()));
            }
            t.tol_eq_analytic = v;
            t.tol_eq_dual = v;
        }
        Ok(t)
    }
}
