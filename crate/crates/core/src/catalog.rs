//! Built-in systems and sets with analytic derivatives and known invariance
//! ground truth. Every entry ships closed-form Jacobians so checker noise
//! stays at machine precision, and exact solutions where available.
//!
//! | system               | set       | behaviour                                 |
//! |----------------------|-----------|-------------------------------------------|
//! | `circle`             | `disk`    | invariant: rotation noise, norm conserved |
//! | `sphere`             | `ball`    | invariant: 3-d rotation noise             |
//! | `halfspace-tangent`  | `halfspace` | invariant: noise tangent to the boundary |
//! | `halfspace-crossing` | `halfspace` | non-invariant: noise crosses the boundary |
//! | `inward-drift`       | `disk`    | invariant: no noise, contracting drift    |

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::Mat;
use crate::sde_core::{ClosedSet, ControlSystem, DerivativeKind};

/// One (system, set) pair with a canonical boundary start point.
#[derive(Debug, Clone)]
pub struct CatalogEntry {
    pub system_name: &'static str,
    pub set_name: &'static str,
    pub start: Vec<f64>,
    pub invariant: bool,
    pub description: &'static str,
}

/// The audit pairs, in canonical order.
pub fn entries() -> Vec<CatalogEntry> {
    vec![
        CatalogEntry {
            system_name: "circle",
            set_name: "disk",
            start: vec![1.0, 0.0],
            invariant: true,
            description: "planar rotation noise with norm-restoring drift",
        },
        CatalogEntry {
            system_name: "sphere",
            set_name: "ball",
            start: vec![1.0, 0.0, 0.0],
            invariant: true,
            description: "three rotation noise fields on the 2-sphere",
        },
        CatalogEntry {
            system_name: "halfspace-tangent",
            set_name: "halfspace",
            start: vec![0.0, 0.0],
            invariant: true,
            description: "inward drift, noise parallel to the boundary",
        },
        CatalogEntry {
            system_name: "halfspace-crossing",
            set_name: "halfspace",
            start: vec![0.0, 0.0],
            invariant: false,
            description: "noise normal to the boundary crosses it immediately",
        },
        CatalogEntry {
            system_name: "inward-drift",
            set_name: "disk",
            start: vec![1.0, 0.0],
            invariant: true,
            description: "noiseless contraction toward the origin",
        },
    ]
}

pub fn entry(system_name: &str) -> Option<CatalogEntry> {
    entries()
        .into_iter()
        .find(|e| e.system_name == canonical_system_name(system_name))
}

fn canonical_system_name(name: &str) -> &str {
    match name {
        "sphere-n" | "sphere3" => "sphere",
        other => other,
    }
}

/// Looks up a catalog system by name. `sphere-n` and `sphere3` are aliases
/// for `sphere` (the n-dimensional analogue instantiated at n = 3).
pub fn system(name: &str) -> Result<ControlSystem> {
    match canonical_system_name(name) {
        "circle" => circle(),
        "sphere" => sphere(),
        "halfspace-tangent" => halfspace_tangent(),
        "halfspace-crossing" => halfspace_crossing(),
        "inward-drift" => inward_drift(),
        other => Err(Error::InvalidInput(format!(
            "unknown catalog system `{other}` (known: circle, sphere, halfspace-tangent, halfspace-crossing, inward-drift)"
        ))),
    }
}

/// Looks up a catalog set by name.
pub fn set(name: &str) -> Result<ClosedSet> {
    match name {
        "disk" => Ok(ball_set("disk", 2)),
        "ball" | "ball3" => Ok(ball_set("ball", 3)),
        "halfspace" => Ok(halfspace_set()),
        other => Err(Error::InvalidInput(format!(
            "unknown catalog set `{other}` (known: disk, ball, halfspace)"
        ))),
    }
}

/// Rotation by `theta` in the plane, the exact flow of the circle system's
/// noise field.
pub fn rotate2(x0: &[f64], theta: f64) -> Vec<f64> {
    let (s, c) = theta.sin_cos();
    vec![c * x0[0] - s * x0[1], s * x0[0] + c * x0[1]]
}

/// dX = -X/2 dt + J X dW with J the 2-d rotation generator. The Stratonovich
/// drift vanishes, |X| is conserved, and X_t = R(W_t) X_0 exactly.
fn circle() -> Result<ControlSystem> {
    ControlSystem::new(
        "circle",
        2,
        1,
        Arc::new(|x: &[f64], _: &[f64]| Ok(vec![-0.5 * x[0], -0.5 * x[1]])),
        Arc::new(|x: &[f64], _: &[f64]| {
            let mut m = Mat::zeros(2, 1);
            m.set(0, 0, -x[1]);
            m.set(1, 0, x[0]);
            Ok(m)
        }),
        Arc::new(|_: &[f64], _: &[f64], _| {
            let mut j = Mat::zeros(2, 2);
            j.set(0, 1, -1.0);
            j.set(1, 0, 1.0);
            Ok(j)
        }),
        vec![vec![0.0]],
        DerivativeKind::Analytic,
    )
}

/// The circle system defined through parsed expressions instead of closures;
/// derivatives come from dual numbers.
pub fn expression_circle() -> Result<ControlSystem> {
    ControlSystem::from_expressions(
        "circle-expr",
        2,
        1,
        &["-x1/2".to_string(), "-x2/2".to_string()],
        &[vec!["-x2".to_string()], vec!["x1".to_string()]],
        vec![vec![0.0]],
    )
}

/// Antisymmetric generators of rotations about the three coordinate axes.
fn so3_generators() -> [Mat; 3] {
    let mut a1 = Mat::zeros(3, 3);
    a1.set(0, 1, -1.0);
    a1.set(1, 0, 1.0);
    let mut a2 = Mat::zeros(3, 3);
    a2.set(1, 2, -1.0);
    a2.set(2, 1, 1.0);
    let mut a3 = Mat::zeros(3, 3);
    a3.set(0, 2, 1.0);
    a3.set(2, 0, -1.0);
    [a1, a2, a3]
}

/// dX = -X dt + Σᵢ Aᵢ X dWⁱ with Aᵢ the rotation generators: Σᵢ Aᵢ² = -2I,
/// so the Stratonovich drift vanishes and |X| is conserved.
fn sphere() -> Result<ControlSystem> {
    let gens = so3_generators();
    let g1 = gens.clone();
    let g2 = gens;
    ControlSystem::new(
        "sphere",
        3,
        3,
        Arc::new(|x: &[f64], _: &[f64]| Ok(vec![-x[0], -x[1], -x[2]])),
        Arc::new(move |x: &[f64], _: &[f64]| {
            let mut m = Mat::zeros(3, 3);
            for (col, a) in g1.iter().enumerate() {
                let v = a.matvec(x);
                for row in 0..3 {
                    m.set(row, col, v[row]);
                }
            }
            Ok(m)
        }),
        Arc::new(move |_: &[f64], _: &[f64], col| Ok(g2[col].clone())),
        vec![vec![0.0]],
        DerivativeKind::Analytic,
    )
}

/// Inward drift (-1, u) with constant noise (0, 1)ᵀ parallel to the boundary
/// of {x₁ ≤ 0}; the control slides the state along the boundary.
fn halfspace_tangent() -> Result<ControlSystem> {
    ControlSystem::new(
        "halfspace-tangent",
        2,
        1,
        Arc::new(|_: &[f64], u: &[f64]| Ok(vec![-1.0, u[0]])),
        Arc::new(|_: &[f64], _: &[f64]| {
            let mut m = Mat::zeros(2, 1);
            m.set(1, 0, 1.0);
            Ok(m)
        }),
        Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
        vec![vec![-1.0], vec![0.0], vec![1.0]],
        DerivativeKind::Analytic,
    )
    .map(|s| s.with_control_bounds(vec![-1.0], vec![1.0]))
}

/// Constant noise (1, 0)ᵀ normal to the boundary of {x₁ ≤ 0}: started on the
/// boundary, half of all paths are outside immediately.
fn halfspace_crossing() -> Result<ControlSystem> {
    ControlSystem::new(
        "halfspace-crossing",
        2,
        1,
        Arc::new(|_: &[f64], u: &[f64]| Ok(vec![0.0, u[0]])),
        Arc::new(|_: &[f64], _: &[f64]| {
            let mut m = Mat::zeros(2, 1);
            m.set(0, 0, 1.0);
            Ok(m)
        }),
        Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
        vec![vec![-1.0], vec![0.0], vec![1.0]],
        DerivativeKind::Analytic,
    )
    .map(|s| s.with_control_bounds(vec![-1.0], vec![1.0]))
}

/// σ ≡ 0, b = -(1+u)x: pure contraction toward the origin at a
/// control-dependent rate.
fn inward_drift() -> Result<ControlSystem> {
    ControlSystem::new(
        "inward-drift",
        2,
        1,
        Arc::new(|x: &[f64], u: &[f64]| {
            let rate = 1.0 + u[0];
            Ok(vec![-rate * x[0], -rate * x[1]])
        }),
        Arc::new(|_: &[f64], _: &[f64]| Ok(Mat::zeros(2, 1))),
        Arc::new(|_: &[f64], _: &[f64], _| Ok(Mat::zeros(2, 2))),
        vec![vec![0.0], vec![1.0]],
        DerivativeKind::Analytic,
    )
    .map(|s| s.with_control_bounds(vec![0.0], vec![1.0]))
}

/// K = {|x|² ≤ 1} in `n` dimensions with d_K(x) = max(|x| − 1, 0).
fn ball_set(name: &'static str, n: usize) -> ClosedSet {
    ClosedSet::new(
        name,
        n,
        Arc::new(|x: &[f64]| Ok(x.iter().map(|v| v * v).sum::<f64>() - 1.0)),
        Arc::new(|x: &[f64]| Ok(x.iter().map(|v| 2.0 * v).collect())),
        Arc::new(move |x: &[f64]| {
            let mut h = Mat::zeros(x.len(), x.len());
            for i in 0..x.len() {
                h.set(i, i, 2.0);
            }
            Ok(h)
        }),
        Arc::new(|x: &[f64]| {
            let r = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            Ok((r - 1.0).max(0.0))
        }),
    )
}

/// K = {x₁ ≤ 0} with d_K(x) = max(x₁, 0).
fn halfspace_set() -> ClosedSet {
    ClosedSet::new(
        "halfspace",
        2,
        Arc::new(|x: &[f64]| Ok(x[0])),
        Arc::new(|x: &[f64]| {
            let mut g = vec![0.0; x.len()];
            g[0] = 1.0;
            Ok(g)
        }),
        Arc::new(|x: &[f64]| Ok(Mat::zeros(x.len(), x.len()))),
        Arc::new(|x: &[f64]| Ok(x[0].max(0.0))),
    )
}
