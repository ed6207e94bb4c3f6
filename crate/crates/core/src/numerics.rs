//! Shared numerical utilities: a small dense matrix type, a Jacobi
//! eigensolver for symmetric matrices, the two-sample Kolmogorov–Smirnov
//! statistic, finite-difference derivative checks, and reproducible RNG
//! stream splitting for parallel Monte Carlo.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Maximum matrix dimension accepted by the Jacobi eigensolver.
pub const MAX_EIGEN_DIM: usize = 64;

// ---------------------------------------------------------------------------
// Dense matrix
// ---------------------------------------------------------------------------

/// Minimal dense row-major matrix. Dimensions here are tiny (state and noise
/// dimensions, at most [`MAX_EIGEN_DIM`]), so no attempt is made at blocking
/// or sparsity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from nested rows. Panics if the rows are ragged.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    /// A · x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| (0..self.cols).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// Aᵀ · x
    pub fn t_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j) * x[i]).sum())
            .collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// (A + Aᵀ)/2; requires a square matrix.
    pub fn symmetrize(&self) -> Mat {
        assert_eq!(self.rows, self.cols);
        let mut s = Mat::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                s.set(i, j, 0.5 * (self.get(i, j) + self.get(j, i)));
            }
        }
        s
    }

    /// max_{ij} |A_ij − A_ji|
    pub fn max_asymmetry(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        assert_eq!(self.rows, self.cols);
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

// ---------------------------------------------------------------------------
// Symmetric eigenvalues (Jacobi rotations)
// ---------------------------------------------------------------------------

/// Spectrum of the symmetrized input, plus how asymmetric the input was.
/// The asymmetry is reported rather than silently absorbed: for the
/// negative-semidefiniteness checks, symmetry is itself part of the condition
/// being verified.
#[derive(Debug, Clone, Serialize)]
pub struct SymmetricSpectrum {
    /// Eigenvalues of (A + Aᵀ)/2, sorted ascending.
    pub eigenvalues: Vec<f64>,
    /// max_{ij} |A_ij − A_ji| of the raw input.
    pub max_asymmetry: f64,
}

impl SymmetricSpectrum {
    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("nonempty spectrum")
    }

    pub fn lambda_min(&self) -> f64 {
        self.eigenvalues[0]
    }
}

/// Eigenvalues of (A + Aᵀ)/2 by cyclic Jacobi rotations.
///
/// The rotation method is unconditionally stable for symmetric input and
/// converges quadratically once the off-diagonal mass is small; the dimension
/// cap keeps the O(d³) sweeps cheap.
pub fn symmetric_eigenvalues(a: &Mat) -> Result<SymmetricSpectrum> {
    let (values, _) = jacobi_eigen(a)?;
    Ok(SymmetricSpectrum {
        eigenvalues: values,
        max_asymmetry: a.max_asymmetry(),
    })
}

/// Full Jacobi eigendecomposition of sym(A): returns eigenvalues sorted
/// ascending and the matrix whose columns are the matching eigenvectors.
pub fn jacobi_eigen(a: &Mat) -> Result<(Vec<f64>, Mat)> {
    if a.rows() != a.cols() {
        return Err(Error::InvalidInput(format!(
            "eigensolver requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 || n > MAX_EIGEN_DIM {
        return Err(Error::InvalidInput(format!(
            "eigensolver dimension {} outside 1..={}",
            n, MAX_EIGEN_DIM
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite {
            context: "eigensolver input".into(),
            point: a.as_slice().to_vec(),
        });
    }

    let mut s = a.symmetrize();
    let mut q = Mat::identity(n);
    let scale: f64 = s
        .as_slice()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    let tol = 1e-14 * scale;

    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for r in (p + 1)..n {
                off += s.get(p, r).abs();
            }
        }
        if off < tol {
            break;
        }
        for p in 0..(n - 1) {
            for r in (p + 1)..n {
                let apq = s.get(p, r);
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = s.get(p, p);
                let aqq = s.get(r, r);
                let theta = 0.5 * (aqq - app) / apq;
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                    sign / (theta.abs() + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // rotate rows/cols p,r of s
                for k in 0..n {
                    let skp = s.get(k, p);
                    let skq = s.get(k, r);
                    s.set(k, p, c * skp - sn * skq);
                    s.set(k, r, sn * skp + c * skq);
                }
                for k in 0..n {
                    let spk = s.get(p, k);
                    let sqk = s.get(r, k);
                    s.set(p, k, c * spk - sn * sqk);
                    s.set(r, k, sn * spk + c * sqk);
                }
                // accumulate eigenvectors
                for k in 0..n {
                    let qkp = q.get(k, p);
                    let qkq = q.get(k, r);
                    q.set(k, p, c * qkp - sn * qkq);
                    q.set(k, r, sn * qkp + c * qkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s.get(i, i).partial_cmp(&s.get(j, j)).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| s.get(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(k, new_col, q.get(k, old_col));
        }
    }
    Ok((values, vectors))
}

// ---------------------------------------------------------------------------
// Two-sample Kolmogorov–Smirnov statistic
// ---------------------------------------------------------------------------

/// Two-sample KS statistic with asymptotic critical values.
#[derive(Debug, Clone, Serialize)]
pub struct KsStatistic {
    /// D = sup_x |F_a(x) − F_b(x)|.
    pub d: f64,
    /// Critical value at the 1% level: 1.628·√((m+n)/(mn)).
    pub critical_1pct: f64,
    /// Critical value at the 5% level: 1.358·√((m+n)/(mn)).
    pub critical_5pct: f64,
    pub len_a: usize,
    pub len_b: usize,
}

/// Two-sample Kolmogorov–Smirnov distance between empirical CDFs.
pub fn ks_statistic(sample_a: &[f64], sample_b: &[f64]) -> Result<KsStatistic> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(Error::InvalidInput(
            "ks_statistic requires two nonempty samples".into(),
        ));
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_unstable_by(|x, y| x.partial_cmp(y).unwrap());

    let (m, n) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < m || j < n {
        let x = match (a.get(i), b.get(j)) {
            (Some(&xa), Some(&xb)) => xa.min(xb),
            (Some(&xa), None) => xa,
            (None, Some(&xb)) => xb,
            (None, None) => break,
        };
        while i < m && a[i] <= x {
            i += 1;
        }
        while j < n && b[j] <= x {
            j += 1;
        }
        let fa = i as f64 / m as f64;
        let fb = j as f64 / n as f64;
        d = d.max((fa - fb).abs());
    }

    let scale = ((m + n) as f64 / (m as f64 * n as f64)).sqrt();
    Ok(KsStatistic {
        d,
        critical_1pct: 1.628 * scale,
        critical_5pct: 1.358 * scale,
        len_a: m,
        len_b: n,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference derivative check
// ---------------------------------------------------------------------------

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_point: Vec<f64>,
    pub pass: bool,
    pub h: f64,
    pub tol: f64,
}

/// Compares `df` against central finite differences of `f` at the given
/// points. The error is relative to max(1, |analytic|) per component.
pub fn finite_difference_check<F, G>(
    f: F,
    df: G,
    points: &[Vec<f64>],
    h: f64,
    tol: f64,
) -> Result<FdReport>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidInput(format!(
            "finite-difference step {h} outside [1e-7, 1e-3]"
        )));
    }
    let mut max_rel = 0.0_f64;
    let mut worst: Vec<f64> = points.first().cloned().unwrap_or_default();
    for x in points {
        let analytic = df(x);
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (fd - analytic[i]).abs() / analytic[i].abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = x.clone();
            }
        }
    }
    Ok(FdReport {
        max_rel_error: max_rel,
        worst_point: worst,
        pass: max_rel <= tol,
        h,
        tol,
    })
}

// ---------------------------------------------------------------------------
// Reproducible RNG stream splitting
// ---------------------------------------------------------------------------

/// SplitMix64 avalanche (Steele–Lea–Flood finalizer). Bit-exact spec:
///
/// ```text
/// z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9;   (wrapping, 64-bit)
/// z ^= z >> 27;  z *= 0x94D049BB133111EB;
/// z ^= z >> 31;
/// ```
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed for task `task_index` from a master
/// seed. Bit-exact spec so other implementations can reproduce streams:
///
/// ```text
/// rng_split(master, i) = splitmix64(master + (i + 1) * 0x9E3779B97F4A7C15)
/// ```
///
/// with 64-bit wrapping arithmetic. Both maps `i ↦ seed` (fixed master) and
/// `master ↦ seed` (fixed i) are injective: the pre-avalanche map is an
/// affine bijection with an odd multiplier, and the avalanche is a bijection.
#[inline]
pub fn rng_split(master_seed: u64, task_index: u64) -> u64 {
    splitmix64(
        master_seed.wrapping_add(
            task_index
                .wrapping_add(1)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ),
    )
}

/// ChaCha8 generator for one task stream. The 256-bit ChaCha key is the
/// little-endian concatenation of the chain
///
/// ```text
/// s0 = rng_split(master, task)
/// s_{k+1} = splitmix64(s_k + 0x9E3779B97F4A7C15)
/// key = LE64(s0) ‖ LE64(s1) ‖ LE64(s2) ‖ LE64(s3)
/// ```
pub fn stream_rng(master_seed: u64, task_index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    let mut s = rng_split(master_seed, task_index);
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&s.to_le_bytes());
        s = splitmix64(s.wrapping_add(0x9E37_79B9_7F4A_7C15));
    }
    ChaCha8Rng::from_seed(key)
}

/// Evaluates `f(0), ..., f(count-1)` in parallel and returns the results in
/// index order. Accumulation order is fixed by construction, so reductions
/// over the returned vector are bitwise independent of the worker count.
pub fn par_map_ordered<T, F>(count: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..count).into_par_iter().map(f).collect()
}
