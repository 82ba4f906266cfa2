//! Singular values, condition numbers and spectral norms.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration: columns of a working
//! copy are rotated pairwise until mutually orthogonal, at which point their
//! norms are the singular values. It is slow for large matrices but accurate
//! to high relative precision, including for the small singular values that
//! decide whether a pruned weight matrix is ill-conditioned.

use std::cmp::Ordering;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Sweep cap for the Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// Relative off-diagonal mass below which a column pair counts as orthogonal.
pub const JACOBI_TOL: f64 = 1e-12;
/// Stopping tolerance for power iteration (relative eigen-residual).
pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 200_000;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Descending, non-negative; `min(rows, cols)` entries.
    pub singular_values: Vec<f64>,
    /// `rows × k` with orthonormal columns.
    pub left_vectors: Option<Tensor>,
    /// `cols × k` with orthonormal columns.
    pub right_vectors: Option<Tensor>,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values[0]
    }

    pub fn sigma_min(&self) -> f64 {
        *self
            .singular_values
            .last()
            .expect("at least one singular value")
    }

    /// `U · diag(S) · Vᵀ`, when vectors were requested.
    pub fn reconstruct(&self) -> Option<Tensor> {
        let u = self.left_vectors.as_ref()?;
        let v = self.right_vectors.as_ref()?;
        let us = Tensor::new(
            u.shape(),
            u.data()
                .chunks(u.cols())
                .flat_map(|row| {
                    row.iter()
                        .zip(&self.singular_values)
                        .map(|(a, s)| a * s)
                        .collect::<Vec<_>>()
                })
                .collect(),
        )
        .ok()?;
        matmul(&us, &v.transpose().ok()?).ok()
    }
}

/// Condition number on the extended reals.
///
/// Serializes as `{"value": <number|null>, "infinite": <bool>}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "KappaRepr", from = "KappaRepr")]
pub enum Kappa {
    Finite(f64),
    /// The matrix is rank-deficient under [`rank_tolerance`].
    Infinite,
}

impl Kappa {
    pub fn is_infinite(&self) -> bool {
        matches!(self, Kappa::Infinite)
    }

    pub fn as_f64(&self) -> f64 {
        match self {
            Kappa::Finite(v) => *v,
            Kappa::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(&self) -> Option<f64> {
        match self {
            Kappa::Finite(v) => Some(*v),
            Kappa::Infinite => None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct KappaRepr {
    value: Option<f64>,
    infinite: bool,
}

impl From<Kappa> for KappaRepr {
    fn from(k: Kappa) -> Self {
        KappaRepr {
            value: k.finite(),
            infinite: k.is_infinite(),
        }
    }
}

impl From<KappaRepr> for Kappa {
    fn from(r: KappaRepr) -> Self {
        match (r.infinite, r.value) {
            (false, Some(v)) => Kappa::Finite(v),
            _ => Kappa::Infinite,
        }
    }
}

impl PartialOrd for Kappa {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        self.as_f64().partial_cmp(&other.as_f64())
    }
}

impl fmt::Display for Kappa {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kappa::Finite(v) => write!(f, "{v}"),
            Kappa::Infinite => f.write_str("inf"),
        }
    }
}

/// Singular values below this count as zero: `max(a,b) · σ_max · 2⁻⁵²`.
pub fn rank_tolerance(rows: usize, cols: usize, sigma_max: f64) -> f64 {
    rows.max(cols) as f64 * sigma_max * f64::EPSILON
}

pub fn svd(m: &Tensor, vectors: bool) -> Result<SvdResult> {
    let (rows, cols) = m.matrix_dims("svd")?;
    if !m.is_finite() {
        return Err(Error::invalid("svd input has non-finite entries"));
    }
    if rows >= cols {
        jacobi_tall(m, vectors)
    } else {
        let t = jacobi_tall(&m.transpose()?, vectors)?;
        Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        })
    }
}

pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    Ok(svd(m, false)?.singular_values)
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(m: &Tensor, vectors: bool) -> Result<SvdResult> {
    let (rows, cols) = m.matrix_dims("svd")?;
    // Column-major working copy.
    let mut a: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..rows).map(|i| m.get2(i, j)).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    // Columns whose squared norm falls below this are rounding noise; rotating
    // them against each other never settles.
    let frob_sq: f64 = a.iter().flatten().map(|x| x * x).sum();
    let floor = f64::EPSILON * f64::EPSILON * frob_sq;
    let mut converged = cols < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0_f64;
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = col_products(&a[p], &a[q]);
                if alpha <= floor || beta <= floor || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha.sqrt() * beta.sqrt());
                residual = residual.max(off);
                if off <= JACOBI_TOL {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                if vectors {
                    rotate(&mut v, p, q, c, s);
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric {
            message: format!("Jacobi SVD did not converge in {MAX_SWEEPS} sweeps"),
            residual,
        });
    }

    let norms: Vec<f64> = a
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));
    let singular_values: Vec<f64> = order.iter().map(|&i| norms[i]).collect();

    if !vectors {
        return Ok(SvdResult {
            singular_values,
            left_vectors: None,
            right_vectors: None,
        });
    }

    let tol = rank_tolerance(rows, cols, singular_values[0]);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(cols);
    let mut deficient = Vec::new();
    for (slot, &i) in order.iter().enumerate() {
        if norms[i] > tol && norms[i] > 0.0 {
            u_cols.push(a[i].iter().map(|x| x / norms[i]).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            deficient.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &deficient, rows);

    let mut u = Tensor::zeros(&[rows, cols]);
    let mut vt = Tensor::zeros(&[cols, cols]);
    for (slot, &i) in order.iter().enumerate() {
        for (r, &val) in u_cols[slot].iter().enumerate() {
            u.set2(r, slot, val);
        }
        for (r, &val) in v[i].iter().enumerate() {
            vt.set2(r, slot, val);
        }
    }
    Ok(SvdResult {
        singular_values,
        left_vectors: Some(u),
        right_vectors: Some(vt),
    })
}

fn col_products(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (a, b) in x.iter().zip(y) {
        alpha += a * a;
        beta += b * b;
        gamma += a * b;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the listed zero columns with unit vectors orthogonal to all others
/// (Gram-Schmidt against the standard basis).
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize], dim: usize) {
    let mut basis = 0;
    for &slot in slots {
        while basis < dim {
            let mut cand = vec![0.0; dim];
            cand[basis] = 1.0;
            basis += 1;
            for _ in 0..2 {
                for (j, other) in cols.iter().enumerate() {
                    if j == slot {
                        continue;
                    }
                    let d: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= d * o;
                    }
                }
            }
            let n = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-8 {
                cols[slot] = cand.iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// `σ_max / σ_min`, or [`Kappa::Infinite`] when `σ_min` is below the rank tolerance.
pub fn condition_number(m: &Tensor) -> Result<Kappa> {
    let (rows, cols) = m.matrix_dims("condition_number")?;
    let s = singular_values(m)?;
    Ok(kappa_from_singular_values(&s, rows, cols))
}

pub fn kappa_from_singular_values(s: &[f64], rows: usize, cols: usize) -> Kappa {
    let smax = s[0];
    let smin = *s.last().unwrap();
    if smax == 0.0 || smin <= rank_tolerance(rows, cols, smax) {
        Kappa::Infinite
    } else {
        Kappa::Finite(smax / smin)
    }
}

/// Largest singular value by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    let (rows, cols) = m.matrix_dims("spectral_norm")?;
    if m.data().iter().all(|&x| x == 0.0) {
        return Ok(0.0);
    }
    let mt = m.transpose()?;
    // Fixed pseudo-random start: deterministic, and almost surely not
    // orthogonal to the leading right singular vector.
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    let mut residual = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let u = mat_vec(m.data(), &v, rows, cols);
        let w = mat_vec(mt.data(), &u, cols, rows);
        let lambda: f64 = u.iter().map(|x| x * x).sum();
        if lambda == 0.0 {
            // Start landed in the null space; nudge along the first basis vector.
            v = (0..cols).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
            continue;
        }
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt()
            / lambda;
        if residual <= POWER_TOL {
            return Ok(lambda.sqrt());
        }
        v = w;
        normalize(&mut v);
    }
    Err(Error::Numeric {
        message: format!("power iteration did not converge in {POWER_MAX_ITERS} iterations"),
        residual,
    })
}

fn mat_vec(a: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            a[i * cols..(i + 1) * cols]
                .iter()
                .zip(x)
                .map(|(p, q)| p * q)
                .sum()
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(m: &Tensor) -> Result<Tensor> {
    let (n, c) = m.matrix_dims("inverse")?;
    if n != c {
        return Err(Error::dim(format!(
            "inverse needs a square matrix, got {n}x{c}"
        )));
    }
    let mut a = m.data().to_vec();
    let mut inv = Tensor::eye(n).into_data();
    let scale = m.max_abs();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .unwrap();
        let pv = a[pivot * n + col];
        if pv.abs() <= n as f64 * scale * f64::EPSILON {
            return Err(Error::Numeric {
                message: "matrix is singular to working precision".into(),
                residual: pv.abs(),
            });
        }
        if pivot != col {
            for k in 0..n {
                a.swap(pivot * n + k, col * n + k);
                inv.swap(pivot * n + k, col * n + k);
            }
        }
        for k in 0..n {
            a[col * n + k] /= pv;
            inv[col * n + k] /= pv;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[r * n + k] -= f * a[col * n + k];
                inv[r * n + k] -= f * inv[col * n + k];
            }
        }
    }
    Tensor::new(&[n, n], inv)
}
