//! Singular value decomposition (one-sided Jacobi) and PCA.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Thin SVD `a = u * diag(s) * vt` with `r = min(m, n)` columns/rows.
///
/// Deterministic for a fixed input: fixed sweep order, singular values sorted
/// non-increasing (ties keep column order), and each left singular vector's
/// first nonzero component is non-negative.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub vt: Tensor,
}

impl SvdResult {
    /// `u * diag(s) * vt`, for reconstruction checks.
    pub fn reconstruct(&self) -> Tensor {
        let r = self.s.len();
        let m = self.u.rows();
        let n = self.vt.cols();
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.u.at(i, k) * self.s[k] * self.vt.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

pub fn svd(a: &Tensor) -> Result<SvdResult> {
    if !a.is_matrix() {
        return Err(Error::Dimension(format!(
            "svd requires a 2-D tensor, got shape {:?}",
            a.shape()
        )));
    }
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 {
        return Err(Error::Dimension("svd of an empty matrix".into()));
    }
    if m < n {
        // Decompose the transpose and swap the factors.
        let t = svd(&a.transpose())?;
        let u = transpose_of(&t.vt);
        let vt = t.u.transpose();
        let mut out = SvdResult { u, s: t.s, vt };
        apply_sign_convention(&mut out);
        return Ok(out);
    }

    let mut b = a.clone();
    let mut v = Tensor::identity(n);
    one_sided_jacobi(&mut b, &mut v, m, n);

    // Column norms are the singular values; order them non-increasing.
    let mut svals: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| b.at(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| svals[y].partial_cmp(&svals[x]).unwrap().then(x.cmp(&y)));

    let max_s = svals.iter().cloned().fold(0.0, f64::max);
    let rank_tol = max_s * f64::EPSILON * (m.max(n) as f64) * 16.0;

    let mut u = Tensor::zeros(vec![m, n]);
    let mut vt = Tensor::zeros(vec![n, n]);
    let mut needs_basis = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s_j = svals[j];
        if s_j > rank_tol && s_j > 0.0 {
            for i in 0..m {
                u.set(i, slot, b.at(i, j) / s_j);
            }
        } else {
            needs_basis.push(slot);
        }
        for i in 0..n {
            vt.set(slot, i, v.at(i, j));
        }
    }
    svals.sort_by(|x, y| y.partial_cmp(x).unwrap());
    complete_orthonormal_columns(&mut u, &needs_basis, m, n);

    let mut out = SvdResult { u, s: svals, vt };
    apply_sign_convention(&mut out);
    Ok(out)
}

/// Orthogonalizes the columns of `b` by plane rotations, accumulating the
/// rotations in `v`. Sweeps run in fixed (p, q) order until no off-diagonal
/// inner product is significant.
fn one_sided_jacobi(b: &mut Tensor, v: &mut Tensor, m: usize, n: usize) {
    const MAX_SWEEPS: usize = 64;
    const TOL: f64 = 1e-15;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let bp = b.at(i, p);
                    let bq = b.at(i, q);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b.at(i, p);
                    let bq = b.at(i, q);
                    b.set(i, p, c * bp - s * bq);
                    b.set(i, q, s * bp + c * bq);
                }
                for i in 0..n {
                    let vp = v.at(i, p);
                    let vq = v.at(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            break;
        }
    }
}

/// Fills the listed columns with orthonormal vectors from the standard basis,
/// orthogonalized against every already-assigned column.
fn complete_orthonormal_columns(u: &mut Tensor, slots: &[usize], m: usize, n: usize) {
    for &slot in slots {
        let mut candidate = 0;
        loop {
            debug_assert!(candidate < m, "orthonormal completion exhausted the basis");
            let mut col = vec![0.0; m];
            col[candidate] = 1.0;
            for other in 0..n {
                if other == slot || slots.contains(&other) && other > slot {
                    continue;
                }
                let proj: f64 = (0..m).map(|i| col[i] * u.at(i, other)).sum();
                for (i, c) in col.iter_mut().enumerate() {
                    *c -= proj * u.at(i, other);
                }
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (i, c) in col.iter().enumerate() {
                    u.set(i, slot, c / norm);
                }
                break;
            }
            candidate += 1;
        }
    }
}

fn transpose_of(t: &Tensor) -> Tensor {
    t.transpose()
}

/// Flips (u column, vt row) pairs so each left singular vector's first
/// component above threshold is non-negative. Keeps `u * s * vt` unchanged.
fn apply_sign_convention(out: &mut SvdResult) {
    let m = out.u.rows();
    let r = out.s.len();
    let n = out.vt.cols();
    for k in 0..r {
        let mut sign = 0.0;
        for i in 0..m {
            let e = out.u.at(i, k);
            if e.abs() > 1e-9 {
                sign = e.signum();
                break;
            }
        }
        if sign < 0.0 {
            for i in 0..m {
                let e = out.u.at(i, k);
                out.u.set(i, k, -e);
            }
            for j in 0..n {
                let e = out.vt.at(k, j);
                out.vt.set(k, j, -e);
            }
        }
    }
}

/// Principal component analysis of row-vector observations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaResult {
    /// Column means of the input (the centroid).
    pub mean: Vec<f64>,
    /// Top-m principal directions as rows, mutually orthonormal.
    pub components: Tensor,
    /// Variance explained per component, non-increasing.
    pub explained_variance: Vec<f64>,
}

impl PcaResult {
    /// Projects a point onto the principal directions after centering.
    pub fn project(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.mean.len() {
            return Err(Error::Dimension(format!(
                "pca projection expects dimension {}, got {}",
                self.mean.len(),
                point.len()
            )));
        }
        let centered: Vec<f64> = point.iter().zip(&self.mean).map(|(p, m)| p - m).collect();
        self.components.matvec(&centered)
    }
}

/// Fits PCA on `points` (n x d) via SVD of the centered data and keeps the
/// top `m` components.
pub fn pca(points: &Tensor, m: usize) -> Result<PcaResult> {
    if !points.is_matrix() {
        return Err(Error::Dimension("pca expects an n x d matrix".into()));
    }
    let (n, d) = (points.rows(), points.cols());
    if n < 2 {
        return Err(Error::Domain(format!(
            "pca requires at least 2 points, got {n}"
        )));
    }
    if m > n.min(d) {
        return Err(Error::Domain(format!(
            "pca component count {m} exceeds min(n, d) = {}",
            n.min(d)
        )));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            mean[j] += points.at(i, j);
        }
    }
    for v in mean.iter_mut() {
        *v /= n as f64;
    }
    let mut centered = Tensor::zeros(vec![n, d]);
    for i in 0..n {
        for j in 0..d {
            centered.set(i, j, points.at(i, j) - mean[j]);
        }
    }
    let dec = svd(&centered)?;
    let mut components = Tensor::zeros(vec![m, d]);
    for k in 0..m {
        for j in 0..d {
            components.set(k, j, dec.vt.at(k, j));
        }
    }
    let explained_variance: Vec<f64> = dec.s[..m]
        .iter()
        .map(|s| s * s / (n as f64 - 1.0))
        .collect();
    Ok(PcaResult {
        mean,
        components,
        explained_variance,
    })
}
