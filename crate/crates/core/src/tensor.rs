//! Dense row-major tensors and the small numeric kernels built on them.
//!
//! Computation is carried out in `f64` regardless of on-disk precision, and
//! every reduction runs in row-major, left-to-right order so results are
//! bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking the shape/length contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("tensor contains non-finite values".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Convenience 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        debug_assert!(self.is_matrix());
        self.shape[1]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(self.is_matrix());
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(self.is_matrix());
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(self.is_matrix());
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        debug_assert!(self.is_matrix());
        (0..self.rows()).map(|r| self.at(r, c)).collect()
    }

    fn require_matrix(&self, what: &str) -> Result<()> {
        if !self.is_matrix() {
            return Err(Error::Dimension(format!(
                "{what} requires a 2-D tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Matrix product with deterministic left-to-right accumulation over the
    /// inner dimension.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.require_matrix("matmul")?;
        other.require_matrix("matmul")?;
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: {k} vs {k2}"
            )));
        }
        let mut out = Tensor::zeros(vec![m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += self.data[i * k + p] * other.data[p * n + j];
                }
                out.data[i * n + j] = acc;
            }
        }
        Ok(out)
    }

    /// Matrix-vector product, same accumulation order as [`Tensor::matmul`].
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.require_matrix("matvec")?;
        let (m, k) = (self.rows(), self.cols());
        if x.len() != k {
            return Err(Error::Dimension(format!(
                "matvec expects a vector of length {k}, got {}",
                x.len()
            )));
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = 0.0;
            for p in 0..k {
                acc += self.data[i * k + p] * x[p];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        debug_assert!(self.is_matrix());
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(vec![n, m]);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Tensor, scale: f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + scale * b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// Numerically stable softmax (max-subtracted). Output entries are positive
/// and sum to 1.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("softmax of non-finite input".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine distance `1 - cos(a, b)`; zero-norm operands get distance 1 by
/// convention.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn random_matrix(rng: &mut CounterRng, m: usize, n: usize) -> Tensor {
        let mut data = vec![0.0; m * n];
        rng.fill_gaussian(&mut data);
        Tensor::new(vec![m, n], data).unwrap()
    }

    #[test]
    fn matmul_identity_is_exact() {
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let i = Tensor::identity(2);
        assert_eq!(i.matmul(&a).unwrap(), a);
        assert_eq!(a.matmul(&i).unwrap(), a);
    }

    #[test]
    fn matmul_selector_row() {
        let a = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[5.0]);
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // Independent oracle: naive triple loop in a different loop order.
        let mut rng = CounterRng::new(42, 0);
        let a = random_matrix(&mut rng, 3, 3);
        let b = random_matrix(&mut rng, 3, 3);
        let c = a.matmul(&b).unwrap();
        let mut oracle = vec![0.0; 9];
        for p in 0..3 {
            for i in 0..3 {
                for j in 0..3 {
                    oracle[i * 3 + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        for i in 0..9 {
            assert!((c.data()[i] - oracle[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetry() {
        let s = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(s, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_closed_form() {
        // softmax([ln 2, 0]) = [2/3, 1/3]
        let s = softmax(&[2.0_f64.ln(), 0.0]).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_no_overflow_at_extreme_logits() {
        let s = softmax(&[1000.0, 0.0]).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(s[0] > 1.0 - 1e-12);
        assert!(s[1] < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one_for_long_inputs() {
        let mut rng = CounterRng::new(5, 1);
        for _ in 0..20 {
            let v: Vec<f64> = (0..10_000).map(|_| rng.next_gaussian() * 10.0).collect();
            let s = softmax(&v).unwrap();
            let total: f64 = s.iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(s.iter().all(|x| *x > 0.0));
        }
    }

    #[test]
    fn softmax_empty_is_domain_error() {
        assert!(matches!(softmax(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn tensor_rejects_bad_shape_and_nonfinite() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f64::NAN]),
            Err(Error::Domain(_))
        ));
    }
}
