//! Dense f64 tensors and the three matrix kernels everything else is
//! built on.
//!
//! Every kernel fixes its summation order per output element (4-way
//! unrolled accumulators in a deterministic pattern), so results are
//! bit-identical run to run and independent of the rayon thread count:
//! parallelism only ever splits output rows, never a reduction.

use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Shape(format!(
                "tensor data length {} does not match shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Shape(format!(
                "expected scalar, found shape {:?}",
                self.shape
            )))
        }
    }

    /// Elementwise accumulate `other` into `self` (shapes must match).
    pub fn accumulate(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "accumulate shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with a fixed 4-lane accumulation order.
#[inline]
pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let chunks = x.len() / 4;
    let mut a0 = 0.0f64;
    let mut a1 = 0.0f64;
    let mut a2 = 0.0f64;
    let mut a3 = 0.0f64;
    for i in 0..chunks {
        let j = 4 * i;
        a0 += x[j] * y[j];
        a1 += x[j + 1] * y[j + 1];
        a2 += x[j + 2] * y[j + 2];
        a3 += x[j + 3] * y[j + 3];
    }
    let mut s = (a0 + a1) + (a2 + a3);
    for j in 4 * chunks..x.len() {
        s += x[j] * y[j];
    }
    s
}

/// `out[i][j] = sum_k a[i][k] * b[j][k]` for row-major `a` (m x k) and
/// `b` (n x k): both operands are walked contiguously.
pub fn matmul_abt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = dot(arow, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `out[i][j] = sum_k a[i][k] * b[k][j]` for row-major `a` (m x k) and
/// `b` (k x n), accumulated row-wise (axpy) so `b` streams contiguously.
pub fn matmul_ab(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(brow) {
                *slot += av * bv;
            }
        }
    });
    out
}

/// `out[i][j] = sum_r a[r][i] * b[r][j]` for row-major `a` (r x m) and
/// `b` (r x n): the transpose-first product used for weight gradients.
/// Each output row accumulates over `r` in a fixed order.
pub fn matmul_atb(a: &[f64], r: usize, m: usize, b: &[f64], n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut out = vec![0.0f64; m * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for rr in 0..r {
            let av = a[rr * m + i];
            if av == 0.0 {
                continue;
            }
            let brow = &b[rr * n..(rr + 1) * n];
            for (slot, &bv) in row.iter_mut().zip(brow) {
                *slot += av * bv;
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn naive_ab(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for kk in 0..k {
                    s += a[i * k + kk] * b[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::substream(seed, "matmul-test");
        (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = x[i * cols + j];
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        for (m, k, n, seed) in [(3, 5, 4, 1), (16, 33, 9, 2), (1, 7, 1, 3), (8, 4, 12, 4)] {
            let a = random_matrix(m, k, seed);
            let b = random_matrix(k, n, seed + 100);
            let want = naive_ab(&a, m, k, &b, n);

            let got_ab = matmul_ab(&a, m, k, &b, n);
            let bt = transpose(&b, k, n);
            let got_abt = matmul_abt(&a, m, k, &bt, n);
            let at = transpose(&a, m, k);
            let got_atb = matmul_atb(&at, k, m, &b, n);

            for (w, g) in want.iter().zip(&got_ab) {
                assert!((w - g).abs() < 1e-12);
            }
            for (w, g) in want.iter().zip(&got_abt) {
                assert!((w - g).abs() < 1e-12);
            }
            for (w, g) in want.iter().zip(&got_atb) {
                assert!((w - g).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kernels_are_bit_deterministic() {
        let a = random_matrix(37, 129, 9);
        let b = random_matrix(129, 41, 10);
        let x = matmul_ab(&a, 37, 129, &b, 41);
        let y = matmul_ab(&a, 37, 129, &b, 41);
        assert_eq!(
            x.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
        assert!(t.scalar_value().is_err());
        assert_eq!(Tensor::scalar(2.5).scalar_value().unwrap(), 2.5);
        let mut acc = Tensor::zeros(vec![2, 3]);
        acc.accumulate(&t).unwrap();
        acc.accumulate(&t).unwrap();
        assert_eq!(acc.data()[0], 2.0);
        assert!(acc.accumulate(&Tensor::zeros(vec![3, 2])).is_err());
    }
}
