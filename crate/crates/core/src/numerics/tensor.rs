use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major tensor of `f64`.
///
/// Every constructor checks that the data length equals the product of the
/// shape, that no dimension is zero, and that all entries are finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("invalid shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor entry {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor whose data is already known to be finite and well shaped.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    /// A `1 x n` row vector.
    pub fn row(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![1, 1], vec![value])
    }

    /// Uniform initialisation on `[-scale, scale]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-scale..=scale)).collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Number of rows when viewed as a matrix (all leading dims collapsed).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || other.shape.len() != 2 {
            return Err(Error::shape("matmul", "operands must be matrices"));
        }
        let (m, k) = (self.shape[0], self.shape[1]);
        let (k2, n) = (other.shape[0], other.shape[1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] x [{k2}x{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor::from_parts(vec![m, n], out))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `out[m x n] += a[m x k] * b[k x n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += av * gv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
