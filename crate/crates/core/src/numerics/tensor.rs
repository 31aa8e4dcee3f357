use std::fmt;

use crate::error::{Error, Result};

/// Dense row-major `f32` array.
///
/// Every library-produced tensor has `data.len() == shape.iter().product()`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("dimensions must be positive, got {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Unchecked constructor for kernels that already know the sizes agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn row_vector(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![1, n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }
}

/// Numerically stable softmax of a vector (max-subtracted, accumulated in `f64`).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::EmptyLogits);
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) as f64).exp()).collect();
    let inv = 1.0 / exps.iter().sum::<f64>();
    for (o, e) in out.iter_mut().zip(exps) {
        *o = (e * inv) as f32;
    }
}

/// Log-softmax of one row, in `f64`.
pub(crate) fn log_softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = logits
        .iter()
        .map(|&z| (z as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&z| z as f64 - lse).collect()
}

/// Row-wise layer normalization over the last axis: `(x - mean) / sqrt(var + eps) * gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
    let cols = x.cols();
    if cols == 0 {
        return Err(Error::shape("layer_norm over a zero-length axis"));
    }
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(format!(
            "layer_norm axis {cols} vs gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let (out, _, _) = layer_norm_forward(x, gain.data(), bias.data(), eps);
    Ok(out)
}

/// Returns the output, the normalized (pre-affine) values and per-row inverse std.
pub(crate) fn layer_norm_forward(
    x: &Tensor,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
) -> (Tensor, Vec<f32>, Vec<f32>) {
    let cols = x.cols();
    let rows = x.rows();
    let mut out = vec![0.0f32; rows * cols];
    let mut xhat = vec![0.0f32; rows * cols];
    let mut rstd = vec![0.0f32; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = row
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / cols as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        rstd[r] = inv as f32;
        for c in 0..cols {
            let h = (row[c] as f64 - mean) * inv;
            xhat[r * cols + c] = h as f32;
            out[r * cols + c] = (h * gain[c] as f64 + bias[c] as f64) as f32;
        }
    }
    (Tensor::from_parts(x.shape.clone(), out), xhat, rstd)
}

/// `a [m,k] · b [k,n]`.
pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let o = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

/// `a [m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]ᵀ · b [k,n]`.
pub(crate) fn matmul_tn(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    for p in 0..k {
        let ar = &a[p * m..(p + 1) * m];
        let br = &b[p * n..(p + 1) * n];
        for (i, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let o = &mut out[i * n..(i + 1) * n];
            for (ov, &bv) in o.iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    out
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044_715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let p = softmax(&[2f32.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-6);
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-6 && p[1].abs() < 1e-6);
        assert!(matches!(softmax(&[]), Err(Error::EmptyLogits)));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Tensor::full(&[4], 1.0);
        let zero = Tensor::zeros(&[4]);
        let x = Tensor::matrix(1, 4, vec![5.0; 4]).unwrap();
        let y = layer_norm(&x, &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let one2 = Tensor::full(&[2], 1.0);
        let zero2 = Tensor::zeros(&[2]);
        let x = Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &one2, &zero2, 1e-5).unwrap();
        // var = 1, so only the eps correction separates the output from the input
        assert!((y.data()[0] - 1.0).abs() < 1e-5);
        assert!((y.data()[1] + 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_moments() {
        let data: Vec<f32> = (0..16).map(|i| ((i * 7919) % 23) as f32 * 0.37 - 3.0).collect();
        let x = Tensor::matrix(2, 8, data).unwrap();
        let y = layer_norm(&x, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-12).unwrap();
        for r in 0..2 {
            let row = y.row(r);
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_bad_axis() {
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn tensor_rejects_bad_shapes() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f32> = (0..6).map(|i| i as f32 - 2.0).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|i| (i as f32) * 0.5).collect(); // 3x4
        let c = matmul(&a, &b, 2, 3, 4);
        // bᵀ as 4x3
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(c, matmul_nt(&a, &bt, 2, 3, 4));
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(c, matmul_tn(&at, &b, 3, 2, 4));
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f32, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-3f64;
            let g = |v: f64| {
                let u = 0.797_884_560_8 * (v + 0.044_715 * v * v * v);
                0.5 * v * (1.0 + u.tanh())
            };
            let fd = (g(x as f64 + h) - g(x as f64 - h)) / (2.0 * h);
            assert!((gelu_grad(x) as f64 - fd).abs() < 1e-5);
        }
    }
}
