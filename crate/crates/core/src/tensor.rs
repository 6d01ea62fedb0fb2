//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! eager API and the tape.

use std::sync::Arc;

use crate::error::{DivaError, Result};

/// Immutable dense tensor. Cloning shares the underlying buffer.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<[f64]>,
    grad_enabled: bool,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(DivaError::InvalidShape(
                shape.to_vec(),
                "dimensions must be positive".into(),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(DivaError::InvalidShape(
                shape.to_vec(),
                format!("expected {n} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: data.into(),
            grad_enabled: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![0.0; n]).expect("zeros: valid shape")
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n]).expect("full: valid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DivaError::InvalidShape(
                vec![rows.len(), cols],
                "ragged rows".into(),
            ));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::new(&[n, n], data).expect("eye")
    }

    /// Marks whether the tensor participates in gradient recording when
    /// placed on a [`crate::tape::Tape`].
    pub fn with_grad(mut self, enabled: bool) -> Self {
        self.grad_enabled = enabled;
        self
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.to_vec()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.len() || shape.contains(&0) {
            return Err(DivaError::ShapeMismatch {
                left: self.shape.clone(),
                right: shape.to_vec(),
                context: "reshape",
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
            grad_enabled: self.grad_enabled,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(&self.shape, self.data.iter().map(|&x| f(x)).collect()).expect("map")
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(&self.shape, &other.shape, "elementwise")?;
        Ok(Self::new(
            &self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
        .expect("zip_map"))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|x| c * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape(&self.shape, &other.shape, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = as_matrix(self, "matmul lhs")?;
        let (k2, n) = as_matrix(other, "matmul rhs")?;
        if k != k2 {
            return Err(DivaError::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
                context: "matmul inner dimensions",
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            0.0,
        );
        Tensor::new(&[m, n], out)
    }

    /// Softmax along `axis`, stabilized by subtracting the running max.
    pub fn softmax(&self, axis: usize) -> Result<Self> {
        let (outer, len, inner) = axis_split(&self.shape, axis)?;
        let mut out = self.data.to_vec();
        softmax_axis(&mut out, outer, len, inner);
        Tensor::new(&self.shape, out)
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Self> {
        let d = *self.shape.last().expect("rank >= 1");
        check_affine(d, gain, bias)?;
        if !(eps > 0.0) {
            return Err(DivaError::InvalidShape(
                self.shape.clone(),
                format!("layer_norm eps must be positive, got {eps}"),
            ));
        }
        let mut out = vec![0.0; self.len()];
        let mut stats = vec![0.0; 2 * (self.len() / d)];
        layer_norm_rows(
            &self.data,
            d,
            gain.data(),
            bias.data(),
            eps,
            &mut out,
            &mut stats,
        );
        Tensor::new(&self.shape, out)
    }
}

pub(crate) fn same_shape(a: &[usize], b: &[usize], context: &'static str) -> Result<()> {
    if a != b {
        return Err(DivaError::ShapeMismatch {
            left: a.to_vec(),
            right: b.to_vec(),
            context,
        });
    }
    Ok(())
}

pub(crate) fn as_matrix(t: &Tensor, context: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(DivaError::InvalidShape(
            s.to_vec(),
            format!("{context}: expected a rank-2 tensor"),
        )),
    }
}

pub(crate) fn check_affine(d: usize, gain: &Tensor, bias: &Tensor) -> Result<()> {
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(DivaError::ShapeMismatch {
            left: gain.shape().to_vec(),
            right: vec![d],
            context: "layer_norm gain/bias vs last axis",
        });
    }
    Ok(())
}

pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(DivaError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// `c = a' · b' + beta · c`, where `a'` is `a` (m×k) or its transpose and
/// `b'` is `b` (k×n) or its transpose. Row-major, dense.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Strides: a stored m×k (or k×m when transposed), b stored k×n (or n×k).
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_axis(x: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for j in 0..inner {
            let idx = |i: usize| (o * len + i) * inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..len {
                max = max.max(x[idx(i)]);
            }
            let mut total = 0.0;
            for i in 0..len {
                let e = (x[idx(i)] - max).exp();
                x[idx(i)] = e;
                total += e;
            }
            for i in 0..len {
                x[idx(i)] /= total;
            }
        }
    }
}

/// Normalizes each length-`d` row; `stats` receives `(mean, inv_std)` pairs.
pub(crate) fn layer_norm_rows(
    x: &[f64],
    d: usize,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    stats: &mut [f64],
) {
    for (r, (row, orow)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            orow[i] = (row[i] - mean) * inv * gain[i] + bias[i];
        }
        stats[2 * r] = mean;
        stats[2 * r + 1] = inv;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}
