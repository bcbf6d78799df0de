//! Dense 64-bit tensors and the handful of kernels the encoder and loss need.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! rank-2 tensors; vectors (biases, gains) are rank-1.

use crate::error::{shape_err, Error, Result};

/// Layer-norm epsilon used throughout the encoder.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(shape_err("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    fn expect_rank2(&self, what: &str) -> Result<()> {
        if self.rank() != 2 {
            return Err(shape_err(format!(
                "{what}: expected rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// `a · b` for `a: n×k`, `b: k×m`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank2("matmul lhs")?;
    b.expect_rank2("matmul rhs")?;
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    if b.rows() != k {
        return Err(shape_err(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `a · bᵀ` for `a: n×k`, `b: m×k`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank2("matmul_bt lhs")?;
    b.expect_rank2("matmul_bt rhs")?;
    if a.cols() != b.cols() {
        return Err(shape_err(format!(
            "matmul_bt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.rows(), b.rows());
    let mut out = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            out.push(dot(a.row(i), b.row(j)));
        }
    }
    Tensor::new(vec![n, m], out)
}

/// `aᵀ · b` for `a: k×n`, `b: k×m`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank2("matmul_at lhs")?;
    b.expect_rank2("matmul_at rhs")?;
    if a.rows() != b.rows() {
        return Err(shape_err(format!(
            "matmul_at {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, m) = (a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for p in 0..a.rows() {
        for (i, &av) in a.row(p).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Adds a rank-1 bias to every row of `m` in place.
pub fn add_row_bias(m: &mut Tensor, bias: &Tensor) -> Result<()> {
    m.expect_rank2("add_row_bias")?;
    if bias.len() != m.cols() {
        return Err(shape_err(format!(
            "bias of length {} for {} columns",
            bias.len(),
            m.cols()
        )));
    }
    for i in 0..m.rows() {
        for (v, b) in m.row_mut(i).iter_mut().zip(bias.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// Column sums of a rank-2 tensor, accumulated into `acc`.
pub fn accumulate_col_sums(acc: &mut Tensor, m: &Tensor) {
    for i in 0..m.rows() {
        for (a, v) in acc.data_mut().iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable `log Σ exp(x)`. Entries equal to `-inf` are ignored.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

/// In-place stable softmax of one row. `-inf` entries receive probability 0.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Tensor) -> Result<Tensor> {
    m.expect_rank2("softmax_rows")?;
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows input".into()));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Backward of a row-wise softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    if y.shape() != dy.shape() {
        return Err(shape_err("softmax backward shape mismatch"));
    }
    let mut dx = Tensor::zeros(y.shape());
    for i in 0..y.rows() {
        let (yr, dyr) = (y.row(i), dy.row(i));
        let inner = dot(yr, dyr);
        for ((d, &yv), &g) in dx.row_mut(i).iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    Ok(dx)
}

/// Per-row layer normalization: `gain * (x - mean) / sqrt(var + eps) + bias`,
/// with the population variance.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    x.expect_rank2("layer_norm")?;
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(shape_err(format!(
            "layer_norm gain/bias of length {}/{} for width {d}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.rows() {
        let row = x.row(i);
        let (mean, inv_std) = row_stats(row, eps);
        for (k, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gain.data()[k] * (row[k] - mean) * inv_std + bias.data()[k];
        }
    }
    Ok(out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Backward of [`layer_norm`]. Returns `dx` and accumulates into `dgain`/`dbias`.
pub fn layer_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    dy: &Tensor,
    dgain: &mut Tensor,
    dbias: &mut Tensor,
) -> Result<Tensor> {
    if x.shape() != dy.shape() {
        return Err(shape_err("layer_norm backward shape mismatch"));
    }
    let d = x.cols();
    let n = d as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for i in 0..x.rows() {
        let row = x.row(i);
        let dyr = dy.row(i);
        let (mean, inv_std) = row_stats(row, eps);
        for k in 0..d {
            xhat[k] = (row[k] - mean) * inv_std;
            dxhat[k] = dyr[k] * gain.data()[k];
            dgain.data_mut()[k] += dyr[k] * xhat[k];
            dbias.data_mut()[k] += dyr[k];
        }
        let sum_d: f64 = dxhat.iter().sum();
        let sum_dx: f64 = dot(&dxhat, &xhat);
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = inv_std / n * (n * dxhat[k] - sum_d - xhat[k] * sum_dx);
        }
    }
    Ok(dx)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// A collection of tensors that can be differentiated as a unit.
///
/// The visiting order must be stable: gradients are matched to parameters
/// by position.
pub trait ParamTensors {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Same shapes, all zeros.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

impl ParamTensors for Tensor {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![self]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![self]
    }
}

impl ParamTensors for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }
}

/// Central finite differences `(f(p+h) - f(p-h)) / 2h` for every scalar
/// of `params`. The result has the same layout as `params`.
pub fn finite_diff_gradient<P, F>(mut f: F, params: &P, step: f64) -> Result<P>
where
    P: ParamTensors + Clone,
    F: FnMut(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {step}")));
    }
    let mut grad = params.zeros_like();
    let mut probe = params.clone();
    let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    for (ti, &len) in shapes.iter().enumerate() {
        for k in 0..len {
            let orig = probe.tensors()[ti].data()[k];
            probe.tensors_mut()[ti].data_mut()[k] = orig + step;
            let up = f(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig - step;
            let down = f(&probe);
            probe.tensors_mut()[ti].data_mut()[k] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!(
                    "objective at tensor {ti}, element {k}"
                )));
            }
            grad.tensors_mut()[ti].data_mut()[k] = (up - down) / (2.0 * step);
        }
    }
    Ok(grad)
}

/// Floor on the denominator of [`relative_error`]; keeps near-zero
/// components from turning rounding noise into large ratios.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

/// Largest elementwise [`relative_error`] between two congruent parameter sets.
pub fn max_relative_error<P: ParamTensors>(a: &P, b: &P) -> Result<f64> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(shape_err("parameter sets differ in tensor count"));
    }
    let mut worst = 0.0f64;
    for (x, y) in ta.iter().zip(&tb) {
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "tensor shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        for (&u, &v) in x.data().iter().zip(y.data()) {
            worst = worst.max(relative_error(u, v));
        }
    }
    Ok(worst)
}

/// Largest elementwise absolute difference between two congruent parameter sets.
pub fn max_abs_diff<P: ParamTensors>(a: &P, b: &P) -> Result<f64> {
    let (ta, tb) = (a.tensors(), b.tensors());
    if ta.len() != tb.len() {
        return Err(shape_err("parameter sets differ in tensor count"));
    }
    let mut worst = 0.0f64;
    for (x, y) in ta.iter().zip(&tb) {
        if x.shape() != y.shape() {
            return Err(shape_err("tensor shapes differ"));
        }
        for (&u, &v) in x.data().iter().zip(y.data()) {
            worst = worst.max((u - v).abs());
        }
    }
    Ok(worst)
}
