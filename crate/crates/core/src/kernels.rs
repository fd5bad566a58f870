// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense numeric primitives.
//!
//! Storage is `f32`; every reduction (dot products, means, variances,
//! softmax normalizers) accumulates in `f64` in a fixed sequential order, so
//! two runs over the same inputs are bit-identical on every platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f32`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Wraps a row-major buffer. Fails if the length does not match the shape.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of {} values cannot be viewed as {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// Repeats `row` `n` times.
    pub fn broadcast_row(row: &[f32], n: usize) -> Self {
        let mut data = Vec::with_capacity(n * row.len());
        for _ in 0..n {
            data.extend_from_slice(row);
        }
        Self {
            rows: n,
            cols: row.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Copies column `j` out.
    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.require_same_shape(other, "add")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += *y;
        }
        Ok(())
    }

    /// Element-wise `self -= other`.
    pub fn sub_assign(&mut self, other: &Matrix) -> Result<()> {
        self.require_same_shape(other, "sub")?;
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x -= *y;
        }
        Ok(())
    }

    /// Adds `bias` to every row.
    pub fn add_row_bias(&mut self, bias: &[f32]) -> Result<()> {
        if bias.len() != self.cols {
            return Err(Error::Shape(format!(
                "bias of length {} on matrix with {} columns",
                bias.len(),
                self.cols
            )));
        }
        for row in self.data.chunks_mut(self.cols.max(1)) {
            for (x, b) in row.iter_mut().zip(bias) {
                *x += *b;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute element-wise difference.
    pub fn max_abs_diff(&self, other: &Matrix) -> f32 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    fn require_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Exact or tanh-approximated GELU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeluVariant {
    Erf,
    #[default]
    Tanh,
}

impl std::fmt::Display for GeluVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeluVariant::Erf => "erf",
            GeluVariant::Tanh => "tanh",
        })
    }
}

impl std::str::FromStr for GeluVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erf" | "gelu" | "exact" => Ok(GeluVariant::Erf),
            "tanh" | "gelu_new" | "gelu_pytorch_tanh" => Ok(GeluVariant::Tanh),
            other => Err(Error::Config(format!("unknown GELU variant `{other}`"))),
        }
    }
}

pub(crate) fn ensure_finite(values: &[f32], what: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Dot product accumulated in `f64`.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        acc += f64::from(*x) * f64::from(*y);
    }
    acc
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|x| *x = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let aik = f64::from(aik);
            for (s, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *s += aik * f64::from(bkj);
            }
        }
        for (o, s) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *s as f32;
        }
    }
    ensure_finite(&out.data, "matmul")?;
    Ok(out)
}

/// `a · bᵀ`, i.e. the matrix of row-by-row dot products.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_transposed {}x{} by ({}x{})ᵀ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a.row(i), b.row(j)) as f32;
        }
    }
    ensure_finite(&out.data, "matmul_transposed")?;
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
///
/// `-inf` entries (masked positions) map to exactly zero. A row with no finite
/// entry is an error.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let row = m.row(i);
        if row.iter().any(|x| x.is_nan() || *x == f32::INFINITY) {
            return Err(Error::NonFinite(format!("softmax row {i}")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if max == f32::NEG_INFINITY {
            return Err(Error::EmptySoftmaxRow(i));
        }
        let max = f64::from(max);
        let exps: Vec<f64> = row.iter().map(|&x| (f64::from(x) - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(i).iter_mut().zip(&exps) {
            *o = (e / total) as f32;
        }
    }
    Ok(out)
}

/// Mean and population variance of `x`, accumulated in `f64`.
pub fn mean_var(x: &[f32]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|&v| {
            let d = f64::from(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, var)
}

/// `(x − mean) / sqrt(var + eps) · gamma + beta`.
pub fn layer_norm(x: &[f32], gamma: &[f32], beta: &[f32], eps: f64) -> Result<Vec<f32>> {
    layer_norm_with_scale(x, gamma, beta, eps).map(|(y, _)| y)
}

/// Layer norm that also returns the scale `1 / sqrt(var + eps)` it applied.
pub fn layer_norm_with_scale(
    x: &[f32],
    gamma: &[f32],
    beta: &[f32],
    eps: f64,
) -> Result<(Vec<f32>, f64)> {
    if x.len() != gamma.len() || x.len() != beta.len() {
        return Err(Error::Shape(format!(
            "layer_norm lengths x={} gamma={} beta={}",
            x.len(),
            gamma.len(),
            beta.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Shape("layer_norm of empty vector".into()));
    }
    let (mean, var) = mean_var(x);
    let scale = 1.0 / (var + eps).sqrt();
    if !scale.is_finite() {
        return Err(Error::NonFinite("layer_norm scale".into()));
    }
    let y: Vec<f32> = x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(&v, (&g, &b))| ((f64::from(v) - mean) * scale * f64::from(g) + f64::from(b)) as f32)
        .collect();
    ensure_finite(&y, "layer_norm")?;
    Ok((y, scale))
}

/// Applies layer norm to every row of `m`.
pub fn layer_norm_rows(m: &Matrix, gamma: &[f32], beta: &[f32], eps: f64) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let y = layer_norm(m.row(i), gamma, beta, eps)?;
        out.row_mut(i).copy_from_slice(&y);
    }
    Ok(out)
}

pub fn gelu(x: f32, variant: GeluVariant) -> f32 {
    let x = f64::from(x);
    let y = match variant {
        GeluVariant::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        GeluVariant::Tanh => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
        }
    };
    y as f32
}
