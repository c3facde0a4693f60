//! Dense kernels and the AdamW optimizer.
//!
//! Everything is `f64`. The row kernels (`linear_rows`, `layer_norm_rows`)
//! process one row at a time in a fixed summation order, so a batched call
//! and a sequence of single-row calls produce bit-identical output. The
//! incremental decoding path relies on that.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            axpy(out_row, a.data[i * a.cols + k], b.row(k));
        }
    }
    Ok(out)
}

#[inline]
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Temperature softmax with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Parameter(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|x| ((x - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|x| *x /= sum);
    Ok(out)
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| x - lse).collect()
}

/// `-log softmax(logits)[target]`, via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    Ok((log_sum_exp(logits) - logits[target]).max(0.0))
}

/// Gradient of `cross_entropy` w.r.t. the logits: `softmax(logits) - onehot`.
pub fn cross_entropy_grad(logits: &[f64], target: usize) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    let mut g: Vec<f64> = logits.iter().map(|x| (x - lse).exp()).collect();
    g[target] -= 1.0;
    g
}

/// `out[r] = bias + x[r] · w` for each of the `rows` rows of `x`.
pub fn linear_rows(x: &[f64], w: &Matrix, bias: &[f64], out: &mut [f64]) {
    let (m, n) = (w.rows, w.cols);
    debug_assert_eq!(x.len() % m, 0);
    for (x_row, out_row) in x.chunks_exact(m).zip(out.chunks_exact_mut(n)) {
        out_row.copy_from_slice(bias);
        for (k, &xv) in x_row.iter().enumerate() {
            axpy(out_row, xv, w.row(k));
        }
    }
}

/// Backward of `linear_rows`: accumulates into `dw`, `db` and (optionally) `dx`.
pub fn linear_rows_backward(
    x: &[f64],
    w: &Matrix,
    dy: &[f64],
    dw: &mut Matrix,
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (m, n) = (w.rows, w.cols);
    for (x_row, dy_row) in x.chunks_exact(m).zip(dy.chunks_exact(n)) {
        axpy(db, 1.0, dy_row);
        for (k, &xv) in x_row.iter().enumerate() {
            axpy(dw.row_mut(k), xv, dy_row);
        }
    }
    if let Some(dx) = dx {
        for (dx_row, dy_row) in dx.chunks_exact_mut(m).zip(dy.chunks_exact(n)) {
            for (k, d) in dx_row.iter_mut().enumerate() {
                *d += dot(dy_row, w.row(k));
            }
        }
    }
}

/// Per-row layer normalization. Writes the normalized-and-affine output to
/// `out`; if `cache` is given, stores `(xhat, rstd)` for the backward pass.
pub fn layer_norm_rows(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    mut cache: Option<(&mut [f64], &mut [f64])>,
) {
    let d = gain.len();
    for (r, (x_row, out_row)) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let mean = x_row.iter().sum::<f64>() / d as f64;
        let var = x_row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for j in 0..d {
            let xhat = (x_row[j] - mean) * rstd;
            out_row[j] = gain[j] * xhat + bias[j];
            if let Some((xhat_buf, _)) = cache.as_mut() {
                xhat_buf[r * d + j] = xhat;
            }
        }
        if let Some((_, rstd_buf)) = cache.as_mut() {
            rstd_buf[r] = rstd;
        }
    }
}

/// Backward of `layer_norm_rows`; accumulates into `dgain`, `dbias`, `dx`.
pub fn layer_norm_rows_backward(
    xhat: &[f64],
    rstd: &[f64],
    gain: &[f64],
    dy: &[f64],
    dgain: &mut [f64],
    dbias: &mut [f64],
    dx: &mut [f64],
) {
    let d = gain.len();
    let mut dxhat = vec![0.0; d];
    for (r, ((xh, dy_row), dx_row)) in xhat
        .chunks_exact(d)
        .zip(dy.chunks_exact(d))
        .zip(dx.chunks_exact_mut(d))
        .enumerate()
    {
        for j in 0..d {
            dgain[j] += dy_row[j] * xh[j];
            dbias[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dot(&dxhat, xh) / d as f64;
        for j in 0..d {
            dx_row[j] += rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// AdamW moments and hyper-parameters for one flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(num_params: usize, learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            learning_rate,
            weight_decay,
        }
    }

    /// Advances the step counter; call once per update before `update_segment`.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Updates `params[..]`, tracked at `offset` in the moment buffers.
    /// Weight decay is decoupled from the moments and skipped when
    /// `decay` is false (biases and norm gains).
    pub fn update_segment(
        &mut self,
        offset: usize,
        params: &mut [f64],
        grads: &[f64],
        decay: bool,
    ) -> Result<()> {
        if params.len() != grads.len() || offset + params.len() > self.first_moment.len() {
            return Err(Error::Dimension(format!(
                "optimizer segment [{offset}, +{}) with {} grads over {} tracked params",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        if self.step_count == 0 {
            return Err(Error::State("update_segment before begin_step".into()));
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let lr = self.learning_rate;
        let shrink = if decay {
            1.0 - lr * self.weight_decay
        } else {
            1.0
        };
        let m = &mut self.first_moment[offset..offset + params.len()];
        let v = &mut self.second_moment[offset..offset + params.len()];
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            params[i] = params[i] * shrink - lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// One AdamW update over a flat parameter vector.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::Dimension(format!(
            "{} params, {} grads, {} optimizer slots",
            params.len(),
            grads.len(),
            state.first_moment.len()
        )));
    }
    state.begin_step();
    state.update_segment(0, params, grads, true)
}
