//! Dense row-major grids, numerically stable scalar primitives and the
//! central-difference gradient oracle that every loss test leans on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Magnitude below which relative error is measured against this floor
/// instead of the gradient itself.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// A dense `rows × cols` matrix of `f64` in row-major order.
///
/// Holds classification logits (`n × K`), regression offsets (`n × 4`) and
/// their gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Grid2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a grid from row-major data, rejecting bad lengths and non-finite values.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "grid data has {} values, expected {rows}x{cols}={}",
                data.len(),
                rows * cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite value at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a grid from nested rows; all rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.data[row * self.cols..(row + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column grid has no meaningful rows anyway.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &Grid2, factor: f64) -> Result<()> {
        self.expect_shape(other.shape(), "add_scaled operand")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn expect_shape(&self, shape: (usize, usize), what: &str) -> Result<()> {
        if self.shape() != shape {
            return Err(Error::invalid(format!(
                "{what}: shape {:?} does not match {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_finite(&self, what: &str) -> Result<()> {
        if !self.is_finite() {
            return Err(Error::invalid(format!("{what} contains non-finite values")));
        }
        Ok(())
    }
}

/// Logistic function, split on sign so neither branch overflows.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` as `min(x, 0) - log1p(exp(-|x|))`.
#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

/// Checked [`sigmoid`]: rejects non-finite input.
pub fn stable_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!("sigmoid of non-finite value {x}")));
    }
    Ok(sigmoid(x))
}

/// Checked [`log_sigmoid`]: rejects non-finite input.
pub fn stable_log_sigmoid(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::invalid(format!(
            "log-sigmoid of non-finite value {x}"
        )));
    }
    Ok(log_sigmoid(x))
}

/// `log Σ exp(xs)` with the max subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Central-difference gradient of `f` at `x`, one element at a time.
pub fn finite_diff_grad<F>(f: F, x: &Grid2, h: f64) -> Result<Grid2>
where
    F: Fn(&Grid2) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::invalid(format!("finite-difference step {h} must be > 0")));
    }
    let mut probe = x.clone();
    let mut grad = Grid2::zeros(x.rows, x.cols);
    for idx in 0..x.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + h;
        let plus = f(&probe);
        probe.data[idx] = orig - h;
        let minus = f(&probe);
        probe.data[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::OracleFailure {
                row: idx / x.cols.max(1),
                col: idx % x.cols.max(1),
            });
        }
        grad.data[idx] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Element-wise comparison of an analytic gradient against a numerical one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: (usize, usize),
    pub passed: bool,
}

/// Relative error is `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn compare_gradients(analytic: &Grid2, numeric: &Grid2, tolerance: f64) -> Result<GradCheckReport> {
    analytic.expect_shape(numeric.shape(), "gradient comparison")?;
    let mut max_abs_err = 0.0_f64;
    let mut max_rel_err = 0.0_f64;
    let mut worst = 0;
    for (idx, (&a, &n)) in analytic.data.iter().zip(&numeric.data).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(REL_ERR_FLOOR);
        max_abs_err = max_abs_err.max(abs);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst = idx;
        }
    }
    let cols = analytic.cols.max(1);
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        worst_index: (worst / cols, worst % cols),
        passed: max_rel_err <= tolerance,
    })
}
