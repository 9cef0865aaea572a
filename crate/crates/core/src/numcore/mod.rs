//! Minimal dense-tensor numerics with reverse-mode differentiation.
//!
//! Tensors are immutable 2-D blocks of finite f64 values. A [`Graph`] records
//! every operation eagerly (a Wengert tape) and replays it in reverse to
//! produce gradients; [`finite_diff_check`] verifies those gradients against
//! central differences. Everything the retrieval models need lives here and
//! nothing more: no broadcasting rules, no views, no GPU.

mod adam;
mod gradcheck;
mod graph;
#[cfg(test)]
mod graph_tests;

pub use adam::{Adam, AdamState};
pub use gradcheck::{finite_diff_check, GradReport, ParamGradCheck};
pub use graph::{
    lstm_mean_pool, multihead_self_attention, AttentionIds, Gradients, Graph, LstmIds, TensorId,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Numeric-layer errors. Dimension and config problems are caller mistakes;
/// numeric problems are value-dependent (non-finite results, degenerate
/// normalization).
#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type NumResult<T> = Result<T, NumError>;

/// Immutable 2-D tensor of finite f64 values in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    /// Construct a rows x cols tensor. Rejects empty shapes, length
    /// mismatches and non-finite values.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> NumResult<Self> {
        if rows == 0 || cols == 0 {
            return Err(NumError::Dimension(format!(
                "tensor shape must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(NumError::Dimension(format!(
                "shape {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(NumError::Numeric(format!(
                "non-finite value {bad} rejected at tensor construction"
            )));
        }
        Ok(Tensor { rows, cols, values, requires_grad: false })
    }

    /// 1 x n row vector.
    pub fn row(values: Vec<f64>) -> NumResult<Self> {
        let n = values.len();
        Tensor::matrix(1, n, values)
    }

    /// n x 1 column vector.
    pub fn col(values: Vec<f64>) -> NumResult<Self> {
        let n = values.len();
        Tensor::matrix(n, 1, values)
    }

    /// 1 x 1 scalar.
    pub fn scalar(v: f64) -> NumResult<Self> {
        Tensor::matrix(1, 1, vec![v])
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, values: vec![0.0; rows * cols], requires_grad: false }
    }

    /// Mark this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    /// Replace the payload, keeping the shape. Used by the optimizer.
    pub fn set_values(&mut self, values: Vec<f64>) -> NumResult<()> {
        if values.len() != self.values.len() {
            return Err(NumError::Dimension(format!(
                "set_values length {} != {}",
                values.len(),
                self.values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(NumError::Numeric(format!("non-finite value {bad} in set_values")));
        }
        self.values = values;
        Ok(())
    }
}

// ── Value-level operations ───────────────────────────────────────────

/// Numerically stable softmax of a sequence (max subtraction).
pub fn softmax(x: &[f64]) -> NumResult<Vec<f64>> {
    if x.is_empty() {
        return Err(NumError::Dimension("softmax of empty sequence".into()));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(NumError::Numeric(format!("non-finite softmax input {bad}")));
    }
    Ok(softmax_kernel(x))
}

/// Shared kernel; input assumed finite and non-empty. The output is checked
/// to sum to 1 within 1e-12 so normalization bugs cannot pass silently.
pub(crate) fn softmax_kernel(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let out: Vec<f64> = exps.iter().map(|e| e / sum).collect();
    let total: f64 = out.iter().sum();
    assert!(
        (total - 1.0).abs() <= 1e-12,
        "softmax output sums to {total}, outside 1e-12 of 1"
    );
    out
}

/// Per-row layer normalization: gamma * (x - mean) / sqrt(var + eps) + beta.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64], eps: f64) -> NumResult<Tensor> {
    let d = x.cols();
    if d < 2 {
        return Err(NumError::Dimension(format!("layer_norm needs d >= 2, got {d}")));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(NumError::Dimension("layer_norm gamma/beta length mismatch".into()));
    }
    let mut out = Vec::with_capacity(x.numel());
    for r in 0..x.rows() {
        let row = &x.values()[r * d..(r + 1) * d];
        let (normed, _, _) = layer_norm_row(row, eps)?;
        for (j, v) in normed.iter().enumerate() {
            out.push(gamma[j] * v + beta[j]);
        }
    }
    Tensor::matrix(x.rows(), d, out)
}

/// Normalize one row; returns (normalized, mean, std). Errors when the
/// denominator degenerates (zero variance with eps = 0).
pub(crate) fn layer_norm_row(row: &[f64], eps: f64) -> NumResult<(Vec<f64>, f64, f64)> {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let denom_sq = var + eps;
    if denom_sq <= 0.0 {
        return Err(NumError::Numeric(
            "layer_norm denominator is zero (zero-variance row with eps = 0)".into(),
        ));
    }
    let std = denom_sq.sqrt();
    Ok((row.iter().map(|v| (v - mean) / std).collect(), mean, std))
}

/// Cross-entropy of a probability sequence at a target index, with a 1e-12
/// probability floor.
pub fn cross_entropy(target_index: usize, dist: &[f64]) -> NumResult<f64> {
    if target_index >= dist.len() {
        return Err(NumError::Dimension(format!(
            "cross_entropy target {target_index} out of range for length {}",
            dist.len()
        )));
    }
    Ok(-dist[target_index].max(CE_FLOOR).ln())
}

/// Probability floor used by cross-entropy to avoid -log 0.
pub const CE_FLOOR: f64 = 1e-12;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_rejects_bad_shapes_and_values() {
        assert!(Tensor::matrix(0, 3, vec![]).is_err());
        assert!(Tensor::matrix(2, 2, vec![1.0; 3]).is_err());
        assert!(Tensor::matrix(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::matrix(1, 2, vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::matrix(2, 3, vec![0.0; 6]).is_ok());
    }

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        assert!(p[1] < 1e-12);
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_reference_values() {
        // Frozen from a scalar-loop evaluation of exp(x_i)/sum exp(x_j).
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, e) in p.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn softmax_empty_is_dimension_error() {
        assert!(matches!(softmax(&[]), Err(NumError::Dimension(_))));
    }

    #[test]
    fn layer_norm_constant_row() {
        let x = Tensor::row(vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        for v in y.values() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_unit_variance_row() {
        let x = Tensor::row(vec![1.0, -1.0]).unwrap();
        let y = layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0).unwrap();
        assert!((y.values()[0] - 1.0).abs() < 1e-12);
        assert!((y.values()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_scalar_reference() {
        // Reference loop: mean, biased variance, normalize, then affine.
        let row = [1.0, 2.0, 3.0];
        let eps = 1e-5;
        let mean = 2.0;
        let var = ((1.0f64 - 2.0).powi(2) + 0.0 + (3.0f64 - 2.0).powi(2)) / 3.0;
        let std = (var + eps).sqrt();
        let expect: Vec<f64> = row.iter().map(|v| 2.0 * (v - mean) / std + 1.0).collect();

        let x = Tensor::row(row.to_vec()).unwrap();
        let y = layer_norm(&x, &[2.0, 2.0, 2.0], &[1.0, 1.0, 1.0], eps).unwrap();
        for (a, e) in y.values().iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_error_paths() {
        let x = Tensor::row(vec![3.0]).unwrap();
        assert!(matches!(
            layer_norm(&x, &[1.0], &[0.0], 1e-5),
            Err(NumError::Dimension(_))
        ));
        let x = Tensor::row(vec![4.0, 4.0]).unwrap();
        assert!(matches!(
            layer_norm(&x, &[1.0, 1.0], &[0.0, 0.0], 0.0),
            Err(NumError::Numeric(_))
        ));
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(0, &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        let l = cross_entropy(1, &[0.5, 0.5]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Uniform over N gives log N.
        for n in [2usize, 5, 17] {
            let dist = vec![1.0 / n as f64; n];
            let l = cross_entropy(n / 2, &dist).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-12);
        }
        assert!(cross_entropy(3, &[0.5, 0.5]).is_err());
    }
}
