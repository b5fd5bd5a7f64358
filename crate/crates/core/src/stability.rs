//! Per-step contraction diagnostics and the inductive error bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub time: i64,
    pub node: usize,
    pub alpha_k: f64,
    pub beta_k: f64,
    pub gamma_k: f64,
    pub conditions_met: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub w_bound: f64,
    pub v_bound: f64,
    pub gain_bound: f64,
}

impl NoiseBounds {
    /// `ν = β·w̄ + K̄·v̄`
    pub fn nu(&self, beta: f64) -> f64 {
        beta * self.w_bound + self.gain_bound * self.v_bound
    }
}

fn norm_or_estimate(m: &Matrix) -> f64 {
    match spectral_norm(m) {
        Ok(v) => v,
        Err(Error::NoConvergence { estimate, .. }) => estimate,
        Err(_) => f64::NAN,
    }
}

/// Reports `‖F‖`, `‖I − KH‖` and their product. Never fails: a norm that does
/// not converge is reported at its last estimate.
///
/// # Panics
/// If the shapes of `F`, `K` and `H` are incompatible.
pub fn contraction_report(f: &Matrix, k: &Matrix, h: &Matrix, time: i64, node: usize) -> ContractionReport {
    let n = f.rows();
    assert!(f.is_square() && k.rows() == n && h.cols() == n && k.cols() == h.rows(), "shape mismatch");
    let alpha_k = norm_or_estimate(f);
    let i_kh = &Matrix::identity(n) - &(k * h);
    let beta_k = norm_or_estimate(&i_kh);
    ContractionReport {
        time,
        node,
        alpha_k,
        beta_k,
        gamma_k: alpha_k * beta_k,
        conditions_met: alpha_k < 1.0 && beta_k < 1.0,
    }
}

/// `γᴺ·e0 + Σ_{j<N} γ^{N−1−j}·ν_j`, evaluated by Horner's rule.
pub fn error_bound(gamma: f64, e0: f64, nu: &[f64], n: usize) -> Result<f64> {
    if nu.len() < n {
        return Err(Error::LengthMismatch(format!(
            "error bound over {n} steps needs {n} noise terms, got {}",
            nu.len()
        )));
    }
    Ok(nu[..n].iter().fold(e0, |acc, &v| gamma * acc + v))
}
