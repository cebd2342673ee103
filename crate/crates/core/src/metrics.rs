//! Prediction and support-recovery metrics.

use std::collections::BTreeSet;

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};

/// Mean squared prediction error `(1/q)(1/m) Σ_ℓ ‖pred_ℓ − F_ℓ‖²`.
pub fn mspe(pred: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return invalid(format!("shape {:?} vs {:?}", pred.shape(), truth.shape()));
    }
    if pred.is_empty() {
        return invalid("empty prediction matrix");
    }
    Ok((pred - truth).norm_squared() / pred.len() as f64)
}

/// `1 − Σ‖Ŷ − Y‖² / Σ‖Y − Ȳ‖²`.
pub fn r_squared(fitted: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64> {
    if fitted.shape() != y.shape() {
        return invalid(format!("shape {:?} vs {:?}", fitted.shape(), y.shape()));
    }
    let mean = y.row_mean();
    let mut total = 0.0;
    for row in y.row_iter() {
        total += (row - &mean).norm_squared();
    }
    if total == 0.0 {
        return Err(Error::Numerical(
            "responses have zero total variation".into(),
        ));
    }
    Ok(1.0 - (fitted - y).norm_squared() / total)
}

/// Sensitivity and specificity of a selected predictor set against the
/// true support among `p` predictors.
pub fn sens_spec(selected: &[usize], truth: &[usize], p: usize) -> Result<(f64, f64)> {
    let sel: BTreeSet<usize> = selected.iter().copied().collect();
    let tru: BTreeSet<usize> = truth.iter().copied().collect();
    if tru.is_empty() {
        return invalid("sensitivity is undefined for an empty true support");
    }
    if sel.iter().chain(&tru).any(|&j| j >= p) {
        return invalid("predictor index out of range");
    }
    let hits = sel.intersection(&tru).count();
    let sens = hits as f64 / tru.len() as f64;
    let negatives = p - tru.len();
    let spec = if negatives == 0 {
        1.0
    } else {
        let false_pos = sel.difference(&tru).count();
        (negatives - false_pos) as f64 / negatives as f64
    };
    Ok((sens, spec))
}
