use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxXent {
    pub loss: f64,
    pub probs: Vec<f64>,
    /// d loss / d logits
    pub grad: Vec<f64>,
}

/// Max-shifted softmax followed by the negative log-likelihood of `label`.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn softmax_xent(logits: &[f64], label: usize) -> Result<SoftmaxXent> {
    if logits.len() < 2 || label >= logits.len() {
        return Err(Error::invalid(format!(
            "softmax_xent: label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let probs = softmax(logits);
    let mut grad = probs.clone();
    grad[label] -= 1.0;
    Ok(SoftmaxXent {
        loss: lse - logits[label],
        probs,
        grad,
    })
}

/// `(1 / 2P) * sum (recon - target)^2` and its gradient `(recon - target) / P`.
pub fn square_loss(recon: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if recon.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "square_loss",
            left: recon.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let p = recon.len() as f64;
    let diff = recon.sub(target)?;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / (2.0 * p);
    Ok((loss, diff.scale(1.0 / p)))
}

/// Summed smooth-L1 over coordinates: `0.5 d^2` for `|d| < 1`, else `|d| - 0.5`.
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::invalid(format!(
            "smooth_l1: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let d = p - t;
            if d.abs() < 1.0 {
                loss += 0.5 * d * d;
                d
            } else {
                loss += d.abs() - 0.5;
                d.signum()
            }
        })
        .collect();
    Ok((loss, grad))
}
