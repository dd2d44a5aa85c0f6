use crate::error::{check_dim, check_finite, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `½‖y − t‖²`.
    MeanSquaredError,
    /// `−Σ tᵢ log softmax(y)ᵢ` with `t` a probability vector (one-hot for labels).
    SoftmaxCrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::MeanSquaredError => "mse",
            LossKind::SoftmaxCrossEntropy => "softmax_ce",
        }
    }
}

/// Numerically stable softmax.
pub fn softmax(y: &[f64]) -> Vec<f64> {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(y: &[f64]) -> f64 {
    let max = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + y.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Per-sample loss value and its gradient with respect to the network output.
pub fn evaluate_loss(kind: LossKind, y: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_dim("loss target", y.len(), target.len())?;
    let (value, grad) = match kind {
        LossKind::MeanSquaredError => {
            let grad: Vec<f64> = y.iter().zip(target).map(|(a, b)| a - b).collect();
            (0.5 * crate::linalg::dot(&grad, &grad), grad)
        }
        LossKind::SoftmaxCrossEntropy => {
            let lse = log_sum_exp(y);
            let mass: f64 = target.iter().sum();
            let value = mass * lse - crate::linalg::dot(target, y);
            let p = softmax(y);
            let grad = p
                .iter()
                .zip(target)
                .map(|(pi, ti)| mass * pi - ti)
                .collect();
            (value.max(0.0), grad)
        }
    };
    if !value.is_finite() {
        return Err(crate::Error::NonFinite("loss value"));
    }
    check_finite("loss gradient", &grad)?;
    Ok((value, grad))
}
