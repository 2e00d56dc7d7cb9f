use serde::{Deserialize, Serialize};

use super::layers::{softmax, softmax_backward};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Focusing factor.
    pub gamma: f64,
    /// Per-class weights in [0, 1].
    pub beta: Vec<f64>,
    /// Weight of the preliminary classifier's loss.
    pub lambda_p: f64,
}

impl LossConfig {
    pub fn uniform(k: usize, gamma: f64, lambda_p: f64) -> Self {
        Self {
            gamma,
            beta: vec![1.0; k],
            lambda_p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::InvalidInput("focal gamma must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_p) {
            return Err(Error::InvalidInput("lambda_p must be in [0, 1]".into()));
        }
        if self.beta.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidInput("class weights must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Class-weighted focal loss averaged over `N * K`, and its gradient with
/// respect to the probabilities. Only the true-class entry of each row
/// contributes.
pub fn focal_loss(probs: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(f64, Tensor)> {
    let (n, k) = (probs.rows(), probs.cols());
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} rows", labels.len())));
    }
    if cfg.beta.len() != k {
        return Err(Error::Shape(format!("{} class weights for {k} classes", cfg.beta.len())));
    }
    let scale = 1.0 / (n * k) as f64;
    let g = cfg.gamma;
    let mut loss = 0.0;
    let mut dp = Tensor::zeros(&[n, k]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidInput(format!("label {y} outside {k} classes")));
        }
        let raw = probs.at(i, y);
        let p = raw.max(PROB_FLOOR);
        let b = cfg.beta[y];
        let q = 1.0 - p;
        let lp = p.ln();
        let mod_factor = if g == 0.0 { 1.0 } else { q.max(0.0).powf(g) };
        loss -= scale * b * mod_factor * lp;
        if raw >= PROB_FLOOR {
            let dmod = if g == 0.0 || q <= 0.0 { 0.0 } else { -g * q.powf(g - 1.0) };
            dp.set(i, y, -scale * b * (dmod * lp + mod_factor / p));
        }
    }
    Ok((loss, dp))
}

/// Softmax followed by [`focal_loss`]; the gradient is w.r.t. the logits.
pub fn focal_loss_logits(logits: &Tensor, labels: &[usize], cfg: &LossConfig) -> Result<(f64, Tensor, Tensor)> {
    let p = softmax(logits);
    let (l, dp) = focal_loss(&p, labels, cfg)?;
    let dz = softmax_backward(&p, &dp);
    Ok((l, dz, p))
}

/// Mean squared error over all elements and its gradient.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!("mse {:?} vs {:?}", pred.shape(), target.shape())));
    }
    let n = pred.len().max(1) as f64;
    let diff = pred.zip_map(target, |a, b| a - b);
    let l = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((l, diff.map(|d| 2.0 * d / n)))
}
