use serde::{Deserialize, Serialize};

use super::{bce, sigmoid, Dataset, Standardizer, TrainConfig, TrainMeta};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticWeights {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticWeights {
    pub fn zeros(dim: usize) -> Self {
        LogisticWeights { w: vec![0.0; dim], b: 0.0 }
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b
    }
}

/// Mean cross-entropy plus `l2/2 * |w|^2` (bias unpenalised) and its
/// gradient with respect to `(w, b)`.
pub fn loss_grad(p: &LogisticWeights, x: &[Vec<f64>], y: &[f64], l2: f64) -> (f64, LogisticWeights) {
    let n = x.len() as f64;
    let mut grad = LogisticWeights::zeros(p.w.len());
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = p.logit(xi);
        loss += bce(z, yi);
        let dz = (sigmoid(z) - yi) / n;
        for (g, &xv) in grad.w.iter_mut().zip(xi) {
            *g += dz * xv;
        }
        grad.b += dz;
    }
    loss /= n;
    loss += 0.5 * l2 * p.w.iter().map(|w| w * w).sum::<f64>();
    for (g, &w) in grad.w.iter_mut().zip(&p.w) {
        *g += l2 * w;
    }
    (loss, grad)
}

/// Full-batch gradient descent from zero weights. Returns the weights, the
/// fitted standardizer and the loss before each epoch plus the final loss.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<(LogisticWeights, Standardizer, TrainMeta, Vec<f64>)> {
    config.validate()?;
    data.require_both_classes()?;
    let standardizer = Standardizer::fit(&data.rows, data.dim());
    let x = data.standardized(&standardizer)?;
    let y = data.targets();
    let mut p = LogisticWeights::zeros(data.dim());
    let mut history = Vec::with_capacity(config.epochs + 1);
    for _ in 0..config.epochs {
        let (loss, g) = loss_grad(&p, &x, &y, config.l2);
        history.push(loss);
        for (w, gw) in p.w.iter_mut().zip(&g.w) {
            *w -= config.learning_rate * gw;
        }
        p.b -= config.learning_rate * g.b;
    }
    let final_loss = loss_grad(&p, &x, &y, config.l2).0;
    history.push(final_loss);
    if !final_loss.is_finite() || p.w.iter().any(|w| !w.is_finite()) {
        return Err(Error::Model("logistic training diverged".into()));
    }
    let meta = TrainMeta::new(config, data.len(), final_loss);
    Ok((p, standardizer, meta, history))
}
