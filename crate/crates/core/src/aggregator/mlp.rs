use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{bce, sigmoid, Dataset, Standardizer, TrainConfig, TrainMeta};
use crate::error::{Error, Result};
use crate::seed;

/// Two-layer network: `sigmoid(w2 . relu(W1 x + b1) + b2)`. `w1` is stored
/// row-major, one row of `dim` weights per hidden unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpWeights {
    pub dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl MlpWeights {
    pub fn zeros(dim: usize, hidden: usize) -> Self {
        MlpWeights {
            dim,
            hidden,
            w1: vec![0.0; dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
        }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let mut uniform = |fan_in: usize, n: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w1 = uniform(dim, dim * hidden);
        let b1 = uniform(dim, hidden);
        let w2 = uniform(hidden, hidden);
        let b2 = uniform(hidden, 1)[0];
        MlpWeights { dim, hidden, w1, b1, w2, b2 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.len() == self.dim * self.hidden
            && self.b1.len() == self.hidden
            && self.w2.len() == self.hidden;
        if !ok {
            return Err(Error::Model(format!(
                "MLP weights do not match dim {} and hidden {}",
                self.dim, self.hidden
            )));
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).all(|v| v.is_finite()) && self.b2.is_finite();
        if !finite {
            return Err(Error::Model("MLP weights contain non-finite values".into()));
        }
        Ok(())
    }

    fn pre_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|k| {
                let row = &self.w1[k * self.dim..(k + 1) * self.dim];
                row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + self.b1[k]
            })
            .collect()
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.pre_activations(x)
            .iter()
            .zip(&self.w2)
            .map(|(a, w)| a.max(0.0) * w)
            .sum::<f64>()
            + self.b2
    }

    /// All parameters in a fixed order: w1, b1, w2, b2.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w1.len() + 2 * self.hidden + 1);
        v.extend(&self.w1);
        v.extend(&self.b1);
        v.extend(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn from_flat(dim: usize, hidden: usize, flat: &[f64]) -> Self {
        let (w1, rest) = flat.split_at(dim * hidden);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, rest) = rest.split_at(hidden);
        MlpWeights {
            dim,
            hidden,
            w1: w1.to_vec(),
            b1: b1.to_vec(),
            w2: w2.to_vec(),
            b2: rest[0],
        }
    }
}

/// Mean cross-entropy plus `l2/2` times the squared norm of `w1` and `w2`
/// (biases unpenalised), and its gradient.
pub fn loss_grad(p: &MlpWeights, x: &[Vec<f64>], y: &[f64], l2: f64) -> (f64, MlpWeights) {
    let n = x.len() as f64;
    let mut g = MlpWeights::zeros(p.dim, p.hidden);
    let mut loss = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let a = p.pre_activations(xi);
        let z = a.iter().zip(&p.w2).map(|(a, w)| a.max(0.0) * w).sum::<f64>() + p.b2;
        loss += bce(z, yi);
        let dz = (sigmoid(z) - yi) / n;
        g.b2 += dz;
        for k in 0..p.hidden {
            if a[k] > 0.0 {
                g.w2[k] += dz * a[k];
                let da = dz * p.w2[k];
                g.b1[k] += da;
                let row = &mut g.w1[k * p.dim..(k + 1) * p.dim];
                for (gw, &xv) in row.iter_mut().zip(xi) {
                    *gw += da * xv;
                }
            }
        }
    }
    loss /= n;
    let sq: f64 = p.w1.iter().chain(&p.w2).map(|w| w * w).sum();
    loss += 0.5 * l2 * sq;
    for (gw, w) in g.w1.iter_mut().zip(&p.w1).chain(g.w2.iter_mut().zip(&p.w2)) {
        *gw += l2 * w;
    }
    (loss, g)
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates for one flat parameter vector.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * grads[i];
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * grads[i] * grads[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
}

/// Mini-batch Adam. Each epoch is one pass over a freshly shuffled order.
pub fn fit(data: &Dataset, config: &TrainConfig) -> Result<(MlpWeights, Standardizer, TrainMeta)> {
    config.validate()?;
    data.require_both_classes()?;
    let standardizer = Standardizer::fit(&data.rows, data.dim());
    let x = data.standardized(&standardizer)?;
    let y = data.targets();
    let (d, h) = (data.dim(), config.hidden);
    let mut flat = MlpWeights::init(d, h, seed::derive(config.seed, 0)).flatten();
    let mut adam = Adam::new(flat.len());
    let mut shuffle_rng = seed::rng(seed::derive(config.seed, 1));
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut bx = Vec::with_capacity(config.batch_size);
    let mut by = Vec::with_capacity(config.batch_size);
    for _ in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(config.batch_size) {
            bx.clear();
            by.clear();
            bx.extend(batch.iter().map(|&i| x[i].clone()));
            by.extend(batch.iter().map(|&i| y[i]));
            let p = MlpWeights::from_flat(d, h, &flat);
            let (_, g) = loss_grad(&p, &bx, &by, config.l2);
            adam.step(&mut flat, &g.flatten(), config.learning_rate);
        }
    }
    let p = MlpWeights::from_flat(d, h, &flat);
    p.validate().map_err(|_| Error::Model("MLP training diverged".into()))?;
    let final_loss = loss_grad(&p, &x, &y, config.l2).0;
    Ok((p, standardizer, TrainMeta::new(config, data.len(), final_loss)))
}
