use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deviations below this are treated as zero variance.
const MIN_STD: f64 = 1e-12;

/// Per-column z-scoring fitted on training rows. Absent values are imputed
/// with the training mean, which standardizes to exactly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Set for columns with zero variance (or no observed values); their
    /// deviation is stored as 1.
    pub constant: Vec<bool>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            constant: vec![false; dim],
        }
    }

    /// Population mean and deviation of each column over its present values.
    pub fn fit(rows: &[Vec<Option<f64>>], dim: usize) -> Self {
        let mut s = Standardizer::identity(dim);
        for j in 0..dim {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r[j]).collect();
            if vals.is_empty() {
                s.constant[j] = true;
                continue;
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            s.mean[j] = mean;
            if std < MIN_STD {
                s.constant[j] = true;
            } else {
                s.std[j] = std;
            }
        }
        s
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn transform(&self, row: &[Option<f64>]) -> Result<Vec<f64>> {
        if row.len() != self.dim() {
            return Err(Error::Model(format!(
                "feature row has {} values, model expects {}",
                row.len(),
                self.dim()
            )));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(j, v)| match v {
                Some(x) => (x - self.mean[j]) / self.std[j],
                None => 0.0,
            })
            .collect())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.std.len() != d || self.constant.len() != d {
            return Err(Error::Model("standardizer vectors have different lengths".into()));
        }
        if self.mean.iter().any(|m| !m.is_finite()) || self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Model("standardizer has non-finite mean or non-positive deviation".into()));
        }
        Ok(())
    }
}
