//! Faithfulness aggregators: map a feature vector to a score in `[0, 1]`,
//! higher meaning more faithful.

pub mod logistic;
pub mod mlp;
mod standardize;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{canonical_columns, FeatureRecord, FeatureVector};
use crate::jsonl;
use crate::trace::FaithLabel;

pub use logistic::LogisticWeights;
pub use mlp::MlpWeights;
pub use standardize::Standardizer;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of logit `z` against target `y`, stable for large |z|.
pub(crate) fn bce(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Logistic => "logistic",
            ModelKind::Mlp => "mlp",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(ModelKind::Logistic),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::input(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    /// Hidden width; only used by the MLP.
    pub hidden: usize,
}

impl TrainConfig {
    /// Full-batch gradient descent, lr 0.1, 500 epochs.
    pub fn logistic() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            batch_size: usize::MAX,
            epochs: 500,
            l2: 1e-4,
            seed: 0,
            hidden: 0,
        }
    }

    /// Adam, lr 0.001, batch 128, 300 epochs, 100 hidden units.
    pub fn mlp() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 300,
            l2: 1e-4,
            seed: 0,
            hidden: 100,
        }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Logistic => Self::logistic(),
            ModelKind::Mlp => Self::mlp(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::input(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::input("batch size and epoch count must be at least 1"));
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(Error::input(format!("L2 penalty must be non-negative, got {}", self.l2)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    /// `null` for full-batch training.
    pub batch_size: Option<usize>,
    pub l2: f64,
    pub n_examples: usize,
    pub final_loss: f64,
}

impl TrainMeta {
    fn new(config: &TrainConfig, n_examples: usize, final_loss: f64) -> Self {
        TrainMeta {
            seed: config.seed,
            epochs: config.epochs,
            learning_rate: config.learning_rate,
            batch_size: (config.batch_size != usize::MAX).then_some(config.batch_size),
            l2: config.l2,
            n_examples,
            final_loss,
        }
    }
}

/// Labelled training rows over named columns. Absent values are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub labels: Vec<FaithLabel>,
}

impl Dataset {
    pub fn new(columns: Vec<String>, rows: Vec<Vec<Option<f64>>>, labels: Vec<FaithLabel>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::input(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        if columns.is_empty() {
            return Err(Error::input("dataset has no feature columns"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != columns.len() {
                return Err(Error::input(format!(
                    "row {i} has {} values for {} columns",
                    r.len(),
                    columns.len()
                )));
            }
            if let Some(v) = r.iter().flatten().find(|v| !v.is_finite()) {
                return Err(Error::input(format!("row {i} has non-finite feature value {v}")));
            }
        }
        Ok(Dataset { columns, rows, labels })
    }

    /// Dataset from fully observed numeric rows with generated column names.
    pub fn from_dense(x: &[Vec<f64>], labels: &[FaithLabel]) -> Result<Self> {
        let dim = x.first().map_or(0, Vec::len);
        let columns = (0..dim).map(|j| format!("x{j}")).collect();
        let rows = x.iter().map(|r| r.iter().map(|&v| Some(v)).collect()).collect();
        Dataset::new(columns, rows, labels.to_vec())
    }

    /// Dataset from a feature dump. Every record needs a gold label.
    /// Without explicit `columns`, all columns named in any record's presence
    /// mask are used, in canonical order.
    pub fn from_records(records: &[FeatureRecord], columns: Option<&[String]>) -> Result<Self> {
        let columns = match columns {
            Some(c) => c.to_vec(),
            None => canonical_columns(records.iter().flat_map(|r| r.presence.keys().cloned())),
        };
        let mut rows = Vec::with_capacity(records.len());
        let mut labels = Vec::with_capacity(records.len());
        for r in records {
            let label = r.gold_label.ok_or_else(|| {
                Error::input(format!(
                    "feature record {}#{} has no gold label",
                    r.trace_id, r.sentence_index
                ))
            })?;
            rows.push(columns.iter().map(|c| r.value(c)).collect());
            labels.push(label);
        }
        Dataset::new(columns, rows, labels)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.labels.iter().map(|l| l.as_f64()).collect()
    }

    fn require_both_classes(&self) -> Result<()> {
        let pos = self.labels.iter().filter(|l| l.is_faithful()).count();
        if self.len() < 2 || pos == 0 || pos == self.len() {
            return Err(Error::input(format!(
                "training needs both labels present; got {pos} faithful of {}",
                self.len()
            )));
        }
        Ok(())
    }

    fn standardized(&self, s: &Standardizer) -> Result<Vec<Vec<f64>>> {
        self.rows.iter().map(|r| s.transform(r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weights {
    Logistic(LogisticWeights),
    Mlp(MlpWeights),
}

/// A trained aggregator with its standardizer and training metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessModel {
    pub kind: ModelKind,
    pub dim: usize,
    pub columns: Vec<String>,
    pub weights: Weights,
    pub standardizer: Standardizer,
    pub train_meta: Option<TrainMeta>,
}

impl FaithfulnessModel {
    /// Logistic model with all-zero weights and an identity standardizer; it
    /// scores every input 0.5.
    pub fn zero_logistic(columns: Vec<String>) -> Self {
        let dim = columns.len();
        FaithfulnessModel {
            kind: ModelKind::Logistic,
            dim,
            columns,
            weights: Weights::Logistic(LogisticWeights::zeros(dim)),
            standardizer: Standardizer::identity(dim),
            train_meta: None,
        }
    }

    pub fn logistic_from_parts(columns: Vec<String>, w: Vec<f64>, b: f64, standardizer: Standardizer) -> Result<Self> {
        let m = FaithfulnessModel {
            kind: ModelKind::Logistic,
            dim: columns.len(),
            columns,
            weights: Weights::Logistic(LogisticWeights { w, b }),
            standardizer,
            train_meta: None,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn fit(kind: ModelKind, data: &Dataset, config: &TrainConfig) -> Result<Self> {
        let (weights, standardizer, meta) = match kind {
            ModelKind::Logistic => {
                let (w, s, m, _) = logistic::fit(data, config)?;
                (Weights::Logistic(w), s, m)
            }
            ModelKind::Mlp => {
                let (w, s, m) = mlp::fit(data, config)?;
                (Weights::Mlp(w), s, m)
            }
        };
        Ok(FaithfulnessModel {
            kind,
            dim: data.dim(),
            columns: data.columns.clone(),
            weights,
            standardizer,
            train_meta: Some(meta),
        })
    }

    pub fn fit_logistic(data: &Dataset, config: &TrainConfig) -> Result<Self> {
        Self::fit(ModelKind::Logistic, data, config)
    }

    pub fn fit_mlp(data: &Dataset, config: &TrainConfig) -> Result<Self> {
        Self::fit(ModelKind::Mlp, data, config)
    }

    /// Logit of an already standardized row.
    pub fn logit_standardized(&self, x: &[f64]) -> f64 {
        match &self.weights {
            Weights::Logistic(w) => w.logit(x),
            Weights::Mlp(w) => w.logit(x),
        }
    }

    /// Score of a raw row aligned to `columns`; `None` entries are imputed.
    pub fn predict_values(&self, row: &[Option<f64>]) -> Result<f64> {
        let x = self.standardizer.transform(row)?;
        Ok(sigmoid(self.logit_standardized(&x)))
    }

    pub fn predict(&self, features: &FeatureVector) -> Result<f64> {
        let row: Vec<Option<f64>> = self.columns.iter().map(|c| features.value(c)).collect();
        self.predict_values(&row)
    }

    pub fn predict_record(&self, record: &FeatureRecord) -> Result<f64> {
        let row: Vec<Option<f64>> = self.columns.iter().map(|c| record.value(c)).collect();
        self.predict_values(&row)
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.len() != self.dim {
            return Err(Error::Model(format!(
                "model lists {} columns for dimension {}",
                self.columns.len(),
                self.dim
            )));
        }
        self.standardizer.validate()?;
        if self.standardizer.dim() != self.dim {
            return Err(Error::Model("standardizer dimension differs from model dimension".into()));
        }
        match (&self.weights, self.kind) {
            (Weights::Logistic(w), ModelKind::Logistic) => {
                if w.w.len() != self.dim || w.w.iter().any(|v| !v.is_finite()) || !w.b.is_finite() {
                    return Err(Error::Model("logistic weights do not match the model dimension".into()));
                }
            }
            (Weights::Mlp(w), ModelKind::Mlp) => {
                w.validate()?;
                if w.dim != self.dim {
                    return Err(Error::Model("MLP input width differs from model dimension".into()));
                }
            }
            (_, kind) => {
                return Err(Error::Model(format!("weights do not have the shape of a {kind} model")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: FaithfulnessModel = jsonl::read_json(path)?;
        m.validate()
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        Ok(m)
    }

    /// Load and require a specific kind.
    pub fn load_as(path: &Path, kind: ModelKind) -> Result<Self> {
        let m = Self::load(path)?;
        if m.kind != kind {
            return Err(Error::Model(format!(
                "{} holds a {} model, expected {kind}",
                path.display(),
                m.kind
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn blobs(n_per_class: usize, seed_: u64) -> Dataset {
        let mut rng = seed::rng(seed_);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for class in [true, false] {
            let m = if class { 1.0 } else { -1.0 };
            for _ in 0..n_per_class {
                x.push(vec![m + noise.sample(&mut rng), m + noise.sample(&mut rng)]);
                y.push(FaithLabel::from(class));
            }
        }
        Dataset::from_dense(&x, &y).unwrap()
    }

    #[test]
    fn zero_model_scores_half() {
        let m = FaithfulnessModel::zero_logistic(vec!["a".into(), "b".into()]);
        assert_eq!(m.predict_values(&[Some(3.0), None]).unwrap(), 0.5);
    }

    #[test]
    fn closed_form_logistic_fixture() {
        let m = FaithfulnessModel::logistic_from_parts(vec!["x".into()], vec![2.0], 0.0, Standardizer::identity(1)).unwrap();
        assert_eq!(m.predict_values(&[Some(0.0)]).unwrap(), 0.5);
        let want = 1.0 / (1.0 + (-2f64).exp());
        assert!((m.predict_values(&[Some(1.0)]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.8808).abs() < 1e-4);
        assert!(m.predict_values(&[Some(1.0), Some(2.0)]).is_err());
    }

    #[test]
    fn absent_feature_equals_training_mean() {
        let data = blobs(50, 3);
        let m = FaithfulnessModel::fit_logistic(&data, &TrainConfig::logistic()).unwrap();
        let mean = m.standardizer.mean[1];
        assert_eq!(
            m.predict_values(&[Some(0.2), None]).unwrap(),
            m.predict_values(&[Some(0.2), Some(mean)]).unwrap()
        );
    }

    #[test]
    fn separable_1d_data_is_ranked_perfectly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![(i % 2) as f64]).collect();
        let y: Vec<FaithLabel> = (0..20).map(|i| FaithLabel::from(i % 2 == 1)).collect();
        let data = Dataset::from_dense(&x, &y).unwrap();
        let m = FaithfulnessModel::fit_logistic(&data, &TrainConfig::logistic()).unwrap();
        let p0 = m.predict_values(&[Some(0.0)]).unwrap();
        let p1 = m.predict_values(&[Some(1.0)]).unwrap();
        assert!(p1 > p0);
    }

    #[test]
    fn logistic_loss_never_increases() {
        let (_, _, _, hist) = logistic::fit(&blobs(100, 11), &TrainConfig::logistic()).unwrap();
        assert!(hist.windows(2).all(|w| w[1] <= w[0] + 1e-15), "loss went up");
    }

    #[test]
    fn single_class_rejected() {
        let data = Dataset::from_dense(&[vec![1.0], vec![2.0]], &[FaithLabel::Faithful; 2]).unwrap();
        assert!(matches!(
            FaithfulnessModel::fit_logistic(&data, &TrainConfig::logistic()),
            Err(Error::Input(_))
        ));
        assert!(FaithfulnessModel::fit_mlp(&data, &TrainConfig::mlp()).is_err());
    }

    #[test]
    fn non_finite_features_rejected() {
        assert!(Dataset::from_dense(&[vec![f64::NAN], vec![1.0]], &[FaithLabel::Faithful, FaithLabel::Unfaithful]).is_err());
    }

    #[test]
    fn mlp_is_deterministic_and_seed_sensitive() {
        let data = blobs(40, 5);
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::mlp() };
        let a = FaithfulnessModel::fit_mlp(&data, &cfg).unwrap();
        let b = FaithfulnessModel::fit_mlp(&data, &cfg).unwrap();
        assert_eq!(a, b);
        let c = FaithfulnessModel::fit_mlp(&data, &cfg.clone().with_seed(1)).unwrap();
        assert_ne!(a.weights, c.weights);
    }

    #[test]
    fn save_load_preserves_predictions_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = blobs(40, 9);
        let mut rng = seed::rng(1);
        for kind in [ModelKind::Logistic, ModelKind::Mlp] {
            let cfg = TrainConfig { epochs: 20, ..TrainConfig::for_kind(kind) };
            let m = FaithfulnessModel::fit(kind, &data, &cfg).unwrap();
            let path = dir.path().join(format!("{kind}.json"));
            m.save(&path).unwrap();
            let back = FaithfulnessModel::load_as(&path, kind).unwrap();
            assert_eq!(back, m);
            for _ in 0..100 {
                let row = [Some(rng.random_range(-3.0..3.0)), Some(rng.random_range(-3.0..3.0))];
                assert_eq!(
                    m.predict_values(&row).unwrap().to_bits(),
                    back.predict_values(&row).unwrap().to_bits()
                );
            }
        }
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        FaithfulnessModel::zero_logistic(vec!["a".into()]).save(&path).unwrap();
        assert!(matches!(
            FaithfulnessModel::load_as(&path, ModelKind::Mlp),
            Err(Error::Model(_))
        ));
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(FaithfulnessModel::load(&path), Err(Error::Parse { .. })));
        let wrong_dim = text.replace("\"dim\": 1", "\"dim\": 2");
        std::fs::write(&path, wrong_dim).unwrap();
        assert!(FaithfulnessModel::load(&path).is_err());
    }

    #[test]
    fn bce_matches_naive_form() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 0.0), (5.0, 0.0), (-0.7, 1.0)] {
            let p = sigmoid(z);
            let naive = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            assert!((bce(z, y) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_in_unit_interval_and_monotone_in_logit() {
        let m = FaithfulnessModel::logistic_from_parts(vec!["x".into()], vec![40.0], 0.0, Standardizer::identity(1)).unwrap();
        let mut prev = -1.0;
        for i in -50..=50 {
            let p = m.predict_values(&[Some(i as f64)]).unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert!(p >= prev);
            prev = p;
        }
    }
}
