//! Per-sentence faithfulness signals.
//!
//! Four families are monitored for each decoded sentence:
//!
//! | family            | columns                                         |
//! |-------------------|-------------------------------------------------|
//! | likelihood        | `min_prob`, `mean_prob`                         |
//! | uncertainty       | `max_entropy`, `mean_entropy`, `lid_layer_{L}`  |
//! | context influence | `mean_contrastive_kl`, `large_kl_pos`           |
//! | alignment         | `align_score`                                   |
//!
//! LID columns exist only for configured layers and are absent (presence bit
//! unset) when the sentence has no hidden vector or no reference set exists.

mod align;
mod lid;
mod signals;

use std::collections::BTreeMap;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{FaithLabel, GenerationTrace, SentenceRecord, TokenDist};

pub use align::{
    check_alignment_service, lexical_align_score, scorer_from_env, AlignmentScorer, ContractCheck,
    HealthResponse, HttpAlignScorer, LexicalScorer, ScoreRequest, ScoreResponse, SCORER_URL_ENV,
};
pub use lid::{build_reference_set, lid_mle, ReferenceSet, DEFAULT_LID_K, LID_EPS};
pub use signals::{
    context_influence, entropy_features, likelihood_features, normalized_entropy, position_kl,
    smoothed_kl, DEFAULT_KL_THRESHOLD, KL_SMOOTHING,
};

/// Reference sets keyed by layer id.
pub type ReferenceSets = BTreeMap<u32, ReferenceSet>;

pub const MIN_PROB: &str = "min_prob";
pub const MEAN_PROB: &str = "mean_prob";
pub const MAX_ENTROPY: &str = "max_entropy";
pub const MEAN_ENTROPY: &str = "mean_entropy";
pub const MEAN_CONTRASTIVE_KL: &str = "mean_contrastive_kl";
pub const LARGE_KL_POS: &str = "large_kl_pos";
pub const ALIGN_SCORE: &str = "align_score";
const LID_PREFIX: &str = "lid_layer_";

pub fn lid_column(layer: u32) -> String {
    format!("{LID_PREFIX}{layer}")
}

/// The layer id of a `lid_layer_{L}` column.
pub fn lid_layer_of(column: &str) -> Option<u32> {
    column.strip_prefix(LID_PREFIX)?.parse().ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureFamily {
    Likelihood,
    Uncertainty,
    ContextInfluence,
    Alignment,
}

impl FeatureFamily {
    pub const ALL: [FeatureFamily; 4] = [
        FeatureFamily::Likelihood,
        FeatureFamily::Uncertainty,
        FeatureFamily::ContextInfluence,
        FeatureFamily::Alignment,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureFamily::Likelihood => "likelihood",
            FeatureFamily::Uncertainty => "uncertainty",
            FeatureFamily::ContextInfluence => "context_influence",
            FeatureFamily::Alignment => "alignment",
        }
    }
}

impl FromStr for FeatureFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FeatureFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown feature family {s:?}")))
    }
}

pub fn family_of(column: &str) -> Option<FeatureFamily> {
    match column {
        MIN_PROB | MEAN_PROB => Some(FeatureFamily::Likelihood),
        MAX_ENTROPY | MEAN_ENTROPY => Some(FeatureFamily::Uncertainty),
        MEAN_CONTRASTIVE_KL | LARGE_KL_POS => Some(FeatureFamily::ContextInfluence),
        ALIGN_SCORE => Some(FeatureFamily::Alignment),
        c if lid_layer_of(c).is_some() => Some(FeatureFamily::Uncertainty),
        _ => None,
    }
}

/// Sort key placing columns in the canonical order.
fn column_rank(column: &str) -> (u8, u32) {
    match column {
        MIN_PROB => (0, 0),
        MEAN_PROB => (1, 0),
        MAX_ENTROPY => (2, 0),
        MEAN_ENTROPY => (3, 0),
        MEAN_CONTRASTIVE_KL => (5, 0),
        LARGE_KL_POS => (6, 0),
        ALIGN_SCORE => (7, 0),
        c => match lid_layer_of(c) {
            Some(l) => (4, l),
            None => (8, 0),
        },
    }
}

/// Sort and deduplicate column names into the canonical order.
pub fn canonical_columns<I, S>(columns: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let mut v: Vec<String> = columns.into_iter().map(Into::into).collect();
    v.sort_by(|a, b| column_rank(a).cmp(&column_rank(b)).then_with(|| a.cmp(b)));
    v.dedup();
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Vocabulary size used to normalise entropy. Required for top-k
    /// distributions; dense distributions default to their own length.
    #[serde(default)]
    pub vocab_size: Option<usize>,
    pub kl_threshold: f64,
    pub lid_layers: Vec<u32>,
    pub lid_k: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            vocab_size: None,
            kl_threshold: DEFAULT_KL_THRESHOLD,
            lid_layers: Vec::new(),
            lid_k: DEFAULT_LID_K,
        }
    }
}

impl FeatureConfig {
    /// Every column this configuration can produce, in canonical order.
    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = [MIN_PROB, MEAN_PROB, MAX_ENTROPY, MEAN_ENTROPY]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(self.lid_layers.iter().map(|&l| lid_column(l)));
        cols.extend([MEAN_CONTRASTIVE_KL, LARGE_KL_POS, ALIGN_SCORE].map(String::from));
        canonical_columns(cols)
    }
}

/// The monitored signals of one sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub min_prob: f64,
    pub mean_prob: f64,
    pub max_entropy: f64,
    pub mean_entropy: f64,
    /// One entry per configured layer; `None` when the value is unavailable.
    pub lid_by_layer: BTreeMap<u32, Option<f64>>,
    pub mean_contrastive_kl: f64,
    pub large_kl_pos: u32,
    pub align_score: f64,
}

impl FeatureVector {
    /// Value of a column, or `None` when it is absent or unknown.
    pub fn value(&self, column: &str) -> Option<f64> {
        match column {
            MIN_PROB => Some(self.min_prob),
            MEAN_PROB => Some(self.mean_prob),
            MAX_ENTROPY => Some(self.max_entropy),
            MEAN_ENTROPY => Some(self.mean_entropy),
            MEAN_CONTRASTIVE_KL => Some(self.mean_contrastive_kl),
            LARGE_KL_POS => Some(f64::from(self.large_kl_pos)),
            ALIGN_SCORE => Some(self.align_score),
            c => self.lid_by_layer.get(&lid_layer_of(c)?).copied().flatten(),
        }
    }

    pub fn columns(&self) -> Vec<String> {
        FeatureConfig {
            lid_layers: self.lid_by_layer.keys().copied().collect(),
            ..FeatureConfig::default()
        }
        .columns()
    }

    pub fn presence(&self) -> BTreeMap<String, bool> {
        self.columns()
            .into_iter()
            .map(|c| {
                let present = self.value(&c).is_some();
                (c, present)
            })
            .collect()
    }

    pub fn to_record(&self, trace_id: &str, sentence_index: usize, gold_label: Option<FaithLabel>) -> FeatureRecord {
        let features = self
            .columns()
            .into_iter()
            .filter_map(|c| self.value(&c).map(|v| (c, v)))
            .collect();
        FeatureRecord {
            trace_id: trace_id.to_string(),
            sentence_index,
            features,
            presence: self.presence(),
            gold_label,
        }
    }
}

/// One line of the feature dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub trace_id: String,
    pub sentence_index: usize,
    pub features: BTreeMap<String, f64>,
    pub presence: BTreeMap<String, bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<FaithLabel>,
}

impl FeatureRecord {
    /// Value of a column when its presence bit is set.
    pub fn value(&self, column: &str) -> Option<f64> {
        if self.presence.get(column).copied().unwrap_or(false) {
            self.features.get(column).copied()
        } else {
            None
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, present) in &self.presence {
            if *present && !self.features.contains_key(name) {
                return Err(Error::validation(format!("feature {name} is marked present but has no value")));
            }
        }
        if let Some((name, v)) = self.features.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::validation(format!("feature {name} is not finite: {v}")));
        }
        Ok(())
    }
}

pub fn read_feature_records(path: &std::path::Path) -> Result<Vec<FeatureRecord>> {
    crate::jsonl::read_with(path, FeatureRecord::validate)
}

fn vocab_size_for(sentence: &SentenceRecord, config: &FeatureConfig) -> Result<usize> {
    if let Some(v) = config.vocab_size {
        return Ok(v);
    }
    match sentence.tokens.first().map(|t| &t.dist_with_context) {
        Some(TokenDist::Dense { dense }) => Ok(dense.len()),
        Some(TokenDist::TopK { .. }) => Err(Error::input(
            "top-k distributions need an explicit vocabulary size for entropy normalisation",
        )),
        None => Err(Error::input(format!("sentence {} has no tokens", sentence.index))),
    }
}

/// Compute the feature vector of one sentence. `context` is the full
/// retrieved context the sentence is checked against.
pub fn sentence_features(
    context: &str,
    sentence: &SentenceRecord,
    refs: &ReferenceSets,
    scorer: &dyn AlignmentScorer,
    config: &FeatureConfig,
) -> Result<FeatureVector> {
    let (min_prob, mean_prob) = likelihood_features(sentence)?;
    let (mean_entropy, max_entropy) = entropy_features(sentence, vocab_size_for(sentence, config)?)?;
    let (mean_contrastive_kl, large_kl_pos) = context_influence(sentence, config.kl_threshold)?;
    let mut lid_by_layer = BTreeMap::new();
    for &layer in &config.lid_layers {
        let value = match (sentence.final_hidden.get(&layer), refs.get(&layer)) {
            (Some(h), Some(r)) => Some(lid_mle(h, r, config.lid_k)?),
            _ => None,
        };
        lid_by_layer.insert(layer, value);
    }
    let align_score = scorer.score(&sentence.text, context)?;
    if !(0.0..=1.0).contains(&align_score) {
        return Err(Error::Backend(format!(
            "alignment scorer {} returned {align_score} outside [0, 1]",
            scorer.name()
        )));
    }
    Ok(FeatureVector {
        min_prob,
        mean_prob,
        max_entropy,
        mean_entropy,
        lid_by_layer,
        mean_contrastive_kl,
        large_kl_pos,
        align_score,
    })
}

/// Features of sentence `sentence_index` of `trace`.
pub fn assemble_features(
    trace: &GenerationTrace,
    sentence_index: usize,
    refs: &ReferenceSets,
    scorer: &dyn AlignmentScorer,
    config: &FeatureConfig,
) -> Result<FeatureVector> {
    let sentence = trace.sentences.get(sentence_index).ok_or_else(|| {
        Error::input(format!(
            "trace {} has {} sentences, no index {sentence_index}",
            trace.id,
            trace.sentences.len()
        ))
    })?;
    sentence_features(&trace.context, sentence, refs, scorer, config)
}

/// Feature computation bound to one scorer, one set of reference activations
/// and one configuration. Honours a scorer's request for serialized access.
pub struct FeatureExtractor {
    config: FeatureConfig,
    refs: ReferenceSets,
    scorer: Box<dyn AlignmentScorer>,
    gate: Mutex<()>,
}

impl FeatureExtractor {
    pub fn new(config: FeatureConfig, refs: ReferenceSets, scorer: Box<dyn AlignmentScorer>) -> Result<Self> {
        for (layer, r) in &refs {
            r.validate()?;
            if r.layer_id != *layer {
                return Err(Error::input(format!(
                    "reference set for layer {} filed under layer {layer}",
                    r.layer_id
                )));
            }
        }
        Ok(FeatureExtractor {
            config,
            refs,
            scorer,
            gate: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn refs(&self) -> &ReferenceSets {
        &self.refs
    }

    pub fn scorer(&self) -> &dyn AlignmentScorer {
        self.scorer.as_ref()
    }

    pub fn sentence(&self, context: &str, sentence: &SentenceRecord) -> Result<FeatureVector> {
        let _guard = if self.scorer.concurrent() {
            None
        } else {
            Some(self.gate.lock().unwrap_or_else(|p| p.into_inner()))
        };
        sentence_features(context, sentence, &self.refs, self.scorer.as_ref(), &self.config)
    }

    /// Feature records for every sentence of every trace, in input order.
    /// Traces are processed on scoped worker threads.
    pub fn traces(&self, traces: &[GenerationTrace]) -> Result<Vec<FeatureRecord>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
        let chunk = traces.len().div_ceil(workers).max(1);
        let parts: Vec<Result<Vec<FeatureRecord>>> = std::thread::scope(|s| {
            let handles: Vec<_> = traces
                .chunks(chunk)
                .map(|part| s.spawn(move || self.traces_sequential(part)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::validation("feature worker panicked"))))
                .collect()
        });
        let mut out = Vec::new();
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    fn traces_sequential(&self, traces: &[GenerationTrace]) -> Result<Vec<FeatureRecord>> {
        let mut out = Vec::new();
        for t in traces {
            for (i, s) in t.sentences.iter().enumerate() {
                let fv = self
                    .sentence(&t.context, s)
                    .map_err(|e| Error::input(format!("trace {} sentence {i}: {e}", t.id)))?;
                let label = t.gold_labels.as_ref().map(|l| l[i]);
                out.push(fv.to_record(&t.id, i, label));
            }
        }
        Ok(out)
    }
}
