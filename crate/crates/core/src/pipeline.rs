//! Steps shared by the command line and the end-to-end tests: prompt files,
//! corpus generation, reference activations and detector training.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::aggregator::{Dataset, FaithfulnessModel, ModelKind, TrainConfig};
use crate::backend::{DecodeMode, GenerationBackend, MockLm, ScenarioSpec};
use crate::error::{Error, Result};
use crate::features::{
    build_reference_set, family_of, AlignmentScorer, FeatureConfig, FeatureExtractor, FeatureFamily, FeatureRecord,
    ReferenceSets,
};
use crate::fod::{decode_response, SynCheck};
use crate::jsonl;
use crate::seed;
use crate::trace::GenerationTrace;

/// One line of a prompt file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
}

impl PromptRecord {
    pub fn id_or(&self, index: usize) -> String {
        self.id.clone().unwrap_or_else(|| format!("default:{index}"))
    }
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    let prompts: Vec<PromptRecord> = jsonl::read(path)?;
    if prompts.is_empty() {
        return Err(Error::input(format!("{}: no prompts", path.display())));
    }
    Ok(prompts)
}

/// The prompts bundled with a mock scenario, tagged with its name.
pub fn scenario_prompts(spec: &ScenarioSpec) -> Vec<PromptRecord> {
    spec.prompts
        .iter()
        .enumerate()
        .map(|(i, p)| PromptRecord {
            id: Some(format!("{}:{i}", spec.name)),
            prompt: p.clone(),
            context: spec.context.clone(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sampling {
    Greedy,
    /// `repeats` responses per prompt; response `r` of prompt `i` uses seed
    /// `derive_all(seed, [i, r])`.
    Sample { temperature: f64, seed: u64, repeats: usize },
}

/// Decode every prompt. Ids get a `/r` suffix when sampling.
pub fn generate_traces(
    backend: &dyn GenerationBackend,
    prompts: &[PromptRecord],
    sampling: Sampling,
    max_sentences: usize,
) -> Result<Vec<GenerationTrace>> {
    let mut out = Vec::new();
    for (i, p) in prompts.iter().enumerate() {
        let context = p
            .context
            .as_deref()
            .ok_or_else(|| Error::input(format!("prompt {} has no context", p.id_or(i))))?;
        let runs: Vec<(String, DecodeMode)> = match sampling {
            Sampling::Greedy => vec![(p.id_or(i), DecodeMode::Greedy)],
            Sampling::Sample { temperature, seed, repeats } => (0..repeats)
                .map(|r| {
                    let mode = DecodeMode::Sample {
                        temperature,
                        seed: seed::derive_all(seed, &[i as u64, r as u64]),
                    };
                    (format!("{}/{r}", p.id_or(i)), mode)
                })
                .collect(),
        };
        for (id, mode) in runs {
            let mut t = GenerationTrace::new(id, p.prompt.clone(), context);
            t.sentences = decode_response(backend, &p.prompt, context, max_sentences, mode)?;
            out.push(t);
        }
    }
    Ok(out)
}

/// Leading traces holding exactly `n` sentences; the last one kept is cut
/// short if needed. Traces left empty are dropped.
pub fn limit_sentences(traces: &[GenerationTrace], n: usize) -> Result<Vec<GenerationTrace>> {
    let total: usize = traces.iter().map(|t| t.sentences.len()).sum();
    if total < n {
        return Err(Error::input(format!("corpus has {total} sentences, {n} requested")));
    }
    let mut out = Vec::new();
    let mut left = n;
    for t in traces {
        if left == 0 {
            break;
        }
        let mut t = t.clone();
        let keep = t.sentences.len().min(left);
        t.sentences.truncate(keep);
        if let Some(l) = t.gold_labels.as_mut() {
            l.truncate(keep);
        }
        left -= keep;
        if keep > 0 {
            out.push(t);
        }
    }
    Ok(out)
}

/// Attach the mock's scripted labels as gold labels.
pub fn attach_oracle_labels(lm: &MockLm, traces: &mut [GenerationTrace]) -> Result<()> {
    for t in traces {
        t.gold_labels = Some(lm.label_trace(t)?);
    }
    Ok(())
}

/// Feature configuration plus the reference activations it was built with.
/// Saved next to a trained model so sentences are featurised the same way
/// at scoring time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorSpec {
    pub config: FeatureConfig,
    pub refs: ReferenceSets,
}

impl ExtractorSpec {
    /// Reference sets of `ref_size` points per configured layer, sampled from
    /// the labelled traces in `train`.
    pub fn build(train: &[GenerationTrace], config: FeatureConfig, ref_size: usize, seed_: u64) -> Result<Self> {
        let mut refs = ReferenceSets::new();
        for (i, &layer) in config.lid_layers.iter().enumerate() {
            refs.insert(layer, build_reference_set(train, layer, ref_size, seed::derive(seed_, i as u64))?);
        }
        Ok(ExtractorSpec { config, refs })
    }

    pub fn extractor(&self, scorer: Box<dyn AlignmentScorer>) -> Result<FeatureExtractor> {
        FeatureExtractor::new(self.config.clone(), self.refs.clone(), scorer)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }
}

/// `columns` without those belonging to any of `drop`.
pub fn drop_families(columns: &[String], drop: &[FeatureFamily]) -> Vec<String> {
    columns
        .iter()
        .filter(|c| family_of(c).is_none_or(|f| !drop.contains(&f)))
        .cloned()
        .collect()
}

/// Fit an aggregator on labelled feature records restricted to `columns`.
pub fn train_model(
    records: &[FeatureRecord],
    kind: ModelKind,
    columns: &[String],
    seed_: u64,
) -> Result<FaithfulnessModel> {
    let data = Dataset::from_records(records, Some(columns))?;
    FaithfulnessModel::fit(kind, &data, &TrainConfig::for_kind(kind).with_seed(seed_))
}

/// Build a detector from labelled training traces: reference activations,
/// features, then an aggregator over `columns` (all configured columns when
/// `None`).
pub fn train_detector(
    train: &[GenerationTrace],
    config: FeatureConfig,
    ref_size: usize,
    kind: ModelKind,
    columns: Option<&[String]>,
    scorer: Box<dyn AlignmentScorer>,
    seed_: u64,
) -> Result<(SynCheck, ExtractorSpec, Vec<FeatureRecord>)> {
    let spec = ExtractorSpec::build(train, config, ref_size, seed::derive(seed_, 0))?;
    let extractor = spec.extractor(scorer)?;
    let records = extractor.traces(train)?;
    let cols = columns.map(<[String]>::to_vec).unwrap_or_else(|| spec.config.columns());
    let model = train_model(&records, kind, &cols, seed::derive(seed_, 1))?;
    Ok((SynCheck::new(model, extractor), spec, records))
}
