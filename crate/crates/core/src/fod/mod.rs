//! Decoding strategies steered by a sentence-level faithfulness detector:
//! plain greedy, faithfulness-oriented beam search, abstention and
//! best-of-n reranking.

mod detector;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backend::{sentence_seed, DecodeMode, GenerationBackend};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{GenerationTrace, SentenceRecord};

pub use detector::{score_sentence, FnScorer, SentenceScorer, SynCheck};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Stage-1 backtrack threshold.
    pub tau1: f64,
    /// Stage-2 sample prune threshold.
    pub tau2: f64,
    /// Beam size K.
    pub beam: usize,
    /// Samples per round S, split evenly over the live beams.
    pub samples: usize,
    pub temperature: f64,
    pub seed: u64,
    pub max_sentences: usize,
    /// Keep searching until every beam has finished.
    pub complete_all: bool,
    pub abstain_threshold: f64,
    pub rerank_samples: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            tau1: 0.7,
            tau2: 0.85,
            beam: 2,
            samples: 6,
            temperature: 1.0,
            seed: 0,
            max_sentences: 24,
            complete_all: false,
            abstain_threshold: 0.7,
            rerank_samples: 6,
        }
    }
}

impl DecodeConfig {
    /// Thresholds above 1 are accepted and prune everything.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2), ("abstain threshold", self.abstain_threshold)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::input(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.beam == 0 || self.samples == 0 || self.max_sentences == 0 || self.rerank_samples == 0 {
            return Err(Error::input("beam size, sample count, rerank samples and max sentences must be at least 1"));
        }
        DecodeMode::Sample { temperature: self.temperature, seed: 0 }.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Fod,
    Abstain,
    Rerank,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Greedy, Strategy::Fod, Strategy::Abstain, Strategy::Rerank];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Fod => "fod",
            Strategy::Abstain => "abstain",
            Strategy::Rerank => "rerank",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::input(format!("unknown strategy {s:?}; expected greedy, fod, abstain or rerank")))
    }
}

/// A partial response with the detector score of each sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub sentences: Vec<SentenceRecord>,
    pub scores: Vec<f64>,
    /// How many leading sentences were accepted by greedy stage 1.
    pub stage1_len: usize,
    /// End of sequence was emitted.
    pub finished: bool,
    #[serde(skip)]
    created: u64,
}

impl Beam {
    fn root(sentences: Vec<SentenceRecord>, scores: Vec<f64>, finished: bool) -> Self {
        let stage1_len = sentences.len();
        Beam {
            sentences,
            scores,
            stage1_len,
            finished,
            created: 0,
        }
    }

    /// Mean sentence score; 0 for an empty beam.
    pub fn mean_score(&self) -> f64 {
        mean(&self.scores)
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn stage1_scores(&self) -> &[f64] {
        &self.scores[..self.stage1_len]
    }

    pub fn stage2_scores(&self) -> &[f64] {
        &self.scores[self.stage1_len..]
    }

    fn frozen(&self, max_sentences: usize) -> bool {
        self.finished || self.sentences.len() >= max_sentences
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn detector_error(stage: &'static str, accepted: usize, e: Error) -> Error {
    Error::Detector {
        stage,
        accepted,
        source: Box::new(e),
    }
}

fn score(
    detector: &dyn SentenceScorer,
    stage: &'static str,
    prompt: &str,
    context: &str,
    prefix: &[SentenceRecord],
    s: &SentenceRecord,
) -> Result<f64> {
    detector
        .score(prompt, context, prefix, s)
        .and_then(detector::checked)
        .map_err(|e| detector_error(stage, prefix.len(), e))
}

/// Run `f` over `jobs`, on scoped threads when allowed; results keep job
/// order.
fn run_jobs<J: Sync, R: Send>(jobs: &[J], concurrent: bool, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    if !concurrent || jobs.len() < 2 {
        return jobs.iter().map(f).collect();
    }
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = jobs.iter().map(|j| s.spawn(move || f(j))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

/// Decode a full response with `mode` (a sampling seed is re-derived per
/// sentence). Stops at end of sequence or after `max_sentences`.
pub fn decode_response(
    backend: &dyn GenerationBackend,
    prompt: &str,
    context: &str,
    max_sentences: usize,
    mode: DecodeMode,
) -> Result<Vec<SentenceRecord>> {
    let mut out: Vec<SentenceRecord> = Vec::new();
    while out.len() < max_sentences {
        let m = match mode {
            DecodeMode::Greedy => DecodeMode::Greedy,
            DecodeMode::Sample { temperature, seed } => DecodeMode::Sample {
                temperature,
                seed: sentence_seed(seed, out.len()),
            },
        };
        let s = backend.generate_sentence(prompt, Some(context), &out, m)?;
        if s.is_empty_terminal() {
            break;
        }
        let eos = s.is_eos_terminal;
        out.push(s);
        if eos {
            break;
        }
    }
    Ok(out)
}

pub fn greedy_decode(
    backend: &dyn GenerationBackend,
    prompt: &str,
    context: &str,
    max_sentences: usize,
) -> Result<GenerationTrace> {
    let mut t = GenerationTrace::new("", prompt, context);
    t.sentences = decode_response(backend, prompt, context, max_sentences, DecodeMode::Greedy)?;
    Ok(t)
}

/// Faithfulness-oriented decoding. Greedy sentences are accepted while they
/// score at least `tau1`; the first one below is dropped and beam search
/// over sampled sentences continues from the accepted prefix, pruning
/// samples under `tau2` and keeping the `beam` best partial responses by
/// mean score.
pub fn fod_decode(
    backend: &dyn GenerationBackend,
    detector: &dyn SentenceScorer,
    prompt: &str,
    context: &str,
    config: &DecodeConfig,
) -> Result<Beam> {
    config.validate()?;
    let max = config.max_sentences;
    let mut prefix: Vec<SentenceRecord> = Vec::new();
    let mut scores = Vec::new();
    while prefix.len() < max {
        let s = backend.generate_sentence(prompt, Some(context), &prefix, DecodeMode::Greedy)?;
        if s.is_empty_terminal() {
            return Ok(Beam::root(prefix, scores, true));
        }
        let f = score(detector, "stage1", prompt, context, &prefix, &s)?;
        if f < config.tau1 {
            break;
        }
        let eos = s.is_eos_terminal;
        prefix.push(s);
        scores.push(f);
        if eos {
            return Ok(Beam::root(prefix, scores, true));
        }
    }
    if prefix.len() >= max {
        return Ok(Beam::root(prefix, scores, false));
    }

    let per_beam = config.samples.div_ceil(config.beam);
    let concurrent = backend.allows_concurrent();
    let mut beams = vec![Beam::root(prefix, scores, false)];
    let mut created = 1u64;
    for round in 0u64.. {
        let done = if config.complete_all {
            beams.iter().all(|b| b.frozen(max))
        } else {
            beams.iter().any(|b| b.finished) || beams.iter().all(|b| b.frozen(max))
        };
        if done {
            break;
        }
        let jobs: Vec<(usize, u64)> = beams
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.frozen(max))
            .flat_map(|(bi, _)| (0..per_beam as u64).map(move |j| (bi, j)))
            .collect();
        let drawn = run_jobs(&jobs, concurrent, |&(bi, j)| -> Result<Option<(SentenceRecord, f64)>> {
            let b = &beams[bi];
            let mode = DecodeMode::Sample {
                temperature: config.temperature,
                seed: seed::derive_all(config.seed, &[round, j]),
            };
            let s = backend.generate_sentence(prompt, Some(context), &b.sentences, mode)?;
            if s.is_empty_terminal() {
                return Ok(None);
            }
            let f = score(detector, "stage2", prompt, context, &b.sentences, &s)?;
            Ok(Some((s, f)))
        });
        let mut pool: Vec<Beam> = beams.iter().filter(|b| b.frozen(max)).cloned().collect();
        let carried = pool.len();
        let mut closed = vec![false; beams.len()];
        for (&(bi, _), r) in jobs.iter().zip(drawn) {
            let mut b = match r? {
                None if !closed[bi] => {
                    closed[bi] = true;
                    let mut b = beams[bi].clone();
                    b.finished = true;
                    b
                }
                None => continue,
                Some((_, f)) if f < config.tau2 => continue,
                Some((s, f)) => {
                    let mut b = beams[bi].clone();
                    b.finished = s.is_eos_terminal;
                    b.sentences.push(s);
                    b.scores.push(f);
                    b
                }
            };
            b.created = created;
            created += 1;
            pool.push(b);
        }
        if pool.len() == carried {
            break;
        }
        pool.sort_by(|a, b| b.mean_score().total_cmp(&a.mean_score()).then(a.created.cmp(&b.created)));
        pool.truncate(config.beam);
        beams = pool;
    }
    Ok(best_beam(beams))
}

fn best_beam(beams: Vec<Beam>) -> Beam {
    let mut best: Option<Beam> = None;
    for b in beams {
        let better = match &best {
            None => true,
            Some(cur) => {
                b.mean_score() > cur.mean_score() || (b.mean_score() == cur.mean_score() && b.created < cur.created)
            }
        };
        if better {
            best = Some(b);
        }
    }
    best.unwrap_or_else(|| Beam::root(Vec::new(), Vec::new(), false))
}

/// A response with the detector score of each sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub trace: GenerationTrace,
    pub scores: Vec<f64>,
}

impl Scored {
    pub fn mean_score(&self) -> f64 {
        mean(&self.scores)
    }
}

fn score_all(
    detector: &dyn SentenceScorer,
    stage: &'static str,
    prompt: &str,
    context: &str,
    sentences: &[SentenceRecord],
) -> Result<Vec<f64>> {
    (0..sentences.len())
        .map(|i| score(detector, stage, prompt, context, &sentences[..i], &sentences[i]))
        .collect()
}

/// Greedy decoding that returns nothing when any sentence scores below
/// `threshold`. The scored greedy response is returned alongside.
pub fn abstain_decode(
    backend: &dyn GenerationBackend,
    detector: &dyn SentenceScorer,
    prompt: &str,
    context: &str,
    threshold: f64,
    max_sentences: usize,
) -> Result<(Option<GenerationTrace>, Scored)> {
    let trace = greedy_decode(backend, prompt, context, max_sentences)?;
    let scores = score_all(detector, "abstain", prompt, context, &trace.sentences)?;
    let keep = scores.iter().all(|&f| f >= threshold);
    Ok((keep.then(|| trace.clone()), Scored { trace, scores }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reranked {
    pub best: Scored,
    pub best_seed: u64,
    /// Mean score of every sample, in seed order.
    pub sample_means: Vec<f64>,
}

/// Sample `n_samples` full responses with seeds `seed..seed + n` and keep
/// the one with the highest mean sentence score.
pub fn rerank_decode(
    backend: &dyn GenerationBackend,
    detector: &dyn SentenceScorer,
    prompt: &str,
    context: &str,
    n_samples: usize,
    temperature: f64,
    seed: u64,
    max_sentences: usize,
) -> Result<Reranked> {
    if n_samples == 0 {
        return Err(Error::input("rerank needs at least one sample"));
    }
    let seeds: Vec<u64> = (0..n_samples as u64).map(|i| seed.wrapping_add(i)).collect();
    let samples = run_jobs(&seeds, backend.allows_concurrent(), |&s| -> Result<Scored> {
        let mode = DecodeMode::Sample { temperature, seed: s };
        let mut trace = GenerationTrace::new("", prompt, context);
        trace.sentences = decode_response(backend, prompt, context, max_sentences, mode)?;
        let scores = score_all(detector, "rerank", prompt, context, &trace.sentences)?;
        Ok(Scored { trace, scores })
    });
    let samples: Vec<Scored> = samples.into_iter().collect::<Result<_>>()?;
    let sample_means: Vec<f64> = samples.iter().map(Scored::mean_score).collect();
    let mut bi = 0;
    for (i, &m) in sample_means.iter().enumerate() {
        if m > sample_means[bi] {
            bi = i;
        }
    }
    Ok(Reranked {
        best: samples[bi].clone(),
        best_seed: seeds[bi],
        sample_means,
    })
}

/// One decoded response as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub trace: GenerationTrace,
    pub strategy: Strategy,
    pub config: DecodeConfig,
    pub per_sentence_scores: Vec<f64>,
    pub stage1_sentences: usize,
    pub abstained: bool,
    pub empty: bool,
}

impl DecodeResult {
    /// Sentence count of the returned response; 0 when abstaining.
    pub fn informativeness(&self) -> usize {
        if self.abstained {
            0
        } else {
            self.trace.sentences.len()
        }
    }
}

/// Run one strategy. Greedy output is scored when a detector is given; the
/// other strategies require one.
pub fn decode(
    strategy: Strategy,
    backend: &dyn GenerationBackend,
    detector: Option<&dyn SentenceScorer>,
    id: &str,
    prompt: &str,
    context: &str,
    config: &DecodeConfig,
) -> Result<DecodeResult> {
    config.validate()?;
    let need = || detector.ok_or_else(|| Error::input(format!("strategy {strategy} needs a detector model")));
    let (mut trace, scores, stage1, abstained) = match strategy {
        Strategy::Greedy => {
            let t = greedy_decode(backend, prompt, context, config.max_sentences)?;
            let scores = match detector {
                Some(d) => score_all(d, "greedy", prompt, context, &t.sentences)?,
                None => Vec::new(),
            };
            let n = t.sentences.len();
            (t, scores, n, false)
        }
        Strategy::Fod => {
            let b = fod_decode(backend, need()?, prompt, context, config)?;
            let mut t = GenerationTrace::new("", prompt, context);
            t.sentences = b.sentences;
            (t, b.scores, b.stage1_len, false)
        }
        Strategy::Abstain => {
            let (kept, scored) = abstain_decode(
                backend,
                need()?,
                prompt,
                context,
                config.abstain_threshold,
                config.max_sentences,
            )?;
            let n = scored.trace.sentences.len();
            (scored.trace, scored.scores, n, kept.is_none())
        }
        Strategy::Rerank => {
            let r = rerank_decode(
                backend,
                need()?,
                prompt,
                context,
                config.rerank_samples,
                config.temperature,
                config.seed,
                config.max_sentences,
            )?;
            (r.best.trace, r.best.scores, 0, false)
        }
    };
    trace.id = id.to_string();
    let empty = trace.sentences.is_empty();
    Ok(DecodeResult {
        trace,
        strategy,
        config: config.clone(),
        per_sentence_scores: scores,
        stage1_sentences: stage1,
        abstained,
        empty,
    })
}

pub fn write_results(path: &Path, results: &[DecodeResult]) -> Result<()> {
    crate::jsonl::write(path, results)
}

pub fn read_results(path: &Path) -> Result<Vec<DecodeResult>> {
    crate::jsonl::read(path)
}
