//! Sentence-granularity generation with dual token distributions.
//!
//! A backend produces one sentence per call. Every emitted token carries the
//! next-token distribution computed with the retrieved context in the prompt
//! and the one computed without it, over the same generation prefix.

mod http;
mod mock;
pub mod scenarios;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{SentenceRecord, TOKEN_PROB_TOL};

pub use http::{
    HttpBackend, SegmentRequest, SegmentResponse, WireMode, WireToken, BACKEND_URL_ENV, DEFAULT_TOP_K, SEGMENT_PATH,
};
pub use mock::{HiddenSpec, MockLm, ScenarioSpec, StateSpec};

/// Per-sentence token cap; a sentence reaching it is flagged truncated.
pub const MAX_SENTENCE_TOKENS: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl DecodeMode {
    pub fn validate(&self) -> Result<()> {
        if let DecodeMode::Sample { temperature, .. } = self {
            if !(*temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::input(format!("sampling temperature must be positive, got {temperature}")));
            }
        }
        Ok(())
    }
}

pub trait GenerationBackend: Send + Sync {
    /// Generate the next sentence after `prefix`. Without a context, both
    /// recorded distributions are the context-free ones.
    fn generate_sentence(
        &self,
        prompt: &str,
        context: Option<&str>,
        prefix: &[SentenceRecord],
        mode: DecodeMode,
    ) -> Result<SentenceRecord>;

    /// Whether `generate_sentence` may be called from several threads at once.
    fn allows_concurrent(&self) -> bool {
        true
    }

    fn name(&self) -> String;
}

impl<B: GenerationBackend + ?Sized> GenerationBackend for &B {
    fn generate_sentence(
        &self,
        prompt: &str,
        context: Option<&str>,
        prefix: &[SentenceRecord],
        mode: DecodeMode,
    ) -> Result<SentenceRecord> {
        (**self).generate_sentence(prompt, context, prefix, mode)
    }

    fn allows_concurrent(&self) -> bool {
        (**self).allows_concurrent()
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Draw an index from `probs` sharpened or flattened by `temperature`
/// (`p^(1/T)`, renormalised), using one uniform draw from `u01`.
pub fn sample_index(probs: &[f64], temperature: f64, u01: f64) -> usize {
    let w: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        probs.iter().map(|&p| if p > 0.0 { p.powf(1.0 / temperature) } else { 0.0 }).collect()
    };
    let total: f64 = w.iter().sum();
    let target = u01 * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in w.iter().enumerate() {
        if x <= 0.0 {
            continue;
        }
        acc += x;
        last = i;
        if target < acc {
            return i;
        }
    }
    last
}

/// Seed for sentence `index` of a response sampled with `response_seed`.
pub fn sentence_seed(response_seed: u64, index: usize) -> u64 {
    seed::derive(response_seed, index as u64)
}

/// Check one backend call against the contract: index, token invariants, and
/// for greedy calls that each token is the argmax of its recorded
/// with-context distribution.
pub fn check_sentence_contract(sentence: &SentenceRecord, prefix_len: usize, mode: DecodeMode) -> Result<()> {
    if sentence.index != prefix_len {
        return Err(Error::validation(format!(
            "sentence index {} after a prefix of {prefix_len}",
            sentence.index
        )));
    }
    sentence.validate()?;
    if sentence.tokens.len() > MAX_SENTENCE_TOKENS {
        return Err(Error::validation(format!("sentence has {} tokens", sentence.tokens.len())));
    }
    if mode == DecodeMode::Greedy {
        for t in &sentence.tokens {
            let top = match &t.dist_with_context {
                crate::trace::TokenDist::Dense { dense } => dense[argmax(dense)],
                crate::trace::TokenDist::TopK { topk, .. } => topk.iter().map(|e| e.1).fold(0.0, f64::max),
            };
            if t.prob_with_context + TOKEN_PROB_TOL < top {
                return Err(Error::validation(format!(
                    "greedy token {} has probability {} below the maximum {top}",
                    t.token_id, t.prob_with_context
                )));
            }
        }
    }
    Ok(())
}

/// Backend contract suite: repeated calls with the same inputs agree, every
/// record satisfies the token invariants, and greedy tokens are argmaxes.
/// Generates up to `sentences` sentences greedily and with one sampled seed.
pub fn check_backend_contract(
    backend: &dyn GenerationBackend,
    prompt: &str,
    context: Option<&str>,
    sentences: usize,
) -> Result<()> {
    for mode in [DecodeMode::Greedy, DecodeMode::Sample { temperature: 1.0, seed: 17 }] {
        let mut prefix = Vec::new();
        for _ in 0..sentences {
            let a = backend.generate_sentence(prompt, context, &prefix, mode)?;
            let b = backend.generate_sentence(prompt, context, &prefix, mode)?;
            if a != b {
                return Err(Error::validation(format!(
                    "backend {} is not deterministic at sentence {}",
                    backend.name(),
                    prefix.len()
                )));
            }
            check_sentence_contract(&a, prefix.len(), mode)?;
            if context.is_none() {
                for t in &a.tokens {
                    if t.dist_with_context != t.dist_without_context {
                        return Err(Error::validation("without a context the two distributions must coincide"));
                    }
                }
            }
            if a.is_eos_terminal {
                break;
            }
            prefix.push(a);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn sampling_covers_support_in_order() {
        let p = [0.25, 0.0, 0.75];
        assert_eq!(sample_index(&p, 1.0, 0.0), 0);
        assert_eq!(sample_index(&p, 1.0, 0.2499), 0);
        assert_eq!(sample_index(&p, 1.0, 0.25), 2);
        assert_eq!(sample_index(&p, 1.0, 0.999_999), 2);
    }

    #[test]
    fn low_temperature_sharpens() {
        // p^(1/0.5) = [0.0625, 0.5625], normalised [0.1, 0.9]
        let p = [0.25, 0.75];
        assert_eq!(sample_index(&p, 0.5, 0.09), 0);
        assert_eq!(sample_index(&p, 0.5, 0.11), 1);
    }

    #[test]
    fn temperature_must_be_positive() {
        assert!(DecodeMode::Sample { temperature: 0.0, seed: 1 }.validate().is_err());
        assert!(DecodeMode::Greedy.validate().is_ok());
    }
}
