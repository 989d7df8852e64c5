//! Decoding traces: the data every other module consumes.
//!
//! A [`GenerationTrace`] is one response to one prompt: the prompt, the
//! retrieved context, and the decoded sentences. Every emitted token carries
//! two next-token distributions, one computed with the retrieved context in
//! the prompt and one computed without it, over the same generation prefix.

mod io;
mod labels;
mod segment;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{parse_traces, read_traces, validate_hidden_dims, write_traces};
pub use labels::{map_propositions_to_labels, map_spans_to_labels, PropositionMapping};
pub use segment::{segment_sentences, CharSpan};

/// Tolerance on the total mass of a distribution.
pub const DIST_SUM_TOL: f64 = 1e-6;
/// Tolerance between `p_ctx` and the dense distribution entry it indexes.
pub const TOKEN_PROB_TOL: f64 = 1e-9;

/// A next-token distribution, either over the whole vocabulary or as the
/// top-k entries plus one bucket holding the remaining mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TokenDist {
    Dense { dense: Vec<f64> },
    TopK { topk: Vec<(u32, f64)>, residual: f64 },
}

impl TokenDist {
    pub fn dense(probs: Vec<f64>) -> Self {
        TokenDist::Dense { dense: probs }
    }

    /// Build a top-k distribution; the residual is whatever mass the entries
    /// leave over (clamped at zero against rounding).
    pub fn top_k(entries: Vec<(u32, f64)>) -> Self {
        let mass: f64 = entries.iter().map(|e| e.1).sum();
        TokenDist::TopK {
            topk: entries,
            residual: (1.0 - mass).max(0.0),
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, TokenDist::Dense { .. })
    }

    pub fn total(&self) -> f64 {
        match self {
            TokenDist::Dense { dense } => dense.iter().sum(),
            TokenDist::TopK { topk, residual } => topk.iter().map(|e| e.1).sum::<f64>() + residual,
        }
    }

    /// Probability of `token_id`, if the representation records it.
    pub fn prob_of(&self, token_id: u32) -> Option<f64> {
        match self {
            TokenDist::Dense { dense } => dense.get(token_id as usize).copied(),
            TokenDist::TopK { topk, .. } => topk.iter().find(|e| e.0 == token_id).map(|e| e.1),
        }
    }

    /// Masses of the distinct outcomes. For a top-k distribution the residual
    /// bucket counts as one outcome.
    pub fn outcomes(&self) -> Vec<f64> {
        match self {
            TokenDist::Dense { dense } => dense.clone(),
            TokenDist::TopK { topk, residual } => {
                let mut v: Vec<f64> = topk.iter().map(|e| e.1).collect();
                v.push(*residual);
                v
            }
        }
    }

    /// True when both distributions use the same support representation:
    /// both dense of equal length, or both top-k with equal k.
    pub fn same_shape(&self, other: &TokenDist) -> bool {
        match (self, other) {
            (TokenDist::Dense { dense: a }, TokenDist::Dense { dense: b }) => a.len() == b.len(),
            (TokenDist::TopK { topk: a, .. }, TokenDist::TopK { topk: b, .. }) => a.len() == b.len(),
            _ => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let entries: Vec<f64> = self.outcomes();
        if entries.is_empty() || (self.is_dense() && entries.len() < 2) {
            return Err(Error::validation("distribution has fewer than two outcomes"));
        }
        if let Some(bad) = entries.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::validation(format!(
                "distribution entry {bad} is negative or non-finite"
            )));
        }
        if let TokenDist::TopK { topk, .. } = self {
            let mut ids: Vec<u32> = topk.iter().map(|e| e.0).collect();
            ids.sort_unstable();
            if ids.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::validation("top-k distribution repeats a token id"));
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > DIST_SUM_TOL {
            return Err(Error::validation(format!(
                "distribution sums to {total}, expected 1 within {DIST_SUM_TOL}"
            )));
        }
        Ok(())
    }

    /// Lay two distributions out over a shared outcome space so they can be
    /// compared position by position. Dense distributions are used as is.
    /// Top-k distributions are laid out over the union of both top-k supports
    /// plus one residual bucket; an id missing from one side's top-k gets 0
    /// there, so that side's residual keeps all of its unlisted mass.
    pub fn aligned(&self, other: &TokenDist) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.same_shape(other) {
            return Err(Error::validation(
                "distributions use different support representations",
            ));
        }
        match (self, other) {
            (TokenDist::Dense { dense: a }, TokenDist::Dense { dense: b }) => Ok((a.clone(), b.clone())),
            (
                TokenDist::TopK { topk: a, residual: ra },
                TokenDist::TopK { topk: b, residual: rb },
            ) => {
                let mut ids: Vec<u32> = a.iter().chain(b.iter()).map(|e| e.0).collect();
                ids.sort_unstable();
                ids.dedup();
                let lookup = |entries: &[(u32, f64)], id: u32| {
                    entries.iter().find(|e| e.0 == id).map_or(0.0, |e| e.1)
                };
                let mut pa: Vec<f64> = ids.iter().map(|&id| lookup(a, id)).collect();
                let mut pb: Vec<f64> = ids.iter().map(|&id| lookup(b, id)).collect();
                pa.push(*ra);
                pb.push(*rb);
                Ok((pa, pb))
            }
            _ => unreachable!("same_shape checked"),
        }
    }
}

/// One emitted token with its dual distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub token_id: u32,
    pub surface: String,
    #[serde(rename = "p_ctx")]
    pub prob_with_context: f64,
    #[serde(rename = "dist_ctx")]
    pub dist_with_context: TokenDist,
    #[serde(rename = "dist_noctx")]
    pub dist_without_context: TokenDist,
}

impl TokenRecord {
    pub fn validate(&self) -> Result<()> {
        let p = self.prob_with_context;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::validation(format!(
                "token {} has probability {p} outside [0, 1]",
                self.token_id
            )));
        }
        self.dist_with_context
            .validate()
            .map_err(|e| prefix_err("with-context distribution", e))?;
        self.dist_without_context
            .validate()
            .map_err(|e| prefix_err("without-context distribution", e))?;
        if !self.dist_with_context.same_shape(&self.dist_without_context) {
            return Err(Error::validation(format!(
                "token {}: with- and without-context distributions use different supports",
                self.token_id
            )));
        }
        if let TokenDist::Dense { dense } = &self.dist_with_context {
            let entry = dense.get(self.token_id as usize).ok_or_else(|| {
                Error::validation(format!(
                    "token id {} outside dense vocabulary of {}",
                    self.token_id,
                    dense.len()
                ))
            })?;
            if (entry - p).abs() > TOKEN_PROB_TOL {
                return Err(Error::validation(format!(
                    "token {}: p_ctx {p} disagrees with distribution entry {entry}",
                    self.token_id
                )));
            }
        }
        Ok(())
    }
}

fn prefix_err(what: &str, e: Error) -> Error {
    match e {
        Error::Validation(m) => Error::Validation(format!("{what}: {m}")),
        other => other,
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// One decoded sentence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub index: usize,
    pub text: String,
    pub is_eos_terminal: bool,
    pub tokens: Vec<TokenRecord>,
    /// Activation of the sentence's last token, keyed by layer id.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub final_hidden: BTreeMap<u32, Vec<f64>>,
    /// Set when the backend hit its per-sentence token cap before a boundary.
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
}

impl SentenceRecord {
    /// Build a record whose text is the concatenation of the token surfaces.
    pub fn from_tokens(index: usize, tokens: Vec<TokenRecord>, is_eos_terminal: bool) -> Self {
        let text = tokens.iter().map(|t| t.surface.as_str()).collect();
        SentenceRecord {
            index,
            text,
            is_eos_terminal,
            tokens,
            final_hidden: BTreeMap::new(),
            truncated: false,
        }
    }

    /// An end-of-sequence signal with no content: the backend stopped before
    /// producing any visible text. Decoders treat it as "finished" rather than
    /// as a sentence.
    pub fn is_empty_terminal(&self) -> bool {
        self.is_eos_terminal && self.text.trim().is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let joined: String = self.tokens.iter().map(|t| t.surface.as_str()).collect();
        if joined != self.text {
            return Err(Error::validation(format!(
                "sentence {}: token surfaces do not concatenate to the sentence text",
                self.index
            )));
        }
        for t in &self.tokens {
            t.validate()
                .map_err(|e| prefix_err(&format!("sentence {}", self.index), e))?;
        }
        for (layer, v) in &self.final_hidden {
            if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::validation(format!(
                    "sentence {}: hidden vector for layer {layer} is empty or non-finite",
                    self.index
                )));
            }
        }
        Ok(())
    }
}

/// Binary faithfulness label; serialized as `1` (faithful) or `0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum FaithLabel {
    Unfaithful,
    Faithful,
}

impl FaithLabel {
    pub fn is_faithful(self) -> bool {
        self == FaithLabel::Faithful
    }

    pub fn as_f64(self) -> f64 {
        if self.is_faithful() {
            1.0
        } else {
            0.0
        }
    }
}

impl From<bool> for FaithLabel {
    fn from(faithful: bool) -> Self {
        if faithful {
            FaithLabel::Faithful
        } else {
            FaithLabel::Unfaithful
        }
    }
}

impl From<FaithLabel> for u8 {
    fn from(l: FaithLabel) -> u8 {
        l.is_faithful() as u8
    }
}

impl TryFrom<u8> for FaithLabel {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(FaithLabel::Unfaithful),
            1 => Ok(FaithLabel::Faithful),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// A prompt, its retrieved context, and the decoded response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub id: String,
    pub prompt: String,
    pub context: String,
    pub sentences: Vec<SentenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_labels: Option<Vec<FaithLabel>>,
}

impl GenerationTrace {
    pub fn new(id: impl Into<String>, prompt: impl Into<String>, context: impl Into<String>) -> Self {
        GenerationTrace {
            id: id.into(),
            prompt: prompt.into(),
            context: context.into(),
            sentences: Vec::new(),
            gold_labels: None,
        }
    }

    /// Full response text.
    pub fn response_text(&self) -> String {
        self.sentences.iter().map(|s| s.text.as_str()).collect()
    }

    /// Benchmark tag: the part of the id before the first `:`, or `default`.
    pub fn tag(&self) -> &str {
        tag_of(&self.id)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sentences.iter().enumerate() {
            if s.index != i {
                return Err(Error::validation(format!(
                    "sentence at position {i} carries index {}",
                    s.index
                )));
            }
            s.validate()?;
        }
        if let Some(labels) = &self.gold_labels {
            if labels.len() != self.sentences.len() {
                return Err(Error::validation(format!(
                    "{} gold labels for {} sentences",
                    labels.len(),
                    self.sentences.len()
                )));
            }
        }
        Ok(())
    }
}

pub fn tag_of(id: &str) -> &str {
    match id.split_once(':') {
        Some((tag, _)) if !tag.is_empty() => tag,
        _ => "default",
    }
}

/// Character interval `[start, end)` marked unfaithful by an annotator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanAnnotation {
    pub start: usize,
    pub end: usize,
}

impl SpanAnnotation {
    pub fn new(start: usize, end: usize) -> Self {
        SpanAnnotation { start, end }
    }

    pub fn validate(&self, text_len: usize) -> Result<()> {
        if self.start >= self.end || self.end > text_len {
            return Err(Error::input(format!(
                "span ({}, {}) is empty or outside text of length {text_len}",
                self.start, self.end
            )));
        }
        Ok(())
    }
}

/// A decontextualized proposition with its faithfulness judgment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropositionAnnotation {
    pub text: String,
    pub faithful: bool,
}
