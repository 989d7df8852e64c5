//! Scripted mock language model.
//!
//! A scenario is a finite state machine over a small vocabulary. Each state
//! has two next-token rows, one used when the retrieved context is in the
//! prompt and one used without it, plus a transition for every token it can
//! emit. A sentence ends at a sentence-final token or at the end-of-sequence
//! token. The machine runs across sentence boundaries, so the state at the
//! start of a sentence is found by replaying the prefix from the start state,
//! which is picked by hashing the prompt.
//!
//! Every state is marked faithful or not. A sentence is faithful when every
//! state its tokens lead into is faithful; this is the oracle label.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{argmax, sample_index, DecodeMode, GenerationBackend, MAX_SENTENCE_TOKENS};
use crate::error::{Error, Result};
use crate::seed;
use crate::trace::{FaithLabel, GenerationTrace, SentenceRecord, TokenDist, TokenRecord};

const ROW_SUM_TOL: f64 = 1e-9;
const MAX_VOCAB: usize = 64;
const DEFAULT_NEXT: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSpec {
    pub name: String,
    pub faithful: bool,
    /// Next-token row with the context in the prompt, keyed by surface.
    pub ctx: BTreeMap<String, f64>,
    /// Row without the context; omitted means identical to `ctx`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noctx: Option<BTreeMap<String, f64>>,
    /// Successor state per emitted surface; `"*"` is the fallback.
    #[serde(default)]
    pub next: BTreeMap<String, String>,
}

/// Hidden-vector rule: the final token of a sentence gets, per layer, a
/// Gaussian draw seeded by the generating call (prompt, prefix, decode mode
/// and emitted ids). Faithful sentences are centred at the origin; unfaithful
/// ones are shifted along the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub layers: Vec<u32>,
    pub dim: usize,
    pub sigma_faithful: f64,
    pub sigma_unfaithful: f64,
    pub unfaithful_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Token surfaces; the token id is the position.
    pub vocab: Vec<String>,
    /// Vocabulary entry of the end-of-sequence token. It emits no text.
    pub eos: String,
    /// Surfaces that end a sentence.
    pub sentence_final: Vec<String>,
    pub start_states: Vec<String>,
    pub states: Vec<StateSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<HiddenSpec>,
    /// Retrieved context the scenario was written for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompts: Vec<String>,
}

impl ScenarioSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<scenario>".into(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes") + "\n"
    }
}

#[derive(Debug, Clone)]
struct State {
    faithful: bool,
    ctx: Vec<f64>,
    noctx: Vec<f64>,
    next: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct MockLm {
    spec: ScenarioSpec,
    states: Vec<State>,
    state_index: BTreeMap<String, usize>,
    starts: Vec<usize>,
    eos: u32,
    sentence_final: Vec<bool>,
    seed: u64,
}

fn dense_row(state: &str, which: &str, row: &BTreeMap<String, f64>, ids: &BTreeMap<&str, usize>) -> Result<Vec<f64>> {
    let mut v = vec![0.0; ids.len()];
    for (surface, &p) in row {
        let id = *ids.get(surface.as_str()).ok_or_else(|| {
            Error::validation(format!("state {state}: {which} row names unknown token {surface:?}"))
        })?;
        if !(p.is_finite() && p >= 0.0) {
            return Err(Error::validation(format!("state {state}: {which} row has invalid probability {p}")));
        }
        v[id] = p;
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::validation(format!(
            "state {state}: {which} row sums to {total}, expected 1 within {ROW_SUM_TOL}"
        )));
    }
    Ok(v)
}

impl MockLm {
    /// Validate a scenario and build the model. `seed` feeds the hidden
    /// vectors.
    pub fn new(spec: ScenarioSpec, seed: u64) -> Result<Self> {
        if spec.vocab.len() > MAX_VOCAB {
            return Err(Error::validation(format!(
                "vocabulary has {} entries, at most {MAX_VOCAB} allowed",
                spec.vocab.len()
            )));
        }
        let mut ids = BTreeMap::new();
        for (i, s) in spec.vocab.iter().enumerate() {
            if ids.insert(s.as_str(), i).is_some() {
                return Err(Error::validation(format!("vocabulary repeats {s:?}")));
            }
        }
        let eos = *ids
            .get(spec.eos.as_str())
            .ok_or_else(|| Error::validation(format!("end-of-sequence token {:?} is not in the vocabulary", spec.eos)))?;
        let mut sentence_final = vec![false; spec.vocab.len()];
        for s in &spec.sentence_final {
            let id = *ids
                .get(s.as_str())
                .ok_or_else(|| Error::validation(format!("sentence-final token {s:?} is not in the vocabulary")))?;
            sentence_final[id] = true;
        }
        let mut state_index = BTreeMap::new();
        for (i, st) in spec.states.iter().enumerate() {
            if state_index.insert(st.name.clone(), i).is_some() {
                return Err(Error::validation(format!("state {} is defined twice", st.name)));
            }
        }
        let lookup = |from: &str, name: &str| -> Result<usize> {
            state_index
                .get(name)
                .copied()
                .ok_or_else(|| Error::validation(format!("state {from}: unknown successor state {name:?}")))
        };
        let mut states = Vec::with_capacity(spec.states.len());
        for st in &spec.states {
            let ctx = dense_row(&st.name, "ctx", &st.ctx, &ids)?;
            let noctx = match &st.noctx {
                Some(r) => dense_row(&st.name, "noctx", r, &ids)?,
                None => ctx.clone(),
            };
            let fallback = st.next.get(DEFAULT_NEXT).map(|n| lookup(&st.name, n)).transpose()?;
            let mut next = vec![None; spec.vocab.len()];
            for (id, surface) in spec.vocab.iter().enumerate() {
                next[id] = match st.next.get(surface) {
                    Some(n) => Some(lookup(&st.name, n)?),
                    None => fallback,
                };
            }
            for (surface, _) in st.next.iter().filter(|(k, _)| k.as_str() != DEFAULT_NEXT) {
                if !ids.contains_key(surface.as_str()) {
                    return Err(Error::validation(format!(
                        "state {}: transition for unknown token {surface:?}",
                        st.name
                    )));
                }
            }
            for id in 0..spec.vocab.len() {
                if id != eos && (ctx[id] > 0.0 || noctx[id] > 0.0) && next[id].is_none() {
                    return Err(Error::validation(format!(
                        "state {}: token {:?} can be emitted but has no successor",
                        st.name, spec.vocab[id]
                    )));
                }
            }
            states.push(State {
                faithful: st.faithful,
                ctx,
                noctx,
                next,
            });
        }
        if spec.start_states.is_empty() {
            return Err(Error::validation("scenario has no start state"));
        }
        let starts = spec
            .start_states
            .iter()
            .map(|s| lookup("<start>", s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(h) = &spec.hidden {
            let ok = h.dim > 0
                && h.sigma_faithful > 0.0
                && h.sigma_unfaithful > 0.0
                && h.unfaithful_shift.is_finite();
            if !ok {
                return Err(Error::validation("hidden spec needs positive dim and sigmas"));
            }
        }
        let lm = MockLm {
            spec,
            states,
            state_index,
            starts,
            eos: eos as u32,
            sentence_final,
            seed,
        };
        lm.check_termination()?;
        Ok(lm)
    }

    /// Every state must be able to reach end-of-sequence, separately under
    /// the with-context rows and under the without-context rows.
    fn check_termination(&self) -> Result<()> {
        for (which, pick) in [("ctx", 0), ("noctx", 1)] {
            let row = |s: &State| -> Vec<f64> { if pick == 0 { s.ctx.clone() } else { s.noctx.clone() } };
            let n = self.states.len();
            let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
            let mut reach = vec![false; n];
            let mut queue = VecDeque::new();
            for (i, s) in self.states.iter().enumerate() {
                if row(s)[self.eos as usize] > 0.0 {
                    reach[i] = true;
                    queue.push_back(i);
                }
                for (id, &p) in row(s).iter().enumerate() {
                    if p > 0.0 && id != self.eos as usize {
                        if let Some(j) = s.next[id] {
                            preds[j].push(i);
                        }
                    }
                }
            }
            while let Some(j) = queue.pop_front() {
                for &i in &preds[j] {
                    if !reach[i] {
                        reach[i] = true;
                        queue.push_back(i);
                    }
                }
            }
            if let Some(i) = reach.iter().position(|r| !r) {
                return Err(Error::validation(format!(
                    "state {}: end-of-sequence is unreachable under the {which} rows",
                    self.spec.states[i].name
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str, seed: u64) -> Result<Self> {
        Self::new(ScenarioSpec::from_json(text)?, seed)
    }

    pub fn from_path(path: &Path, seed: u64) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: ScenarioSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Self::new(spec, seed)
    }

    /// `builtin:<name>` for a bundled scenario, otherwise a file path.
    pub fn load(source: &str, seed: u64) -> Result<Self> {
        match source.strip_prefix("builtin:") {
            Some(name) => Self::new(super::scenarios::builtin(name)?, seed),
            None => Self::from_path(Path::new(source), seed),
        }
    }

    pub fn spec(&self) -> &ScenarioSpec {
        &self.spec
    }

    pub fn vocab_size(&self) -> usize {
        self.spec.vocab.len()
    }

    pub fn hidden_layers(&self) -> Vec<u32> {
        self.spec.hidden.as_ref().map_or_else(Vec::new, |h| h.layers.clone())
    }

    pub fn state_id(&self, name: &str) -> Option<usize> {
        self.state_index.get(name).copied()
    }

    fn start_state(&self, prompt: &str) -> usize {
        self.starts[(seed::fnv1a(prompt.as_bytes()) % self.starts.len() as u64) as usize]
    }

    fn step(&self, state: usize, token: u32) -> Result<usize> {
        self.states[state].next.get(token as usize).copied().flatten().ok_or_else(|| {
            Error::input(format!(
                "token {token} has no transition from state {}",
                self.spec.states[state].name
            ))
        })
    }

    /// State reached after replaying `prefix` from the prompt's start state.
    fn replay(&self, prompt: &str, prefix: &[SentenceRecord]) -> Result<usize> {
        let mut state = self.start_state(prompt);
        for s in prefix {
            for t in &s.tokens {
                if t.token_id == self.eos {
                    return Err(Error::input("prefix continues past the end-of-sequence token"));
                }
                state = self.step(state, t.token_id)?;
            }
        }
        Ok(state)
    }

    /// Name of the state the next sentence would start in.
    pub fn state_after(&self, prompt: &str, prefix: &[SentenceRecord]) -> Result<&str> {
        Ok(&self.spec.states[self.replay(prompt, prefix)?].name)
    }

    fn label_from(&self, mut state: usize, sentence: &SentenceRecord) -> Result<FaithLabel> {
        let mut faithful = true;
        for t in &sentence.tokens {
            if t.token_id == self.eos {
                break;
            }
            state = self.step(state, t.token_id)?;
            faithful &= self.states[state].faithful;
        }
        Ok(FaithLabel::from(faithful))
    }

    /// Oracle label of `sentence` generated after `prefix`.
    pub fn oracle_label(&self, prompt: &str, prefix: &[SentenceRecord], sentence: &SentenceRecord) -> Result<FaithLabel> {
        self.label_from(self.replay(prompt, prefix)?, sentence)
    }

    /// Oracle labels for every sentence of a trace.
    pub fn label_trace(&self, trace: &GenerationTrace) -> Result<Vec<FaithLabel>> {
        let mut state = self.start_state(&trace.prompt);
        let mut labels = Vec::with_capacity(trace.sentences.len());
        for s in &trace.sentences {
            labels.push(self.label_from(state, s)?);
            for t in &s.tokens {
                if t.token_id != self.eos {
                    state = self.step(state, t.token_id)?;
                }
            }
        }
        Ok(labels)
    }

    /// One draw from the faithful or unfaithful Gaussian, keyed on the whole
    /// call (prompt, prefix, decoding seed and emitted tokens) so repeated
    /// text in different responses gets fresh activations.
    fn hidden_vector(&self, spec: &HiddenSpec, layer: u32, key: u64, faithful: bool) -> Vec<f64> {
        let mut rng = seed::rng(seed::derive_all(self.seed, &[u64::from(layer), key]));
        let (sigma, shift) = if faithful {
            (spec.sigma_faithful, 0.0)
        } else {
            (spec.sigma_unfaithful, spec.unfaithful_shift / (spec.dim as f64).sqrt())
        };
        (0..spec.dim)
            .map(|_| shift + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

fn call_key(prompt: &str, prefix: &[SentenceRecord], mode: DecodeMode, sentence: &SentenceRecord) -> u64 {
    let mut bytes: Vec<u8> = prompt.as_bytes().to_vec();
    for p in prefix {
        bytes.push(0);
        bytes.extend(p.text.as_bytes());
    }
    bytes.push(0);
    bytes.extend(sentence.tokens.iter().flat_map(|t| t.token_id.to_le_bytes()));
    let mode_seed = match mode {
        DecodeMode::Greedy => u64::MAX,
        DecodeMode::Sample { seed, .. } => seed,
    };
    seed::derive(seed::fnv1a(&bytes), mode_seed)
}

impl GenerationBackend for MockLm {
    fn generate_sentence(
        &self,
        prompt: &str,
        context: Option<&str>,
        prefix: &[SentenceRecord],
        mode: DecodeMode,
    ) -> Result<SentenceRecord> {
        mode.validate()?;
        let start = self.replay(prompt, prefix)?;
        let mut state = start;
        let mut rng = match mode {
            DecodeMode::Sample { seed, .. } => Some(seed::rng(seed)),
            DecodeMode::Greedy => None,
        };
        let mut tokens = Vec::new();
        let mut eos = false;
        let mut truncated = false;
        loop {
            let st = &self.states[state];
            let with = if context.is_some() { &st.ctx } else { &st.noctx };
            let id = match (mode, rng.as_mut()) {
                (DecodeMode::Sample { temperature, .. }, Some(r)) => sample_index(with, temperature, r.random::<f64>()),
                _ => argmax(with),
            } as u32;
            let surface = if id == self.eos {
                String::new()
            } else {
                self.spec.vocab[id as usize].clone()
            };
            tokens.push(TokenRecord {
                token_id: id,
                surface,
                prob_with_context: with[id as usize],
                dist_with_context: TokenDist::dense(with.clone()),
                dist_without_context: TokenDist::dense(st.noctx.clone()),
            });
            if id == self.eos {
                eos = true;
                break;
            }
            state = self.step(state, id)?;
            if self.sentence_final[id as usize] {
                break;
            }
            if tokens.len() == MAX_SENTENCE_TOKENS {
                truncated = true;
                break;
            }
        }
        let mut sentence = SentenceRecord::from_tokens(prefix.len(), tokens, eos);
        sentence.truncated = truncated;
        if let Some(h) = &self.spec.hidden {
            if !sentence.is_empty_terminal() {
                let faithful = self.label_from(start, &sentence)?.is_faithful();
                let key = call_key(prompt, prefix, mode, &sentence);
                for &layer in &h.layers {
                    sentence.final_hidden.insert(layer, self.hidden_vector(h, layer, key, faithful));
                }
            }
        }
        Ok(sentence)
    }

    fn name(&self) -> String {
        format!("mock:{}", self.spec.name)
    }
}

/// Names of the states reachable from the start states; used by scenario
/// tests.
#[cfg(test)]
pub(crate) fn reachable_states(lm: &MockLm) -> std::collections::BTreeSet<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut stack: Vec<usize> = lm.starts.clone();
    while let Some(i) = stack.pop() {
        if !seen.insert(i) {
            continue;
        }
        let s = &lm.states[i];
        for (id, next) in s.next.iter().enumerate() {
            if let Some(j) = next {
                if s.ctx[id] > 0.0 || s.noctx[id] > 0.0 {
                    stack.push(*j);
                }
            }
        }
    }
    seen.into_iter().map(|i| lm.spec.states[i].name.clone()).collect()
}
