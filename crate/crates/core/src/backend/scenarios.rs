//! Bundled mock scenarios.
//!
//! `rag-demo` answers questions about a short biography. Grounded sentences
//! follow the context: their with-context rows concentrate on context words
//! while the without-context rows spread over parametric guesses.
//! Hallucinated sentences come from states whose two rows coincide, so the
//! context has no influence on them. Some of them are fluent and reuse
//! context words, so likelihood and lexical overlap alone cannot catch them.
//! Greedy decoding picks a hallucinated sentence at some position for every
//! prompt.
//!
//! `three-way` offers exactly three one-word sentences at each of three
//! positions and then ends; it is small enough to enumerate.

use std::collections::BTreeMap;

use super::mock::{HiddenSpec, ScenarioSpec, StateSpec};
use crate::error::{Error, Result};

pub const RAG_DEMO: &str = "rag-demo";
pub const THREE_WAY: &str = "three-way";

pub const RAG_DEMO_CONTEXT: &str = "Marie Curie was born in Warsaw in 1867. She studied physics in Paris. \
She won the Nobel Prize twice. She married Pierre Curie in 1895. Her daughter Irene also won a Nobel Prize.";

const EOS: &str = "<eos>";
const STOP: &str = ". ";
const SENTENCES: usize = 4;

pub fn builtin(name: &str) -> Result<ScenarioSpec> {
    match name {
        RAG_DEMO => Ok(rag_demo()),
        THREE_WAY => Ok(three_way()),
        other => Err(Error::input(format!(
            "unknown builtin scenario {other:?}; available: {RAG_DEMO}, {THREE_WAY}"
        ))),
    }
}

#[derive(Default)]
struct Builder {
    vocab: Vec<String>,
    states: Vec<StateSpec>,
}

type Row = Vec<(&'static str, f64)>;

impl Builder {
    fn new() -> Self {
        let mut b = Builder::default();
        b.vocab.push(EOS.into());
        b.vocab.push(STOP.into());
        b
    }

    fn row(&mut self, entries: &[(&str, f64)]) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        for &(s, p) in entries {
            if !self.vocab.iter().any(|v| v == s) {
                self.vocab.push(s.to_string());
            }
            *m.entry(s.to_string()).or_insert(0.0) += p;
        }
        m
    }

    fn state(&mut self, name: String, faithful: bool, ctx: &[(&str, f64)], noctx: Option<&[(&str, f64)]>, next: &[(&str, String)]) {
        let ctx = self.row(ctx);
        let noctx = noctx.map(|r| self.row(r));
        self.states.push(StateSpec {
            name,
            faithful,
            ctx,
            noctx,
            next: next.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        });
    }
}

/// One word position inside a sentence template.
struct Slot {
    word: &'static str,
    /// With-context probability of `word`; the rest goes to `slip`.
    peak: f64,
    slip: &'static str,
    /// Without-context probability of `word` for grounded templates; the
    /// rest is spread over parametric guesses.
    prior: f64,
}

struct Template {
    key: &'static str,
    faithful: bool,
    /// Grounded templates have diverging rows; the others coincide.
    grounded: bool,
    /// Words after the first one, which the sentence-start state emits.
    slots: Vec<Slot>,
}

const GUESSES: [&str; 3] = [" Vienna", " 1900", " chemistry"];

fn slot(word: &'static str, peak: f64, slip: &'static str, prior: f64) -> Slot {
    Slot { word, peak, slip, prior }
}

fn templates() -> Vec<(&'static str, Template)> {
    vec![
        (
            "Marie",
            Template {
                key: "born",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" Curie", 0.95, " Vienna", 0.4),
                    slot(" was", 0.92, " 1900", 0.3),
                    slot(" born", 0.9, " chemistry", 0.3),
                    slot(" in", 0.93, " 1900", 0.35),
                    slot(" Warsaw", 0.9, " Paris", 0.03),
                ],
            },
        ),
        (
            "Curie",
            Template {
                key: "prize",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" received", 0.8, " taught", 0.2),
                    slot(" two", 0.85, " 1900", 0.05),
                    slot(" Nobel", 0.88, " chemistry", 0.3),
                    slot(" awards", 0.8, " Vienna", 0.2),
                ],
            },
        ),
        (
            "Her",
            Template {
                key: "daughter",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" daughter", 0.85, " Vienna", 0.25),
                    slot(" Irene", 0.8, " Berlin", 0.02),
                    slot(" also", 0.82, " 1900", 0.3),
                    slot(" won", 0.88, " founded", 0.3),
                    slot(" a", 0.9, " the", 0.4),
                    slot(" Nobel", 0.9, " chemistry", 0.3),
                    slot(" Prize", 0.92, " Vienna", 0.35),
                ],
            },
        ),
        (
            "Pierre",
            Template {
                key: "taught",
                faithful: false,
                grounded: false,
                slots: vec![
                    slot(" Curie", 0.95, " Vienna", 0.0),
                    slot(" taught", 0.9, " founded", 0.0),
                    slot(" physics", 0.9, " chemistry", 0.0),
                    slot(" at", 0.93, " in", 0.0),
                    slot(" the", 0.95, " a", 0.0),
                    slot(" Sorbonne", 0.9, " Vienna", 0.0),
                ],
            },
        ),
        (
            "Later",
            Template {
                key: "berlin",
                faithful: false,
                grounded: false,
                slots: vec![
                    slot(" she", 0.7, " Vienna", 0.0),
                    slot(" founded", 0.6, " taught", 0.0),
                    slot(" an", 0.65, " the", 0.0),
                    slot(" institute", 0.6, " chemistry", 0.0),
                    slot(" in", 0.7, " at", 0.0),
                    slot(" Berlin", 0.55, " Vienna", 0.0),
                ],
            },
        ),
    ]
}

/// Templates opened by "She": the branch state picks the verb.
fn she_templates() -> Vec<(&'static str, Template)> {
    vec![
        (
            " studied",
            Template {
                key: "study",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" physics", 0.9, " chemistry", 0.3),
                    slot(" in", 0.93, " at", 0.35),
                    slot(" Paris", 0.9, " Vienna", 0.04),
                ],
            },
        ),
        (
            " married",
            Template {
                key: "married",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" Pierre", 0.92, " Vienna", 0.3),
                    slot(" Curie", 0.95, " Vienna", 0.4),
                    slot(" in", 0.93, " at", 0.35),
                    slot(" 1895", 0.9, " 1900", 0.02),
                ],
            },
        ),
    ]
}

/// Templates opened by "In". The two branches are equally likely and their
/// with-context rows have identical shapes, so only the context influence
/// tells them apart.
fn in_templates() -> Vec<(&'static str, Template)> {
    vec![
        (
            " 1867",
            Template {
                key: "swap",
                faithful: false,
                grounded: false,
                slots: vec![
                    slot(" she", 0.97, " Vienna", 0.0),
                    slot(" won", 0.96, " founded", 0.0),
                    slot(" a", 0.97, " the", 0.0),
                    slot(" Nobel", 0.96, " chemistry", 0.0),
                    slot(" Prize", 0.97, " Vienna", 0.0),
                ],
            },
        ),
        (
            " 1895",
            Template {
                key: "wed",
                faithful: true,
                grounded: true,
                slots: vec![
                    slot(" Marie", 0.97, " Vienna", 0.2),
                    slot(" Curie", 0.96, " 1900", 0.3),
                    slot(" married", 0.97, " taught", 0.15),
                    slot(" Pierre", 0.96, " Vienna", 0.25),
                    slot(" Curie", 0.97, " Vienna", 0.4),
                ],
            },
        ),
    ]
}

fn start_name(k: usize) -> String {
    format!("START_{k}")
}

fn slip_name(k: usize) -> String {
    format!("SLIP_{k}")
}

/// Rows of the states emitting each slot of `t`, then the stop state.
fn add_template(b: &mut Builder, k: usize, t: &Template) -> String {
    let after = start_name(k + 1);
    let stop = format!("{}_{k}_stop", t.key);
    let names: Vec<String> = (0..t.slots.len()).map(|i| format!("{}_{k}_{i}", t.key)).collect();
    for (i, s) in t.slots.iter().enumerate() {
        let next = names.get(i + 1).cloned().unwrap_or_else(|| stop.clone());
        let ctx: Row = vec![(s.word, s.peak), (s.slip, 1.0 - s.peak)];
        let noctx: Option<Row> = t.grounded.then(|| {
            let rest = (1.0 - s.prior) / GUESSES.len() as f64;
            let mut r: Row = vec![(s.word, s.prior)];
            r.extend(GUESSES.iter().map(|g| (*g, rest)));
            r
        });
        b.state(
            names[i].clone(),
            t.faithful,
            &ctx,
            noctx.as_deref(),
            &[(s.word, next), ("*", slip_name(k))],
        );
    }
    b.state(stop, t.faithful, &[(STOP, 1.0)], None, &[("*", after)]);
    names[0].clone()
}

/// The bundled biography scenario.
pub fn rag_demo() -> ScenarioSpec {
    let mut b = Builder::new();
    // With-context sentence-start rows. Greedy takes the first entry.
    let starts: Vec<(String, Row)> = vec![
        ("START_0a".into(), vec![("Marie", 0.4), ("In", 0.35), ("She", 0.1), ("Pierre", 0.1), ("Later", 0.05)]),
        ("START_0b".into(), vec![("In", 0.45), ("Marie", 0.25), ("She", 0.1), ("Curie", 0.1), ("Later", 0.1)]),
        (start_name(1), vec![("She", 0.42), ("In", 0.4), ("Pierre", 0.1), ("Curie", 0.04), ("Her", 0.04)]),
        (start_name(2), vec![("In", 0.5), ("She", 0.2), ("Her", 0.1), ("Pierre", 0.1), ("Later", 0.1)]),
        (start_name(3), vec![("In", 0.45), ("Curie", 0.15), ("Her", 0.15), ("Pierre", 0.15), (EOS, 0.1)]),
    ];
    let prior: Row = vec![("Pierre", 0.3), ("In", 0.25), ("Later", 0.2), ("Marie", 0.15), ("She", 0.1)];
    let main = templates();
    let branches = [("She", "SHE", she_templates()), ("In", "IN", in_templates())];
    for (name, ctx) in &starts {
        let k = if name.starts_with("START_0") { 0 } else { name[6..].parse().unwrap() };
        let mut noctx = prior.clone();
        if k == SENTENCES - 1 {
            noctx = noctx.into_iter().map(|(s, p)| (s, p * 0.9)).collect();
            noctx.push((EOS, 0.1));
        }
        let mut next: Vec<(&str, String)> = main
            .iter()
            .map(|(first, t)| (*first, format!("{}_{k}_0", t.key)))
            .collect();
        for (word, prefix, _) in &branches {
            next.push((*word, format!("{prefix}_{k}")));
        }
        b.state(name.clone(), true, ctx, Some(&noctx), &next);
    }
    for k in 0..SENTENCES {
        for (_, t) in &main {
            add_template(&mut b, k, t);
        }
        for (_, prefix, templates) in &branches {
            let mut next = Vec::new();
            for (word, t) in templates {
                next.push((*word, add_template(&mut b, k, t)));
            }
            next.push(("*", slip_name(k)));
            let (ctx, noctx): (Row, Option<Row>) = if *prefix == "SHE" {
                (
                    vec![(" studied", 0.62), (" married", 0.33), (" was", 0.05)],
                    Some(vec![(" studied", 0.25), (" married", 0.15), (" was", 0.6)]),
                )
            } else {
                (vec![(" 1867", 0.49), (" 1895", 0.47), (" 1900", 0.04)], None)
            };
            b.state(format!("{prefix}_{k}"), true, &ctx, noctx.as_deref(), &next);
        }
        b.state(slip_name(k), false, &[(STOP, 1.0)], None, &[("*", start_name(k + 1))]);
    }
    b.state(start_name(SENTENCES), true, &[(EOS, 1.0)], None, &[]);

    ScenarioSpec {
        name: RAG_DEMO.into(),
        vocab: b.vocab,
        eos: EOS.into(),
        sentence_final: vec![STOP.into()],
        start_states: vec!["START_0a".into(), "START_0b".into()],
        states: b.states,
        hidden: Some(HiddenSpec {
            layers: vec![16],
            dim: 16,
            sigma_faithful: 1.0,
            sigma_unfaithful: 1.0,
            unfaithful_shift: 0.25,
        }),
        context: Some(RAG_DEMO_CONTEXT.into()),
        prompts: [
            "Who was Marie Curie?",
            "Tell me about Marie Curie.",
            "Summarize the life of Marie Curie.",
            "Write a short biography of Marie Curie.",
            "What is Marie Curie known for?",
            "Give an overview of Marie Curie.",
            "Describe the career of Marie Curie.",
            "What do we know about Marie Curie?",
        ]
        .map(String::from)
        .to_vec(),
    }
}

/// Words offered at each position of the three-way scenario, most likely
/// first.
pub const THREE_WAY_WORDS: [[&str; 3]; 3] = [
    ["Alpha", "Bravo", "Charlie"],
    ["Delta", "Echo", "Foxtrot"],
    ["Golf", "Hotel", "India"],
];

/// Three positions, three one-word sentences each, then end of sequence.
pub fn three_way() -> ScenarioSpec {
    let mut b = Builder::new();
    let probs = [0.5, 0.3, 0.2];
    for (k, words) in THREE_WAY_WORDS.iter().enumerate() {
        let ctx: Row = words.iter().zip(probs).map(|(w, p)| (*w, p)).collect();
        let noctx: Row = words.iter().map(|w| (*w, 1.0 / 3.0)).collect();
        b.state(start_name(k), true, &ctx, Some(&noctx), &[("*", format!("W_{k}"))]);
        b.state(format!("W_{k}"), true, &[(STOP, 1.0)], None, &[("*", start_name(k + 1))]);
    }
    b.state(start_name(THREE_WAY_WORDS.len()), true, &[(EOS, 1.0)], None, &[]);
    ScenarioSpec {
        name: THREE_WAY.into(),
        vocab: b.vocab,
        eos: EOS.into(),
        sentence_final: vec![STOP.into()],
        start_states: vec![start_name(0)],
        states: b.states,
        hidden: None,
        context: Some("Alpha Delta Golf.".into()),
        prompts: vec!["Spell three words.".into()],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::reachable_states;
    use crate::backend::{check_backend_contract, DecodeMode, GenerationBackend, MockLm};
    use crate::trace::SentenceRecord;

    fn greedy(lm: &MockLm, prompt: &str) -> Vec<SentenceRecord> {
        let mut out = Vec::new();
        loop {
            let s = lm
                .generate_sentence(prompt, Some(RAG_DEMO_CONTEXT), &out, DecodeMode::Greedy)
                .unwrap();
            if s.is_empty_terminal() {
                return out;
            }
            out.push(s);
        }
    }

    #[test]
    fn rag_demo_is_valid_and_small() {
        let lm = MockLm::new(rag_demo(), 0).unwrap();
        assert!(lm.vocab_size() <= 64, "{}", lm.vocab_size());
        let reach = reachable_states(&lm);
        assert!(reach.contains("SLIP_3") && reach.contains("swap_0_0"));
    }

    #[test]
    fn greedy_hits_a_hallucination_for_every_prompt() {
        let lm = MockLm::new(rag_demo(), 0).unwrap();
        let mut starts = std::collections::BTreeSet::new();
        for p in &lm.spec().prompts {
            starts.insert(lm.state_after(p, &[]).unwrap().to_string());
            let sentences = greedy(&lm, p);
            assert_eq!(sentences.len(), 4);
            let mut t = crate::trace::GenerationTrace::new("x", p.clone(), RAG_DEMO_CONTEXT);
            t.sentences = sentences;
            let labels = lm.label_trace(&t).unwrap();
            assert!(labels.iter().any(|l| !l.is_faithful()), "{p}: {}", t.response_text());
            assert!(labels.iter().any(|l| l.is_faithful()));
        }
        assert_eq!(starts.len(), 2, "prompts should cover both start states");
    }

    #[test]
    fn greedy_text_reads_as_sentences() {
        let lm = MockLm::new(rag_demo(), 0).unwrap();
        let text: String = greedy(&lm, "Who was Marie Curie?").iter().map(|s| s.text.clone()).collect();
        assert!(text.contains("In 1867 she won a Nobel Prize. She studied physics in Paris. "), "{text}");
    }

    #[test]
    fn contract_suite_on_bundled_scenarios() {
        for spec in [rag_demo(), three_way()] {
            let lm = MockLm::new(spec, 1).unwrap();
            check_backend_contract(&lm, "Who was Marie Curie?", Some(RAG_DEMO_CONTEXT), 6).unwrap();
        }
    }

    #[test]
    fn bundled_file_matches_builder() {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/rag-demo.json");
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(ScenarioSpec::from_json(&text).unwrap(), rag_demo());
    }

    #[test]
    fn unknown_builtin_lists_choices() {
        let err = builtin("nope").unwrap_err().to_string();
        assert!(err.contains(RAG_DEMO) && err.contains(THREE_WAY));
    }
}
