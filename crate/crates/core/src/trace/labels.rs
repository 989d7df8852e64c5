//! Sentence-level gold labels from span or proposition annotations.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::text::word_set;
use crate::trace::{CharSpan, FaithLabel, PropositionAnnotation, SentenceRecord, SpanAnnotation};

/// Label each sentence span unfaithful iff it shares at least one character
/// with an unfaithful span. This covers both "sentence contains a span" and
/// "span contains the sentence", and also marks partial overlaps.
///
/// The text length is taken from the sentence spans, which partition the
/// text; annotations beyond it are an input error.
pub fn map_spans_to_labels(
    sentence_spans: &[CharSpan],
    unfaithful_spans: &[SpanAnnotation],
) -> Result<Vec<FaithLabel>> {
    let text_len = sentence_spans.iter().map(|s| s.end).max().unwrap_or(0);
    for s in sentence_spans {
        if s.start > s.end {
            return Err(Error::input(format!(
                "sentence span ({}, {}) is inverted",
                s.start, s.end
            )));
        }
    }
    for a in unfaithful_spans {
        a.validate(text_len)?;
    }
    Ok(sentence_spans
        .iter()
        .map(|s| {
            let hit = unfaithful_spans
                .iter()
                .any(|a| s.start.max(a.start) < s.end.min(a.end));
            FaithLabel::from(!hit)
        })
        .collect())
}

/// Labels derived from propositions, plus how many propositions had no usable
/// words and were skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PropositionMapping {
    pub labels: Vec<FaithLabel>,
    pub skipped: usize,
}

/// Map unfaithful propositions back onto sentences by token recall.
///
/// Every sentence starts faithful. Each unfaithful proposition marks the one
/// sentence containing the largest share of the proposition's distinct words
/// (lowercased, punctuation stripped); ties go to the earliest sentence.
pub fn map_propositions_to_labels(
    propositions: &[PropositionAnnotation],
    sentences: &[SentenceRecord],
) -> Result<PropositionMapping> {
    let texts: Vec<&str> = sentences.iter().map(|s| s.text.as_str()).collect();
    map_propositions_to_texts(propositions, &texts)
}

pub(crate) fn map_propositions_to_texts(
    propositions: &[PropositionAnnotation],
    sentences: &[&str],
) -> Result<PropositionMapping> {
    if sentences.is_empty() {
        return Err(Error::input("proposition mapping needs at least one sentence"));
    }
    let sentence_words: Vec<BTreeSet<String>> = sentences.iter().map(|s| word_set(s)).collect();
    let mut labels = vec![FaithLabel::Faithful; sentences.len()];
    let mut skipped = 0;
    for prop in propositions.iter().filter(|p| !p.faithful) {
        let words = word_set(&prop.text);
        if words.is_empty() {
            skipped += 1;
            continue;
        }
        // Compare hit counts rather than ratios: the denominator is shared.
        let mut best = 0;
        let mut best_hits = 0;
        for (i, sw) in sentence_words.iter().enumerate() {
            let hits = words.intersection(sw).count();
            if hits > best_hits {
                best = i;
                best_hits = hits;
            }
        }
        labels[best] = FaithLabel::Unfaithful;
    }
    Ok(PropositionMapping { labels, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use FaithLabel::{Faithful as F, Unfaithful as U};

    fn sp(v: &[(usize, usize)]) -> Vec<CharSpan> {
        v.iter().map(|&(s, e)| CharSpan::new(s, e)).collect()
    }

    fn ann(v: &[(usize, usize)]) -> Vec<SpanAnnotation> {
        v.iter().map(|&(s, e)| SpanAnnotation::new(s, e)).collect()
    }

    fn prop(text: &str, faithful: bool) -> PropositionAnnotation {
        PropositionAnnotation {
            text: text.into(),
            faithful,
        }
    }

    #[test]
    fn no_annotations_means_all_faithful() {
        let l = map_spans_to_labels(&sp(&[(0, 10), (10, 20)]), &[]).unwrap();
        assert_eq!(l, vec![F, F]);
    }

    #[test]
    fn contained_span_marks_its_sentence() {
        let l = map_spans_to_labels(&sp(&[(0, 10), (10, 20)]), &ann(&[(12, 15)])).unwrap();
        assert_eq!(l, vec![F, U]);
    }

    #[test]
    fn straddling_span_marks_both() {
        let l = map_spans_to_labels(&sp(&[(0, 10), (10, 20)]), &ann(&[(5, 15)])).unwrap();
        assert_eq!(l, vec![U, U]);
    }

    #[test]
    fn touching_endpoints_do_not_overlap() {
        let l = map_spans_to_labels(&sp(&[(0, 10), (10, 20)]), &ann(&[(10, 12)])).unwrap();
        assert_eq!(l, vec![F, U]);
    }

    #[test]
    fn out_of_bounds_span_is_input_error() {
        let err = map_spans_to_labels(&sp(&[(0, 10)]), &ann(&[(5, 11)])).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(map_spans_to_labels(&sp(&[(0, 10)]), &ann(&[(4, 4)])).is_err());
    }

    #[test]
    fn faithful_propositions_change_nothing() {
        let m = map_propositions_to_texts(&[prop("born in Rome", true)], &["a b", "c"]).unwrap();
        assert_eq!(m.labels, vec![F, F]);
    }

    #[test]
    fn recall_picks_the_best_sentence() {
        let m = map_propositions_to_texts(
            &[prop("born in Rome", false)],
            &["born in 1950 in Rome", "won a prize"],
        )
        .unwrap();
        assert_eq!(m.labels, vec![U, F]);
    }

    #[test]
    fn recall_tie_goes_to_earliest() {
        let m = map_propositions_to_texts(&[prop("won prize", false)], &["he won", "a prize"]).unwrap();
        assert_eq!(m.labels, vec![U, F]);
    }

    #[test]
    fn punctuation_only_proposition_is_skipped() {
        let m = map_propositions_to_texts(&[prop(" -- ", false)], &["x"]).unwrap();
        assert_eq!(m, PropositionMapping { labels: vec![F], skipped: 1 });
    }

    #[test]
    fn no_sentences_is_error() {
        assert!(map_propositions_to_texts(&[], &[]).is_err());
    }

    // Brute-force oracles -------------------------------------------------

    fn overlap_oracle(sent: &[(usize, usize)], spans: &[(usize, usize)]) -> Vec<FaithLabel> {
        let n = sent.iter().map(|s| s.1).max().unwrap_or(0);
        let mut bad = vec![false; n];
        for &(s, e) in spans {
            for c in bad.iter_mut().take(e).skip(s) {
                *c = true;
            }
        }
        sent.iter()
            .map(|&(s, e)| FaithLabel::from(!(s..e).any(|c| bad[c])))
            .collect()
    }

    fn recall_oracle(props: &[(String, bool)], sents: &[String]) -> Vec<FaithLabel> {
        let norm = |t: &str| -> Vec<String> {
            let mut v: Vec<String> = t
                .split_whitespace()
                .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
                .filter(|w| !w.is_empty())
                .collect();
            v.sort();
            v.dedup();
            v
        };
        let mut out = vec![F; sents.len()];
        for (text, faithful) in props {
            if *faithful {
                continue;
            }
            let pw = norm(text);
            if pw.is_empty() {
                continue;
            }
            let recalls: Vec<f64> = sents
                .iter()
                .map(|s| {
                    let sw = norm(s);
                    pw.iter().filter(|w| sw.contains(w)).count() as f64 / pw.len() as f64
                })
                .collect();
            let max = recalls.iter().cloned().fold(f64::MIN, f64::max);
            let first = recalls.iter().position(|&r| r == max).unwrap();
            out[first] = U;
        }
        out
    }

    fn layout() -> impl Strategy<Value = (Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        (prop::collection::vec(1usize..8, 1..6), prop::collection::vec((0usize..40, 1usize..10), 0..4))
            .prop_map(|(lens, raw)| {
                let mut sents = Vec::new();
                let mut pos = 0;
                for l in lens {
                    sents.push((pos, pos + l));
                    pos += l;
                }
                let spans = raw
                    .into_iter()
                    .map(|(s, w)| {
                        let s = s % pos;
                        (s, (s + w).min(pos).max(s + 1))
                    })
                    .collect();
                (sents, spans)
            })
    }

    const WORDS: &[&str] = &["a", "born", "Rome", "rome.", "won", "prize", "in", "1950", "the", "--"];

    fn corpus() -> impl Strategy<Value = (Vec<(String, bool)>, Vec<String>)> {
        let sentence = prop::collection::vec(prop::sample::select(WORDS), 1..6).prop_map(|w| w.join(" "));
        let props = prop::collection::vec((sentence.clone(), any::<bool>()), 0..=5);
        (props, prop::collection::vec(sentence, 1..=5))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn spans_match_character_oracle((sents, spans) in layout()) {
            let got = map_spans_to_labels(&sp(&sents), &ann(&spans)).unwrap();
            prop_assert_eq!(got, overlap_oracle(&sents, &spans));
        }

        #[test]
        fn propositions_match_recall_oracle((props, sents) in corpus()) {
            let annotations: Vec<_> = props.iter().map(|(t, f)| prop(t, *f)).collect();
            let refs: Vec<&str> = sents.iter().map(|s| s.as_str()).collect();
            let got = map_propositions_to_texts(&annotations, &refs).unwrap();
            prop_assert_eq!(got.labels, recall_oracle(&props, &sents));
        }
    }
}
