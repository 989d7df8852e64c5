//! Deterministic rule-based sentence segmentation.

use serde::{Deserialize, Serialize};

/// Half-open interval `[start, end)` of character (Unicode scalar) offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        CharSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Slice `text` by this span's character offsets.
    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        let byte = |ci: usize| text.char_indices().nth(ci).map_or(text.len(), |(b, _)| b);
        &text[byte(self.start)..byte(self.end)]
    }
}

const ABBREVIATIONS: &[&str] = &["Mr.", "Mrs.", "Dr.", "e.g.", "i.e.", "etc."];

/// Split `text` into sentence spans that partition it exactly.
///
/// A boundary falls after `.`, `!` or `?` when the terminator is followed by
/// whitespace and then an uppercase letter; the whitespace stays with the
/// sentence before the boundary. A period closing one of a fixed set of
/// abbreviations (`Mr.`, `Mrs.`, `Dr.`, `e.g.`, `i.e.`, `etc.`, or a single
/// capital letter such as `J.`) never ends a sentence. The last span runs to
/// the end of the text, so trailing whitespace attaches to it.
pub fn segment_sentences(text: &str) -> Vec<CharSpan> {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut spans = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < n {
        if matches!(chars[i], '.' | '!' | '?') && !(chars[i] == '.' && is_abbreviation(&chars, i)) {
            let mut k = i + 1;
            if k < n && chars[k].is_whitespace() {
                while k < n && chars[k].is_whitespace() {
                    k += 1;
                }
                if k < n && chars[k].is_uppercase() {
                    spans.push(CharSpan::new(start, k));
                    start = k;
                    i = k;
                    continue;
                }
            }
        }
        i += 1;
    }
    if start < n {
        spans.push(CharSpan::new(start, n));
    }
    spans
}

fn is_abbreviation(chars: &[char], dot: usize) -> bool {
    let mut b = dot;
    while b > 0 && !chars[b - 1].is_whitespace() {
        b -= 1;
    }
    let word: String = chars[b..=dot]
        .iter()
        .skip_while(|c| matches!(c, '(' | '[' | '"' | '\'' | '\u{201C}' | '\u{2018}'))
        .collect();
    if ABBREVIATIONS.contains(&word.as_str()) {
        return true;
    }
    let mut it = word.chars();
    matches!((it.next(), it.next(), it.next()), (Some(c), Some('.'), None) if c.is_uppercase())
}
