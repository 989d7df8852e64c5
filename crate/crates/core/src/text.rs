//! Word normalisation shared by label mapping and the lexical alignment
//! scorer.

use std::collections::BTreeSet;

/// Lowercase, split on whitespace and strip leading/trailing punctuation.
/// Words that are pure punctuation disappear.
pub fn normalized_words(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| c.is_ascii_punctuation() || is_unicode_punct(c))
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn word_set(text: &str) -> BTreeSet<String> {
    normalized_words(text).into_iter().collect()
}

fn is_unicode_punct(c: char) -> bool {
    matches!(
        c,
        '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}' | '\u{00AB}' | '\u{00BB}'
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_edges_but_not_inner_punctuation() {
        assert_eq!(
            normalized_words("  \"Born\" in Rome, (e.g. 1950). -- "),
            vec!["born", "in", "rome", "e.g", "1950"]
        );
    }
}
