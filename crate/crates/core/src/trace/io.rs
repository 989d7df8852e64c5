use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};
use crate::jsonl;
use crate::trace::GenerationTrace;

/// Write traces as JSONL, one trace per line. Every trace is validated first;
/// nothing is written if any trace is invalid.
pub fn write_traces(path: &Path, traces: &[GenerationTrace]) -> Result<()> {
    for t in traces {
        t.validate()
            .map_err(|e| Error::validation(format!("trace {}: {e}", t.id)))?;
    }
    validate_hidden_dims(traces)?;
    jsonl::write(path, traces)
}

/// Read a JSONL trace file. Malformed lines and invariant violations are
/// reported with their line number.
pub fn read_traces(path: &Path) -> Result<Vec<GenerationTrace>> {
    let mut dims = BTreeMap::new();
    jsonl::read_with(path, |t: &GenerationTrace| check(t, &mut dims))
}

pub fn parse_traces<R: BufRead>(source: &str, reader: R) -> Result<Vec<GenerationTrace>> {
    let mut dims = BTreeMap::new();
    jsonl::parse_with(source, reader, &mut |t: &GenerationTrace| check(t, &mut dims))
}

fn check(t: &GenerationTrace, dims: &mut BTreeMap<u32, usize>) -> Result<()> {
    t.validate()?;
    record_dims(t, dims)
}

/// Every hidden vector recorded for a given layer must have the same
/// dimension across the corpus.
pub fn validate_hidden_dims(traces: &[GenerationTrace]) -> Result<()> {
    let mut dims = BTreeMap::new();
    traces.iter().try_for_each(|t| record_dims(t, &mut dims))
}

fn record_dims(t: &GenerationTrace, dims: &mut BTreeMap<u32, usize>) -> Result<()> {
    for s in &t.sentences {
        for (layer, v) in &s.final_hidden {
            let d = *dims.entry(*layer).or_insert(v.len());
            if d != v.len() {
                return Err(Error::validation(format!(
                    "trace {} sentence {}: layer {layer} hidden vector has dimension {}, corpus uses {d}",
                    t.id,
                    s.index,
                    v.len()
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{FaithLabel, SentenceRecord, TokenDist, TokenRecord};

    fn sample_trace(id: &str) -> GenerationTrace {
        let tok = |id: u32, s: &str, p: Vec<f64>, q: Vec<f64>| TokenRecord {
            token_id: id,
            surface: s.into(),
            prob_with_context: p[id as usize],
            dist_with_context: TokenDist::dense(p),
            dist_without_context: TokenDist::dense(q),
        };
        let mut s0 = SentenceRecord::from_tokens(
            0,
            vec![
                tok(1, "Hello", vec![0.1, 0.7000000000000001, 0.2], vec![1.0 / 3.0; 3]),
                tok(2, ". ", vec![0.05, 0.05, 0.9], vec![0.2, 0.3, 0.5]),
            ],
            false,
        );
        s0.final_hidden.insert(15, vec![0.1, -2.5e-300, 3.0]);
        let s1 = SentenceRecord::from_tokens(
            1,
            vec![TokenRecord {
                token_id: 9,
                surface: "Bye".into(),
                prob_with_context: 0.6,
                dist_with_context: TokenDist::top_k(vec![(9, 0.6), (3, 0.1)]),
                dist_without_context: TokenDist::top_k(vec![(3, 0.5), (9, 0.25)]),
            }],
            true,
        );
        GenerationTrace {
            id: id.into(),
            prompt: "Say hi".into(),
            context: "Greeting docs".into(),
            sentences: vec![s0, s1],
            gold_labels: Some(vec![FaithLabel::Faithful, FaithLabel::Unfaithful]),
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let traces = vec![sample_trace("a:1"), sample_trace("b:2")];
        write_traces(&path, &traces).unwrap();
        let back = read_traces(&path).unwrap();
        assert_eq!(back, traces);
        let bits = |t: &GenerationTrace| t.sentences[0].tokens[0].dist_with_context.outcomes()[1].to_bits();
        assert_eq!(bits(&back[0]), bits(&traces[0]));
    }

    #[test]
    fn empty_file_reads_as_no_traces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_traces(&path).unwrap().is_empty());
    }

    #[test]
    fn bad_distribution_names_the_line() {
        let good = serde_json::to_string(&sample_trace("a")).unwrap();
        let bad = good.replace("[0.05,0.05,0.9]", "[0.05,0.05,0.7]");
        assert_ne!(good, bad);
        let input = format!("{good}\n{bad}\n");
        let err = parse_traces("mem", input.as_bytes()).unwrap_err();
        match err {
            Error::InvalidRecord { line, message, .. } => {
                assert_eq!(line, 2);
                assert!(message.contains("sums to"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_json_names_the_line() {
        let good = serde_json::to_string(&sample_trace("a")).unwrap();
        let input = format!("{good}\n\n{{\"id\": 3\n");
        match parse_traces("mem", input.as_bytes()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_hidden_dims_rejected() {
        let a = sample_trace("a");
        let mut b = sample_trace("b");
        b.sentences[0].final_hidden.insert(15, vec![1.0, 2.0]);
        let dir = tempfile::tempdir().unwrap();
        assert!(write_traces(&dir.path().join("x.jsonl"), &[a, b]).is_err());
    }

    #[test]
    fn missing_file_is_io_error_naming_path() {
        let err = read_traces(Path::new("/nonexistent/traces.jsonl")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/traces.jsonl"));
    }
}
