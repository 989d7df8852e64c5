//! Detection and intervention metrics and the benchmark report.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fod::{DecodeResult, SentenceScorer};
use crate::jsonl;
use crate::trace::{FaithLabel, GenerationTrace};

/// Probability that a random faithful sentence outscores a random
/// unfaithful one, ties counting half. Computed from midranks.
pub fn auroc(scores: &[f64], labels: &[FaithLabel]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::input(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::input(format!("score {bad} is not a number")));
    }
    let pos = labels.iter().filter(|l| l.is_faithful()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::input("AUROC needs at least one faithful and one unfaithful example"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum of the positives, so midranks stay integral
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the midrank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        for &k in &order[i..=j] {
            if labels[k].is_faithful() {
                twice_rank_sum += twice_mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Fraction of faithful sentences among the first `l` sentences of each
/// trace, pooled over traces. `usize::MAX` takes every sentence.
pub fn faithfulness_at_l(traces: &[GenerationTrace], l: usize) -> Result<f64> {
    if l == 0 {
        return Err(Error::input("L must be at least 1"));
    }
    let (mut faithful, mut total) = (0usize, 0usize);
    for t in traces {
        let labels = t
            .gold_labels
            .as_ref()
            .ok_or_else(|| Error::input(format!("trace {} has no gold labels", t.id)))?;
        if labels.len() != t.sentences.len() {
            return Err(Error::validation(format!("trace {} has {} labels for {} sentences", t.id, labels.len(), t.sentences.len())));
        }
        for lab in labels.iter().take(l) {
            total += 1;
            faithful += usize::from(lab.is_faithful());
        }
    }
    if total == 0 {
        return Err(Error::input("no sentences to evaluate"));
    }
    Ok(faithful as f64 / total as f64)
}

pub const ALL_TAGS: &str = "all";

/// One cell of the benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// Detector or strategy name.
    pub name: String,
    pub tag: String,
    pub metric: String,
    pub value: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportRow {
    fn ok(name: &str, tag: &str, metric: &str, value: f64, n: usize) -> Self {
        ReportRow {
            name: name.into(),
            tag: tag.into(),
            metric: metric.into(),
            value: Some(value),
            n,
            error: None,
        }
    }

    fn failed(name: &str, tag: &str, metric: &str, n: usize, e: &Error) -> Self {
        ReportRow {
            name: name.into(),
            tag: tag.into(),
            metric: metric.into(),
            value: None,
            n,
            error: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_NOTES: [&str; 2] = [
    "informativeness is a sentence-count proxy; abstained responses count 0 and are left out of faithfulness",
    "faithfulness@L (sentence proxy) pools gold sentence labels over responses",
];

impl Report {
    pub fn new(rows: Vec<ReportRow>) -> Self {
        Report {
            notes: REPORT_NOTES.iter().map(|s| s.to_string()).collect(),
            rows,
        }
    }

    pub fn get(&self, name: &str, tag: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.name == name && r.tag == tag && r.metric == metric)
            .and_then(|r| r.value)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        jsonl::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        jsonl::read_json(path)
    }

    /// Flat `name,tag,metric,value,n,error` export.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::input(format!("{}: {e}", path.display())))?;
        let io = |e: csv::Error| Error::input(format!("{}: {e}", path.display()));
        w.write_record(["name", "tag", "metric", "value", "n", "error"]).map_err(io)?;
        for r in &self.rows {
            let value = r.value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                r.name.as_str(),
                &r.tag,
                &r.metric,
                &value,
                &r.n.to_string(),
                r.error.as_deref().unwrap_or(""),
            ])
            .map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Score every sentence of `traces` with `detector`, returning the scores
/// and gold labels grouped by tag. Unlabelled traces are an error.
pub fn score_traces(
    detector: &dyn SentenceScorer,
    traces: &[GenerationTrace],
) -> Result<BTreeMap<String, (Vec<f64>, Vec<FaithLabel>)>> {
    let mut groups: BTreeMap<String, (Vec<f64>, Vec<FaithLabel>)> = BTreeMap::new();
    for t in traces {
        let labels = t
            .gold_labels
            .as_ref()
            .ok_or_else(|| Error::input(format!("trace {} has no gold labels", t.id)))?;
        let g = groups.entry(t.tag().to_string()).or_default();
        for (i, s) in t.sentences.iter().enumerate() {
            g.0.push(detector.score(&t.prompt, &t.context, &t.sentences[..i], s)?);
            g.1.push(labels[i]);
        }
    }
    Ok(groups)
}

/// AUROC of one detector per tag, plus the pooled value under `all`.
pub fn detection_rows(name: &str, detector: &dyn SentenceScorer, traces: &[GenerationTrace]) -> Vec<ReportRow> {
    let groups = match score_traces(detector, traces) {
        Ok(g) => g,
        Err(e) => return vec![ReportRow::failed(name, ALL_TAGS, "auroc", 0, &e)],
    };
    let mut rows = Vec::new();
    let (mut all_s, mut all_l) = (Vec::new(), Vec::new());
    for (tag, (s, l)) in &groups {
        rows.push(match auroc(s, l) {
            Ok(v) => ReportRow::ok(name, tag, "auroc", v, s.len()),
            Err(e) => ReportRow::failed(name, tag, "auroc", s.len(), &e),
        });
        all_s.extend_from_slice(s);
        all_l.extend_from_slice(l);
    }
    if groups.len() != 1 || !groups.contains_key(ALL_TAGS) {
        rows.push(match auroc(&all_s, &all_l) {
            Ok(v) => ReportRow::ok(name, ALL_TAGS, "auroc", v, all_s.len()),
            Err(e) => ReportRow::failed(name, ALL_TAGS, "auroc", all_s.len(), &e),
        });
    }
    rows
}

/// Summary of one strategy's decoded responses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterventionSummary {
    /// Mean over answered responses of the faithful-sentence fraction.
    pub faithfulness: Option<f64>,
    /// Mean sentence count, abstentions counting 0.
    pub informativeness: f64,
    pub abstain_rate: f64,
    pub answered: usize,
    pub n: usize,
}

pub fn summarize_intervention(results: &[DecodeResult]) -> Result<InterventionSummary> {
    if results.is_empty() {
        return Err(Error::input("no decoded responses"));
    }
    let mut fracs = Vec::new();
    let mut info = 0usize;
    let mut abstained = 0usize;
    for r in results {
        info += r.informativeness();
        if r.abstained {
            abstained += 1;
            continue;
        }
        if r.empty {
            continue;
        }
        let labels = r
            .trace
            .gold_labels
            .as_ref()
            .ok_or_else(|| Error::input(format!("response {} has no gold labels", r.trace.id)))?;
        let good = labels.iter().filter(|l| l.is_faithful()).count();
        fracs.push(good as f64 / labels.len() as f64);
    }
    let n = results.len();
    Ok(InterventionSummary {
        faithfulness: (!fracs.is_empty()).then(|| fracs.iter().sum::<f64>() / fracs.len() as f64),
        informativeness: info as f64 / n as f64,
        abstain_rate: abstained as f64 / n as f64,
        answered: fracs.len(),
        n,
    })
}

/// Faithfulness, informativeness and abstention rate of one strategy, per
/// tag and pooled.
pub fn intervention_rows(name: &str, results: &[DecodeResult]) -> Vec<ReportRow> {
    let mut by_tag: BTreeMap<String, Vec<DecodeResult>> = BTreeMap::new();
    for r in results {
        by_tag.entry(r.trace.tag().to_string()).or_default().push(r.clone());
    }
    if by_tag.len() != 1 || !by_tag.contains_key(ALL_TAGS) {
        by_tag.insert(ALL_TAGS.to_string(), results.to_vec());
    }
    let mut rows = Vec::new();
    for (tag, rs) in &by_tag {
        match summarize_intervention(rs) {
            Ok(s) => {
                match s.faithfulness {
                    Some(f) => rows.push(ReportRow::ok(name, tag, "faithfulness", f, s.answered)),
                    None => rows.push(ReportRow::failed(
                        name,
                        tag,
                        "faithfulness",
                        0,
                        &Error::input("every response abstained or was empty"),
                    )),
                }
                rows.push(ReportRow::ok(name, tag, "informativeness", s.informativeness, s.n));
                rows.push(ReportRow::ok(name, tag, "abstain_rate", s.abstain_rate, s.n));
            }
            Err(e) => rows.push(ReportRow::failed(name, tag, "faithfulness", rs.len(), &e)),
        }
    }
    rows
}

/// A named decoding run producing labelled responses.
pub type Decoder<'a> = Box<dyn Fn() -> Result<Vec<DecodeResult>> + Sync + 'a>;

/// Evaluate every detector on `traces` and every decoder's output. Cells run
/// concurrently; a failing cell yields rows carrying its error and does not
/// stop the others. Rows come out in input order.
pub fn run_benchmark(
    traces: &[GenerationTrace],
    detectors: &[(String, &dyn SentenceScorer)],
    decoders: &[(String, Decoder<'_>)],
) -> Report {
    let (det_rows, dec_rows) = std::thread::scope(|s| {
        let dets: Vec<_> = detectors
            .iter()
            .map(|(name, d)| s.spawn(move || detection_rows(name, *d, traces)))
            .collect();
        let decs: Vec<_> = decoders
            .iter()
            .map(|(name, run)| {
                s.spawn(move || match run() {
                    Ok(results) => intervention_rows(name, &results),
                    Err(e) => vec![ReportRow::failed(name, ALL_TAGS, "faithfulness", 0, &e)],
                })
            })
            .collect();
        let join = |h: std::thread::ScopedJoinHandle<'_, Vec<ReportRow>>| {
            h.join().unwrap_or_else(|p| std::panic::resume_unwind(p))
        };
        (
            dets.into_iter().map(join).collect::<Vec<_>>(),
            decs.into_iter().map(join).collect::<Vec<_>>(),
        )
    });
    Report::new(det_rows.into_iter().chain(dec_rows).flatten().collect())
}

/// One number per line; blank lines and `#` comments are skipped.
pub fn read_numbers(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(line.parse::<f64>().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: format!("{line:?}: {e}"),
        })?);
    }
    Ok(out)
}

pub fn read_labels(path: &Path) -> Result<Vec<FaithLabel>> {
    read_numbers(path)?
        .into_iter()
        .map(|v| match v {
            x if x == 1.0 => Ok(FaithLabel::Faithful),
            x if x == 0.0 => Ok(FaithLabel::Unfaithful),
            x => Err(Error::input(format!("{}: label must be 0 or 1, got {x}", path.display()))),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fod::{DecodeConfig, FnScorer, Strategy};
    use crate::trace::SentenceRecord;
    use proptest::prelude::*;

    fn labels(v: &[u8]) -> Vec<FaithLabel> {
        v.iter().map(|&b| FaithLabel::from(b == 1)).collect()
    }

    fn pairwise(scores: &[f64], l: &[FaithLabel]) -> f64 {
        let (mut win, mut pairs) = (0.0, 0.0);
        for (i, li) in l.iter().enumerate() {
            for (j, lj) in l.iter().enumerate() {
                if li.is_faithful() && !lj.is_faithful() {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        win += 1.0;
                    } else if scores[i] == scores[j] {
                        win += 0.5;
                    }
                }
            }
        }
        win / pairs
    }

    #[test]
    fn auroc_fixtures() {
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.6], &labels(&[1, 1, 0, 0])).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.7, 0.6], &labels(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(auroc(&[0.9, 0.6, 0.7, 0.8], &labels(&[1, 0, 1, 0])).unwrap(), 0.75);
        assert_eq!(auroc(&[0.5, 0.5], &labels(&[1, 0])).unwrap(), 0.5);
    }

    #[test]
    fn auroc_needs_both_classes() {
        assert!(auroc(&[0.1, 0.2], &labels(&[1, 1])).is_err());
        assert!(auroc(&[0.1], &labels(&[1, 0])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn auroc_matches_pairwise(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 2..200),
            flip in any::<bool>(),
        ) {
            let mut l: Vec<FaithLabel> = raw.iter().map(|r| FaithLabel::from(r.1)).collect();
            if l.iter().all(|x| x.is_faithful()) || l.iter().all(|x| !x.is_faithful()) {
                l[0] = FaithLabel::from(!l[0].is_faithful());
            }
            // coarse integer scores force ties
            let s: Vec<f64> = raw.iter().map(|r| if flip { r.0 as f64 / 7.0 } else { r.0 as f64 }).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), pairwise(&s, &l));
        }

        #[test]
        fn auroc_invariant_under_monotone_maps(
            raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..100),
        ) {
            let mut l: Vec<FaithLabel> = raw.iter().map(|r| FaithLabel::from(r.1)).collect();
            if l.iter().all(|x| x.is_faithful()) || l.iter().all(|x| !x.is_faithful()) {
                l[0] = FaithLabel::from(!l[0].is_faithful());
            }
            let s: Vec<f64> = raw.iter().map(|r| r.0).collect();
            let t: Vec<f64> = s.iter().map(|x| 3.0 * x.exp() + 1.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
        }
    }

    fn labelled(id: &str, l: &[u8]) -> GenerationTrace {
        let mut t = GenerationTrace::new(id, "q", "c");
        t.sentences = (0..l.len()).map(|i| SentenceRecord::from_tokens(i, Vec::new(), false)).collect();
        t.gold_labels = Some(labels(l));
        t
    }

    #[test]
    fn faithfulness_at_l_fixtures() {
        assert_eq!(faithfulness_at_l(&[labelled("a", &[1, 0, 1])], 2).unwrap(), 0.5);
        // 2 faithful of 4 pooled
        let two = [labelled("a", &[1, 1, 0]), labelled("b", &[0])];
        assert_eq!(faithfulness_at_l(&two, 3).unwrap(), 0.5);
        let two = [labelled("a", &[1, 1, 1]), labelled("b", &[0])];
        assert_eq!(faithfulness_at_l(&two, 3).unwrap(), 0.75);
        for l in 1..5 {
            assert_eq!(faithfulness_at_l(&[labelled("a", &[1, 1, 1])], l).unwrap(), 1.0);
        }
    }

    #[test]
    fn faithfulness_at_infinity_is_overall_fraction() {
        let ts = [labelled("a", &[1, 0, 0, 1, 1]), labelled("b", &[]), labelled("c", &[0, 1])];
        assert_eq!(faithfulness_at_l(&ts, usize::MAX).unwrap(), 4.0 / 7.0);
    }

    #[test]
    fn faithfulness_at_l_rejects_unlabelled() {
        let t = GenerationTrace::new("a", "q", "c");
        assert!(faithfulness_at_l(&[t], 1).is_err());
        assert!(faithfulness_at_l(&[labelled("a", &[1])], 0).is_err());
    }

    fn text_sentence(i: usize, text: &str) -> SentenceRecord {
        let mut s = SentenceRecord::from_tokens(i, Vec::new(), false);
        s.text = text.into();
        s
    }

    #[test]
    fn report_auroc_equals_direct_call() {
        let mut t = GenerationTrace::new("toy:1", "q", "c");
        t.sentences = ["a", "b", "c", "d"].iter().enumerate().map(|(i, x)| text_sentence(i, x)).collect();
        t.gold_labels = Some(labels(&[1, 0, 1, 0]));
        let det = FnScorer(|_: &[SentenceRecord], s: &SentenceRecord| match s.text.as_str() {
            "a" => 0.9,
            "b" => 0.6,
            "c" => 0.7,
            _ => 0.8,
        });
        let report = run_benchmark(std::slice::from_ref(&t), &[("d".into(), &det)], &[]);
        assert_eq!(report.get("d", "toy", "auroc"), Some(0.75));
        assert_eq!(report.get("d", ALL_TAGS, "auroc"), Some(0.75));
    }

    fn result(id: &str, l: &[u8], abstained: bool) -> DecodeResult {
        DecodeResult {
            trace: labelled(id, l),
            strategy: Strategy::Greedy,
            config: DecodeConfig::default(),
            per_sentence_scores: vec![],
            stage1_sentences: 0,
            abstained,
            empty: l.is_empty(),
        }
    }

    #[test]
    fn abstained_outputs_count_zero_information() {
        let rs = [result("a", &[1, 1], false), result("b", &[0, 0, 0], true)];
        let s = summarize_intervention(&rs).unwrap();
        assert_eq!(s.faithfulness, Some(1.0));
        assert_eq!(s.informativeness, 1.0);
        assert_eq!(s.abstain_rate, 0.5);
    }

    #[test]
    fn identical_outputs_give_identical_rows() {
        let rs = vec![result("a", &[1, 0], false), result("b", &[1], false)];
        let a = intervention_rows("x", &rs);
        let b = intervention_rows("x", &rs);
        assert_eq!(a, b);
        let strip = |rows: Vec<ReportRow>| rows.into_iter().map(|r| (r.tag, r.metric, r.value, r.n)).collect::<Vec<_>>();
        assert_eq!(strip(intervention_rows("x", &rs)), strip(intervention_rows("y", &rs)));
    }

    #[test]
    fn failing_cell_is_isolated() {
        let det = FnScorer(|_: &[SentenceRecord], _: &SentenceRecord| 0.5);
        let unlabelled = GenerationTrace::new("a", "q", "c");
        let bad: Decoder = Box::new(|| Err(Error::Backend("down".into())));
        let good: Decoder = Box::new(|| Ok(vec![result("a", &[1], false)]));
        let report = run_benchmark(&[unlabelled], &[("d".into(), &det)], &[("bad".into(), bad), ("good".into(), good)]);
        assert!(report.rows.iter().any(|r| r.name == "d" && r.error.is_some()));
        assert!(report.rows.iter().any(|r| r.name == "bad" && r.error.as_deref().unwrap().contains("down")));
        assert_eq!(report.get("good", ALL_TAGS, "faithfulness"), Some(1.0));
    }

    #[test]
    fn report_files_round_trip() {
        let report = Report::new(intervention_rows("x", &[result("a", &[1, 0], false)]));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        report.save(&p).unwrap();
        assert_eq!(Report::load(&p).unwrap(), report);
        let c = dir.path().join("r.csv");
        report.save_csv(&c).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("name,tag,metric,value,n,error\n"));
        assert!(text.contains("x,all,faithfulness,0.5,1,"));
    }

    #[test]
    fn number_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        std::fs::write(&p, "0.9\n# note\n\n0.6\n").unwrap();
        assert_eq!(read_numbers(&p).unwrap(), vec![0.9, 0.6]);
        std::fs::write(&p, "1\n0\n2\n").unwrap();
        assert!(read_labels(&p).is_err());
        std::fs::write(&p, "x\n").unwrap();
        assert!(matches!(read_numbers(&p), Err(Error::Parse { line: 1, .. })));
    }
}
