//! Local intrinsic dimension of a hidden activation among reference points.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::trace::GenerationTrace;

/// Lower clamp for distances and for the log-ratio sum.
pub const LID_EPS: f64 = 1e-12;
/// Default neighbour count.
pub const DEFAULT_LID_K: usize = 50;

/// Reference activations for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub layer_id: u32,
    pub points: Vec<Vec<f64>>,
    pub source: String,
}

impl ReferenceSet {
    pub fn new(layer_id: u32, points: Vec<Vec<f64>>, source: impl Into<String>) -> Result<Self> {
        let set = ReferenceSet {
            layer_id,
            points,
            source: source.into(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.len() < 2 {
            return Err(Error::input(format!(
                "reference set for layer {} needs at least 2 points, has {}",
                self.layer_id,
                self.points.len()
            )));
        }
        let d = self.dim();
        if d == 0 || self.points.iter().any(|p| p.len() != d) {
            return Err(Error::validation(format!(
                "reference points for layer {} do not share one nonzero dimension",
                self.layer_id
            )));
        }
        Ok(())
    }
}

/// Sample `t` last-token activations for `layer_id` from the labelled traces
/// in `traces`. The sampled points keep corpus order, and the same seed
/// always picks the same points.
pub fn build_reference_set(
    traces: &[GenerationTrace],
    layer_id: u32,
    t: usize,
    seed: u64,
) -> Result<ReferenceSet> {
    if t < 2 {
        return Err(Error::input(format!("reference set size must be at least 2, got {t}")));
    }
    let pool: Vec<&Vec<f64>> = traces
        .iter()
        .filter(|tr| tr.gold_labels.is_some())
        .flat_map(|tr| tr.sentences.iter())
        .filter_map(|s| s.final_hidden.get(&layer_id))
        .collect();
    if pool.len() < t {
        return Err(Error::input(format!(
            "reference set for layer {layer_id} needs {t} labelled activations, found {} ({} short)",
            pool.len(),
            t - pool.len()
        )));
    }
    let mut picked: Vec<usize> = if pool.len() == t {
        (0..t).collect()
    } else {
        index::sample(&mut seed::rng(seed), pool.len(), t).into_vec()
    };
    picked.sort_unstable();
    let points = picked.into_iter().map(|i| pool[i].clone()).collect();
    ReferenceSet::new(
        layer_id,
        points,
        format!("{t} of {} labelled activations, seed {seed}", pool.len()),
    )
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Maximum-likelihood LID estimate of `query` from its `k` nearest reference
/// points:
///
/// `LID = [ (1/(k-1)) * sum_j ln(d_k / d_j) ]^-1`
///
/// with distances sorted ascending so `d_k` is the farthest of the `k`.
/// Distances below `LID_EPS` are raised to it, and a bracket below `LID_EPS`
/// yields `1 / LID_EPS`.
pub fn lid_mle(query: &[f64], refs: &ReferenceSet, k: usize) -> Result<f64> {
    if k < 2 || k > refs.len() {
        return Err(Error::input(format!(
            "LID neighbour count {k} must lie in 2..={}",
            refs.len()
        )));
    }
    if query.len() != refs.dim() {
        return Err(Error::input(format!(
            "query has dimension {}, layer {} references have {}",
            query.len(),
            refs.layer_id,
            refs.dim()
        )));
    }
    let mut dists: Vec<f64> = refs.points.iter().map(|p| euclidean(query, p)).collect();
    dists.select_nth_unstable_by(k - 1, f64::total_cmp);
    dists.truncate(k);
    dists.sort_unstable_by(f64::total_cmp);
    Ok(lid_from_sorted(&dists))
}

/// The estimator applied to `k >= 2` ascending distances.
pub(crate) fn lid_from_sorted(dists: &[f64]) -> f64 {
    let k = dists.len();
    let far = dists[k - 1].max(LID_EPS);
    let sum: f64 = dists.iter().map(|&d| (far / d.max(LID_EPS)).ln()).sum();
    let bracket = sum / (k - 1) as f64;
    if bracket < LID_EPS {
        1.0 / LID_EPS
    } else {
        1.0 / bracket
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{FaithLabel, SentenceRecord};
    use proptest::prelude::*;

    fn refs(points: Vec<Vec<f64>>) -> ReferenceSet {
        ReferenceSet::new(0, points, "test").unwrap()
    }

    #[test]
    fn hand_fixture_one_two_four() {
        let r = refs(vec![vec![1.0, 0.0], vec![0.0, 2.0], vec![-4.0, 0.0], vec![9.0, 9.0]]);
        let lid = lid_mle(&[0.0, 0.0], &r, 3).unwrap();
        assert!((lid - 0.9618).abs() < 1e-4, "{lid}");
        let exact = 1.0 / (0.5 * (4f64.ln() + 2f64.ln()));
        assert!((lid - exact).abs() < 1e-12);
    }

    #[test]
    fn hand_fixture_one_e() {
        let r = refs(vec![vec![1.0], vec![std::f64::consts::E]]);
        assert!((lid_mle(&[0.0], &r, 2).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_distances_clamp_to_max() {
        let r = refs(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        assert_eq!(lid_mle(&[0.0, 0.0], &r, 3).unwrap(), 1.0 / LID_EPS);
    }

    #[test]
    fn zero_distance_is_clamped_not_infinite() {
        let r = refs(vec![vec![0.0], vec![1.0]]);
        let lid = lid_mle(&[0.0], &r, 2).unwrap();
        assert!(lid.is_finite() && lid > 0.0);
    }

    #[test]
    fn bad_arguments() {
        let r = refs(vec![vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert!(lid_mle(&[0.0], &r, 2).is_err());
        assert!(lid_mle(&[0.0, 0.0], &r, 1).is_err());
        assert!(lid_mle(&[0.0, 0.0], &r, 3).is_err());
        assert!(ReferenceSet::new(0, vec![vec![1.0]], "x").is_err());
        assert!(ReferenceSet::new(0, vec![vec![1.0], vec![1.0, 2.0]], "x").is_err());
    }

    fn corpus(n: usize) -> Vec<GenerationTrace> {
        (0..n)
            .map(|i| {
                let mut t = GenerationTrace::new(format!("t{i}"), "p", "c");
                let mut s = SentenceRecord::from_tokens(0, vec![], true);
                s.final_hidden.insert(3, vec![i as f64, 1.0]);
                t.sentences.push(s);
                t.gold_labels = Some(vec![FaithLabel::Faithful]);
                t
            })
            .collect()
    }

    #[test]
    fn exact_size_takes_everything_in_order() {
        let set = build_reference_set(&corpus(4), 3, 4, 1).unwrap();
        let xs: Vec<f64> = set.points.iter().map(|p| p[0]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let c = corpus(40);
        let a = build_reference_set(&c, 3, 10, 5).unwrap();
        assert_eq!(a, build_reference_set(&c, 3, 10, 5).unwrap());
        assert_ne!(a.points, build_reference_set(&c, 3, 10, 6).unwrap().points);
    }

    #[test]
    fn deficits_and_small_t_are_errors() {
        let c = corpus(3);
        let err = build_reference_set(&c, 3, 5, 0).unwrap_err().to_string();
        assert!(err.contains("2 short"), "{err}");
        assert!(build_reference_set(&c, 3, 1, 0).is_err());
        assert!(build_reference_set(&c, 9, 2, 0).is_err());
        let mut unlabeled = corpus(5);
        unlabeled.iter_mut().for_each(|t| t.gold_labels = None);
        assert!(build_reference_set(&unlabeled, 3, 2, 0).is_err());
    }

    // Direct transcription of the estimator over a full sort.
    fn brute_lid(q: &[f64], points: &[Vec<f64>], k: usize) -> f64 {
        let mut d: Vec<f64> = points
            .iter()
            .map(|p| q.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let far = d[k - 1];
        let mut s = 0.0;
        for &dj in &d[..k] {
            s += (far / dj).ln();
        }
        1.0 / (s / (k as f64 - 1.0))
    }

    fn cloud() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>, usize)> {
        (4usize..=64, 3usize..40).prop_flat_map(|(d, n)| {
            (
                prop::collection::vec(-3.0f64..3.0, d),
                prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n),
                2usize..=n,
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn matches_brute_force((q, pts, k) in cloud()) {
            let got = lid_mle(&q, &refs(pts.clone()), k).unwrap();
            let want = brute_lid(&q, &pts, k);
            prop_assert!(((got - want) / want).abs() < 1e-9, "{got} vs {want}");
        }

        #[test]
        fn invariant_to_uniform_rescaling((q, pts, k) in cloud(), c in 0.01f64..100.0) {
            let a = lid_mle(&q, &refs(pts.clone()), k).unwrap();
            let scale = |v: &Vec<f64>| v.iter().map(|x| x * c).collect::<Vec<_>>();
            let b = lid_mle(&scale(&q), &refs(pts.iter().map(scale).collect()), k).unwrap();
            prop_assert!(((a - b) / a).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
