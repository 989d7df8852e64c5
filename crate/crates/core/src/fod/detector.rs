use crate::aggregator::FaithfulnessModel;
use crate::error::{Error, Result};
use crate::features::{sentence_features, AlignmentScorer, FeatureConfig, FeatureExtractor, ReferenceSets};
use crate::trace::SentenceRecord;

/// Anything that maps a candidate sentence in its decoding context to a
/// faithfulness score in `[0, 1]`.
pub trait SentenceScorer: Send + Sync {
    fn score(&self, prompt: &str, context: &str, prefix: &[SentenceRecord], sentence: &SentenceRecord) -> Result<f64>;
}

impl<S: SentenceScorer + ?Sized> SentenceScorer for &S {
    fn score(&self, prompt: &str, context: &str, prefix: &[SentenceRecord], sentence: &SentenceRecord) -> Result<f64> {
        (**self).score(prompt, context, prefix, sentence)
    }
}

/// Feature extraction followed by a trained aggregator.
pub struct SynCheck {
    pub model: FaithfulnessModel,
    pub extractor: FeatureExtractor,
}

impl SynCheck {
    pub fn new(model: FaithfulnessModel, extractor: FeatureExtractor) -> Self {
        SynCheck { model, extractor }
    }
}

impl SentenceScorer for SynCheck {
    fn score(&self, _prompt: &str, context: &str, _prefix: &[SentenceRecord], sentence: &SentenceRecord) -> Result<f64> {
        let fv = self.extractor.sentence(context, sentence)?;
        self.model.predict(&fv)
    }
}

/// Score one sentence with a model, reference activations and an alignment
/// scorer, without building a [`SynCheck`].
pub fn score_sentence(
    context: &str,
    sentence: &SentenceRecord,
    model: &FaithfulnessModel,
    refs: &ReferenceSets,
    scorer: &dyn AlignmentScorer,
    config: &FeatureConfig,
) -> Result<f64> {
    let fv = sentence_features(context, sentence, refs, scorer, config)?;
    model.predict(&fv)
}

/// Wraps a closure over the sentence; handy for scripted detectors.
pub struct FnScorer<F>(pub F);

impl<F> SentenceScorer for FnScorer<F>
where
    F: Fn(&[SentenceRecord], &SentenceRecord) -> f64 + Send + Sync,
{
    fn score(&self, _prompt: &str, _context: &str, prefix: &[SentenceRecord], sentence: &SentenceRecord) -> Result<f64> {
        Ok((self.0)(prefix, sentence))
    }
}

pub(crate) fn checked(f: f64) -> Result<f64> {
    if (0.0..=1.0).contains(&f) {
        Ok(f)
    } else {
        Err(Error::Model(format!("detector returned {f} outside [0, 1]")))
    }
}
