//! Token-level signals: likelihood, predictive entropy and context influence.

use crate::error::{Error, Result};
use crate::trace::{SentenceRecord, TokenDist};

/// Additive smoothing applied to the without-context distribution before KL.
pub const KL_SMOOTHING: f64 = 1e-10;
/// Default threshold above which a position counts as a large-KL position.
pub const DEFAULT_KL_THRESHOLD: f64 = 3.0;

fn require_tokens(sentence: &SentenceRecord) -> Result<()> {
    if sentence.tokens.is_empty() {
        return Err(Error::input(format!("sentence {} has no tokens", sentence.index)));
    }
    Ok(())
}

/// `(min_prob, mean_prob)`: the smallest and the arithmetic mean of the
/// emitted tokens' probabilities under the with-context distribution.
pub fn likelihood_features(sentence: &SentenceRecord) -> Result<(f64, f64)> {
    require_tokens(sentence)?;
    let probs = sentence.tokens.iter().map(|t| t.prob_with_context);
    let min = probs.clone().fold(f64::INFINITY, f64::min);
    let mean = probs.sum::<f64>() / sentence.tokens.len() as f64;
    // Guard the invariant against summation rounding.
    Ok((min, mean.max(min)))
}

/// Entropy in nats of one distribution divided by `ln(vocab_size)`. For a
/// top-k distribution the residual bucket is one outcome.
pub fn normalized_entropy(dist: &TokenDist, vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(Error::input("entropy normalisation needs a vocabulary of at least 2"));
    }
    dist.validate()?;
    let h: f64 = dist
        .outcomes()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    Ok((h / (vocab_size as f64).ln()).clamp(0.0, 1.0))
}

/// `(mean_entropy, max_entropy)` over the sentence's positions, computed on
/// the with-context distributions.
pub fn entropy_features(sentence: &SentenceRecord, vocab_size: usize) -> Result<(f64, f64)> {
    require_tokens(sentence)?;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    for t in &sentence.tokens {
        let h = normalized_entropy(&t.dist_with_context, vocab_size)?;
        sum += h;
        max = max.max(h);
    }
    let mean = sum / sentence.tokens.len() as f64;
    Ok((mean.min(max), max))
}

/// `KL(p || q)` in nats, with `q` smoothed by `KL_SMOOTHING` and
/// renormalised. Both slices must describe the same outcomes.
pub fn smoothed_kl(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let norm = 1.0 + KL_SMOOTHING * q.len() as f64;
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi * norm / (qi + KL_SMOOTHING)).ln())
        .sum();
    kl.max(0.0)
}

/// Contrastive KL between the with- and without-context distributions at one
/// position.
pub fn position_kl(with_ctx: &TokenDist, without_ctx: &TokenDist) -> Result<f64> {
    let (p, q) = with_ctx.aligned(without_ctx)?;
    Ok(smoothed_kl(&p, &q))
}

/// `(mean_contrastive_kl, large_kl_pos)`: the mean of the per-position
/// contrastive KL, and how many positions exceed `kl_threshold`.
pub fn context_influence(sentence: &SentenceRecord, kl_threshold: f64) -> Result<(f64, u32)> {
    require_tokens(sentence)?;
    let mut sum = 0.0;
    let mut large = 0;
    for t in &sentence.tokens {
        let kl = position_kl(&t.dist_with_context, &t.dist_without_context)?;
        sum += kl;
        if kl > kl_threshold {
            large += 1;
        }
    }
    Ok((sum / sentence.tokens.len() as f64, large))
}
