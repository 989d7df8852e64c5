//! Semantic alignment between a sentence and the retrieved context.

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::http::{JsonClient, DEFAULT_TIMEOUT};
use crate::text::normalized_words;

/// Environment variable naming a remote alignment scorer.
pub const SCORER_URL_ENV: &str = "SYNFAITH_SCORER_URL";

/// Scores how well `claim` is supported by `context`, in `[0, 1]`.
///
/// Implementations must be deterministic for fixed inputs. Those that cannot
/// take concurrent calls return `false` from `concurrent`, and callers then
/// serialize access.
pub trait AlignmentScorer: Send + Sync {
    fn score(&self, claim: &str, context: &str) -> Result<f64>;

    fn concurrent(&self) -> bool {
        true
    }

    fn name(&self) -> String;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "of", "in", "on", "at", "to", "for", "with", "by",
    "from", "as", "is", "was", "were", "are", "be", "been", "it", "its", "this", "that", "he",
    "she", "they", "his", "her", "their",
];

fn content_words(text: &str) -> BTreeSet<String> {
    normalized_words(text)
        .into_iter()
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect()
}

/// Fraction of the claim's distinct content words that occur in the context.
/// A claim with no content words is vacuously supported.
pub fn lexical_align_score(claim: &str, context: &str) -> f64 {
    let claim = content_words(claim);
    if claim.is_empty() {
        return 1.0;
    }
    let context: BTreeSet<String> = normalized_words(context).into_iter().collect();
    claim.iter().filter(|w| context.contains(*w)).count() as f64 / claim.len() as f64
}

/// Offline scorer based on content-word recall.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl AlignmentScorer for LexicalScorer {
    fn score(&self, claim: &str, context: &str) -> Result<f64> {
        Ok(lexical_align_score(claim, context))
    }

    fn name(&self) -> String {
        "lexical".into()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub claim: String,
    pub context: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub score: f64,
    pub model_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HealthResponse {
    pub status: String,
    pub model_id: String,
}

/// Client for a remote alignment service (`POST /score`, `GET /health`).
#[derive(Debug, Clone)]
pub struct HttpAlignScorer {
    client: JsonClient,
}

impl HttpAlignScorer {
    pub fn new(base_url: &str) -> Result<Self> {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self> {
        Ok(HttpAlignScorer {
            client: JsonClient::new(base_url, timeout, 8)?,
        })
    }

    pub fn url(&self) -> &str {
        self.client.base()
    }

    pub fn health(&self) -> Result<HealthResponse> {
        self.client.get_json("/health")
    }

    pub fn score_full(&self, claim: &str, context: &str) -> Result<ScoreResponse> {
        let req = ScoreRequest {
            claim: claim.into(),
            context: context.into(),
        };
        let resp: ScoreResponse = self.client.post_json("/score", &req)?;
        if !(0.0..=1.0).contains(&resp.score) {
            return Err(Error::Backend(format!(
                "alignment service at {} returned score {} outside [0, 1]",
                self.url(),
                resp.score
            )));
        }
        Ok(resp)
    }
}

impl AlignmentScorer for HttpAlignScorer {
    fn score(&self, claim: &str, context: &str) -> Result<f64> {
        Ok(self.score_full(claim, context)?.score)
    }

    fn name(&self) -> String {
        format!("http:{}", self.url())
    }
}

/// The remote scorer when `SYNFAITH_SCORER_URL` is set and non-empty,
/// otherwise the lexical fallback.
pub fn scorer_from_env() -> Result<Box<dyn AlignmentScorer>> {
    match std::env::var(SCORER_URL_ENV) {
        Ok(url) if !url.trim().is_empty() => Ok(Box::new(HttpAlignScorer::new(url.trim())?)),
        _ => Ok(Box::new(LexicalScorer)),
    }
}

/// Outcome of one wire-contract check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContractCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

const CONTRACT_CONTEXT: &str =
    "Marie Curie was born in Warsaw in 1867. She won the Nobel Prize in Physics in 1903.";
const SUPPORTED_CLAIM: &str = "Marie Curie was born in 1867.";
const CONTRADICTED_CLAIM: &str = "Marie Curie was born in 1990.";

/// Run the alignment-service wire contract against a live service: health
/// schema, score schema and range, determinism, ordering of a supported claim
/// over a contradicted one, and rejection of an empty claim.
pub fn check_alignment_service(scorer: &HttpAlignScorer) -> Vec<ContractCheck> {
    let mut out = Vec::new();
    let mut push = |name, r: std::result::Result<String, String>| {
        let (passed, detail) = match r {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        out.push(ContractCheck { name, passed, detail });
    };

    push(
        "health",
        scorer
            .health()
            .map_err(|e| e.to_string())
            .and_then(|h| {
                if h.status.is_empty() || h.model_id.is_empty() {
                    Err(format!("empty fields in {h:?}"))
                } else {
                    Ok(format!("status {} model {}", h.status, h.model_id))
                }
            }),
    );

    let supported = scorer.score_full(SUPPORTED_CLAIM, CONTRACT_CONTEXT);
    push(
        "schema_and_range",
        supported
            .as_ref()
            .map(|r| format!("score {} from {}", r.score, r.model_id))
            .map_err(|e| e.to_string()),
    );

    push(
        "determinism",
        (|| {
            let a = scorer.score(SUPPORTED_CLAIM, CONTRACT_CONTEXT).map_err(|e| e.to_string())?;
            let b = scorer.score(SUPPORTED_CLAIM, CONTRACT_CONTEXT).map_err(|e| e.to_string())?;
            if a.to_bits() == b.to_bits() {
                Ok(format!("repeated score {a}"))
            } else {
                Err(format!("repeated request gave {a} then {b}"))
            }
        })(),
    );

    push(
        "supported_outranks_contradicted",
        (|| {
            let s = supported.as_ref().map_err(|e| e.to_string())?.score;
            let c = scorer.score(CONTRADICTED_CLAIM, CONTRACT_CONTEXT).map_err(|e| e.to_string())?;
            if s > c {
                Ok(format!("{s} > {c}"))
            } else {
                Err(format!("supported {s} does not exceed contradicted {c}"))
            }
        })(),
    );

    push(
        "empty_claim_rejected",
        match scorer.client.post_raw(
            "/score",
            &ScoreRequest {
                claim: String::new(),
                context: CONTRACT_CONTEXT.into(),
            },
        ) {
            Ok((status, _)) if (400..500).contains(&status) => Ok(format!("HTTP {status}")),
            Ok((status, _)) => Err(format!("expected a 4xx status, got {status}")),
            Err(e) => Err(e.to_string()),
        },
    );
    out
}
