//! Remote generation backend speaking the `/v1/segment` JSON contract.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DecodeMode, GenerationBackend};
use crate::error::{Error, Result};
use crate::http::{JsonClient, DEFAULT_TIMEOUT};
use crate::trace::{SentenceRecord, TokenDist, TokenRecord};

pub const BACKEND_URL_ENV: &str = "SYNFAITH_BACKEND_URL";
pub const SEGMENT_PATH: &str = "/v1/segment";
pub const DEFAULT_TOP_K: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WireMode {
    Greedy { greedy: bool },
    Sample { temperature: f64, seed: u64 },
}

impl From<DecodeMode> for WireMode {
    fn from(m: DecodeMode) -> Self {
        match m {
            DecodeMode::Greedy => WireMode::Greedy { greedy: true },
            DecodeMode::Sample { temperature, seed } => WireMode::Sample { temperature, seed },
        }
    }
}

impl WireMode {
    pub fn to_mode(self) -> DecodeMode {
        match self {
            WireMode::Greedy { .. } => DecodeMode::Greedy,
            WireMode::Sample { temperature, seed } => DecodeMode::Sample { temperature, seed },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRequest {
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<String>,
    pub prefix: Vec<String>,
    pub mode: WireMode,
    pub top_k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub return_hidden: Option<Vec<u32>>,
    /// Token ids to replay instead of decoding; used for the context-free pass.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force_tokens: Option<Vec<u32>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireToken {
    pub token_id: u32,
    pub surface: String,
    pub p: f64,
    pub topk_ctx: Vec<(u32, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk_noctx: Option<Vec<(u32, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentResponse {
    pub tokens: Vec<WireToken>,
    pub eos: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<BTreeMap<u32, Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    client: JsonClient,
    top_k: usize,
    hidden_layers: Vec<u32>,
}

impl HttpBackend {
    pub fn new(base_url: &str) -> Result<Self> {
        Self::with_timeout(base_url, DEFAULT_TIMEOUT)
    }

    pub fn with_timeout(base_url: &str, timeout: Duration) -> Result<Self> {
        Ok(HttpBackend {
            client: JsonClient::new(base_url, timeout, 8)?,
            top_k: DEFAULT_TOP_K,
            hidden_layers: Vec::new(),
        })
    }

    /// Backend at `$SYNFAITH_BACKEND_URL`, if set.
    pub fn from_env() -> Result<Option<Self>> {
        match std::env::var(BACKEND_URL_ENV) {
            Ok(url) if !url.trim().is_empty() => Self::new(url.trim()).map(Some),
            _ => Ok(None),
        }
    }

    pub fn with_top_k(mut self, k: usize) -> Self {
        self.top_k = k.max(1);
        self
    }

    pub fn with_hidden_layers(mut self, layers: Vec<u32>) -> Self {
        self.hidden_layers = layers;
        self
    }

    pub fn url(&self) -> &str {
        self.client.base()
    }

    fn call(&self, req: &SegmentRequest) -> Result<SegmentResponse> {
        let resp: SegmentResponse = self.client.post_json(SEGMENT_PATH, req)?;
        if resp.tokens.is_empty() {
            return Err(Error::Backend(format!("{}{SEGMENT_PATH} returned no tokens", self.url())));
        }
        Ok(resp)
    }
}

fn topk(entries: &[(u32, f64)]) -> TokenDist {
    TokenDist::top_k(entries.to_vec())
}

impl GenerationBackend for HttpBackend {
    fn generate_sentence(
        &self,
        prompt: &str,
        context: Option<&str>,
        prefix: &[SentenceRecord],
        mode: DecodeMode,
    ) -> Result<SentenceRecord> {
        mode.validate()?;
        let mut req = SegmentRequest {
            prompt: prompt.to_string(),
            context: context.map(str::to_string),
            prefix: prefix.iter().map(|s| s.text.clone()).collect(),
            mode: mode.into(),
            top_k: self.top_k,
            return_hidden: (!self.hidden_layers.is_empty()).then(|| self.hidden_layers.clone()),
            force_tokens: None,
        };
        let resp = self.call(&req)?;
        let noctx: Vec<TokenDist> = if context.is_none() {
            resp.tokens.iter().map(|t| topk(&t.topk_ctx)).collect()
        } else if resp.tokens.iter().all(|t| t.topk_noctx.is_some()) {
            resp.tokens.iter().map(|t| topk(t.topk_noctx.as_deref().unwrap_or_default())).collect()
        } else {
            req.context = None;
            req.return_hidden = None;
            req.force_tokens = Some(resp.tokens.iter().map(|t| t.token_id).collect());
            let second = self.call(&req)?;
            if second.tokens.len() != resp.tokens.len() {
                return Err(Error::Backend(format!(
                    "context-free replay returned {} tokens for {} forced",
                    second.tokens.len(),
                    resp.tokens.len()
                )));
            }
            second.tokens.iter().map(|t| topk(&t.topk_ctx)).collect()
        };
        let tokens = resp
            .tokens
            .iter()
            .zip(noctx)
            .map(|(t, without)| TokenRecord {
                token_id: t.token_id,
                surface: t.surface.clone(),
                prob_with_context: t.p,
                dist_with_context: topk(&t.topk_ctx),
                dist_without_context: without,
            })
            .collect();
        let mut sentence = SentenceRecord::from_tokens(prefix.len(), tokens, resp.eos);
        let ended = sentence.text.trim_end().ends_with(['.', '!', '?']);
        sentence.truncated = !resp.eos && !ended;
        if let Some(h) = resp.hidden {
            sentence.final_hidden = h;
        }
        sentence
            .validate()
            .map_err(|e| Error::Backend(format!("{}{SEGMENT_PATH}: {e}", self.url())))?;
        Ok(sentence)
    }

    fn name(&self) -> String {
        format!("http:{}", self.url())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_serialize_to_wire_shapes() {
        let g = serde_json::to_string(&WireMode::from(DecodeMode::Greedy)).unwrap();
        assert_eq!(g, r#"{"greedy":true}"#);
        let s = serde_json::to_value(WireMode::from(DecodeMode::Sample { temperature: 0.5, seed: 3 })).unwrap();
        assert_eq!(s, serde_json::json!({"temperature": 0.5, "seed": 3}));
        let back: WireMode = serde_json::from_str(r#"{"temperature":1.0,"seed":9}"#).unwrap();
        assert_eq!(back.to_mode(), DecodeMode::Sample { temperature: 1.0, seed: 9 });
    }

    #[test]
    fn optional_request_fields_are_omitted() {
        let req = SegmentRequest {
            prompt: "q".into(),
            context: None,
            prefix: vec![],
            mode: WireMode::Greedy { greedy: true },
            top_k: 5,
            return_hidden: None,
            force_tokens: None,
        };
        let v = serde_json::to_value(&req).unwrap();
        assert_eq!(v, serde_json::json!({"prompt":"q","prefix":[],"mode":{"greedy":true},"top_k":5}));
    }

    #[test]
    fn response_hidden_keys_are_layer_ids() {
        let r: SegmentResponse = serde_json::from_str(
            r#"{"tokens":[{"token_id":1,"surface":"A.","p":0.9,"topk_ctx":[[1,0.9]]}],"eos":false,"hidden":{"16":[0.5]}}"#,
        )
        .unwrap();
        assert_eq!(r.hidden.unwrap()[&16], vec![0.5]);
        assert!(r.tokens[0].topk_noctx.is_none());
    }

    #[test]
    fn env_unset_gives_none() {
        // the variable is never set by the test suite
        if std::env::var(BACKEND_URL_ENV).is_err() {
            assert!(HttpBackend::from_env().unwrap().is_none());
        }
    }
}
