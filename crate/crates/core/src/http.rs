//! Minimal blocking JSON-over-HTTP client shared by the remote backend and
//! the remote alignment scorer.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    agent: ureq::Agent,
    base: String,
}

impl JsonClient {
    pub(crate) fn new(base_url: &str, timeout: Duration, max_connections: usize) -> Result<Self> {
        let base = base_url.trim_end_matches('/').to_string();
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(Error::input(format!("service URL {base_url:?} must start with http:// or https://")));
        }
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .max_idle_connections_per_host(max_connections.max(1))
            .build();
        Ok(JsonClient {
            agent: ureq::Agent::new_with_config(config),
            base,
        })
    }

    pub(crate) fn base(&self) -> &str {
        &self.base
    }

    /// POST a JSON body and return the status with the raw response text.
    pub(crate) fn post_raw<B: Serialize>(&self, path: &str, body: &B) -> Result<(u16, String)> {
        let url = format!("{}{path}", self.base);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| Error::Backend(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("POST {url}: reading response: {e}")))?;
        Ok((status, text))
    }

    pub(crate) fn get_raw(&self, path: &str) -> Result<(u16, String)> {
        let url = format!("{}{path}", self.base);
        let mut resp = self
            .agent
            .get(&url)
            .call()
            .map_err(|e| Error::Backend(format!("GET {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::Backend(format!("GET {url}: reading response: {e}")))?;
        Ok((status, text))
    }

    pub(crate) fn post_json<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T> {
        let (status, text) = self.post_raw(path, body)?;
        self.decode(path, status, &text)
    }

    pub(crate) fn get_json<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        let (status, text) = self.get_raw(path)?;
        self.decode(path, status, &text)
    }

    fn decode<T: DeserializeOwned>(&self, path: &str, status: u16, text: &str) -> Result<T> {
        if !(200..300).contains(&status) {
            return Err(Error::Backend(format!(
                "{}{path} returned HTTP {status}: {}",
                self.base,
                text.chars().take(200).collect::<String>()
            )));
        }
        serde_json::from_str(text)
            .map_err(|e| Error::Backend(format!("{}{path}: response does not match the wire schema: {e}", self.base)))
    }
}
