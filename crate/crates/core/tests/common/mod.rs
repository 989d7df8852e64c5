//! In-process stub servers for the HTTP clients.

#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use synfaith::backend::{GenerationBackend, MockLm, SegmentRequest, SegmentResponse, WireToken};
use synfaith::features::{lexical_align_score, HealthResponse, ScoreRequest, ScoreResponse};
use synfaith::trace::{SentenceRecord, TokenDist};

pub struct Stub {
    pub url: String,
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for Stub {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Serve `handler(method, path, body) -> (status, body)` on a free port.
pub fn serve<F>(handler: F) -> Stub
where
    F: Fn(&str, &str, &str) -> (u16, String) + Send + 'static,
{
    let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
    let port = server.server_addr().to_ip().unwrap().port();
    let s = server.clone();
    let handle = std::thread::spawn(move || {
        while let Ok(mut req) = s.recv() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let method = req.method().as_str().to_string();
            let (status, text) = handler(&method, req.url(), &body);
            let header = tiny_http::Header::from_bytes("Content-Type", "application/json").unwrap();
            let _ = req.respond(tiny_http::Response::from_string(text).with_status_code(status).with_header(header));
        }
    });
    Stub {
        url: format!("http://127.0.0.1:{port}"),
        server,
        handle: Some(handle),
    }
}

fn top(dist: &TokenDist, k: usize) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f64)> = match dist {
        TokenDist::Dense { dense } => dense.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect(),
        TokenDist::TopK { topk, .. } => topk.clone(),
    };
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v.truncate(k);
    v
}

/// A `/v1/segment` server backed by a mock LM. With `inline_noctx` false it
/// leaves out the context-free rows and answers the client's replay call
/// from what it generated.
pub fn segment_stub(lm: MockLm, inline_noctx: bool) -> (Stub, Arc<Mutex<Vec<SegmentRequest>>>) {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let log = seen.clone();
    let emitted: Mutex<HashMap<String, SentenceRecord>> = Mutex::new(HashMap::new());
    let replays: Mutex<HashMap<Vec<u32>, SentenceRecord>> = Mutex::new(HashMap::new());
    let stub = serve(move |method, path, body| {
        if method != "POST" || path != "/v1/segment" {
            return (404, "{}".into());
        }
        let req: SegmentRequest = match serde_json::from_str(body) {
            Ok(r) => r,
            Err(e) => return (400, format!("{{\"error\":{:?}}}", e.to_string())),
        };
        log.lock().unwrap().push(req.clone());
        if let Some(ids) = &req.force_tokens {
            let Some(rec) = replays.lock().unwrap().get(ids).cloned() else {
                return (400, "{\"error\":\"unknown replay\"}".into());
            };
            let tokens = rec
                .tokens
                .iter()
                .map(|t| WireToken {
                    token_id: t.token_id,
                    surface: t.surface.clone(),
                    p: t.dist_without_context.prob_of(t.token_id).unwrap_or(0.0),
                    topk_ctx: top(&t.dist_without_context, req.top_k),
                    topk_noctx: None,
                })
                .collect();
            let resp = SegmentResponse { tokens, eos: rec.is_eos_terminal, hidden: None };
            return (200, serde_json::to_string(&resp).unwrap());
        }
        let prefix: Vec<SentenceRecord> = {
            let e = emitted.lock().unwrap();
            match req.prefix.iter().map(|t| e.get(t).cloned()).collect::<Option<Vec<_>>>() {
                Some(p) => p,
                None => return (400, "{\"error\":\"unknown prefix\"}".into()),
            }
        };
        let rec = match lm.generate_sentence(&req.prompt, req.context.as_deref(), &prefix, req.mode.to_mode()) {
            Ok(r) => r,
            Err(e) => return (500, format!("{{\"error\":{:?}}}", e.to_string())),
        };
        emitted.lock().unwrap().insert(rec.text.clone(), rec.clone());
        replays
            .lock()
            .unwrap()
            .insert(rec.tokens.iter().map(|t| t.token_id).collect(), rec.clone());
        let tokens = rec
            .tokens
            .iter()
            .map(|t| WireToken {
                token_id: t.token_id,
                surface: t.surface.clone(),
                p: t.prob_with_context,
                topk_ctx: top(&t.dist_with_context, req.top_k),
                topk_noctx: inline_noctx.then(|| top(&t.dist_without_context, req.top_k)),
            })
            .collect();
        let hidden = req.return_hidden.as_ref().map(|layers| {
            rec.final_hidden
                .iter()
                .filter(|(l, _)| layers.contains(l))
                .map(|(l, v)| (*l, v.clone()))
                .collect()
        });
        let resp = SegmentResponse { tokens, eos: rec.is_eos_terminal, hidden };
        (200, serde_json::to_string(&resp).unwrap())
    });
    (stub, seen)
}

/// An alignment service stub scoring with the lexical scorer. `bias` is
/// added to every score, so a large value breaks the range contract.
pub fn align_stub(bias: f64) -> Stub {
    serve(move |method, path, body| match (method, path) {
        ("GET", "/health") => {
            let h = HealthResponse { status: "ok".into(), model_id: "lexical-stub".into() };
            (200, serde_json::to_string(&h).unwrap())
        }
        ("POST", "/score") => {
            let req: ScoreRequest = match serde_json::from_str(body) {
                Ok(r) => r,
                Err(_) => return (400, "{\"error\":\"bad request\"}".into()),
            };
            if req.claim.trim().is_empty() || req.context.trim().is_empty() {
                return (422, "{\"error\":\"empty field\"}".into());
            }
            let r = ScoreResponse {
                score: lexical_align_score(&req.claim, &req.context) + bias,
                model_id: "lexical-stub".into(),
                latency_ms: 0,
            };
            (200, serde_json::to_string(&r).unwrap())
        }
        _ => (404, "{}".into()),
    })
}
