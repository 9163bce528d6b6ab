//! wasm-bindgen surface for the in-browser demo. Everything crosses the
//! boundary as JSON text in the session protocol's document shapes.

use std::sync::Arc;

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use tinylm::inference::{prompt_ids, token_distribution, Decoder};
use tinylm::session::protocol::{self, Envelope};
use tinylm::session::{Command, ErrorCode, Event, MemoryStore, Phase, Session};
use tinylm::tensor::CpuBackend;

#[cfg(target_arch = "wasm32")]
#[wasm_bindgen]
extern "C" {
    #[wasm_bindgen(js_namespace = performance)]
    fn now() -> f64;
}

fn to_json(events: &[Envelope]) -> String {
    let docs: Vec<Value> = events
        .iter()
        .map(|e| serde_json::from_slice(&protocol::encode_event(e)).expect("events encode as JSON"))
        .collect();
    Value::Array(docs).to_string()
}

fn error_json(code: ErrorCode, message: impl Into<String>) -> String {
    to_json(&[Envelope {
        reply_to: None,
        event: Event::error(code, message),
    }])
}

/// Parses a command document; `protocol_version` may be left out.
pub fn parse_command(doc: &str) -> Result<Command, String> {
    let mut value: Value = serde_json::from_str(doc).map_err(|e| e.to_string())?;
    if let Some(obj) = value.as_object_mut() {
        obj.entry("protocol_version").or_insert(json!(protocol::PROTOCOL_VERSION));
    }
    protocol::decode_command(value.to_string().as_bytes())
}

/// One learner's session, driven from JavaScript.
#[wasm_bindgen]
pub struct Studio {
    session: Session,
}

impl Default for Studio {
    fn default() -> Self {
        Self::new()
    }
}

#[wasm_bindgen]
impl Studio {
    #[wasm_bindgen(constructor)]
    pub fn new() -> Studio {
        #[allow(unused_mut)]
        let mut session = Session::new(Box::new(MemoryStore::default()), Arc::new(CpuBackend));
        #[cfg(target_arch = "wasm32")]
        session.set_clock(Arc::new(|| now() / 1000.0));
        Studio { session }
    }

    /// Handles one command document and returns the reply events as a
    /// JSON array.
    pub fn command(&mut self, doc: &str) -> String {
        match parse_command(doc) {
            Ok(cmd) => to_json(&self.session.handle(cmd)),
            Err(e) => error_json(ErrorCode::FormatError, e),
        }
    }

    /// Runs up to `steps` training steps. Called once per animation frame
    /// so the page keeps rendering.
    pub fn train(&mut self, steps: u32) -> String {
        let mut out = Vec::new();
        for _ in 0..steps {
            if self.session.phase() != Phase::Training {
                break;
            }
            out.extend(self.session.step());
        }
        to_json(&out)
    }

    pub fn phase(&self) -> String {
        match self.session.phase() {
            Phase::Idle => "idle",
            Phase::Training => "training",
            Phase::Paused => "paused",
        }
        .to_owned()
    }

    /// The distribution over the next character after `prompt`, as a JSON
    /// array of `{id, symbol, p}` holding the `k` likeliest entries.
    pub fn next_token_probs(&self, prompt: &str, temperature: f32, k: u32) -> String {
        let Some((cfg, vocab, weights)) = self.session.model_snapshot() else {
            return error_json(ErrorCode::IllegalState, "no model configured");
        };
        let logits = Decoder::new(weights, cfg, Arc::new(CpuBackend)).and_then(|d| {
            let ids = prompt_ids(&vocab, prompt);
            d.forward_full(&ids[ids.len().saturating_sub(cfg.context_len)..])
        });
        let logits = match logits {
            Ok(l) => l,
            Err(e) => return error_json(ErrorCode::InternalNumeric, e.to_string()),
        };
        let probs = token_distribution(&logits, temperature.max(1e-3), None);
        let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let top: Vec<Value> = ranked
            .into_iter()
            .take(k as usize)
            .map(|(id, p)| {
                let symbol = vocab.symbol(id as u32).map(String::from).unwrap_or_default();
                json!({ "id": id, "symbol": symbol, "p": p })
            })
            .collect();
        Value::Array(top).to_string()
    }
}
