//! Chat-completions client for external recaptioning.
//!
//! Configured through `ROOMDIFF_LLM_ENDPOINT` (full URL of an
//! OpenAI-compatible `/chat/completions` route), `ROOMDIFF_LLM_KEY` and
//! optionally `ROOMDIFF_LLM_MODEL`.

use std::time::Duration;

use roomdiff::corpus::{CaptionRewriter, Tags};

pub const ENDPOINT_VAR: &str = "ROOMDIFF_LLM_ENDPOINT";
pub const KEY_VAR: &str = "ROOMDIFF_LLM_KEY";
pub const MODEL_VAR: &str = "ROOMDIFF_LLM_MODEL";

pub struct ChatClient {
    endpoint: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl ChatClient {
    /// Client from the environment, or `None` when no endpoint is set.
    pub fn from_env() -> Option<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty())?;
        Some(Self {
            endpoint,
            key: std::env::var(KEY_VAR).ok().filter(|s| !s.is_empty()),
            model: std::env::var(MODEL_VAR).unwrap_or_else(|_| "gpt-4o-mini".into()),
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(60)).build(),
        })
    }
}

impl CaptionRewriter for ChatClient {
    fn rewrite(&self, tags: &Tags, system_prompt: &str) -> Result<String, String> {
        let tag_text = serde_json::to_string(tags).map_err(|e| e.to_string())?;
        let body = serde_json::json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                { "role": "system", "content": system_prompt },
                { "role": "user", "content": tag_text },
            ],
        });
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let reply: serde_json::Value = req
            .send_json(body)
            .map_err(|e| e.to_string())?
            .into_json()
            .map_err(|e| e.to_string())?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| format!("unexpected reply: {reply}"))
    }
}
