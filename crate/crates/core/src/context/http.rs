//! Client for a text-completion server.
//!
//! Request: `{"prompt": ..., "max_tokens": 256, "temperature": 0}`.
//! Response: `{"text": ...}`.

use std::time::Duration;

use super::{
    cap_tokens, render_prompt, BackendKind, ContextError, ContextGenerator, GeneratedContext,
    GenerationRequest, Result, MAX_TOKENS,
};

#[derive(Debug, Clone)]
pub struct HttpGenerator {
    url: String,
    model: String,
    retries: usize,
    declared_params: usize,
    agent: ureq::Agent,
}

impl HttpGenerator {
    pub fn new(url: String, model: String, timeout: Duration, retries: usize, declared_params: usize) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        Self {
            url,
            model,
            retries,
            declared_params,
            agent,
        }
    }

    /// Sends one prompt, retrying transport failures and non-success statuses
    /// up to the configured number of extra attempts.
    pub fn complete(&self, prompt: &str) -> Result<String> {
        let body = serde_json::json!({
            "prompt": prompt,
            "max_tokens": MAX_TOKENS,
            "temperature": 0,
        });
        let attempts = self.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.agent.post(&self.url).send_json(body.clone()) {
                Ok(resp) => {
                    let value: serde_json::Value = resp
                        .into_json()
                        .map_err(|e| ContextError::Parse(e.to_string()))?;
                    return value
                        .get("text")
                        .and_then(serde_json::Value::as_str)
                        .map(str::to_string)
                        .ok_or_else(|| ContextError::Parse("response has no string field `text`".into()));
                }
                Err(ureq::Error::Status(code, _)) => last = format!("status {code}"),
                Err(e) => last = e.to_string(),
            }
        }
        Err(ContextError::Transport { attempts, last })
    }
}

impl ContextGenerator for HttpGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedContext> {
        let raw = self.complete(&render_prompt(request.prompt, &request.prev_text))?;
        let (text, tokens) = cap_tokens(&raw);
        Ok(GeneratedContext {
            segment: request.segment.clone(),
            prompt: request.prompt,
            text,
            tokens,
            backend: BackendKind::Http,
        })
    }

    fn fingerprint(&self) -> String {
        format!("http|{}|{}", self.url, self.model)
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }

    fn parameter_count(&self) -> usize {
        self.declared_params
    }
}
