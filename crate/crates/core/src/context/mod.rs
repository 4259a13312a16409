//! Generated context text: prompt templates, generator backends, and the
//! on-disk generation cache.

pub mod cache;
pub mod http;
pub mod oracle;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Language;
pub use cache::ContextCache;
pub use http::HttpGenerator;
pub use oracle::{OracleGenerator, OverlapRates};
pub use vocab::{TextVocab, CLS, UNK};

/// Cap on generated text length, in whitespace tokens.
pub const MAX_TOKENS: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum ContextError {
    #[error("unknown prompt id `{0}` (expected P1, P2, P3 or P4)")]
    UnknownPrompt(String),
    #[error("segment {0} has no known topic; the oracle backend needs one")]
    UnknownTopic(String),
    #[error("transport error after {attempts} attempt(s): {last}")]
    Transport { attempts: usize, last: String },
    #[error("malformed response: {0}")]
    Parse(String),
    #[error("generator misconfigured: {0}")]
    Config(String),
    #[error("cache i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cache file corrupt at line {line}: {reason}")]
    Integrity { line: usize, reason: String },
}

pub type Result<T, E = ContextError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PromptId {
    P1,
    P2,
    P3,
    P4,
}

impl PromptId {
    pub const ALL: [PromptId; 4] = [PromptId::P1, PromptId::P2, PromptId::P3, PromptId::P4];

    pub fn template(self) -> &'static str {
        match self {
            PromptId::P1 => "Provide a next sentence for the given text:",
            PromptId::P2 => "This is part of the answer. Can you predict what was the question? text :",
            PromptId::P3 => "Predict topic of the given text:",
            PromptId::P4 => "Predict title of the given text:",
        }
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl FromStr for PromptId {
    type Err = ContextError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "P1" => Ok(PromptId::P1),
            "P2" => Ok(PromptId::P2),
            "P3" => Ok(PromptId::P3),
            "P4" => Ok(PromptId::P4),
            _ => Err(ContextError::UnknownPrompt(s.to_string())),
        }
    }
}

/// Template, one space, then the previous text.
pub fn render_prompt(prompt: PromptId, prev_text: &str) -> String {
    format!("{} {}", prompt.template(), prev_text)
}

/// Keeps at most [`MAX_TOKENS`] whitespace tokens. Text within the cap is
/// returned unchanged.
pub fn cap_tokens(text: &str) -> (String, usize) {
    let n = text.split_whitespace().count();
    if n <= MAX_TOKENS {
        return (text.to_string(), n);
    }
    let kept: Vec<&str> = text.split_whitespace().take(MAX_TOKENS).collect();
    (kept.join(" "), MAX_TOKENS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Oracle,
    Http,
    Echo,
}

/// What to generate from: the source segment `j` and its text.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    /// `"stream/index"` of the source segment.
    pub segment: String,
    /// Stream topic, when known (synthetic corpora).
    pub topic: Option<usize>,
    pub prompt: PromptId,
    pub prev_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedContext {
    pub segment: String,
    pub prompt: PromptId,
    pub text: String,
    pub tokens: usize,
    pub backend: BackendKind,
}

pub trait ContextGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedContext>;

    /// Identifies the backend and every setting that changes its output.
    fn fingerprint(&self) -> String;

    fn kind(&self) -> BackendKind;

    /// Parameters the backend adds to an inference-time system that calls it.
    fn parameter_count(&self) -> usize {
        0
    }
}

/// Returns the previous text verbatim.
#[derive(Debug, Clone, Default)]
pub struct EchoGenerator;

impl ContextGenerator for EchoGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedContext> {
        let (text, tokens) = cap_tokens(&request.prev_text);
        Ok(GeneratedContext {
            segment: request.segment.clone(),
            prompt: request.prompt,
            text,
            tokens,
            backend: BackendKind::Echo,
        })
    }

    fn fingerprint(&self) -> String {
        "echo".into()
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Echo
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub backend: BackendKind,
    pub seed: u64,
    pub p_noise: f64,
    pub overlap: OverlapRates,
    /// Completion endpoint of the http backend; empty when unused.
    pub url: String,
    pub model: String,
    pub timeout_ms: u64,
    pub retries: usize,
    /// Parameter count attributed to an http-served model.
    pub declared_params: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Oracle,
            seed: 0,
            p_noise: 0.0,
            overlap: OverlapRates::default(),
            url: String::new(),
            model: "default".into(),
            timeout_ms: 30_000,
            retries: 2,
            declared_params: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_noise) {
            return Err(ContextError::Config("p_noise must lie in [0, 1]".into()));
        }
        self.overlap.validate()
    }
}

/// Builds the configured backend. The oracle needs the corpus language.
pub fn build_generator(cfg: &GeneratorConfig, language: Option<&Language>) -> Result<Box<dyn ContextGenerator>> {
    cfg.validate()?;
    Ok(match cfg.backend {
        BackendKind::Oracle => {
            let language = language.ok_or_else(|| {
                ContextError::Config("the oracle backend needs a synthetic corpus".into())
            })?;
            Box::new(OracleGenerator::new(language.clone(), cfg.seed, cfg.p_noise, cfg.overlap)?)
        }
        BackendKind::Http if cfg.url.is_empty() => {
            return Err(ContextError::Config("the http backend needs generator.url".into()))
        }
        BackendKind::Http => Box::new(HttpGenerator::new(
            cfg.url.clone(),
            cfg.model.clone(),
            std::time::Duration::from_millis(cfg.timeout_ms),
            cfg.retries,
            cfg.declared_params,
        )),
        BackendKind::Echo => Box::new(EchoGenerator),
    })
}
