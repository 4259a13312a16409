//! Experiment configuration: a TOML file plus `--dotted.path value` overrides.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{GeneratorConfig, PromptId};
use crate::data::CorpusConfig;
use crate::losses::ContextNorm;
use crate::models::{EmbeddingMode, ModelConfig, Task, Variant};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}` is ambiguous; use one of: {}", candidates.join(", "))]
    AmbiguousKey { key: String, candidates: Vec<String> },
    #[error("malformed override `{0}`: expected --key value or --key=value")]
    MalformedOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    pub mode: EmbeddingMode,
    pub task: Task,
    pub prompt: PromptId,
    pub alpha: f64,
    pub context_norm: ContextNorm,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Held-out context-loss evaluations during GenerativeAware training.
    pub checkpoints: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::GenerativeAware,
            mode: EmbeddingMode::Fixed,
            task: Task::Asr,
            prompt: PromptId::P4,
            alpha: 100.0,
            context_norm: ContextNorm::Norm,
            lr: 1e-3,
            lr_schedule: LrSchedule::Linear,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: 5.0,
            steps: 2500,
            batch_size: 8,
            seeds: vec![1, 2, 3],
            checkpoints: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Decays linearly from `lr` at the first step towards 0 after the last.
    #[default]
    Linear,
}

impl LrSchedule {
    /// Learning rate for 1-based `step` out of `steps`.
    pub fn lr(self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (steps + 1 - step.min(steps)) as f64 / steps.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreviousText {
    #[default]
    GroundTruth,
    Decoded,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Source of the previous transcript for injection variants at evaluation.
    pub previous_text: PreviousText,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub out_dir: String,
    /// Generation cache file; empty keeps the cache in memory.
    pub cache: String,
    /// Checkpoint read by `eval`.
    pub checkpoint: String,
    /// GenerativeInjection checkpoint whose text encoder teaches
    /// GenerativeAware; empty trains one with the same seed first.
    pub teacher: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            out_dir: "runs".into(),
            cache: String::new(),
            checkpoint: String::new(),
            teacher: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if t.seeds.is_empty() {
            return bad("train.seeds must not be empty");
        }
        if !(t.alpha >= 0.0 && t.alpha.is_finite()) {
            return bad("train.alpha must be finite and >= 0");
        }
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.eps > 0.0) {
            return bad("optimizer settings out of range");
        }
        if !(t.clip > 0.0) {
            return bad("train.clip must be positive");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.model.d_feat != self.corpus.d_feat {
            return bad("model.d_feat must equal corpus.d_feat");
        }
        self.corpus.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    /// Short hash of the fully resolved configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..6])
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Splits `--key value` / `--key=value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let a = &args[i];
        let key = a
            .strip_prefix("--")
            .filter(|k| !k.is_empty())
            .ok_or_else(|| ConfigError::MalformedOverride(a.clone()))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let v = args
                .get(i + 1)
                .ok_or_else(|| ConfigError::MalformedOverride(a.clone()))?;
            out.push((key.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(out)
}

fn leaf_paths(value: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    if let toml::Value::Table(t) = value {
        for (k, v) in t {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match v {
                toml::Value::Table(_) => leaf_paths(v, &path, out),
                _ => {
                    out.insert(path);
                }
            }
        }
    }
}

/// Resolves a dotted path or a leaf name that occurs exactly once.
fn resolve_key(key: &str, leaves: &BTreeSet<String>) -> Result<String, ConfigError> {
    let key = key.replace('-', "_");
    if leaves.contains(&key) {
        return Ok(key);
    }
    let suffix = format!(".{key}");
    let candidates: Vec<String> = leaves.iter().filter(|l| l.ends_with(&suffix)).cloned().collect();
    match candidates.len() {
        0 => Err(ConfigError::UnknownKey(key)),
        1 => Ok(candidates.into_iter().next().expect("one candidate")),
        _ => Err(ConfigError::AmbiguousKey { key, candidates }),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    match toml::from_str::<Wrap>(&format!("v = {raw}")) {
        Ok(w) => w.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut toml::value::Table, path: &str, value: toml::Value) {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts.pop().expect("non-empty path");
    let mut table = root;
    for p in parts {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::value::Table::new()));
        if !entry.is_table() {
            *entry = toml::Value::Table(toml::value::Table::new());
        }
        table = entry.as_table_mut().expect("just made a table");
    }
    table.insert(last.to_string(), value);
}

/// Reads `path` (if any), applies `overrides` in order, and validates.
pub fn load_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    config_from_str(&text, overrides)
}

pub fn config_from_str(text: &str, overrides: &[(String, String)]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::value::Table = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    // validate the file on its own first so unknown keys are reported as such
    let _: ExperimentConfig =
        toml::Value::Table(table.clone()).try_into().map_err(|e: toml::de::Error| parse_error(e))?;

    let defaults = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
    let mut leaves = BTreeSet::new();
    leaf_paths(&defaults, "", &mut leaves);
    for (key, raw) in overrides {
        let path = resolve_key(key, &leaves)?;
        set_path(&mut table, &path, parse_value(raw));
    }
    let cfg: ExperimentConfig =
        toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| parse_error(e))?;
    cfg.validate()?;
    Ok(cfg)
}

fn parse_error(e: toml::de::Error) -> ConfigError {
    let msg = e.message().to_string();
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return ConfigError::UnknownKey(rest[..end].to_string());
        }
    }
    ConfigError::Parse(msg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ov(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn linear_schedule_endpoints() {
        let s = LrSchedule::Linear;
        assert_eq!(s.lr(0.01, 1, 100), 0.01);
        assert_eq!(s.lr(0.01, 100, 100), 0.01 / 100.0);
        assert_eq!(s.lr(0.01, 51, 100), 0.01 * 0.5);
        assert_eq!(LrSchedule::Constant.lr(0.01, 100, 100), 0.01);
        let cfg = config_from_str("[train]\nlr_schedule = \"constant\"\n", &[]).unwrap();
        assert_eq!(cfg.train.lr_schedule, LrSchedule::Constant);
    }

    #[test]
    fn flag_overrides_file() {
        let cfg = config_from_str("[train]\nalpha = 1.0\n", &ov(&[("alpha", "0.5")])).unwrap();
        assert_eq!(cfg.train.alpha, 0.5);
        let cfg = config_from_str("[train]\nalpha = 1.0\n", &ov(&[("train.alpha", "0.25")])).unwrap();
        assert_eq!(cfg.train.alpha, 0.25);
    }

    #[test]
    fn empty_overrides_keep_file_values() {
        let text = "[train]\nalpha = 0.75\nsteps = 12\nseeds = [4]\nprompt = \"P2\"\n[corpus]\ntopics = 6\n";
        let cfg = config_from_str(text, &[]).unwrap();
        assert_eq!(cfg.train.alpha, 0.75);
        assert_eq!(cfg.train.steps, 12);
        assert_eq!(cfg.train.seeds, vec![4]);
        assert_eq!(cfg.train.prompt, PromptId::P2);
        assert_eq!(cfg.corpus.topics, 6);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = config_from_str("[train]\nalhpa = 1.0\n", &[]).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "alhpa"), "{err}");
        assert!(err.to_string().contains("alhpa"));
        let err = config_from_str("", &ov(&[("alhpa", "1")])).unwrap_err();
        assert!(matches!(&err, ConfigError::UnknownKey(k) if k == "alhpa"));
        let err = config_from_str("[nope]\nx = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn ambiguous_leaf_lists_candidates() {
        let err = config_from_str("", &ov(&[("seed", "3")])).unwrap_err();
        assert!(matches!(err, ConfigError::AmbiguousKey { .. }));
        let cfg = config_from_str("", &ov(&[("corpus.seed", "3")])).unwrap();
        assert_eq!(cfg.corpus.seed, 3);
    }

    #[test]
    fn type_mismatch_and_range_errors() {
        assert!(matches!(
            config_from_str("", &ov(&[("steps", "many")])),
            Err(ConfigError::Parse(_))
        ));
        assert!(matches!(
            config_from_str("", &ov(&[("alpha", "-1")])),
            Err(ConfigError::Invalid(_))
        ));
        assert!(matches!(
            config_from_str("[train]\nseeds = []\n", &[]),
            Err(ConfigError::Invalid(_))
        ));
        assert!(config_from_str("", &ov(&[("prompt", "P9")])).is_err());
    }

    #[test]
    fn string_and_enum_overrides() {
        let cfg = config_from_str(
            "",
            &ov(&[("variant", "baseline"), ("backend", "echo"), ("previous-text", "decoded"), ("seeds", "[7, 8]")]),
        )
        .unwrap();
        assert_eq!(cfg.train.variant, Variant::Baseline);
        assert_eq!(cfg.generator.backend, crate::context::BackendKind::Echo);
        assert_eq!(cfg.eval.previous_text, PreviousText::Decoded);
        assert_eq!(cfg.train.seeds, vec![7, 8]);
    }

    #[test]
    fn override_argument_forms() {
        let args: Vec<String> = ["--alpha", "0.5", "--train.steps=3"].iter().map(|s| s.to_string()).collect();
        assert_eq!(parse_overrides(&args).unwrap(), ov(&[("alpha", "0.5"), ("train.steps", "3")]));
        assert!(parse_overrides(&["alpha".to_string()]).is_err());
        assert!(parse_overrides(&["--alpha".to_string()]).is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = config_from_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
    }
}
