//! Append-only generation cache: one checksummed JSON record per line, keyed
//! by (segment, prompt, backend fingerprint).

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BackendKind, ContextError, ContextGenerator, GeneratedContext, GenerationRequest, PromptId, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub segment: String,
    pub prompt: PromptId,
    pub fingerprint: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    segment: String,
    prompt: PromptId,
    fingerprint: String,
    text: String,
    tokens: usize,
    backend: BackendKind,
    tokenizer: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    crc: u32,
    record: Record,
}

const TOKENIZER: &str = "whitespace";

fn record_crc(r: &Record) -> u32 {
    crc32fast::hash(serde_json::to_string(r).expect("record serializes").as_bytes())
}

#[derive(Debug)]
pub struct ContextCache {
    path: Option<PathBuf>,
    entries: HashMap<CacheKey, GeneratedContext>,
    misses: usize,
}

impl ContextCache {
    /// A cache that lives only in memory.
    pub fn in_memory() -> Self {
        Self {
            path: None,
            entries: HashMap::new(),
            misses: 0,
        }
    }

    /// Loads `path` if it exists; new entries are appended to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut cache = Self {
            path: Some(path.to_path_buf()),
            entries: HashMap::new(),
            misses: 0,
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(cache),
            Err(source) => {
                return Err(ContextError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(ContextError::Integrity {
                line: text.lines().count(),
                reason: "last record is incomplete".into(),
            });
        }
        for (n, line) in text.lines().enumerate() {
            let corrupt = |reason: String| ContextError::Integrity { line: n + 1, reason };
            let parsed: Line = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
            if record_crc(&parsed.record) != parsed.crc {
                return Err(corrupt("checksum mismatch".into()));
            }
            let r = parsed.record;
            let key = CacheKey {
                segment: r.segment.clone(),
                prompt: r.prompt,
                fingerprint: r.fingerprint,
            };
            // first record for a key wins; entries are immutable
            cache.entries.entry(key).or_insert(GeneratedContext {
                segment: r.segment,
                prompt: r.prompt,
                text: r.text,
                tokens: r.tokens,
                backend: r.backend,
            });
        }
        Ok(cache)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of backend calls made through this handle.
    pub fn misses(&self) -> usize {
        self.misses
    }

    pub fn get(&self, key: &CacheKey) -> Option<&GeneratedContext> {
        self.entries.get(key)
    }

    pub fn get_or_generate(
        &mut self,
        backend: &dyn ContextGenerator,
        request: &GenerationRequest,
    ) -> Result<GeneratedContext> {
        let key = CacheKey {
            segment: request.segment.clone(),
            prompt: request.prompt,
            fingerprint: backend.fingerprint(),
        };
        if let Some(hit) = self.entries.get(&key) {
            return Ok(hit.clone());
        }
        let generated = backend.generate(request)?;
        self.misses += 1;
        if let Some(path) = &self.path {
            let record = Record {
                segment: key.segment.clone(),
                prompt: key.prompt,
                fingerprint: key.fingerprint.clone(),
                text: generated.text.clone(),
                tokens: generated.tokens,
                backend: generated.backend,
                tokenizer: TOKENIZER.into(),
            };
            let line = Line {
                crc: record_crc(&record),
                record,
            };
            let io = |source| ContextError::Io {
                path: path.display().to_string(),
                source,
            };
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
            writeln!(f, "{}", serde_json::to_string(&line).expect("line serializes")).map_err(io)?;
        }
        self.entries.insert(key, generated.clone());
        Ok(generated)
    }
}
