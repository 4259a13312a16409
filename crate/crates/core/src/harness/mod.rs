//! Experiment harness: configuration, optimizer, training, evaluation,
//! variant comparison and the gradient suite.

pub mod compare;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod optim;
pub mod train;

use std::path::{Path, PathBuf};

use crate::context::{build_generator, ContextCache, ContextError, ContextGenerator, TextVocab};
use crate::data::{generate_corpus, read_manifest, DataError, Language, StreamManifest};
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::models::{ContextModel, ModelError, SystemSpec, Teacher, Variant};
use crate::nn::{Tensor, TensorError};

pub use compare::{compare_variants, ExperimentReport, RunRecord};
pub use config::{load_config, ConfigError, ExperimentConfig, LrSchedule, PreviousText, TrainConfig};
pub use eval::{evaluate_system, ContextFeed, EvalMetrics, EvalRequest};
pub use train::{train_model, ContextSource, StepLog, TrainData, TrainSummary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_ACCEPTANCE: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("no context generator is available")]
    MissingGenerator,
    #[error("GenerativeAware training needs a teacher text encoder")]
    MissingTeacher,
    #[error("{0:?} needs context inputs")]
    MissingContext(Variant),
    #[error("{0}")]
    Mismatch(String),
    #[error("non-finite loss {value} at step {step} (segment {segment})")]
    NonFinite { step: usize, segment: String, value: f64 },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

impl From<TensorError> for HarnessError {
    fn from(e: TensorError) -> Self {
        Self::Model(ModelError::Tensor(e))
    }
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Context(ContextError::Config(_)) | Self::Data(DataError::Config(_)) => EXIT_CONFIG,
            Self::Acceptance(_) => EXIT_ACCEPTANCE,
            _ => EXIT_RUNTIME,
        }
    }
}

pub fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Manifest location of a split under the data directory.
pub fn manifest_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.jsonl"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

/// A trained model and its training record.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: ContextModel,
    pub summary: TrainSummary,
}

/// Corpus, vocabularies, generator and cache shared by all runs of one
/// configuration.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub language: Language,
    pub train: StreamManifest,
    pub eval: StreamManifest,
    pub vocab: TextVocab,
    pub cache: ContextCache,
    generator: Option<Box<dyn ContextGenerator>>,
}

impl Workspace {
    /// Reads the split manifests from the data directory when present,
    /// otherwise regenerates the corpus from the configuration.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let data_dir = PathBuf::from(&cfg.paths.data_dir);
        let (train_path, eval_path) = (manifest_path(&data_dir, "train"), manifest_path(&data_dir, "eval"));
        let language = Language::new(&cfg.corpus)?;
        let (train, eval) = if train_path.exists() && eval_path.exists() {
            let (train, eval) = (read_manifest(&train_path)?, read_manifest(&eval_path)?);
            for m in [&train, &eval] {
                if m.config != cfg.corpus {
                    return Err(HarnessError::Mismatch(format!(
                        "manifest for split {} was generated with a different corpus config",
                        m.split
                    )));
                }
            }
            (train, eval)
        } else {
            let corpus = generate_corpus(&cfg.corpus)?;
            (corpus.train, corpus.eval)
        };
        Self::from_parts(cfg, language, train, eval)
    }

    pub fn from_parts(
        cfg: ExperimentConfig,
        language: Language,
        train: StreamManifest,
        eval: StreamManifest,
    ) -> Result<Self, HarnessError> {
        let cache = if cfg.paths.cache.is_empty() {
            ContextCache::in_memory()
        } else {
            ContextCache::open(Path::new(&cfg.paths.cache))?
        };
        let vocab = TextVocab::new(&language.lexicon);
        Ok(Self {
            cfg,
            language,
            train,
            eval,
            vocab,
            cache,
            generator: None,
        })
    }

    /// Builds the configured backend on first use.
    pub fn generator(&mut self) -> Result<&dyn ContextGenerator, HarnessError> {
        if self.generator.is_none() {
            self.generator = Some(build_generator(&self.cfg.generator, Some(&self.language))?);
        }
        Ok(self.generator.as_deref().expect("just built"))
    }

    pub fn manifest(&self, split: Split) -> &StreamManifest {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    /// Context text per segment of a split, with generations served from
    /// the cache.
    pub fn context_texts(&mut self, split: Split, source: ContextSource) -> Result<Vec<Option<String>>, HarnessError> {
        self.context_texts_with(split, source, self.cfg.train.prompt)
    }

    pub fn context_texts_with(
        &mut self,
        split: Split,
        source: ContextSource,
        prompt: crate::context::PromptId,
    ) -> Result<Vec<Option<String>>, HarnessError> {
        if source == ContextSource::Generated {
            self.generator()?;
        }
        let manifest = match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        };
        train::context_texts(manifest, source, self.generator.as_deref(), &mut self.cache, prompt)
    }

    /// Teacher embeddings of the generated context of every segment.
    pub fn teacher_targets(&mut self, teacher: &Teacher, split: Split) -> Result<Vec<Option<Tensor>>, HarnessError> {
        let texts = self.context_texts(split, ContextSource::Generated)?;
        texts
            .iter()
            .map(|t| {
                t.as_deref()
                    .map(|t| teacher.embed(&self.vocab.encode(t)))
                    .transpose()
                    .map_err(HarnessError::from)
            })
            .collect()
    }

    pub fn spec(&self, variant: Variant, seed: u64) -> SystemSpec {
        SystemSpec {
            variant,
            mode: self.cfg.train.mode,
            task: self.cfg.train.task,
            model: self.cfg.model.clone(),
            output_vocab: self.language.lexicon.size(),
            text_vocab: if variant.uses_text_encoder() { self.vocab.size() } else { 0 },
            seed,
        }
    }

    /// Initializes and trains one variant. GenerativeAware needs `teacher`.
    pub fn train_variant(
        &mut self,
        variant: Variant,
        seed: u64,
        teacher: Option<&Teacher>,
        on_step: &mut dyn FnMut(&StepLog),
    ) -> Result<TrainedRun, HarnessError> {
        let mut model = ContextModel::new(self.spec(variant, seed))?;
        let texts = match ContextSource::for_variant(variant) {
            Some(source) => Some(self.context_texts(Split::Train, source)?),
            None => None,
        };
        let held_out = match (variant, teacher) {
            (Variant::GenerativeAware, Some(t)) => Some(self.teacher_targets(t, Split::Eval)?),
            _ => None,
        };
        let data = TrainData::prepare(
            &self.train.segments,
            &self.language,
            self.cfg.train.task,
            variant,
            texts.as_deref(),
            &self.vocab,
            teacher,
        )?;
        let held = held_out.as_deref().map(|targets| train::HeldOut {
            segments: &self.eval.segments,
            targets,
        });
        let summary = train_model(&mut model, &data, &self.cfg.train, seed, held, on_step)?;
        Ok(TrainedRun { model, summary })
    }

    /// Evaluates on the eval split, feeding context as configured.
    pub fn evaluate(&mut self, model: &ContextModel, teacher: Option<&Teacher>) -> Result<EvalMetrics, HarnessError> {
        let variant = model.variant();
        let source = ContextSource::for_variant(variant).filter(|_| variant.uses_text_encoder());
        let texts = match (source, self.cfg.eval.previous_text) {
            (Some(s), PreviousText::GroundTruth) => Some(self.context_texts(Split::Eval, s)?),
            _ => None,
        };
        if source == Some(ContextSource::Generated) {
            self.generator()?;
        }
        let targets = match teacher.filter(|_| variant == Variant::GenerativeAware) {
            Some(t) => Some(self.teacher_targets(t, Split::Eval)?),
            None => None,
        };
        let feed = match (source, &texts) {
            (None, _) => ContextFeed::None,
            (Some(_), Some(t)) => ContextFeed::Texts(t),
            (Some(s), None) => ContextFeed::Decoded {
                source: s,
                generator: self.generator.as_deref(),
                prompt: self.cfg.train.prompt,
            },
        };
        evaluate_system(
            model,
            EvalRequest {
                manifest: &self.eval,
                language: &self.language,
                vocab: &self.vocab,
                feed,
                teacher: targets.as_deref(),
                context_norm: self.cfg.train.context_norm,
            },
        )
    }
}
