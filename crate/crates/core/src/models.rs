//! The four system variants: a baseline acoustic model, injection of an
//! encoded text context through cross-attention, and a student that predicts
//! the context embedding from the acoustics alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::{
    mean_pool, AttentionConfig, Container, ContainerError, Embedding, Graph, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, Tensor, TensorError, TransformerLayer, Var,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{0:?} needs a context input for this segment")]
    MissingContext(Variant),
    #[error("{0:?} has no {1}")]
    NoComponent(Variant, &'static str),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint header: {0}")]
    Header(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Baseline,
    ContextInjection,
    GenerativeInjection,
    GenerativeAware,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::ContextInjection,
        Variant::GenerativeInjection,
        Variant::GenerativeAware,
    ];

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "A",
            Variant::ContextInjection => "C",
            Variant::GenerativeInjection => "D",
            Variant::GenerativeAware => "E",
        }
    }

    pub fn uses_text_encoder(self) -> bool {
        matches!(self, Variant::ContextInjection | Variant::GenerativeInjection)
    }

    pub fn uses_fusion(self) -> bool {
        self != Variant::Baseline
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "baseline" | "a" => Ok(Variant::Baseline),
            "context-injection" | "c" => Ok(Variant::ContextInjection),
            "generative-injection" | "d" => Ok(Variant::GenerativeInjection),
            "generative-aware" | "e" => Ok(Variant::GenerativeAware),
            _ => Err(format!("unknown variant `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Leading classification token state.
    #[default]
    Fixed,
    /// Full last-layer sequence.
    Sequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Transcription with CTC.
    #[default]
    Asr,
    /// Transcription with entity tag tokens around tagged phrases, with CTC.
    Ner,
    /// Three-way classification with cross-entropy.
    Sentiment,
}

impl Task {
    pub fn is_sequence(self) -> bool {
        self != Task::Sentiment
    }
}

pub const SENTIMENT_CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_feat: usize,
    pub d_model: usize,
    pub d_text: usize,
    pub acoustic_layers: usize,
    pub text_layers: usize,
    pub acoustic_heads: usize,
    pub text_heads: usize,
    pub ffn_mult: usize,
    pub fusion_heads: usize,
    pub fusion_head_dim: usize,
    /// Adds sinusoidal position codes after the acoustic input projection.
    pub positional_encoding: bool,
    /// Frames on each side an acoustic frame attends to; `None` (or any
    /// window covering the segment) is global. 0 keeps every frame's encoding
    /// local to that frame.
    pub acoustic_window: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_feat: 16,
            d_model: 64,
            d_text: 32,
            acoustic_layers: 2,
            text_layers: 2,
            acoustic_heads: 4,
            text_heads: 2,
            ffn_mult: 4,
            fusion_heads: 1,
            fusion_head_dim: 32,
            positional_encoding: false,
            acoustic_window: Some(0),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_feat", self.d_feat),
            ("d_model", self.d_model),
            ("d_text", self.d_text),
            ("acoustic_heads", self.acoustic_heads),
            ("text_heads", self.text_heads),
            ("ffn_mult", self.ffn_mult),
            ("fusion_heads", self.fusion_heads),
            ("fusion_head_dim", self.fusion_head_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.acoustic_heads != 0 {
            return Err(ModelError::Config("d_model must be divisible by acoustic_heads".into()));
        }
        if self.d_text % self.text_heads != 0 {
            return Err(ModelError::Config("d_text must be divisible by text_heads".into()));
        }
        if self.d_model < 2 || self.d_text < 2 {
            return Err(ModelError::Config("layer norm needs widths of at least 2".into()));
        }
        Ok(())
    }

    pub fn fusion_attention(&self) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.fusion_heads,
            head_dim: self.fusion_head_dim,
            query_dim: self.d_model,
            kv_dim: self.d_text,
            out_dim: self.d_model,
            window: None,
        }
    }
}

/// Everything needed to rebuild a model skeleton; stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub variant: Variant,
    pub mode: EmbeddingMode,
    pub task: Task,
    pub model: ModelConfig,
    /// Output vocabulary of the CTC head, blank included.
    pub output_vocab: usize,
    pub text_vocab: usize,
    pub seed: u64,
}

impl SystemSpec {
    pub fn head_width(&self) -> usize {
        match self.task {
            Task::Sentiment => SENTIMENT_CLASSES,
            Task::Asr | Task::Ner => self.output_vocab,
        }
    }
}

pub fn sinusoidal_positions(frames: usize, width: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * width);
    for t in 0..frames {
        for i in 0..width {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / width as f64);
            let a = t as f64 * rate;
            data.push(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    Tensor::new(vec![frames, width], data).expect("shape matches")
}

#[derive(Debug, Clone)]
pub struct AcousticEncoder {
    pub input: Linear,
    pub layers: Vec<TransformerLayer>,
    pub d_model: usize,
    pub positional: bool,
}

impl AcousticEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        let layers = (0..cfg.acoustic_layers)
            .map(|l| {
                let mut layer = TransformerLayer::new(
                    store,
                    &format!("acoustic.layer{l}"),
                    cfg.d_model,
                    cfg.acoustic_heads,
                    cfg.ffn_mult * cfg.d_model,
                    seed,
                );
                layer.attn.cfg.window = cfg.acoustic_window;
                layer
            })
            .collect();
        Self {
            input: Linear::new(store, "acoustic.input", cfg.d_feat, cfg.d_model, true, seed),
            layers,
            d_model: cfg.d_model,
            positional: cfg.positional_encoding,
        }
    }

    /// `T×d_feat → T×d_model`.
    pub fn forward(&self, g: &mut Graph<'_>, features: &Tensor) -> Result<Var> {
        if features.shape().len() != 2 || features.rows() == 0 {
            return Err(ModelError::Tensor(TensorError::Invalid {
                op: "encode_audio",
                msg: format!("expected a non-empty T×d_feat matrix, got {:?}", features.shape()),
            }));
        }
        let x = g.input(features.clone());
        let mut h = self.input.forward(g, x)?;
        if self.positional {
            let pe = g.input(sinusoidal_positions(features.rows(), self.d_model));
            h = g.tape.add(h, pe)?;
        }
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        Ok(h)
    }
}

/// Both outputs of the text encoder.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoding {
    /// State of the leading classification token, `[d_text]`.
    pub cls: Var,
    /// Full last layer, `L×d_text`.
    pub sequence: Var,
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub embed: Embedding,
    pub layers: Vec<TransformerLayer>,
    /// Final norm over the last layer, as pre-norm stacks need.
    pub norm: LayerNorm,
    pub vocab: usize,
    pub d_text: usize,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, vocab: usize, seed: u64) -> Self {
        let layers = (0..cfg.text_layers)
            .map(|l| {
                TransformerLayer::new(
                    store,
                    &format!("text.layer{l}"),
                    cfg.d_text,
                    cfg.text_heads,
                    cfg.ffn_mult * cfg.d_text,
                    seed,
                )
            })
            .collect();
        Self {
            embed: Embedding::new(store, "text.embed", vocab, cfg.d_text, seed),
            layers,
            norm: LayerNorm::new(store, "text.norm", cfg.d_text),
            vocab,
            d_text: cfg.d_text,
        }
    }

    /// `ids` must start with the classification token; an empty slice is
    /// treated as the classification token alone.
    pub fn forward(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<TextEncoding> {
        let cls_only = [crate::context::CLS];
        let ids = if ids.is_empty() { &cls_only[..] } else { ids };
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(ModelError::Tensor(TensorError::IndexOutOfRange {
                index: bad,
                size: self.vocab,
            }));
        }
        let mut h = self.embed.forward(g, ids)?;
        for layer in &self.layers {
            h = layer.forward(g, h)?;
        }
        let h = self.norm.forward(g, h)?;
        let first = g.tape.gather(h, &[0])?;
        let cls = g.tape.reshape(first, &[self.d_text])?;
        Ok(TextEncoding { cls, sequence: h })
    }

    pub fn num_params(&self) -> usize {
        self.embed.num_params()
            + self.layers.iter().map(TransformerLayer::num_params).sum::<usize>()
            + self.norm.num_params()
    }
}

/// `Z̃ = CA(Z, e) + Z`.
#[derive(Debug, Clone)]
pub struct ContextFusion {
    pub attn: MultiHeadAttention,
}

impl ContextFusion {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, "fusion", cfg.fusion_attention(), seed),
        }
    }

    /// `e` may be a `[d_text]` vector (a length-1 key/value sequence) or an
    /// `L×d_text` sequence.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var, e: Var) -> Result<Var> {
        let shape = g.value(e).shape().to_vec();
        let kv = if shape.len() == 1 {
            g.tape.reshape(e, &[1, shape[0]])?
        } else {
            e
        };
        let ca = self.attn.forward(g, z, kv)?;
        Ok(g.tape.add(ca, z)?)
    }

    pub fn zero_value_projection(&self, store: &mut ParamStore) {
        self.attn.value.zero(store);
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params()
    }
}

/// `ê = W·mean_pool(Z) + b`.
#[derive(Debug, Clone)]
pub struct ContextStudent {
    pub proj: Linear,
}

impl ContextStudent {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            proj: Linear::new(store, "student.proj", cfg.d_model, cfg.d_text, true, seed),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let pooled = mean_pool(&mut g.tape, z)?;
        Ok(self.proj.forward(g, pooled)?)
    }

    pub fn num_params(&self) -> usize {
        self.proj.num_params()
    }
}

#[derive(Debug, Clone)]
pub struct TaskHead {
    pub proj: Linear,
    pub task: Task,
}

impl TaskHead {
    pub fn new(store: &mut ParamStore, spec: &SystemSpec) -> Self {
        Self {
            proj: Linear::new(store, "head.proj", spec.model.d_model, spec.head_width(), true, spec.seed),
            task: spec.task,
        }
    }

    /// Frame logits `T×V` for sequence tasks, class logits `[3]` for sentiment.
    pub fn forward(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let x = match self.task {
            Task::Sentiment => mean_pool(&mut g.tape, z)?,
            Task::Asr | Task::Ner => z,
        };
        Ok(self.proj.forward(g, x)?)
    }
}

/// Context supplied to one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum ContextInput<'a> {
    None,
    /// Text-encoder ids, starting with the classification token.
    Tokens(&'a [usize]),
    /// All-zero context embedding (stream start).
    Zero,
}

/// What injection variants receive at the first segment of a stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FirstSegmentPolicy {
    ZeroEmbedding,
    Unaffected,
}

pub fn first_segment_context(variant: Variant) -> FirstSegmentPolicy {
    if variant.uses_text_encoder() {
        FirstSegmentPolicy::ZeroEmbedding
    } else {
        FirstSegmentPolicy::Unaffected
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Acoustic encoder output.
    pub z: Var,
    /// Input to the head (`z` itself for the baseline).
    pub fused: Var,
    /// Student prediction `ê` (GenerativeAware only).
    pub student: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ContextModel {
    pub spec: SystemSpec,
    pub params: ParamStore,
    pub acoustic: AcousticEncoder,
    pub head: TaskHead,
    pub fusion: Option<ContextFusion>,
    pub text: Option<TextEncoder>,
    pub student: Option<ContextStudent>,
}

impl ContextModel {
    /// Builds the variant's components only: GenerativeAware gets no text
    /// encoder, the baseline no fusion.
    pub fn new(spec: SystemSpec) -> Result<Self> {
        spec.model.validate()?;
        if spec.task.is_sequence() && spec.output_vocab < 2 {
            return Err(ModelError::Config("output vocabulary needs a blank and one label".into()));
        }
        if spec.variant.uses_text_encoder() && spec.text_vocab == 0 {
            return Err(ModelError::Config("text vocabulary is empty".into()));
        }
        let mut params = ParamStore::new();
        let cfg = spec.model.clone();
        let acoustic = AcousticEncoder::new(&mut params, &cfg, spec.seed);
        let head = TaskHead::new(&mut params, &spec);
        let fusion = spec
            .variant
            .uses_fusion()
            .then(|| ContextFusion::new(&mut params, &cfg, spec.seed));
        let text = spec
            .variant
            .uses_text_encoder()
            .then(|| TextEncoder::new(&mut params, &cfg, spec.text_vocab, spec.seed));
        let student = (spec.variant == Variant::GenerativeAware)
            .then(|| ContextStudent::new(&mut params, &cfg, spec.seed));
        Ok(Self {
            spec,
            params,
            acoustic,
            head,
            fusion,
            text,
            student,
        })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn encode_audio(&self, g: &mut Graph<'_>, features: &Tensor) -> Result<Var> {
        if features.shape().len() == 2 && features.last_dim() != self.spec.model.d_feat {
            return Err(ModelError::Tensor(TensorError::ShapeMismatch {
                op: "encode_audio",
                left: features.shape().to_vec(),
                right: vec![self.spec.model.d_feat],
            }));
        }
        self.acoustic.forward(g, features)
    }

    pub fn encode_text(&self, g: &mut Graph<'_>, ids: &[usize]) -> Result<TextEncoding> {
        self.text
            .as_ref()
            .ok_or(ModelError::NoComponent(self.variant(), "text encoder"))?
            .forward(g, ids)
    }

    pub fn fuse_context(&self, g: &mut Graph<'_>, z: Var, e: Var) -> Result<Var> {
        self.fusion
            .as_ref()
            .ok_or(ModelError::NoComponent(self.variant(), "fusion"))?
            .forward(g, z, e)
    }

    pub fn student_embed(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        self.student
            .as_ref()
            .ok_or(ModelError::NoComponent(self.variant(), "student"))?
            .forward(g, z)
    }

    fn context_embedding(&self, g: &mut Graph<'_>, ctx: ContextInput<'_>) -> Result<Var> {
        let d_text = self.spec.model.d_text;
        match ctx {
            ContextInput::None => Err(ModelError::MissingContext(self.variant())),
            ContextInput::Zero => Ok(g.input(Tensor::zeros(&[1, d_text]))),
            ContextInput::Tokens(ids) => {
                let enc = self.encode_text(g, ids)?;
                Ok(match self.spec.mode {
                    EmbeddingMode::Fixed => enc.cls,
                    EmbeddingMode::Sequence => enc.sequence,
                })
            }
        }
    }

    /// One forward pass on the graph, whose store must be `self.params` (or
    /// a store with the same layout).
    pub fn forward(&self, g: &mut Graph<'_>, features: &Tensor, ctx: ContextInput<'_>) -> Result<ForwardOutput> {
        let z = self.encode_audio(g, features)?;
        let (fused, student) = match self.variant() {
            Variant::Baseline => (z, None),
            Variant::ContextInjection | Variant::GenerativeInjection => {
                let e = self.context_embedding(g, ctx)?;
                (self.fuse_context(g, z, e)?, None)
            }
            Variant::GenerativeAware => {
                let e_hat = self.student_embed(g, z)?;
                (self.fuse_context(g, z, e_hat)?, Some(e_hat))
            }
        };
        let logits = self.head.forward(g, fused)?;
        Ok(ForwardOutput {
            logits,
            z,
            fused,
            student,
        })
    }

    /// Parameters on the inference path of this model. Generator parameters,
    /// when a backend declares them, are added by the caller.
    pub fn count_inference_params(&self) -> usize {
        let mut prefixes = vec!["acoustic.", "head."];
        if self.fusion.is_some() {
            prefixes.push("fusion.");
        }
        if self.variant().uses_text_encoder() {
            prefixes.push("text.");
        }
        if self.student.is_some() {
            prefixes.push("student.");
        }
        prefixes
            .iter()
            .map(|p| self.params.num_scalars_with_prefix(p))
            .sum()
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::to_string(&self.spec).expect("spec serializes");
        Container::from_params(&self.params, meta)
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let spec: SystemSpec =
            serde_json::from_str(&c.metadata).map_err(|e| ModelError::Header(e.to_string()))?;
        let mut model = Self::new(spec)?;
        let loaded = c.into_params();
        let expected: Vec<(&str, &[usize])> = model
            .params
            .iter()
            .map(|(n, p)| (n, p.value.shape()))
            .collect();
        let found: Vec<(&str, &[usize])> = loaded.iter().map(|(n, p)| (n, p.value.shape())).collect();
        if expected != found {
            return Err(ModelError::Header(
                "parameter names or shapes do not match the recorded variant".into(),
            ));
        }
        model.params = loaded;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }
}

/// Frozen text encoder that supplies distillation targets.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub encoder: TextEncoder,
    pub params: ParamStore,
    pub mode: EmbeddingMode,
}

impl Teacher {
    /// Takes the text encoder of a trained injection model.
    pub fn from_model(model: &ContextModel) -> Result<Self> {
        let encoder = model
            .text
            .clone()
            .ok_or(ModelError::NoComponent(model.variant(), "text encoder"))?;
        let mut params = model.params.clone();
        let params = params.split_off_prefix("text.");
        Ok(Self {
            encoder,
            params,
            mode: model.spec.mode,
        })
    }

    /// Target embedding `[d_text]`: the classification state, or the mean of
    /// the sequence in sequence mode.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new(&self.params, false);
        let enc = self.encoder.forward(&mut g, ids)?;
        let out = match self.mode {
            EmbeddingMode::Fixed => enc.cls,
            EmbeddingMode::Sequence => mean_pool(&mut g.tape, enc.sequence)?,
        };
        Ok(g.value(out).clone())
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }
}
