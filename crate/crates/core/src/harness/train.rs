//! Per-variant context preparation, task targets and the training loop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::optim::{Adam, AdamConfig};
use super::HarnessError;
use crate::context::{ContextCache, ContextGenerator, GenerationRequest, PromptId, TextVocab};
use crate::data::{Language, Segment, StreamManifest, WordKind};
use crate::losses::{combined_loss, LossError, context_l2, context_l2_value, cross_entropy, ctc_loss, ctc_min_frames, LossConfig};
use crate::models::{ContextInput, ContextModel, Task, Teacher, Variant};
use crate::nn::{named_rng, Graph, Tensor, TensorError};

/// Where the previous-segment text of an injection variant comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextSource {
    GroundTruth,
    Generated,
}

impl ContextSource {
    pub fn for_variant(variant: Variant) -> Option<Self> {
        match variant {
            Variant::ContextInjection => Some(Self::GroundTruth),
            Variant::GenerativeInjection | Variant::GenerativeAware => Some(Self::Generated),
            Variant::Baseline => None,
        }
    }
}

/// Generation request for the text that conditions the segment after `prev`.
pub fn generation_request(prev: &Segment, prev_text: String, prompt: PromptId) -> GenerationRequest {
    GenerationRequest {
        segment: prev.key(),
        topic: Some(prev.topic),
        prompt,
        prev_text,
    }
}

/// Context text per segment of `manifest`, in order; `None` at stream starts.
pub fn context_texts(
    manifest: &StreamManifest,
    source: ContextSource,
    generator: Option<&dyn ContextGenerator>,
    cache: &mut ContextCache,
    prompt: PromptId,
) -> Result<Vec<Option<String>>, HarnessError> {
    let mut out = Vec::with_capacity(manifest.segments.len());
    let mut prev: Option<&Segment> = None;
    for seg in &manifest.segments {
        let p = prev.filter(|p| p.stream == seg.stream && p.index + 1 == seg.index);
        out.push(match (p, source) {
            (None, _) => None,
            (Some(p), ContextSource::GroundTruth) => Some(p.text()),
            (Some(p), ContextSource::Generated) => {
                let g = generator.ok_or(HarnessError::MissingGenerator)?;
                Some(cache.get_or_generate(g, &generation_request(p, p.text(), prompt))?.text)
            }
        });
        prev = Some(seg);
    }
    Ok(out)
}

/// Supervision for one segment.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Sequence(Vec<usize>),
    Class(usize),
}

/// ASR: the transcript ids. NER: keywords wrapped in their topic's tag
/// tokens. Sentiment: the stream's class.
pub fn target_for(seg: &Segment, language: &Language, task: Task) -> Result<Target, HarnessError> {
    let lex = &language.lexicon;
    let ids = lex.encode(&seg.transcript).map_err(HarnessError::Mismatch)?;
    Ok(match task {
        Task::Asr => Target::Sequence(ids),
        Task::Ner => {
            let mut out = Vec::with_capacity(ids.len() + 4);
            for id in ids {
                if let WordKind::Keyword { topic } = lex.kind(id) {
                    let tag = language.topic(topic).tag;
                    out.extend([lex.tag_open(tag), id, lex.tag_close(tag)]);
                } else {
                    out.push(id);
                }
            }
            Target::Sequence(out)
        }
        Task::Sentiment => Target::Class(seg.sentiment.index()),
    })
}

/// Everything a training run reads, indexed like the train segments.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub segments: &'a [Segment],
    pub targets: Vec<Target>,
    /// Text-encoder ids of the injected context; `None` means a zero
    /// embedding (stream start). Empty for variants without a text encoder.
    pub contexts: Vec<Option<Vec<usize>>>,
    /// Distillation targets for GenerativeAware; `None` skips the context loss.
    pub teacher: Vec<Option<Tensor>>,
}

impl<'a> TrainData<'a> {
    pub fn prepare(
        segments: &'a [Segment],
        language: &Language,
        task: Task,
        variant: Variant,
        texts: Option<&[Option<String>]>,
        vocab: &TextVocab,
        teacher: Option<&Teacher>,
    ) -> Result<Self, HarnessError> {
        let targets = segments
            .iter()
            .map(|s| target_for(s, language, task))
            .collect::<Result<Vec<_>, _>>()?;
        let encoded = || -> Result<Vec<Option<Vec<usize>>>, HarnessError> {
            let texts = texts.ok_or(HarnessError::MissingContext(variant))?;
            if texts.len() != segments.len() {
                return Err(HarnessError::Mismatch("context texts do not cover the split".into()));
            }
            Ok(texts.iter().map(|t| t.as_deref().map(|t| vocab.encode(t))).collect())
        };
        let (contexts, teacher) = match variant {
            Variant::Baseline => (Vec::new(), Vec::new()),
            Variant::ContextInjection | Variant::GenerativeInjection => (encoded()?, Vec::new()),
            Variant::GenerativeAware => {
                let t = teacher.ok_or(HarnessError::MissingTeacher)?;
                let embeds = encoded()?
                    .iter()
                    .map(|ids| ids.as_deref().map(|ids| t.embed(ids)).transpose())
                    .collect::<Result<Vec<_>, _>>()?;
                (Vec::new(), embeds)
            }
        };
        Ok(Self {
            segments,
            targets,
            contexts,
            teacher,
        })
    }

    pub fn context(&self, i: usize) -> ContextInput<'_> {
        match self.contexts.get(i) {
            None => ContextInput::None,
            Some(None) => ContextInput::Zero,
            Some(Some(ids)) => ContextInput::Tokens(ids),
        }
    }

    pub fn feasible(&self, i: usize) -> bool {
        match &self.targets[i] {
            Target::Sequence(t) => ctc_min_frames(t) <= self.segments[i].num_frames(),
            Target::Class(_) => true,
        }
    }
}

/// Losses of one segment, plus its parameter gradients when requested.
#[derive(Debug, Clone)]
pub struct SegmentLoss {
    pub total: f64,
    pub task: f64,
    pub context: Option<f64>,
    pub grads: Option<BTreeMap<String, crate::nn::Tensor>>,
}

pub fn segment_loss(
    model: &ContextModel,
    data: &TrainData<'_>,
    i: usize,
    loss: &LossConfig,
    with_grads: bool,
) -> Result<SegmentLoss, HarnessError> {
    let mut g = Graph::new(&model.params, with_grads);
    let out = model.forward(&mut g, &data.segments[i].features, data.context(i))?;
    let task = match &data.targets[i] {
        Target::Sequence(t) => {
            let lp = g.tape.log_softmax(out.logits);
            ctc_loss(&mut g.tape, lp, t, loss.blank)?
        }
        Target::Class(c) => cross_entropy(&mut g.tape, out.logits, *c)?,
    };
    let ctx = match (out.student, data.teacher.get(i)) {
        (Some(s), Some(Some(e))) => Some(context_l2(&mut g.tape, e, s, loss.context_norm)?),
        _ => None,
    };
    let root = combined_loss(&mut g.tape, task, ctx, loss)?;
    let grads = if with_grads { Some(g.param_grads(root)?) } else { None };
    Ok(SegmentLoss {
        total: g.value(root).item(),
        task: g.value(task).item(),
        context: ctx.map(|c| g.value(c).item()),
        grads,
    })
}

/// Mean context loss of the student over `targets` (entries with `None` are
/// skipped). Returns `(mean L_context, mean cosine)`.
pub fn student_agreement(
    model: &ContextModel,
    segments: &[Segment],
    targets: &[Option<Tensor>],
    loss: &LossConfig,
) -> Result<(f64, f64), HarnessError> {
    let (mut l, mut cos, mut n) = (0.0, 0.0, 0usize);
    for (seg, e) in segments.iter().zip(targets) {
        let Some(e) = e else { continue };
        let mut g = Graph::new(&model.params, false);
        let z = model.encode_audio(&mut g, &seg.features)?;
        let s = model.student_embed(&mut g, z)?;
        let s = g.value(s).clone();
        l += context_l2_value(e, &s, loss.context_norm)?.0;
        cos += cosine(e.data(), s.data());
        n += 1;
    }
    if n == 0 {
        return Err(HarnessError::Mismatch("no segment carries a context target".into()));
    }
    Ok((l / n as f64, cos / n as f64))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub task: f64,
    pub context: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: Vec<StepLog>,
    /// Training segments excluded because CTC cannot emit their target.
    pub skipped_infeasible: usize,
    /// `(step, held-out L_context)`, GenerativeAware only.
    pub checkpoints: Vec<(usize, f64)>,
}

/// Held-out segments and distillation targets tracked during training.
#[derive(Debug, Clone, Copy)]
pub struct HeldOut<'a> {
    pub segments: &'a [Segment],
    pub targets: &'a [Option<Tensor>],
}

pub fn loss_config(cfg: &TrainConfig) -> LossConfig {
    LossConfig {
        alpha: cfg.alpha,
        blank: crate::data::BLANK,
        context_norm: cfg.context_norm,
    }
}

pub fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        clip: cfg.clip,
    }
}

/// Trains `model` in place. Batches are drawn by walking shuffled epochs of
/// the feasible segments with an rng that depends only on the seed, so
/// variants sharing a seed see the same batches.
pub fn train_model(
    model: &mut ContextModel,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    held_out: Option<HeldOut<'_>>,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainSummary, HarnessError> {
    let loss = loss_config(cfg);
    let pool: Vec<usize> = (0..data.segments.len()).filter(|&i| data.feasible(i)).collect();
    let skipped_infeasible = data.segments.len() - pool.len();
    if pool.is_empty() && cfg.steps > 0 {
        return Err(HarnessError::Mismatch("no feasible training segment".into()));
    }
    let mut rng = named_rng(seed, "batches");
    let mut order: Vec<usize> = Vec::new();
    let mut adam = Adam::new(adam_config(cfg));
    let track = held_out.filter(|_| model.variant() == Variant::GenerativeAware && cfg.checkpoints > 0);
    let checkpoint_steps: Vec<usize> = match track {
        Some(_) => (1..=cfg.checkpoints).map(|k| k * cfg.steps / cfg.checkpoints).collect(),
        None => Vec::new(),
    };
    let mut summary = TrainSummary {
        steps: Vec::with_capacity(cfg.steps),
        skipped_infeasible,
        checkpoints: Vec::new(),
    };

    for step in 1..=cfg.steps {
        model.params.zero_grad();
        let (mut total, mut task, mut ctx, mut ctx_n) = (0.0, 0.0, 0.0, 0usize);
        for _ in 0..cfg.batch_size {
            if order.is_empty() {
                order = pool.clone();
                order.shuffle(&mut rng);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let out = match segment_loss(model, data, i, &loss, true) {
                Err(HarnessError::Loss(LossError::Tensor(TensorError::NonFinite(_)))) => {
                    return Err(HarnessError::NonFinite {
                        step,
                        segment: data.segments[i].key(),
                        value: f64::NAN,
                    })
                }
                r => r?,
            };
            if !out.total.is_finite() {
                return Err(HarnessError::NonFinite {
                    step,
                    segment: data.segments[i].key(),
                    value: out.total,
                });
            }
            model.params.accumulate(out.grads.as_ref().expect("requested"))?;
            total += out.total;
            task += out.task;
            if let Some(c) = out.context {
                ctx += c;
                ctx_n += 1;
            }
        }
        let n = cfg.batch_size as f64;
        adam.cfg.lr = cfg.lr_schedule.lr(cfg.lr, step, cfg.steps);
        let grad_norm = adam.step(&mut model.params, 1.0 / n);
        if !grad_norm.is_finite() {
            return Err(HarnessError::NonFinite {
                step,
                segment: "batch gradient".into(),
                value: grad_norm,
            });
        }
        let log = StepLog {
            step,
            loss: total / n,
            task: task / n,
            context: (ctx_n > 0).then(|| ctx / ctx_n as f64),
            grad_norm,
        };
        on_step(&log);
        summary.steps.push(log);
        if let Some(h) = track {
            if checkpoint_steps.contains(&step) {
                let (l, _) = student_agreement(model, h.segments, h.targets, &loss)?;
                summary.checkpoints.push((step, l));
            }
        }
    }
    Ok(summary)
}
