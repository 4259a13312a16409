//! Evaluation of a trained system on one split.

use serde::{Deserialize, Serialize};

use super::train::{cosine, generation_request, ContextSource};
use super::HarnessError;
use crate::context::{ContextGenerator, PromptId, TextVocab};
use crate::data::{Language, Segment, StreamManifest, NER_TAGS};
use crate::losses::{context_l2_value, ctc_greedy_decode, ContextNorm};
use crate::metrics::{flagged_errors, macro_f1, PairCounts, WerCounts};
use crate::models::{ContextInput, ContextModel, Task, SENTIMENT_CLASSES};
use crate::nn::{Graph, Tensor};

/// How injection variants obtain the previous text at evaluation.
pub enum ContextFeed<'a> {
    /// No text input (Baseline, GenerativeAware).
    None,
    /// Precomputed context text per segment, `None` at stream starts.
    Texts(&'a [Option<String>]),
    /// The model's own decoded transcript of the previous segment, passed
    /// through the generator for generated-context variants.
    Decoded {
        source: ContextSource,
        generator: Option<&'a dyn ContextGenerator>,
        prompt: PromptId,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub segments: usize,
    /// Word error rate in percent.
    pub wer: Option<f64>,
    /// Percent of ambiguous reference tokens not recovered.
    pub ambiguous_error: Option<f64>,
    pub ner_f1: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Mean cosine between student and teacher embeddings.
    pub context_cosine: Option<f64>,
    /// Mean distillation loss against the teacher.
    pub context_l2: Option<f64>,
}

/// Words and `(word, tag)` pairs from a decoded label sequence. A pair is
/// every word enclosed by an opening tag and its matching closing tag.
pub fn parse_decoded(ids: &[usize], language: &Language) -> (Vec<String>, Vec<(String, String)>) {
    let lex = &language.lexicon;
    let mut words = Vec::new();
    let mut pairs = Vec::new();
    let mut open: Option<(usize, Vec<String>)> = None;
    for &id in ids {
        if !lex.is_tag(id) {
            let w = lex.word(id).to_string();
            if let Some((_, inner)) = open.as_mut() {
                inner.push(w.clone());
            }
            words.push(w);
            continue;
        }
        if let Some(tag) = (0..NER_TAGS.len()).find(|&t| lex.tag_open(t) == id) {
            open = Some((tag, Vec::new()));
        } else if let Some(tag) = (0..NER_TAGS.len()).find(|&t| lex.tag_close(t) == id) {
            if let Some((t, inner)) = open.take() {
                if t == tag {
                    pairs.extend(inner.into_iter().map(|w| (w, NER_TAGS[tag].to_string())));
                }
            }
        }
    }
    (words, pairs)
}

struct Accumulator {
    wer: WerCounts,
    amb_errors: usize,
    amb_total: usize,
    ner: PairCounts,
    preds: Vec<usize>,
    golds: Vec<usize>,
    segments: usize,
}

/// Decodes one segment; returns the decoded transcript text.
fn decode_segment(
    model: &ContextModel,
    seg: &Segment,
    ctx: ContextInput<'_>,
    language: &Language,
    acc: &mut Accumulator,
) -> Result<String, HarnessError> {
    let mut g = Graph::new(&model.params, false);
    let out = model.forward(&mut g, &seg.features, ctx)?;
    let logits = g.value(out.logits);
    acc.segments += 1;
    match model.spec.task {
        Task::Sentiment => {
            let pred = argmax(logits.data());
            acc.preds.push(pred);
            acc.golds.push(seg.sentiment.index());
            Ok(String::new())
        }
        Task::Asr | Task::Ner => {
            let ids = ctc_greedy_decode(logits, crate::data::BLANK);
            let (words, pairs) = parse_decoded(&ids, language);
            acc.wer.add(&seg.transcript, &words);
            let (e, n) = flagged_errors(&seg.transcript, &words, &seg.ambiguous);
            acc.amb_errors += e;
            acc.amb_total += n;
            if model.spec.task == Task::Ner {
                acc.ner.add(&pairs, &seg.ner);
            }
            Ok(words.join(" "))
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub struct EvalRequest<'a> {
    pub manifest: &'a StreamManifest,
    pub language: &'a Language,
    pub vocab: &'a TextVocab,
    pub feed: ContextFeed<'a>,
    /// Distillation targets per segment, for GenerativeAware diagnostics.
    pub teacher: Option<&'a [Option<Tensor>]>,
    pub context_norm: ContextNorm,
}

pub fn evaluate_system(
    model: &ContextModel,
    req: EvalRequest<'_>,
) -> Result<EvalMetrics, HarnessError> {
    let manifest = req.manifest;
    if model.spec.output_vocab != req.language.lexicon.size() {
        return Err(HarnessError::Mismatch(format!(
            "checkpoint has {} output labels but the corpus lexicon has {}",
            model.spec.output_vocab,
            req.language.lexicon.size()
        )));
    }
    if manifest.segments.is_empty() {
        return Err(HarnessError::Mismatch(format!("split {} is empty", manifest.split)));
    }
    if let Some(seg) = manifest.segments.first() {
        if seg.features.last_dim() != model.spec.model.d_feat {
            return Err(HarnessError::Mismatch("feature width differs from the checkpoint".into()));
        }
    }
    let uses_text = model.variant().uses_text_encoder();
    if uses_text && matches!(req.feed, ContextFeed::None) {
        return Err(HarnessError::MissingContext(model.variant()));
    }
    let mut acc = Accumulator {
        wer: WerCounts::default(),
        amb_errors: 0,
        amb_total: 0,
        ner: PairCounts::default(),
        preds: Vec::new(),
        golds: Vec::new(),
        segments: 0,
    };

    match &req.feed {
        ContextFeed::Texts(texts) if uses_text => {
            if texts.len() != manifest.segments.len() {
                return Err(HarnessError::Mismatch("context texts do not cover the split".into()));
            }
            for (seg, text) in manifest.segments.iter().zip(texts.iter()) {
                let ids = text.as_deref().map(|t| req.vocab.encode(t));
                let ctx = ids.as_deref().map_or(ContextInput::Zero, ContextInput::Tokens);
                decode_segment(model, seg, ctx, req.language, &mut acc)?;
            }
        }
        ContextFeed::Decoded {
            source,
            generator,
            prompt,
        } if uses_text => {
            for stream in manifest.streams() {
                let mut prev: Option<(&Segment, String)> = None;
                for seg in stream {
                    let text = match (&prev, source) {
                        (None, _) => None,
                        (Some((_, hyp)), ContextSource::GroundTruth) => Some(hyp.clone()),
                        (Some((p, hyp)), ContextSource::Generated) => {
                            let g = generator.ok_or(HarnessError::MissingGenerator)?;
                            // decoded text differs per checkpoint, so it bypasses the cache
                            Some(g.generate(&generation_request(p, hyp.clone(), *prompt))?.text)
                        }
                    };
                    let ids = text.as_deref().map(|t| req.vocab.encode(t));
                    let ctx = ids.as_deref().map_or(ContextInput::Zero, ContextInput::Tokens);
                    let hyp = decode_segment(model, seg, ctx, req.language, &mut acc)?;
                    prev = Some((seg, hyp));
                }
            }
        }
        _ => {
            for seg in &manifest.segments {
                decode_segment(model, seg, ContextInput::None, req.language, &mut acc)?;
            }
        }
    }
    let mut m = EvalMetrics {
        segments: acc.segments,
        ..EvalMetrics::default()
    };
    match model.spec.task {
        Task::Sentiment => m.macro_f1 = Some(macro_f1(&acc.preds, &acc.golds, SENTIMENT_CLASSES)?),
        Task::Asr | Task::Ner => {
            m.wer = Some(acc.wer.wer()?);
            if acc.amb_total > 0 {
                m.ambiguous_error = Some(100.0 * acc.amb_errors as f64 / acc.amb_total as f64);
            }
            if model.spec.task == Task::Ner {
                m.ner_f1 = Some(acc.ner.f1());
            }
        }
    }
    if let (Some(targets), Some(_)) = (req.teacher, model.student.as_ref()) {
        if targets.len() != manifest.segments.len() {
            return Err(HarnessError::Mismatch("teacher targets do not cover the split".into()));
        }
        let (mut l, mut c, mut n) = (0.0, 0.0, 0usize);
        for (seg, e) in manifest.segments.iter().zip(targets) {
            let Some(e) = e else { continue };
            let mut g = Graph::new(&model.params, false);
            let z = model.encode_audio(&mut g, &seg.features)?;
            let s = model.student_embed(&mut g, z)?;
            let s = g.value(s);
            l += context_l2_value(e, s, req.context_norm)?.0;
            c += cosine(e.data(), s.data());
            n += 1;
        }
        if n > 0 {
            m.context_l2 = Some(l / n as f64);
            m.context_cosine = Some(c / n as f64);
        }
    }
    Ok(m)
}
