//! Synthetic streaming corpus: topic-driven transcripts whose ambiguous tokens
//! can only be resolved from stream-level context.

pub mod lexicon;
pub mod manifest;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::nn::{named_rng, ContainerError, Tensor};
pub use lexicon::{build_language, Lexicon, Sentiment, Topic, WordKind, BLANK, NER_TAGS};
pub use manifest::{read_manifest, write_manifest, FORMAT_VERSION};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest integrity error: {0}")]
    Integrity(String),
    #[error("manifest format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("record checksum mismatch on line {line}")]
    Checksum { line: usize },
    #[error("unknown segment {stream}/{index}")]
    UnknownSegment { stream: String, index: usize },
    #[error("feature container: {0}")]
    Container(#[from] ContainerError),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub topics: usize,
    pub train_streams: usize,
    pub eval_streams: usize,
    pub segments_per_stream: usize,
    pub tokens_per_segment: usize,
    pub ambiguity_rate: f64,
    pub noise_sigma: f64,
    pub d_feat: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub homophone_pairs: usize,
    pub topical_words: usize,
    /// Share of non-ambiguous positions that carry the topic keyword.
    pub keyword_rate: f64,
    /// Share of non-ambiguous positions drawn from the topical sub-vocabulary.
    pub topical_rate: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            topics: 20,
            train_streams: 50,
            eval_streams: 10,
            segments_per_stream: 10,
            tokens_per_segment: 12,
            ambiguity_rate: 0.3,
            noise_sigma: 0.1,
            d_feat: 16,
            min_frames: 1,
            max_frames: 3,
            homophone_pairs: 8,
            topical_words: 5,
            keyword_rate: 0.07,
            topical_rate: 0.28,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(DataError::Config(m.to_string()));
        if self.topics < 2 {
            return fail("at least 2 topics are required");
        }
        if self.train_streams == 0 && self.eval_streams == 0 {
            return fail("corpus has 0 streams");
        }
        if self.segments_per_stream == 0 || self.tokens_per_segment == 0 {
            return fail("segments_per_stream and tokens_per_segment must be positive");
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return fail("ambiguity_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.keyword_rate)
            || !(0.0..=1.0).contains(&self.topical_rate)
            || self.keyword_rate + self.topical_rate > 1.0
        {
            return fail("keyword_rate and topical_rate must be probabilities summing to at most 1");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative");
        }
        if self.d_feat == 0 {
            return fail("d_feat must be positive");
        }
        if self.min_frames == 0 || self.max_frames < self.min_frames {
            return fail("frames-per-token range must satisfy 1 <= min_frames <= max_frames");
        }
        if self.homophone_pairs == 0 && self.ambiguity_rate > 0.0 {
            return fail("ambiguity_rate > 0 needs at least one homophone pair");
        }
        if self.homophone_pairs > lexicon::HOMOPHONES.len() {
            return Err(DataError::Config(format!(
                "vocabulary too small: {} homophone pairs requested, {} available",
                self.homophone_pairs,
                lexicon::HOMOPHONES.len()
            )));
        }
        if self.topical_words == 0 && self.topical_rate > 0.0 {
            return fail("topical_rate > 0 needs topical_words > 0");
        }
        Ok(())
    }
}

/// Per-codeword frame means shared by every word with that codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCodebook {
    pub means: Tensor,
    pub sigma: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl FeatureCodebook {
    pub fn new(num_codewords: usize, cfg: &CorpusConfig) -> Self {
        let mut rng = named_rng(cfg.seed, "codebook");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let data = (0..num_codewords * cfg.d_feat)
            .map(|_| normal.sample(&mut rng))
            .collect();
        Self {
            means: Tensor::new(vec![num_codewords, cfg.d_feat], data).expect("shape matches"),
            sigma: cfg.noise_sigma,
            min_frames: cfg.min_frames,
            max_frames: cfg.max_frames,
        }
    }

    /// Codeword whose mean is closest to `frame`.
    pub fn nearest(&self, frame: &[f64]) -> usize {
        (0..self.means.rows())
            .map(|c| {
                let d: f64 = self
                    .means
                    .row(c)
                    .iter()
                    .zip(frame)
                    .map(|(m, x)| (m - x) * (m - x))
                    .sum();
                (c, d)
            })
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map_or(0, |(c, _)| c)
    }
}

/// Lexicon, topics and codebook: everything fixed by the config alone.
#[derive(Debug, Clone)]
pub struct Language {
    pub lexicon: Lexicon,
    pub topics: Vec<Topic>,
    pub codebook: FeatureCodebook,
}

impl Language {
    pub fn new(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let (lexicon, topics) =
            build_language(cfg.topics, cfg.topical_words, cfg.homophone_pairs, cfg.seed);
        let codebook = FeatureCodebook::new(lexicon.num_codewords(), cfg);
        Ok(Self {
            lexicon,
            topics,
            codebook,
        })
    }

    pub fn topic(&self, id: usize) -> &Topic {
        &self.topics[id]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub stream: String,
    pub index: usize,
    pub topic: usize,
    pub transcript: Vec<String>,
    pub ner: Vec<(String, String)>,
    pub sentiment: Sentiment,
    pub ambiguous: Vec<bool>,
    pub frames_per_token: Vec<usize>,
    pub features: Tensor,
}

impl Segment {
    /// `"stream/index"`, also the feature container key.
    pub fn key(&self) -> String {
        segment_key(&self.stream, self.index)
    }

    pub fn text(&self) -> String {
        self.transcript.join(" ")
    }

    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

pub fn segment_key(stream: &str, index: usize) -> String {
    format!("{stream}/{index}")
}

/// One split of the corpus, streams in order and segments contiguous per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamManifest {
    pub split: String,
    pub config: CorpusConfig,
    pub segments: Vec<Segment>,
}

impl StreamManifest {
    pub fn segment(&self, stream: &str, index: usize) -> Option<&Segment> {
        self.segments
            .iter()
            .find(|s| s.stream == stream && s.index == index)
    }

    pub fn stream_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = Vec::new();
        for s in &self.segments {
            if ids.last() != Some(&s.stream.as_str()) {
                ids.push(&s.stream);
            }
        }
        ids
    }

    /// Segments grouped per stream, ordered by index.
    pub fn streams(&self) -> Vec<Vec<&Segment>> {
        let mut out: Vec<Vec<&Segment>> = Vec::new();
        for s in &self.segments {
            match out.last_mut() {
                Some(group) if group[0].stream == s.stream => group.push(s),
                _ => out.push(vec![s]),
            }
        }
        out
    }

    /// Index from `"stream/index"` to position in `segments`.
    pub fn index_by_key(&self) -> BTreeMap<String, usize> {
        self.segments
            .iter()
            .enumerate()
            .map(|(i, s)| (s.key(), i))
            .collect()
    }
}

/// Ground-truth transcript of segment `index − 1` of `stream`, or `None` at
/// the start of a stream.
pub fn previous_text_of(manifest: &StreamManifest, stream: &str, index: usize) -> Result<Option<String>> {
    let unknown = || DataError::UnknownSegment {
        stream: stream.to_string(),
        index,
    };
    manifest.segment(stream, index).ok_or_else(unknown)?;
    if index == 0 {
        return Ok(None);
    }
    let prev = manifest.segment(stream, index - 1).ok_or_else(unknown)?;
    Ok(Some(prev.text()))
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub language: Language,
    pub train: StreamManifest,
    pub eval: StreamManifest,
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Corpus> {
    let language = Language::new(cfg)?;
    let train = generate_split(cfg, &language, "train", cfg.train_streams);
    let eval = generate_split(cfg, &language, "eval", cfg.eval_streams);
    Ok(Corpus {
        config: cfg.clone(),
        language,
        train,
        eval,
    })
}

/// Topics for `n` streams, cycling through shuffled permutations so every
/// topic is used as evenly as possible.
fn stream_topics(cfg: &CorpusConfig, split: &str, n: usize) -> Vec<usize> {
    let mut rng = named_rng(cfg.seed, &format!("topics/{split}"));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut perm: Vec<usize> = (0..cfg.topics).collect();
        perm.shuffle(&mut rng);
        out.extend(perm);
    }
    out.truncate(n);
    out
}

pub fn generate_split(cfg: &CorpusConfig, language: &Language, split: &str, streams: usize) -> StreamManifest {
    let topics = stream_topics(cfg, split, streams);
    let mut segments = Vec::with_capacity(streams * cfg.segments_per_stream);
    for (s, &topic) in topics.iter().enumerate() {
        let stream = format!("{split}-{s:03}");
        let mut rng = named_rng(cfg.seed, &format!("stream/{stream}"));
        for index in 0..cfg.segments_per_stream {
            segments.push(generate_segment(cfg, language, &stream, index, topic, &mut rng));
        }
    }
    StreamManifest {
        split: split.to_string(),
        config: cfg.clone(),
        segments,
    }
}

fn generate_segment(
    cfg: &CorpusConfig,
    language: &Language,
    stream: &str,
    index: usize,
    topic_id: usize,
    rng: &mut impl Rng,
) -> Segment {
    let lex = &language.lexicon;
    let topic = language.topic(topic_id);
    let common: Vec<usize> = (0..lex.size())
        .filter(|&i| lex.kind(i) == WordKind::Common)
        .collect();

    let mut ids = Vec::with_capacity(cfg.tokens_per_segment);
    let mut ambiguous = Vec::with_capacity(cfg.tokens_per_segment);
    while ids.len() < cfg.tokens_per_segment {
        let (id, amb) = if rng.gen::<f64>() < cfg.ambiguity_rate {
            let c = rng.gen_range(0..topic.resolution.len());
            (topic.resolution[c], true)
        } else {
            let u = rng.gen::<f64>();
            let id = if u < cfg.keyword_rate {
                topic.keyword
            } else if u < cfg.keyword_rate + cfg.topical_rate {
                topic.words[rng.gen_range(0..topic.words.len())]
            } else {
                common[rng.gen_range(0..common.len())]
            };
            (id, false)
        };
        // adjacent tokens never share a codeword, so CTC never needs a separating blank
        if ids.last().is_some_and(|&p| lex.codeword(p) == lex.codeword(id)) {
            continue;
        }
        ids.push(id);
        ambiguous.push(amb);
    }

    let cb = &language.codebook;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut frames_per_token = Vec::with_capacity(ids.len());
    let mut data = Vec::new();
    for &id in &ids {
        let n = rng.gen_range(cb.min_frames..=cb.max_frames);
        frames_per_token.push(n);
        let mean = cb.means.row(lex.codeword(id).expect("spoken word"));
        for _ in 0..n {
            data.extend(mean.iter().map(|m| m + cb.sigma * normal.sample(rng)));
        }
    }
    let total: usize = frames_per_token.iter().sum();
    let features = Tensor::new(vec![total, cfg.d_feat], data).expect("frame count matches");

    let tag = NER_TAGS[topic.tag].to_string();
    let ner = ids
        .iter()
        .filter(|&&i| i == topic.keyword)
        .map(|&i| (lex.word(i).to_string(), tag.clone()))
        .collect();

    Segment {
        stream: stream.to_string(),
        index,
        topic: topic_id,
        transcript: lex.decode(&ids),
        ner,
        sentiment: topic.sentiment,
        ambiguous,
        frames_per_token,
        features,
    }
}

/// Frame-level accuracy on ambiguous tokens of the best classifier that sees
/// only the features: nearest codeword, then the first word of that codeword
/// (both readings are equally likely across topics).
pub fn context_free_ambiguous_accuracy(language: &Language, manifest: &StreamManifest) -> f64 {
    let lex = &language.lexicon;
    let mut first_word_of = BTreeMap::new();
    for id in (0..lex.size()).rev() {
        if let Some(cw) = lex.codeword(id) {
            first_word_of.insert(cw, id);
        }
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for seg in &manifest.segments {
        let mut frame = 0;
        for (pos, &n) in seg.frames_per_token.iter().enumerate() {
            if seg.ambiguous[pos] {
                for f in frame..frame + n {
                    let cw = language.codebook.nearest(seg.features.row(f));
                    total += 1;
                    if lex.word(first_word_of[&cw]) == seg.transcript[pos] {
                        correct += 1;
                    }
                }
            }
            frame += n;
        }
    }
    if total == 0 {
        return 0.0;
    }
    correct as f64 / total as f64
}
