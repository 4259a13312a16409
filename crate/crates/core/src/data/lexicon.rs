//! Fixed word inventory of the synthetic language and its topic structure.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::nn::named_rng;

pub const BLANK: usize = 0;
pub const BLANK_TOKEN: &str = "<blank>";

pub const TOPIC_KEYWORDS: [&str; 24] = [
    "cooking", "football", "music", "travel", "finance", "medicine", "gardening", "astronomy",
    "history", "fashion", "chess", "sailing", "painting", "robotics", "poetry", "cinema",
    "hiking", "farming", "physics", "theatre", "fishing", "aviation", "pottery", "cycling",
];

const TOPICAL_SUFFIXES: [&str; 8] = ["ard", "ine", "ola", "ust", "emy", "ix", "oon", "elt"];

pub const COMMON_WORDS: [&str; 20] = [
    "the", "a", "and", "of", "to", "in", "is", "it", "that", "was", "for", "on", "with", "as",
    "at", "by", "we", "they", "this", "from",
];

/// Pairs of words that sound alike: each pair shares one acoustic codeword.
pub const HOMOPHONES: [(&str, &str); 16] = [
    ("flower", "flour"),
    ("knight", "night"),
    ("sea", "see"),
    ("pair", "pear"),
    ("mail", "male"),
    ("sail", "sale"),
    ("right", "write"),
    ("peace", "piece"),
    ("wait", "weight"),
    ("hole", "whole"),
    ("tail", "tale"),
    ("plain", "plane"),
    ("steal", "steel"),
    ("week", "weak"),
    ("bear", "bare"),
    ("road", "rode"),
];

/// Entity types; a topic's keyword is tagged with `NER_TAGS[topic % 9]`.
pub const NER_TAGS: [&str; 9] = [
    "PER", "LOC", "ORG", "DATE", "EVENT", "WORK", "PRODUCT", "LAW", "NORP",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WordKind {
    Blank,
    Common,
    Keyword { topic: usize },
    Topical { topic: usize },
    Homophone { codeword: usize, side: u8 },
    TagOpen { tag: usize },
    TagClose { tag: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sentiment {
    Negative,
    Neutral,
    Positive,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Negative, Sentiment::Neutral, Sentiment::Positive];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One topic: its keyword, topical sub-vocabulary, and how it resolves every
/// ambiguous codeword.
#[derive(Debug, Clone, PartialEq)]
pub struct Topic {
    pub id: usize,
    pub keyword: usize,
    pub words: Vec<usize>,
    /// `resolution[c]` is the word the topic uses for ambiguous codeword `c`.
    pub resolution: Vec<usize>,
    pub tag: usize,
    pub sentiment: Sentiment,
}

/// Word inventory. Id 0 is the CTC blank; tag tokens come last.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    words: Vec<String>,
    kinds: Vec<WordKind>,
    /// Acoustic codeword of every spoken word (`None` for blank and tags).
    codewords: Vec<Option<usize>>,
    num_codewords: usize,
    homophone_codewords: Vec<usize>,
}

impl Lexicon {
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn kind(&self, id: usize) -> WordKind {
        self.kinds[id]
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    pub fn codeword(&self, id: usize) -> Option<usize> {
        self.codewords[id]
    }

    pub fn num_codewords(&self) -> usize {
        self.num_codewords
    }

    /// Codeword ids shared by homophone pairs, indexed by pair.
    pub fn homophone_codewords(&self) -> &[usize] {
        &self.homophone_codewords
    }

    pub fn tag_open(&self, tag: usize) -> usize {
        self.kinds
            .iter()
            .position(|k| *k == WordKind::TagOpen { tag })
            .expect("tag tokens are always present")
    }

    pub fn tag_close(&self, tag: usize) -> usize {
        self.kinds
            .iter()
            .position(|k| *k == WordKind::TagClose { tag })
            .expect("tag tokens are always present")
    }

    pub fn is_tag(&self, id: usize) -> bool {
        matches!(self.kinds[id], WordKind::TagOpen { .. } | WordKind::TagClose { .. })
    }

    /// Maps words to ids, failing on the first unknown word.
    pub fn encode(&self, words: &[String]) -> Result<Vec<usize>, String> {
        words
            .iter()
            .map(|w| self.id(w).ok_or_else(|| w.clone()))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.words[i].clone()).collect()
    }
}

/// Builds the lexicon and the topics for a corpus configuration. The word
/// inventory depends only on the sizes; topic resolution tables depend on the seed.
pub fn build_language(
    topics: usize,
    topical_words: usize,
    homophone_pairs: usize,
    seed: u64,
) -> (Lexicon, Vec<Topic>) {
    let mut b = Builder {
        words: vec![BLANK_TOKEN.to_string()],
        kinds: vec![WordKind::Blank],
        codewords: vec![None],
        next_codeword: 0,
    };

    for w in COMMON_WORDS {
        let cw = b.fresh_codeword();
        b.push(w.to_string(), WordKind::Common, Some(cw));
    }
    let mut keyword_ids = Vec::with_capacity(topics);
    let mut topical_ids = vec![Vec::with_capacity(topical_words); topics];
    for (t, topical) in topical_ids.iter_mut().enumerate() {
        let kw = match TOPIC_KEYWORDS.get(t) {
            Some(k) => (*k).to_string(),
            None => format!("topic{t}"),
        };
        let stem: String = kw.chars().take(4).collect();
        let cw = b.fresh_codeword();
        keyword_ids.push(b.push(kw, WordKind::Keyword { topic: t }, Some(cw)));
        for j in 0..topical_words {
            let suffix = TOPICAL_SUFFIXES[j % TOPICAL_SUFFIXES.len()];
            let w = if j < TOPICAL_SUFFIXES.len() {
                format!("{stem}{suffix}")
            } else {
                format!("{stem}{suffix}{}", j / TOPICAL_SUFFIXES.len())
            };
            let cw = b.fresh_codeword();
            topical.push(b.push(w, WordKind::Topical { topic: t }, Some(cw)));
        }
    }
    let mut homophone_codewords = Vec::with_capacity(homophone_pairs);
    let mut pair_ids = Vec::with_capacity(homophone_pairs);
    for (c, (x, y)) in HOMOPHONES.iter().take(homophone_pairs).enumerate() {
        let cw = b.fresh_codeword();
        homophone_codewords.push(cw);
        let a = b.push(x.to_string(), WordKind::Homophone { codeword: c, side: 0 }, Some(cw));
        let bb = b.push(y.to_string(), WordKind::Homophone { codeword: c, side: 1 }, Some(cw));
        pair_ids.push((a, bb));
    }
    for (tag, name) in NER_TAGS.iter().enumerate() {
        b.push(format!("<{name}>"), WordKind::TagOpen { tag }, None);
        b.push(format!("</{name}>"), WordKind::TagClose { tag }, None);
    }

    // Each ambiguous codeword splits the topics into two equal halves.
    let mut resolution = vec![Vec::with_capacity(homophone_pairs); topics];
    for (c, &(a, bb)) in pair_ids.iter().enumerate() {
        let mut order: Vec<usize> = (0..topics).collect();
        order.shuffle(&mut named_rng(seed, &format!("homophone/{c}")));
        for (rank, &t) in order.iter().enumerate() {
            resolution[t].push(if rank < topics / 2 { a } else { bb });
        }
    }

    let topics = (0..topics)
        .map(|t| Topic {
            id: t,
            keyword: keyword_ids[t],
            words: topical_ids[t].clone(),
            resolution: resolution[t].clone(),
            tag: t % NER_TAGS.len(),
            sentiment: Sentiment::from_index(t % 3).expect("three classes"),
        })
        .collect();
    let lexicon = Lexicon {
        words: b.words,
        kinds: b.kinds,
        codewords: b.codewords,
        num_codewords: b.next_codeword,
        homophone_codewords,
    };
    (lexicon, topics)
}

struct Builder {
    words: Vec<String>,
    kinds: Vec<WordKind>,
    codewords: Vec<Option<usize>>,
    next_codeword: usize,
}

impl Builder {
    fn fresh_codeword(&mut self) -> usize {
        self.next_codeword += 1;
        self.next_codeword - 1
    }

    fn push(&mut self, w: String, kind: WordKind, cw: Option<usize>) -> usize {
        self.words.push(w);
        self.kinds.push(kind);
        self.codewords.push(cw);
        self.words.len() - 1
    }
}
