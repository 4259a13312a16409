//! Synthetic stand-in for a language model: prompt-shaped text built from the
//! topic of the stream a segment belongs to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{cap_tokens, BackendKind, ContextError, ContextGenerator, GeneratedContext, GenerationRequest, PromptId, Result};
use crate::data::{Language, Topic, WordKind};
use crate::nn::named_rng;

/// Words the oracle uses that carry no topic information.
pub const FILLER_WORDS: [&str; 12] = [
    "indeed", "perhaps", "really", "today", "story", "people", "things", "time", "years", "place",
    "many", "some",
];

pub const TITLE_OPENERS: [&str; 6] = [
    "notes on", "a life in", "adventures in", "the world of", "my journey into", "a guide to",
];

pub const QUESTION_OPENERS: [&str; 4] = ["what about the", "why is the", "how does the", "who likes the"];

/// Probability that each free slot of a prompt's output is drawn from the
/// topic's word distribution instead of filler words.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OverlapRates {
    pub p1: f64,
    pub p2: f64,
    pub p3: f64,
    pub p4: f64,
}

impl Default for OverlapRates {
    fn default() -> Self {
        Self {
            p1: 0.8,
            p2: 0.5,
            p3: 0.4,
            p4: 0.2,
        }
    }
}

impl OverlapRates {
    pub fn get(&self, p: PromptId) -> f64 {
        match p {
            PromptId::P1 => self.p1,
            PromptId::P2 => self.p2,
            PromptId::P3 => self.p3,
            PromptId::P4 => self.p4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.p1, self.p2, self.p3, self.p4]
            .iter()
            .all(|r| (0.0..=1.0).contains(r))
        {
            Ok(())
        } else {
            Err(ContextError::Config("overlap rates must lie in [0, 1]".into()))
        }
    }
}

const SENTENCE_WORDS: usize = 12;

#[derive(Debug, Clone)]
pub struct OracleGenerator {
    language: Language,
    common: Vec<usize>,
    seed: u64,
    p_noise: f64,
    overlap: OverlapRates,
}

impl OracleGenerator {
    pub fn new(language: Language, seed: u64, p_noise: f64, overlap: OverlapRates) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_noise) {
            return Err(ContextError::Config("p_noise must lie in [0, 1]".into()));
        }
        overlap.validate()?;
        let lex = &language.lexicon;
        let common = (0..lex.size()).filter(|&i| lex.kind(i) == WordKind::Common).collect();
        Ok(Self {
            language,
            common,
            seed,
            p_noise,
            overlap,
        })
    }

    fn word(&self, id: usize) -> &str {
        self.language.lexicon.word(id)
    }

    /// A word as the topic's speakers would use it.
    fn topic_word(&self, topic: &Topic, rng: &mut impl Rng) -> String {
        let u = rng.gen::<f64>();
        let id = if u < 0.3 && !topic.resolution.is_empty() {
            topic.resolution[rng.gen_range(0..topic.resolution.len())]
        } else if u < 0.4 || topic.words.is_empty() {
            topic.keyword
        } else if u < 0.7 {
            topic.words[rng.gen_range(0..topic.words.len())]
        } else {
            self.common[rng.gen_range(0..self.common.len())]
        };
        self.word(id).to_string()
    }

    fn topical_word(&self, topic: &Topic, rng: &mut impl Rng) -> String {
        if topic.words.is_empty() {
            return self.word(topic.keyword).to_string();
        }
        self.word(topic.words[rng.gen_range(0..topic.words.len())]).to_string()
    }

    fn slot(&self, topic: &Topic, rate: f64, rng: &mut impl Rng, sentence: bool) -> String {
        if rng.gen::<f64>() < rate {
            if sentence {
                self.topic_word(topic, rng)
            } else {
                self.topical_word(topic, rng)
            }
        } else {
            FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())].to_string()
        }
    }

    /// Output text for one request; a pure function of the seed, segment,
    /// prompt, noise level and topic.
    pub fn text_for(&self, segment: &str, topic_id: usize, prompt: PromptId) -> Result<String> {
        let topics = &self.language.topics;
        let topic = topics
            .get(topic_id)
            .ok_or_else(|| ContextError::UnknownTopic(segment.to_string()))?;
        let mut rng = named_rng(self.seed, &format!("oracle|{segment}|{prompt}|{:?}", self.p_noise));
        let keyword_topic = if topics.len() > 1 && rng.gen::<f64>() < self.p_noise {
            let d = rng.gen_range(0..topics.len() - 1);
            if d >= topic_id {
                d + 1
            } else {
                d
            }
        } else {
            topic_id
        };
        let keyword = self.word(topics[keyword_topic].keyword).to_string();
        let rate = self.overlap.get(prompt);

        let mut words: Vec<String> = Vec::new();
        match prompt {
            PromptId::P1 => {
                let mut kw_done = false;
                for _ in 0..SENTENCE_WORDS {
                    let mut w = self.slot(topic, rate, &mut rng, true);
                    if w == self.word(topic.keyword) {
                        w = keyword.clone();
                        kw_done = true;
                    }
                    words.push(w);
                }
                if !kw_done {
                    let at = rng.gen_range(0..words.len());
                    words[at] = keyword;
                }
            }
            PromptId::P2 => {
                let opener = QUESTION_OPENERS[rng.gen_range(0..QUESTION_OPENERS.len())];
                words.extend(opener.split(' ').map(str::to_string));
                words.push(keyword);
                for _ in 0..2 {
                    words.push(self.slot(topic, rate, &mut rng, false));
                }
            }
            PromptId::P3 => {
                words.extend(["the", "topic", "is"].map(str::to_string));
                words.push(keyword);
                for _ in 0..2 {
                    words.push(self.slot(topic, rate, &mut rng, false));
                }
            }
            PromptId::P4 => {
                // a stream keeps one title style, so only the overlap slot varies within a topic
                let style = named_rng(self.seed, &format!("oracle-title|{topic_id}")).gen_range(0..TITLE_OPENERS.len());
                let opener = TITLE_OPENERS[style];
                words.extend(opener.split(' ').map(str::to_string));
                words.push(keyword);
                if rng.gen::<f64>() < rate {
                    words.push(self.topical_word(topic, &mut rng));
                }
            }
        }
        Ok(words.join(" "))
    }
}

impl ContextGenerator for OracleGenerator {
    fn generate(&self, request: &GenerationRequest) -> Result<GeneratedContext> {
        let topic = request
            .topic
            .ok_or_else(|| ContextError::UnknownTopic(request.segment.clone()))?;
        let (text, tokens) = cap_tokens(&self.text_for(&request.segment, topic, request.prompt)?);
        Ok(GeneratedContext {
            segment: request.segment.clone(),
            prompt: request.prompt,
            text,
            tokens,
            backend: BackendKind::Oracle,
        })
    }

    fn fingerprint(&self) -> String {
        let o = self.overlap;
        format!(
            "oracle|seed={}|p_noise={:?}|overlap={:?},{:?},{:?},{:?}",
            self.seed, self.p_noise, o.p1, o.p2, o.p3, o.p4
        )
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Oracle
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CorpusConfig, Language};

    fn oracle(p_noise: f64) -> OracleGenerator {
        let lang = Language::new(&CorpusConfig::default()).unwrap();
        OracleGenerator::new(lang, 7, p_noise, OverlapRates::default()).unwrap()
    }

    #[test]
    fn clean_outputs_contain_the_keyword() {
        let g = oracle(0.0);
        for seg in 0..20 {
            let key = format!("train-001/{seg}");
            let title = g.text_for(&key, 0, PromptId::P4).unwrap();
            assert!(title.split(' ').any(|w| w == "cooking"), "{title}");
            let topic = g.text_for(&key, 0, PromptId::P3).unwrap();
            assert!(topic.starts_with("the topic is cooking"), "{topic}");
            let q = g.text_for(&key, 0, PromptId::P2).unwrap();
            assert!(q.contains("cooking"));
            let s = g.text_for(&key, 0, PromptId::P1).unwrap();
            assert!(s.split(' ').any(|w| w == "cooking"));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (oracle(0.3), oracle(0.3));
        for p in PromptId::ALL {
            assert_eq!(
                a.text_for("eval-003/4", 5, p).unwrap(),
                b.text_for("eval-003/4", 5, p).unwrap()
            );
        }
        assert!(a.text_for("x/0", 99, PromptId::P4).is_err());
    }

    #[test]
    fn full_noise_uses_uniform_distractors() {
        let g = oracle(1.0);
        let lex = &g.language.lexicon;
        let true_topic = 3;
        let mut counts = vec![0usize; 20];
        let draws = 1000;
        for i in 0..draws {
            let t = g.text_for(&format!("s/{i}"), true_topic, PromptId::P4).unwrap();
            let kw = t
                .split(' ')
                .find_map(|w| match lex.id(w).map(|id| lex.kind(id)) {
                    Some(WordKind::Keyword { topic }) => Some(topic),
                    _ => None,
                })
                .expect("title has a keyword");
            counts[kw] += 1;
        }
        assert_eq!(counts[true_topic], 0);
        let expected = draws as f64 / 19.0;
        for (t, &c) in counts.iter().enumerate() {
            if t != true_topic {
                // a uniform draw gives each distractor 1/19 of the mass
                let share = c as f64 / draws as f64;
                assert!((share - 1.0 / 19.0).abs() <= 0.05, "topic {t}: {c} vs {expected:.1}");
            }
        }
    }

    #[test]
    fn p4_titles_are_short_and_p1_sentences_long() {
        let g = oracle(0.0);
        let t = g.text_for("a/1", 2, PromptId::P4).unwrap();
        assert!(t.split(' ').count() <= 5);
        let s = g.text_for("a/1", 2, PromptId::P1).unwrap();
        assert_eq!(s.split(' ').count(), SENTENCE_WORDS);
    }

    #[test]
    fn fingerprint_tracks_settings() {
        assert_ne!(oracle(0.0).fingerprint(), oracle(0.1).fingerprint());
        assert_eq!(oracle(0.0).fingerprint(), oracle(0.0).fingerprint());
    }
}
