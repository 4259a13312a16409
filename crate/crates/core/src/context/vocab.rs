//! Word-level vocabulary of the text encoder.

use std::collections::{BTreeSet, HashMap};

use super::oracle::{FILLER_WORDS, QUESTION_OPENERS, TITLE_OPENERS};
use crate::data::{Lexicon, WordKind};

pub const CLS: usize = 0;
pub const UNK: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextVocab {
    /// Reserved tokens, then every spoken word of the lexicon and every word
    /// the oracle can produce, sorted.
    pub fn new(lexicon: &Lexicon) -> Self {
        let mut set = BTreeSet::new();
        for id in 0..lexicon.size() {
            if !matches!(
                lexicon.kind(id),
                WordKind::Blank | WordKind::TagOpen { .. } | WordKind::TagClose { .. }
            ) {
                set.insert(lexicon.word(id).to_string());
            }
        }
        let phrases = TITLE_OPENERS.iter().chain(&QUESTION_OPENERS);
        set.extend(phrases.flat_map(|p| p.split(' ')).map(str::to_string));
        set.extend(FILLER_WORDS.iter().map(|w| w.to_string()));
        set.extend(["the", "topic", "is"].map(str::to_string));
        let words: Vec<String> = ["[CLS]".to_string(), "[UNK]".to_string()]
            .into_iter()
            .chain(set)
            .collect();
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn size(&self) -> usize {
        self.words.len()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// `[CLS]` followed by the lowercased whitespace tokens of `text`, with
    /// surrounding punctuation stripped. Unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        for tok in text.split_whitespace() {
            let w = tok.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase();
            if !w.is_empty() {
                ids.push(self.index.get(&w).copied().unwrap_or(UNK));
            }
        }
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CorpusConfig, Language};

    #[test]
    fn encodes_with_leading_cls() {
        let lang = Language::new(&CorpusConfig::default()).unwrap();
        let v = TextVocab::new(&lang.lexicon);
        assert_eq!(v.encode(""), vec![CLS]);
        let ids = v.encode("Notes on Cooking, zebra!");
        assert_eq!(ids.len(), 5);
        assert_eq!(ids[0], CLS);
        assert_eq!(v.word(ids[3]), Some("cooking"));
        assert_eq!(ids[4], UNK);
        assert!(ids[1..4].iter().all(|&i| i != UNK));
    }

    #[test]
    fn every_transcript_word_is_known() {
        let lang = Language::new(&CorpusConfig::default()).unwrap();
        let v = TextVocab::new(&lang.lexicon);
        for id in 1..lang.lexicon.size() {
            if !lang.lexicon.is_tag(id) {
                assert_ne!(v.encode(lang.lexicon.word(id))[1], UNK);
            }
        }
    }
}
