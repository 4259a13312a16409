//! Evaluation arithmetic: WER, NER-pair F1, macro F1, ROUGE-1, and seed-level
//! report assembly.
//!
//! WER tokens are whitespace-separated words of the decoded transcript.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{segment_key, StreamManifest};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("reference is empty")]
    EmptyReference,
    #[error("length mismatch: {preds} predictions, {golds} references")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("class {class} is out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("no `{source_name}` generation for segment {segment}")]
    MissingGeneration { source_name: String, segment: String },
    #[error("report has no values")]
    Empty,
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Substitute { r: usize, h: usize },
    Delete { r: usize },
    Insert { h: usize },
}

/// Minimum-cost alignment with unit costs. Ties prefer match/substitution,
/// then deletion, then insertion.
pub fn align<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Vec<AlignOp> {
    let (n, m) = (reference.len(), hypothesis.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same {
                    AlignOp::Match { r: i - 1, h: j - 1 }
                } else {
                    AlignOp::Substitute { r: i - 1, h: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Delete { r: i - 1 });
            i -= 1;
        } else {
            ops.push(AlignOp::Insert { h: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y)).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 · levenshtein(ref, hyp) / |ref|`
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(100.0 * levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Corpus-level WER: total edits over total reference words.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct WerCounts {
    pub edits: usize,
    pub ref_words: usize,
}

impl WerCounts {
    pub fn add<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        self.edits += levenshtein(reference, hypothesis);
        self.ref_words += reference.len();
    }

    pub fn wer(&self) -> Result<f64> {
        if self.ref_words == 0 {
            return Err(MetricError::EmptyReference);
        }
        Ok(100.0 * self.edits as f64 / self.ref_words as f64)
    }
}

/// Counts flagged reference positions and how many of them are not matched
/// exactly under the minimum-cost alignment. Returns `(errors, flagged)`.
pub fn flagged_errors<T: PartialEq>(reference: &[T], hypothesis: &[T], flags: &[bool]) -> (usize, usize) {
    let flagged = flags.iter().filter(|&&f| f).count();
    let matched = align(reference, hypothesis)
        .into_iter()
        .filter(|op| matches!(op, AlignOp::Match { r, .. } if flags.get(*r).copied().unwrap_or(false)))
        .count();
    (flagged - matched, flagged)
}

/// Micro-averaged counts for multiset F1.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PairCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl PairCounts {
    pub fn add<T: Eq + std::hash::Hash>(&mut self, pred: &[T], gold: &[T]) {
        let mut remaining: HashMap<&T, usize> = HashMap::new();
        for g in gold {
            *remaining.entry(g).or_default() += 1;
        }
        for p in pred {
            if let Some(c) = remaining.get_mut(p).filter(|c| **c > 0) {
                *c -= 1;
                self.true_positive += 1;
            }
        }
        self.predicted += pred.len();
        self.gold += gold.len();
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.gold)
    }

    /// F1 with both sets empty scoring 1.0.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.gold == 0 {
            return 1.0;
        }
        f_measure(self.precision(), self.recall())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// F1 over unordered (phrase, tag) multisets of one sentence.
pub fn ner_pair_f1(pred: &[(String, String)], gold: &[(String, String)]) -> f64 {
    let mut c = PairCounts::default();
    c.add(pred, gold);
    c.f1()
}

/// Unweighted mean of per-class F1; a class absent from both sides counts 0.
pub fn macro_f1(preds: &[usize], golds: &[usize], classes: usize) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(MetricError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if let Some(&class) = preds.iter().chain(golds).find(|&&c| c >= classes) {
        return Err(MetricError::ClassOutOfRange { class, classes });
    }
    if classes == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..classes)
        .map(|k| {
            let tp = preds.iter().zip(golds).filter(|(p, g)| **p == k && **g == k).count();
            let np = preds.iter().filter(|&&p| p == k).count();
            let ng = golds.iter().filter(|&&g| g == k).count();
            f_measure(ratio(tp, np), ratio(tp, ng))
        })
        .sum();
    Ok(total / classes as f64)
}

pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// ROUGE-1 F-measure with clipped unigram counts over lowercase whitespace tokens.
pub fn rouge1_f(candidate: &str, reference: &str) -> f64 {
    let cand = rouge_tokens(candidate);
    let refs = rouge_tokens(reference);
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut c = PairCounts::default();
    c.add(&cand, &refs);
    f_measure(c.precision(), c.recall())
}

/// Per-seed values of one metric with their mean and population std.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub split: String,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl MetricReport {
    pub fn new(metric: &str, split: &str, seeds: Vec<u64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(MetricError::Empty);
        }
        if seeds.len() != values.len() {
            return Err(MetricError::LengthMismatch {
                preds: values.len(),
                golds: seeds.len(),
            });
        }
        let (mean, std) = mean_std(&values);
        Ok(Self {
            metric: metric.to_string(),
            split: split.to_string(),
            seeds,
            values,
            mean,
            std,
        })
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRow {
    pub source: String,
    pub rouge1: f64,
    pub avg_words: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextReport {
    pub split: String,
    pub rows: Vec<ContextRow>,
}

pub const PREVIOUS_TEXT_ROW: &str = "Previous GT text";

/// Compares each context source for segment `i − 1` against the transcript of
/// segment `i`. The first row uses the ground-truth previous transcript;
/// `generations` supplies one row per source, keyed by the `"stream/index"`
/// of the segment the text was generated from.
pub fn context_report(
    manifest: &StreamManifest,
    generations: &[(String, &BTreeMap<String, String>)],
) -> Result<ContextReport> {
    let mut rows = Vec::with_capacity(generations.len() + 1);
    let mut accumulate = |source: &str, lookup: &dyn Fn(&str) -> Option<String>| -> Result<()> {
        let (mut rouge, mut words, mut pairs) = (0.0, 0usize, 0usize);
        for group in manifest.streams() {
            for pair in group.windows(2) {
                let key = segment_key(&pair[0].stream, pair[0].index);
                let text = lookup(&key).ok_or_else(|| MetricError::MissingGeneration {
                    source_name: source.to_string(),
                    segment: key.clone(),
                })?;
                rouge += rouge1_f(&text, &pair[1].text());
                words += text.split_whitespace().count();
                pairs += 1;
            }
        }
        let n = pairs.max(1) as f64;
        rows.push(ContextRow {
            source: source.to_string(),
            rouge1: rouge / n,
            avg_words: words as f64 / n,
            pairs,
        });
        Ok(())
    };
    let by_key = manifest.index_by_key();
    accumulate(PREVIOUS_TEXT_ROW, &|k| by_key.get(k).map(|&i| manifest.segments[i].text()))?;
    for (source, map) in generations {
        accumulate(source, &|k| map.get(k).cloned())?;
    }
    Ok(ContextReport {
        split: manifest.split.clone(),
        rows,
    })
}

impl ContextReport {
    pub fn to_table(&self) -> String {
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| vec![r.source.clone(), format!("{:.2}", r.rouge1), format!("{:.1}", r.avg_words)])
            .collect();
        render_table(&["Text", "ROUGE-1", "Avg. words"], &body)
    }
}

/// Left-aligned first column, right-aligned others, padded to the widest cell.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (c, cell) in row.iter().enumerate().take(cols) {
            width[c] = width[c].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: &mut dyn Iterator<Item = &str>| {
        let parts: Vec<String> = cells
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = width[c])
                } else {
                    format!("{s:>w$}", w = width[c])
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut header.iter().copied());
    let rule: Vec<String> = width.iter().map(|w| "-".repeat(*w)).collect();
    line(&mut rule.iter().map(String::as_str));
    for row in rows {
        line(&mut row.iter().map(String::as_str));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    /// Exhaustive edit distance: tries every delete/insert/substitute path.
    fn brute_distance(a: &[String], b: &[String]) -> usize {
        if a.is_empty() {
            return b.len();
        }
        if b.is_empty() {
            return a.len();
        }
        let sub = brute_distance(&a[1..], &b[1..]) + usize::from(a[0] != b[0]);
        let del = brute_distance(&a[1..], b) + 1;
        let ins = brute_distance(a, &b[1..]) + 1;
        sub.min(del).min(ins)
    }

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&w("a b c"), &w("a b c")).unwrap(), 0.0);
        assert_eq!(wer(&w("a b c"), &[]).unwrap(), 100.0);
        let v = wer(&w("a b c"), &w("a x c d")).unwrap();
        assert_eq!(brute_distance(&w("a b c"), &w("a x c d")), 2);
        assert_eq!(format!("{v:.2}"), "66.67");
        assert_eq!(wer::<String>(&[], &w("a")), Err(MetricError::EmptyReference));
    }

    #[test]
    fn corpus_wer_pools_counts() {
        let mut c = WerCounts::default();
        c.add(&w("a b c"), &w("a x c d"));
        c.add(&w("e"), &w("e"));
        assert_eq!(c.wer().unwrap(), 50.0);
        assert!(WerCounts::default().wer().is_err());
    }

    #[test]
    fn alignment_cost_matches_distance() {
        let (r, h) = (w("a b c d"), w("b c x d e"));
        let ops = align(&r, &h);
        let cost = ops
            .iter()
            .filter(|o| !matches!(o, AlignOp::Match { .. }))
            .count();
        assert_eq!(cost, levenshtein(&r, &h));
        assert_eq!(cost, brute_distance(&r, &h));
    }

    #[test]
    fn flagged_error_counting() {
        let r = w("the sea is plain");
        let flags = [false, true, false, true];
        assert_eq!(flagged_errors(&r, &r, &flags), (0, 2));
        assert_eq!(flagged_errors(&r, &w("the see is plain"), &flags), (1, 2));
        assert_eq!(flagged_errors(&r, &w("the is"), &flags), (2, 2));
        assert_eq!(flagged_errors(&r, &w("x the sea is plain"), &flags), (0, 2));
    }

    #[test]
    fn ner_examples() {
        let john = pairs(&[("john", "PER")]);
        assert_eq!(ner_pair_f1(&john, &john), 1.0);
        let pred = pairs(&[("john", "PER"), ("paris", "LOC")]);
        let gold = pairs(&[("john", "PER"), ("london", "LOC")]);
        let mut c = PairCounts::default();
        c.add(&pred, &gold);
        assert_eq!((c.precision(), c.recall()), (0.5, 0.5));
        assert_eq!(ner_pair_f1(&pred, &gold), 0.5);
        assert_eq!(ner_pair_f1(&[], &[]), 1.0);
        assert_eq!(ner_pair_f1(&john, &[]), 0.0);
    }

    #[test]
    fn ner_multiset_counts_duplicates_once_each() {
        let pred = pairs(&[("a", "X"), ("a", "X"), ("a", "X")]);
        let gold = pairs(&[("a", "X"), ("a", "X")]);
        let mut c = PairCounts::default();
        c.add(&pred, &gold);
        assert_eq!(c.true_positive, 2);
    }

    #[test]
    fn macro_f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        let v = macro_f1(&[0, 1], &[0, 1], 3).unwrap();
        assert_eq!(format!("{v:.3}"), "0.667");
        // one class predicted everywhere on a balanced set: F1 of that class is 0.5
        let v = macro_f1(&[0, 0, 0], &[0, 1, 2], 3).unwrap();
        assert!((v - 0.5 / 3.0).abs() < 1e-15);
        assert_eq!(
            macro_f1(&[0], &[0, 1], 3),
            Err(MetricError::LengthMismatch { preds: 1, golds: 2 })
        );
        assert!(macro_f1(&[3], &[0], 3).is_err());
    }

    #[test]
    fn rouge_examples() {
        assert_eq!(rouge1_f("the cat sat", "the cat sat"), 1.0);
        assert_eq!(rouge1_f("dogs bark", "cats meow"), 0.0);
        let v = rouge1_f("the cat sat", "the cat ran fast");
        assert_eq!(format!("{v:.4}"), "0.5714");
        assert_eq!(rouge1_f("", "x"), 0.0);
        // clipping: repeated candidate words only match as often as they occur in the reference
        assert!((rouge1_f("the the the", "the cat") - 2.0 * (1.0 / 3.0) * 0.5 / (1.0 / 3.0 + 0.5)).abs() < 1e-15);
        assert_eq!(rouge1_f("The Cat", "the cat"), 1.0);
    }

    #[test]
    fn report_mean_and_population_std() {
        let r = MetricReport::new("wer", "eval", vec![1, 2, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.mean, 2.0);
        assert!((r.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(MetricReport::new("wer", "eval", vec![], vec![]).is_err());
        assert!(MetricReport::new("wer", "eval", vec![1], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn table_is_aligned() {
        let t = render_table(&["a", "value"], &[vec!["long name".into(), "1.5".into()]]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "a          value");
        assert_eq!(lines[2], "long name    1.5");
    }

    #[test]
    fn context_report_rows() {
        use crate::data::{generate_corpus, CorpusConfig};
        let cfg = CorpusConfig {
            topics: 3,
            train_streams: 3,
            eval_streams: 1,
            segments_per_stream: 4,
            ..CorpusConfig::default()
        };
        let m = generate_corpus(&cfg).unwrap().train;
        // texts equal to the transcript that follows them
        let mut next: BTreeMap<String, String> = BTreeMap::new();
        for group in m.streams() {
            for pair in group.windows(2) {
                next.insert(pair[0].key(), pair[1].text());
            }
        }
        let report = context_report(&m, &[("P1".into(), &next)]).unwrap();
        assert_eq!(report.rows[0].source, PREVIOUS_TEXT_ROW);
        assert_eq!(report.rows[0].pairs, 9);
        assert_eq!(report.rows[1].rouge1, 1.0);
        assert_eq!(report.rows[1].avg_words, 12.0);
        assert!(report.to_table().contains("Previous GT text"));

        let mut partial = next.clone();
        partial.pop_first();
        assert!(matches!(
            context_report(&m, &[("P4".into(), &partial)]),
            Err(MetricError::MissingGeneration { .. })
        ));
    }

    proptest! {
        #[test]
        fn wer_self_is_zero(x in proptest::collection::vec(0u8..5, 1..12)) {
            prop_assert_eq!(wer(&x, &x).unwrap(), 0.0);
        }

        #[test]
        fn edit_distance_ignores_shared_prefix(
            p in proptest::collection::vec(0u8..4, 0..6),
            a in proptest::collection::vec(0u8..4, 1..7),
            b in proptest::collection::vec(0u8..4, 0..7),
        ) {
            let pa: Vec<u8> = p.iter().chain(&a).copied().collect();
            let pb: Vec<u8> = p.iter().chain(&b).copied().collect();
            prop_assert_eq!(levenshtein(&pa, &pb), levenshtein(&a, &b));
        }

        #[test]
        fn distance_matches_exhaustive_search(
            a in proptest::collection::vec(0u8..3, 0..6),
            b in proptest::collection::vec(0u8..3, 0..6),
        ) {
            let sa: Vec<String> = a.iter().map(u8::to_string).collect();
            let sb: Vec<String> = b.iter().map(u8::to_string).collect();
            prop_assert_eq!(levenshtein(&sa, &sb), brute_distance(&sa, &sb));
        }

        #[test]
        fn ner_f1_is_swap_symmetric(
            a in proptest::collection::vec((0u8..3, 0u8..2), 0..6),
            b in proptest::collection::vec((0u8..3, 0u8..2), 0..6),
        ) {
            let conv = |v: &[(u8, u8)]| -> Vec<(String, String)> {
                v.iter().map(|(x, y)| (x.to_string(), y.to_string())).collect()
            };
            let (pa, pb) = (conv(&a), conv(&b));
            let mut ab = PairCounts::default();
            ab.add(&pa, &pb);
            let mut ba = PairCounts::default();
            ba.add(&pb, &pa);
            prop_assert_eq!(ab.precision(), ba.recall());
            prop_assert_eq!(ner_pair_f1(&pa, &pb), ner_pair_f1(&pb, &pa));
        }

        #[test]
        fn rouge_is_symmetric_and_order_free(
            a in proptest::collection::vec(0u8..5, 0..8),
            b in proptest::collection::vec(0u8..5, 0..8),
        ) {
            let ta: Vec<String> = a.iter().map(|x| format!("w{x}")).collect();
            let tb: Vec<String> = b.iter().map(|x| format!("w{x}")).collect();
            let (sa, sb) = (ta.join(" "), tb.join(" "));
            prop_assert!((rouge1_f(&sa, &sb) - rouge1_f(&sb, &sa)).abs() < 1e-15);
            let mut rev = ta.clone();
            rev.reverse();
            prop_assert_eq!(rouge1_f(&rev.join(" "), &sb), rouge1_f(&sa, &sb));
        }
    }
}
