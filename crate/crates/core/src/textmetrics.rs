//! Sentence-level BLEU and ChrF over arbitrary token sequences.
//!
//! The same functions score word sequences (text targets), character
//! strings, and unit sequences rendered through
//! [`units_to_chars`](crate::units::units_to_chars).

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScore {
    pub value: f64,
    pub metric_name: String,
    /// Per-order precisions (BLEU) or F-scores (ChrF).
    pub per_order: Vec<f64>,
    /// BLEU only.
    pub brevity_penalty: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Chrf,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bleu" => Ok(Metric::Bleu),
            "chrf" => Ok(Metric::Chrf),
            other => Err(format!("unknown metric `{other}` (expected bleu or chrf)")),
        }
    }
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped match count and total hypothesis n-grams of order `n`.
fn clipped_matches<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total_h = hyp.len().saturating_sub(n - 1);
    let total_r = reference.len().saturating_sub(n - 1);
    (matches, total_h, total_r)
}

/// Smoothed sentence BLEU.
///
/// Orders `n >= 2` add one to both the match count and the candidate count,
/// so an identical pair scores exactly 1 and a single missing order does
/// not zero the whole score.
pub fn sentence_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> MetricScore {
    assert!(max_n >= 1, "max_n must be at least 1");
    let score = |value, per_order, bp| MetricScore {
        value,
        metric_name: "bleu".into(),
        per_order,
        brevity_penalty: bp,
    };
    match (hyp.is_empty(), reference.is_empty()) {
        (true, true) => return score(1.0, vec![1.0; max_n], Some(1.0)),
        (true, false) => return score(0.0, vec![0.0; max_n], Some(0.0)),
        _ => {}
    }

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, total, _) = clipped_matches(hyp, reference, n);
        let p = if n == 1 {
            m as f64 / total as f64
        } else {
            (m + 1) as f64 / (total + 1) as f64
        };
        precisions.push(p);
    }
    let bp = if hyp.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hyp.len() as f64).exp()
    };
    let value = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_n as f64;
        (bp * log_mean.exp()).clamp(0.0, 1.0)
    };
    score(value, precisions, Some(bp))
}

/// Character n-gram F-score. Whitespace is removed before counting.
pub fn sentence_chrf(hyp: &str, reference: &str, max_n: usize, beta: f64) -> MetricScore {
    assert!(max_n >= 1, "max_n must be at least 1");
    assert!(beta > 0.0, "beta must be positive");
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let score = |value, per_order| MetricScore {
        value,
        metric_name: "chrf".into(),
        per_order,
        brevity_penalty: None,
    };
    match (h.is_empty(), r.is_empty()) {
        (true, true) => return score(1.0, Vec::new()),
        (true, false) | (false, true) => return score(0.0, Vec::new()),
        _ => {}
    }

    let b2 = beta * beta;
    let mut fs = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (m, total_h, total_r) = clipped_matches(&h, &r, n);
        if total_h == 0 && total_r == 0 {
            continue;
        }
        let p = if total_h == 0 { 0.0 } else { m as f64 / total_h as f64 };
        let rc = if total_r == 0 { 0.0 } else { m as f64 / total_r as f64 };
        let denom = b2 * p + rc;
        fs.push(if denom == 0.0 {
            0.0
        } else {
            (1.0 + b2) * p * rc / denom
        });
    }
    let value = fs.iter().sum::<f64>() / fs.len() as f64;
    score(value.clamp(0.0, 1.0), fs)
}

fn is_edge_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '¡' | '¿' | '«' | '»' | '…' | '“' | '”' | '‘' | '’' | '—' | '–' | '·' | '。' | '、'
        )
}

/// Lowercases, splits on whitespace and strips edge punctuation.
pub fn tokenize_text(s: &str) -> Vec<String> {
    s.split_whitespace()
        .map(|t| t.trim_matches(is_edge_punct).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Splits on whitespace only, keeping case and punctuation.
pub fn tokenize_raw(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Scores two transcripts with the chosen text metric.
///
/// In tokenized mode ChrF sees the normalised tokens joined by spaces; in
/// raw mode it sees the strings untouched.
pub fn text_score(hyp: &str, reference: &str, metric: Metric, raw: bool) -> f64 {
    let tok = if raw { tokenize_raw } else { tokenize_text };
    match metric {
        Metric::Bleu => sentence_bleu(&tok(hyp), &tok(reference), 4).value,
        Metric::Chrf => {
            if raw {
                sentence_chrf(hyp, reference, 6, 2.0).value
            } else {
                sentence_chrf(&tok(hyp).join(" "), &tok(reference).join(" "), 6, 2.0).value
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bleu_identity_and_empty() {
        let x = ["a", "b", "c", "d", "e"];
        assert_eq!(sentence_bleu(&x, &x, 4).value, 1.0);
        assert_eq!(sentence_bleu::<&str>(&[], &["a"], 4).value, 0.0);
        assert_eq!(sentence_bleu::<&str>(&[], &[], 4).value, 1.0);
        // A single token matches itself at every order thanks to smoothing.
        assert_eq!(sentence_bleu(&["a"], &["a"], 4).value, 1.0);
        assert_eq!(sentence_bleu(&["a"], &[], 4).value, 0.0);
    }

    #[test]
    fn bleu_worked_example() {
        let s = sentence_bleu(&["a", "b", "c", "d"], &["a", "b", "c", "e"], 4);
        assert_eq!(s.brevity_penalty, Some(1.0));
        let expected = [0.75, 0.75, 2.0 / 3.0, 0.5];
        for (p, e) in s.per_order.iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((s.value - 0.6580).abs() < 5e-5, "{}", s.value);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let s = sentence_bleu(&["a", "b"], &["a", "b", "c", "d"], 4);
        let bp = (1.0f64 - 2.0).exp();
        assert!((s.brevity_penalty.unwrap() - bp).abs() < 1e-15);
    }

    #[test]
    fn chrf_cases() {
        assert_eq!(sentence_chrf("abcdef", "abcdef", 6, 2.0).value, 1.0);
        assert_eq!(sentence_chrf("ab cd", "abcd", 6, 2.0).value, 1.0);
        assert_eq!(sentence_chrf("", "", 6, 2.0).value, 1.0);
        assert_eq!(sentence_chrf("", "a", 6, 2.0).value, 0.0);
        assert_eq!(sentence_chrf("   ", "a", 6, 2.0).value, 0.0);
        assert_eq!(sentence_chrf("abc", "xyz", 6, 2.0).value, 0.0);
    }

    #[test]
    fn chrf_abc_abd() {
        // Orders 1..3 are populated. Unigrams: 2 of 3 match; bigrams: 1 of 2
        // (ab); trigrams: 0 of 1. P = R at every order since lengths agree.
        let s = sentence_chrf("abc", "abd", 6, 2.0);
        assert_eq!(s.per_order.len(), 3);
        let expected = (2.0 / 3.0 + 0.5 + 0.0) / 3.0;
        assert!((s.value - expected).abs() < 1e-12);
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize_text("Hello, world!"), vec!["hello", "world"]);
        assert!(tokenize_text("").is_empty());
        assert_eq!(tokenize_text("don't stop"), vec!["don't", "stop"]);
        assert_eq!(tokenize_text(" -- A "), vec!["a"]);
        assert_eq!(tokenize_raw("Hello, world!"), vec!["Hello,", "world!"]);
    }

    #[test]
    fn text_score_modes() {
        assert_eq!(text_score("Hello world", "hello, world", Metric::Bleu, false), 1.0);
        assert!(text_score("Hello world", "hello, world", Metric::Bleu, true) < 1.0);
        assert_eq!(text_score("Hi there", "hi there!", Metric::Chrf, false), 1.0);
        assert!(text_score("Hi there", "hi there!", Metric::Chrf, true) < 1.0);
    }

    proptest! {
        #[test]
        fn bounded(h in prop::collection::vec(0u8..4, 0..12), r in prop::collection::vec(0u8..4, 0..12)) {
            let b = sentence_bleu(&h, &r, 4).value;
            prop_assert!((0.0..=1.0).contains(&b));
            let hs: String = h.iter().map(|&c| (b'a' + c) as char).collect();
            let rs: String = r.iter().map(|&c| (b'a' + c) as char).collect();
            let c = sentence_chrf(&hs, &rs, 6, 2.0).value;
            prop_assert!((0.0..=1.0).contains(&c));
        }

        #[test]
        fn identity_scores_one(x in prop::collection::vec(0u8..6, 1..30)) {
            prop_assert_eq!(sentence_bleu(&x, &x, 4).value, 1.0);
            let s: String = x.iter().map(|&c| (b'a' + c) as char).collect();
            prop_assert_eq!(sentence_chrf(&s, &s, 6, 2.0).value, 1.0);
        }

        #[test]
        fn chrf_whitespace_insensitive(
            s in "[a-d]{1,15}",
            r in "[a-d]{1,15}",
            cuts in prop::collection::vec(0usize..15, 0..5),
        ) {
            let mut spaced: Vec<char> = s.chars().collect();
            let mut cuts = cuts;
            cuts.sort_unstable();
            for c in cuts.into_iter().rev() {
                let at = c.min(spaced.len());
                spaced.insert(at, ' ');
            }
            let spaced: String = spaced.into_iter().collect();
            prop_assert_eq!(
                sentence_chrf(&spaced, &r, 6, 2.0).value,
                sentence_chrf(&s, &r, 6, 2.0).value
            );
        }

        #[test]
        fn single_substitution_never_helps(
            reference in prop::collection::vec(0u16..30, 20),
            pos in 0usize..20,
            new_tok in 0u16..40,
        ) {
            // Start from the reference itself so each substitution can only remove matches.
            let before = sentence_bleu(&reference, &reference, 4).value;
            let mut hyp = reference.clone();
            hyp[pos] = new_tok;
            let after = sentence_bleu(&hyp, &reference, 4).value;
            prop_assert!(after <= before + 1e-15);
        }

        #[test]
        fn oov_substitution_never_helps(
            hyp in prop::collection::vec(0u16..10, 20),
            reference in prop::collection::vec(0u16..10, 1..25),
            pos in 0usize..20,
        ) {
            let before = sentence_bleu(&hyp, &reference, 4).value;
            let mut edited = hyp.clone();
            edited[pos] = 999;
            prop_assert!(sentence_bleu(&edited, &reference, 4).value <= before + 1e-15);
        }
    }
}
