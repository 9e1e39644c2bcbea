//! Answer normalization and the text-similarity rewards.
//!
//! Normalization: lowercase, drop every character that is neither
//! alphanumeric nor whitespace, collapse runs of whitespace to one space and
//! trim. Tokens are the whitespace-separated pieces of the normalized string.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::GoldReference;
use crate::doc::RegionType;
use crate::vsc::Operator;

pub fn normalize_answer(s: &str) -> String {
    let kept: String =
        s.chars().flat_map(char::to_lowercase).filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn tokens(s: &str) -> Vec<String> {
    normalize_answer(s).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

fn overlap(pred: &[String], gold: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    common
}

/// Multiset token F1. Two empty token lists score 1.
pub fn token_f1(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    if p.is_empty() && g.is_empty() {
        return 1.0;
    }
    let common = overlap(&p, &g);
    if common == 0 {
        return 0.0;
    }
    // 2PR/(P+R) reduces to one division, which is correctly rounded: an
    // exact F1 of 4/5 compares equal to a threshold of 0.8.
    (2 * common) as f64 / (p.len() + g.len()) as f64
}

/// Fraction of gold tokens present in the prediction.
pub fn token_recall(pred: &str, gold: &str) -> f64 {
    let (p, g) = (tokens(pred), tokens(gold));
    if g.is_empty() {
        return if p.is_empty() { 1.0 } else { 0.0 };
    }
    overlap(&p, &g) as f64 / g.len() as f64
}

/// `1 - levenshtein / max_len` over the normalized strings, in characters.
pub fn fuzzy_similarity(pred: &str, gold: &str) -> f64 {
    let (a, b) = (normalize_answer(pred), normalize_answer(gold));
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - strsim::levenshtein(&a, &b) as f64 / longest as f64
}

/// Convex mix of the three answer signals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerMix {
    pub f1: f64,
    pub recall: f64,
    pub fuzzy: f64,
}

impl Default for AnswerMix {
    fn default() -> Self {
        AnswerMix { f1: 0.5, recall: 0.25, fuzzy: 0.25 }
    }
}

pub fn answer_reward(pred: &str, gold: &GoldReference) -> f64 {
    answer_reward_with(pred, gold, AnswerMix::default())
}

/// Best mixed similarity over the acceptable gold answers.
pub fn answer_reward_with(pred: &str, gold: &GoldReference, mix: AnswerMix) -> f64 {
    gold.answers
        .iter()
        .map(|g| {
            mix.f1 * token_f1(pred, g) + mix.recall * token_recall(pred, g) + mix.fuzzy * fuzzy_similarity(pred, g)
        })
        .fold(0.0, f64::max)
        .clamp(0.0, 1.0)
}

/// Best token F1 over the gold answers; the quantity the retention rule
/// compares with `tau`.
pub fn best_answer_f1(pred: &str, gold: &GoldReference) -> f64 {
    gold.answers.iter().map(|g| token_f1(pred, g)).fold(0.0, f64::max)
}

fn words(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split(|c: char| !(c.is_alphanumeric() || c == '_'))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn mentions_operator(analysis: &str, op: Operator) -> bool {
    let name = op.as_str().to_lowercase();
    words(analysis).contains(&name)
}

/// Bonus added to the analysis F1 when the analysis names the expected first
/// operator.
pub const QA_OPERATOR_BONUS: f64 = 0.2;

/// Scores the `question_analysis` field.
///
/// With a reference analysis: token F1 against it, plus
/// [`QA_OPERATOR_BONUS`] when the gold first operator is named, capped at 1.
/// Without one: 1 if the analysis names any operator or region label, else 0.
pub fn qa_reward(analysis: &str, gold: &GoldReference) -> f64 {
    match &gold.analysis_ref {
        Some(reference) => {
            let f1 = token_f1(analysis, reference);
            let bonus = if mentions_operator(analysis, gold.first_op()) { QA_OPERATOR_BONUS } else { 0.0 };
            (f1 + bonus).min(1.0)
        }
        None => {
            let ws = words(analysis);
            let named = ws.iter().any(|w| {
                Operator::ALL.iter().any(|op| op.as_str().to_lowercase() == *w)
                    || RegionType::ALL.iter().any(|t| t.as_str() == w)
            });
            if named {
                1.0
            } else {
                0.0
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gold(answers: &[&str]) -> GoldReference {
        GoldReference::new(answers.iter().map(|s| s.to_string()).collect())
    }

    // Textbook dynamic-programming edit distance, independent of strsim.
    fn edit_distance(a: &str, b: &str) -> usize {
        let a: Vec<char> = a.chars().collect();
        let b: Vec<char> = b.chars().collect();
        let mut dp = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in dp.iter_mut().enumerate() {
            row[0] = i;
        }
        for (j, cell) in dp[0].iter_mut().enumerate() {
            *cell = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let sub = dp[i - 1][j - 1] + usize::from(a[i - 1] != b[j - 1]);
                dp[i][j] = sub.min(dp[i - 1][j] + 1).min(dp[i][j - 1] + 1);
            }
        }
        dp[a.len()][b.len()]
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer("  The  Net-Revenue, 2024! "), "the netrevenue 2024");
        assert_eq!(tokens("A b  a"), ["a", "b", "a"]);
    }

    #[test]
    fn exact_match_scores_one() {
        assert_eq!(answer_reward("2024", &gold(&["2024"])), 1.0);
        assert_eq!(answer_reward("Alpha Corp.", &gold(&["alpha corp"])), 1.0);
    }

    #[test]
    fn empty_prediction_scores_zero() {
        assert_eq!(answer_reward("", &gold(&["x"])), 0.0);
        assert_eq!(answer_reward("", &gold(&[""])), 1.0);
    }

    #[test]
    fn partial_answer_against_oracle() {
        // F1: one shared token; precision 1/3, recall 1.
        let f1 = 2.0 * (1.0 / 3.0) * 1.0 / (1.0 / 3.0 + 1.0);
        assert!((f1 - 0.5f64).abs() < 1e-15);
        assert_eq!(token_f1("net revenue 315", "315"), f1);
        assert_eq!(token_recall("net revenue 315", "315"), 1.0);
        let d = edit_distance("net revenue 315", "315");
        assert_eq!(d, 12);
        let fuzzy = 1.0 - d as f64 / 15.0;
        assert_eq!(fuzzy_similarity("net revenue 315", "315"), fuzzy);
        let expected = 0.5 * f1 + 0.25 * 1.0 + 0.25 * fuzzy;
        assert!((answer_reward("net revenue 315", &gold(&["315"])) - expected).abs() < 1e-15);
        assert!((expected - 0.55).abs() < 1e-12);
    }

    #[test]
    fn f1_at_four_fifths_meets_the_threshold() {
        // 6 shared tokens, 7 predicted, 8 gold: F1 = 12/15.
        let gold = "a b c d e f g h";
        let pred = "a b c d e f x";
        assert_eq!(token_f1(pred, gold), 0.8);
        assert_eq!(token_f1("alpha corp ltd", "alpha corp"), 0.8);
    }

    #[test]
    fn best_gold_answer_wins() {
        let g = gold(&["nothing alike", "315"]);
        assert_eq!(answer_reward("315", &g), 1.0);
    }

    #[test]
    fn qa_with_reference() {
        let mut g = gold(&["x"]);
        g.analysis_ref = Some("select the revenue row then aggregate sum".into());
        assert_eq!(qa_reward("select the revenue row then aggregate sum", &g), 1.0);

        // Shares half of the reference tokens and names no Select.
        let analysis = "revenue row then aggregate";
        let f1 = token_f1(analysis, g.analysis_ref.as_ref().unwrap());
        // 4 shared tokens; precision 4/4, recall 4/7.
        let oracle = 2.0 * 1.0 * (4.0 / 7.0) / (1.0 + 4.0 / 7.0);
        assert!((f1 - oracle).abs() < 1e-15);
        assert_eq!(qa_reward(analysis, &g), f1);
        // Naming the first operator adds the bonus.
        assert!(
            (qa_reward("select revenue row then aggregate", &g)
                - (token_f1("select revenue row then aggregate", g.analysis_ref.as_ref().unwrap()) + 0.2).min(1.0))
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn qa_without_reference() {
        let g = gold(&["x"]);
        assert_eq!(qa_reward("", &g), 0.0);
        assert_eq!(qa_reward("look at the key_value block", &g), 1.0);
        assert_eq!(qa_reward("FILTER by year", &g), 1.0);
        assert_eq!(qa_reward("think hard", &g), 0.0);
    }

    #[test]
    fn fuzzy_matches_oracle_on_samples() {
        for (a, b) in [("kitten", "sitting"), ("", "abc"), ("ÅÄÖ", "aäo"), ("flaw", "lawn")] {
            let (na, nb) = (normalize_answer(a), normalize_answer(b));
            let longest = na.chars().count().max(nb.chars().count());
            let expect = if longest == 0 { 1.0 } else { 1.0 - edit_distance(&na, &nb) as f64 / longest as f64 };
            assert_eq!(fuzzy_similarity(a, b), expect, "{a} vs {b}");
        }
    }

    proptest::proptest! {
        #[test]
        fn self_match_is_one(a in "[a-zA-Z0-9 ]{0,20}") {
            proptest::prop_assume!(!normalize_answer(&a).is_empty());
            proptest::prop_assert_eq!(answer_reward(&a, &gold(&[a.as_str()])), 1.0);
        }

        #[test]
        fn answer_reward_bounded(a in ".{0,20}", b in ".{0,20}") {
            let r = answer_reward(&a, &gold(&[b.as_str()]));
            proptest::prop_assert!((0.0..=1.0).contains(&r));
        }
    }
}
