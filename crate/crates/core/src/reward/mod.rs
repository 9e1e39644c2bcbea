//! Composite rollout reward and the rejection-sampling retention rule.
//!
//! ```text
//! total = r_ans + λ_q·r_qa + λ_v·r_vsc + λ_s·r_str + λ_r·r̃_reg
//! ```
//!
//! with default weights `(λ_q, λ_v, λ_s, λ_r) = (0.20, 0.20, 0.20, 0.50)`.
//! The total is a correctly rounded sum of the five weighted terms, so it is
//! exactly recomputable from a [`RewardBreakdown`] and its weights.

mod filter;
mod scorer;
mod text;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::Code;
use crate::doc::Document;
use crate::exec::resolve_selection;
use crate::numeric::exact_sum;
use crate::vsc::{validate_schema, Operator, RolloutRecord, Tally, Trace};

pub use filter::{rejection_filter, Decision, DiscardReason};
pub use scorer::{load_gold_file, GoldKey, GoldRecord, ScoreError, ScoredRecord, Scorer};
pub use text::{
    answer_reward, answer_reward_with, best_answer_f1, fuzzy_similarity, normalize_answer, qa_reward, token_f1,
    token_recall, tokens, AnswerMix, QA_OPERATOR_BONUS,
};

/// Probability floor for steps whose region disagrees with the gold region
/// under gated scoring.
pub const GATED_FLOOR: f64 = 1e-6;

pub const DEFAULT_TAU: f64 = 0.8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("E_PROB_RANGE: region probability {value} at step {index} is outside (0, 1]")]
    ProbRange { index: usize, value: f64 },
    #[error("E_PROB_COUNT: {got} region probabilities for {expected} region steps")]
    ProbCount { expected: usize, got: usize },
}

impl RewardError {
    pub fn code(&self) -> Code {
        match self {
            RewardError::ProbRange { .. } => Code::ProbRange,
            RewardError::ProbCount { .. } => Code::ProbCount,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub lambda_q: f64,
    pub lambda_v: f64,
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights { lambda_q: 0.20, lambda_v: 0.20, lambda_s: 0.20, lambda_r: 0.50 }
    }
}

impl RewardWeights {
    /// Upper bound of the total when every component is 1.
    pub fn max_total(&self) -> f64 {
        exact_sum([1.0, self.lambda_q, self.lambda_v, self.lambda_s, self.lambda_r])
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("weights must be four non-negative numbers `q,v,s,r`, got `{0}`")]
pub struct BadWeights(String);

impl FromStr for RewardWeights {
    type Err = BadWeights;

    /// Parses `q,v,s,r`.
    fn from_str(s: &str) -> Result<Self, BadWeights> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| BadWeights(s.to_string()))?;
        match parts.as_slice() {
            &[q, v, st, r] if parts.iter().all(|x| x.is_finite() && *x >= 0.0) => {
                Ok(RewardWeights { lambda_q: q, lambda_v: v, lambda_s: st, lambda_r: r })
            }
            _ => Err(BadWeights(s.to_string())),
        }
    }
}

impl fmt::Display for RewardWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.lambda_q, self.lambda_v, self.lambda_s, self.lambda_r)
    }
}

/// Ground truth for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldReference {
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_ref: Option<String>,
    /// Expected region selector per step, aligned with the chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_regions: Option<Vec<String>>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    /// Operator the analysis is expected to name; defaults to Select, the
    /// first operator of every well-formed chain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_op: Option<Operator>,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl GoldReference {
    pub fn new(answers: Vec<String>) -> Self {
        GoldReference { answers, analysis_ref: None, gold_regions: None, tau: DEFAULT_TAU, first_op: None }
    }

    pub fn first_op(&self) -> Operator {
        self.first_op.unwrap_or(Operator::Select)
    }

    /// Checks the invariants a gold file line must satisfy.
    pub fn check(&self) -> Result<(), String> {
        if self.answers.is_empty() {
            return Err("gold reference needs at least one answer".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau {} is outside [0, 1]", self.tau));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RewardBreakdown {
    pub r_ans: f64,
    pub r_qa: f64,
    pub r_vsc: f64,
    pub r_str: f64,
    #[serde(rename = "r_reg")]
    pub r_reg_tilde: f64,
    pub total: f64,
    /// True when no region probabilities were available (r̃_reg forced to 0).
    #[serde(skip)]
    pub reg_empty: bool,
}

impl RewardBreakdown {
    pub fn from_components(r_ans: f64, r_qa: f64, r_vsc: f64, r_str: f64, r_reg_tilde: f64, w: &RewardWeights) -> Self {
        let mut b = RewardBreakdown { r_ans, r_qa, r_vsc, r_str, r_reg_tilde, total: 0.0, reg_empty: false };
        b.total = b.recompute_total(w);
        b
    }

    pub fn recompute_total(&self, w: &RewardWeights) -> f64 {
        exact_sum([
            self.r_ans,
            w.lambda_q * self.r_qa,
            w.lambda_v * self.r_vsc,
            w.lambda_s * self.r_str,
            w.lambda_r * self.r_reg_tilde,
        ])
    }
}

/// Mean of the four validation sub-scores (argument schema, ordering, region
/// consistency, diversity). Unparsed records score 0.
pub fn vsc_reward(record: &RolloutRecord, doc: &Document) -> f64 {
    match &record.trace {
        Some(t) => trace_vsc_score(t, Some(doc)),
        None => 0.0,
    }
}

pub fn trace_vsc_score(t: &Trace, doc: Option<&Document>) -> f64 {
    if t.vsc.is_empty() {
        return 0.0;
    }
    let c = validate_schema(t, doc).checked_counts;
    mean_of_tallies(&[c.arg_schema, c.ordering, c.region, c.diversity])
}

// With a shared denominator the mean is one integer ratio, which keeps the
// score exactly monotone in each count.
fn mean_of_tallies(ts: &[Tally]) -> f64 {
    let den = ts[0].total;
    if ts.iter().all(|t| t.total == den) && den > 0 {
        let num: usize = ts.iter().map(|t| t.passed).sum();
        num as f64 / (den * ts.len()) as f64
    } else {
        exact_sum(ts.iter().map(Tally::fraction)) / ts.len() as f64
    }
}

/// Fraction of the four output-format checks that pass; 0 if `raw` is not a
/// JSON object.
///
/// Checks: `question_analysis` is a string; `vsc` is a non-empty list;
/// `answer` is a string; `vsc` is a list whose every element has a string
/// `op`, a string `region` and an object `args`.
pub fn structure_reward(raw: &str) -> f64 {
    use serde_json::Value;
    let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(raw) else {
        return 0.0;
    };
    let qa = matches!(obj.get("question_analysis"), Some(Value::String(_)));
    let vsc_list = matches!(obj.get("vsc"), Some(Value::Array(a)) if !a.is_empty());
    let answer = matches!(obj.get("answer"), Some(Value::String(_)));
    let steps = match obj.get("vsc") {
        Some(Value::Array(items)) => items.iter().all(|s| {
            matches!(s.get("op"), Some(Value::String(_)))
                && matches!(s.get("region"), Some(Value::String(_)))
                && matches!(s.get("args"), Some(Value::Object(_)))
        }),
        _ => false,
    };
    [qa, vsc_list, answer, steps].iter().filter(|b| **b).count() as f64 / 4.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionScore {
    /// `Σ log p_t`.
    pub log_sum: f64,
    /// `exp(log_sum / N)`; 0 when there are no probabilities.
    pub r_tilde: f64,
    pub empty: bool,
}

/// Length-normalized geometric mean of region-token probabilities, computed
/// in log space. The log-sum is correctly rounded, so the result does not
/// depend on the order of `probs`.
pub fn region_reward(probs: &[f64]) -> Result<RegionScore, RewardError> {
    check_probs(probs)?;
    if probs.is_empty() {
        return Ok(RegionScore { log_sum: 0.0, r_tilde: 0.0, empty: true });
    }
    let log_sum = exact_sum(probs.iter().map(|p| p.ln()));
    let r_tilde = (log_sum / probs.len() as f64).exp();
    Ok(RegionScore { log_sum, r_tilde, empty: false })
}

fn check_probs(probs: &[f64]) -> Result<(), RewardError> {
    match probs.iter().position(|p| !(*p > 0.0 && *p <= 1.0)) {
        Some(index) => Err(RewardError::ProbRange { index, value: probs[index] }),
        None => Ok(()),
    }
}

/// Whether a step's selector names the gold region: same string, or both
/// resolve to the same regions of `doc`.
pub fn region_matches(doc: &Document, selector: &str, gold: &str) -> bool {
    if selector == gold {
        return true;
    }
    let regions =
        |s: &str| resolve_selection(doc, s, None).ok().map(|items| items.iter().map(|i| i.region).collect::<Vec<_>>());
    match (regions(selector), regions(gold)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}

/// All five components and their weighted total.
///
/// With `gated` set and gold regions available, steps whose region does not
/// match the gold region contribute [`GATED_FLOOR`] instead of their
/// probability. Without gating the region term is the plain geometric mean.
pub fn composite_reward(
    record: &RolloutRecord,
    doc: &Document,
    gold: &GoldReference,
    w: &RewardWeights,
    gated: bool,
) -> Result<RewardBreakdown, RewardError> {
    check_probs(&record.region_probs)?;
    let r_str = structure_reward(&record.raw);

    let Some(trace) = &record.trace else {
        let mut b = RewardBreakdown::from_components(answer_reward("", gold), qa_reward("", gold), 0.0, r_str, 0.0, w);
        b.reg_empty = true;
        return Ok(b);
    };

    let n = trace.region_steps();
    if !record.region_probs.is_empty() && record.region_probs.len() != n {
        return Err(RewardError::ProbCount { expected: n, got: record.region_probs.len() });
    }

    let r_ans = answer_reward(&trace.answer, gold);
    let r_qa = qa_reward(&trace.question_analysis, gold);
    let r_vsc = trace_vsc_score(trace, Some(doc));

    let probs: Vec<f64> = match (&gold.gold_regions, gated) {
        (Some(gold_regions), true) => trace
            .vsc
            .iter()
            .zip(&record.region_probs)
            .enumerate()
            .map(|(t, (step, &p))| match gold_regions.get(t) {
                Some(g) if region_matches(doc, &step.region, g) => p,
                _ => GATED_FLOOR,
            })
            .collect(),
        _ => record.region_probs.clone(),
    };
    let reg = region_reward(&probs)?;

    let mut b = RewardBreakdown::from_components(r_ans, r_qa, r_vsc, r_str, reg.r_tilde, w);
    b.reg_empty = reg.empty;
    Ok(b)
}
