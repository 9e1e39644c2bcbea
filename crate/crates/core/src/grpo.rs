//! Group-relative policy optimization over small enumerated program sets.
//!
//! Each question gets a softmax policy over candidate chains. An iteration
//! samples a group of candidates per question, scores them with the
//! composite reward, normalizes the rewards within the group and takes one
//! policy-gradient step. There is no reference-policy KL and no clipping.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codes::Code;
use crate::doc::{Document, RegionType};
use crate::exec::run_chain;
use crate::numeric::{exact_sum, format_g17};
use crate::reward::{composite_reward, region_matches, GoldReference, RewardError, RewardWeights};
use crate::vsc::{parse_trace, serialize_trace, validate_schema, ArgValue, Operator, RolloutRecord, Trace, VscStep};

/// Simulated region-token confidence for steps on the gold region.
pub const P_GOLD_REGION: f64 = 0.95;
/// Simulated confidence for every other step.
pub const P_OTHER_REGION: f64 = 0.4;
pub const DEFAULT_MAX_CANDIDATES: usize = 6;
pub const DEFAULT_MAX_LEN: usize = 3;
/// Below this population standard deviation a group counts as degenerate.
pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("E_GROUP_TOO_SMALL: group of {0}, need at least 2")]
    GroupTooSmall(usize),
    #[error("{0}")]
    Reward(#[from] RewardError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("fixture: {0}")]
    Fixture(String),
}

impl GrpoError {
    pub fn code(&self) -> Option<Code> {
        match self {
            GrpoError::GroupTooSmall(_) => Some(Code::GroupTooSmall),
            GrpoError::Reward(e) => Some(e.code()),
            _ => None,
        }
    }
}

/// `(r_i - mean) / std_pop`, or all zeros when the rewards are (nearly)
/// constant.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::GroupTooSmall(rewards.len()));
    }
    let n = rewards.len() as f64;
    let mean = exact_sum(rewards.iter().copied()) / n;
    let var = exact_sum(rewards.iter().map(|r| (r - mean) * (r - mean))) / n;
    let std = var.sqrt();
    if std < STD_FLOOR {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// `g` i.i.d. draws from `softmax(logits)` using `rng`.
pub fn sample_with(logits: &[f64], g: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let dist = WeightedIndex::new(softmax(logits)).expect("softmax weights are positive and finite");
    (0..g).map(|_| dist.sample(rng)).collect()
}

/// [`sample_with`] from a fresh generator seeded with `seed`.
pub fn sample_rollouts(logits: &[f64], g: usize, seed: u64) -> Result<Vec<usize>, GrpoError> {
    if g < 2 {
        return Err(GrpoError::GroupTooSmall(g));
    }
    Ok(sample_with(logits, g, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// `logits + lr · Σ_k A_k (onehot(s_k) - softmax(logits))`, accumulated
/// over the group and applied once.
pub fn policy_update(logits: &[f64], sampled: &[usize], advantages: &[f64], lr: f64) -> Result<Vec<f64>, GrpoError> {
    if sampled.len() != advantages.len() {
        return Err(GrpoError::Config(format!("{} samples but {} advantages", sampled.len(), advantages.len())));
    }
    if let Some(&k) = sampled.iter().find(|&&k| k >= logits.len()) {
        return Err(GrpoError::Config(format!("sample index {k} out of range for {} candidates", logits.len())));
    }
    let pi = softmax(logits);
    let mut delta = vec![0.0; logits.len()];
    for (&k, &a) in sampled.iter().zip(advantages) {
        for (j, d) in delta.iter_mut().enumerate() {
            *d += a * (f64::from(u8::from(j == k)) - pi[j]);
        }
    }
    Ok(logits.iter().zip(&delta).map(|(l, d)| l + lr * d).collect())
}

/// One question of a demo setting.
#[derive(Debug, Clone)]
pub struct Question {
    pub id: String,
    pub doc_id: String,
    pub question: String,
    pub gold: GoldReference,
    /// The reference chain; always among the candidates.
    pub program: Trace,
}

#[derive(Debug, Deserialize)]
struct QuestionLine {
    id: String,
    doc_id: String,
    question: String,
    program: serde_json::Value,
    #[serde(flatten)]
    gold: GoldReference,
}

#[derive(Debug, Clone)]
pub struct GrpoFixture {
    pub docs: Vec<Document>,
    pub questions: Vec<Question>,
}

impl GrpoFixture {
    pub fn document(&self, id: &str) -> Option<&Document> {
        self.docs.iter().find(|d| d.id == id)
    }

    /// Parses a questions file (one JSON object per line) against `docs`.
    pub fn from_parts(docs: Vec<Document>, questions_jsonl: &str) -> Result<Self, GrpoError> {
        let mut questions = Vec::new();
        for (i, line) in questions_jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let q: QuestionLine =
                serde_json::from_str(line).map_err(|e| GrpoError::Fixture(format!("questions line {}: {e}", i + 1)))?;
            let wrapped = serde_json::json!({ "question_analysis": "", "vsc": q.program, "answer": "" });
            let mut program = parse_trace(&wrapped.to_string()).map_err(|v| {
                GrpoError::Fixture(format!(
                    "questions line {}: {}",
                    i + 1,
                    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
                ))
            })?;
            if !docs.iter().any(|d| d.id == q.doc_id) {
                return Err(GrpoError::Fixture(format!("questions line {}: unknown document `{}`", i + 1, q.doc_id)));
            }
            program.question_analysis = describe(&program.vsc);
            questions.push(Question { id: q.id, doc_id: q.doc_id, question: q.question, gold: q.gold, program });
        }
        if questions.is_empty() {
            return Err(GrpoError::Fixture("no questions".into()));
        }
        Ok(GrpoFixture { docs, questions })
    }

    /// Loads `dir/docs/*.json` and `dir/questions.jsonl`.
    pub fn load(dir: &Path) -> Result<Self, GrpoError> {
        let io = |p: &Path, e: std::io::Error| GrpoError::Fixture(format!("{}: {e}", p.display()));
        let docs_dir = dir.join("docs");
        let mut paths: Vec<_> = std::fs::read_dir(&docs_dir)
            .map_err(|e| io(&docs_dir, e))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut docs = Vec::new();
        for p in paths {
            let bytes = std::fs::read(&p).map_err(|e| io(&p, e))?;
            docs.push(Document::from_json(&bytes).map_err(|e| GrpoError::Fixture(format!("{}: {e}", p.display())))?);
        }
        let qpath = dir.join("questions.jsonl");
        let text = std::fs::read_to_string(&qpath).map_err(|e| io(&qpath, e))?;
        GrpoFixture::from_parts(docs, &text)
    }
}

/// The built-in three-question setting over the toy table and the invoice.
pub fn toy_fixture() -> GrpoFixture {
    let docs = vec![crate::fixtures::toy_table_doc(), crate::fixtures::invoice_doc()];
    GrpoFixture::from_parts(docs, include_str!("../fixtures/toy/questions.jsonl")).expect("toy GRPO fixture is valid")
}

/// Plain-language analysis of a chain, e.g. "Select t1 with key Revenue,
/// Read t1, Aggregate t1 with fn sum."
pub fn describe(steps: &[VscStep]) -> String {
    let parts: Vec<String> = steps
        .iter()
        .map(|s| {
            let mut p = format!("{} {}", s.op, s.region);
            for (k, v) in &s.args {
                let _ = write!(p, " with {k} {}", v.as_text());
            }
            p
        })
        .collect();
    format!("{}.", parts.join(", "))
}

fn select_steps(doc: &Document) -> Vec<VscStep> {
    let mut out = Vec::new();
    for r in &doc.regions {
        out.push(VscStep::new(Operator::Select, &r.id));
        if r.region_type == RegionType::Table {
            let keys: BTreeSet<&str> =
                r.cells().iter().flat_map(|c| c.row_key.as_deref().into_iter().chain(c.col_key.as_deref())).collect();
            for k in keys {
                out.push(VscStep::new(Operator::Select, &r.id).arg("key", ArgValue::text(k)));
            }
        }
    }
    out
}

fn follow_steps(region: &str) -> Vec<VscStep> {
    vec![
        VscStep::new(Operator::Read, region),
        VscStep::new(Operator::Compare, region).arg("metric", ArgValue::text("max")),
        VscStep::new(Operator::Compare, region).arg("metric", ArgValue::text("min")),
        VscStep::new(Operator::Aggregate, region).arg("fn", ArgValue::text("sum")),
        VscStep::new(Operator::Aggregate, region).arg("fn", ArgValue::text("concat")),
    ]
}

/// Every chain of at most `max_len` steps over the document's grammar that
/// validates and executes to an answer. The answer field holds the executed
/// result and the analysis is [`describe`]d from the steps.
pub fn enumerate_programs(doc: &Document, max_len: usize) -> Vec<Trace> {
    let selects = select_steps(doc);
    let mut frontier: Vec<Vec<VscStep>> = selects.iter().map(|s| vec![s.clone()]).collect();
    let mut all = Vec::new();
    for len in 1..=max_len {
        let mut next = Vec::new();
        for chain in frontier {
            if len < max_len {
                let live = chain.iter().rev().find(|s| s.op == Operator::Select).expect("chains start with Select");
                for s in selects.iter().cloned().chain(follow_steps(&live.region)) {
                    let mut c = chain.clone();
                    c.push(s);
                    next.push(c);
                }
            }
            all.push(chain);
        }
        frontier = next;
    }
    all.into_iter()
        .filter_map(|vsc| {
            let mut t = Trace { question_analysis: describe(&vsc), vsc, answer: String::new() };
            if !validate_schema(&t, Some(doc)).schema_ok {
                return None;
            }
            let r = run_chain(doc, &t);
            r.is_ok().then(|| {
                t.answer = r.answer;
                t
            })
        })
        .collect()
}

fn hash_key(t: &Trace) -> [u8; 32] {
    let steps: Vec<String> = t.vsc.iter().map(VscStep::canonical).collect();
    Sha256::digest(steps.join("\n").as_bytes()).into()
}

#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub question_id: String,
    pub doc_id: String,
    pub programs: Vec<Trace>,
}

/// The question's own program first, then the other enumerated programs in
/// SHA-256 order of their canonical steps, `cap` in total.
pub fn candidate_set(doc: &Document, q: &Question, max_len: usize, cap: usize) -> Result<CandidateSet, GrpoError> {
    let mut gold = q.program.clone();
    let run = run_chain(doc, &gold);
    if !run.is_ok() || !validate_schema(&gold, Some(doc)).schema_ok {
        return Err(GrpoError::Fixture(format!("reference program of `{}` does not validate and execute", q.id)));
    }
    gold.answer = run.answer;
    let mut others: Vec<Trace> = enumerate_programs(doc, max_len).into_iter().filter(|t| t.vsc != gold.vsc).collect();
    others.sort_by_cached_key(hash_key);
    let mut programs = vec![gold];
    programs.extend(others.into_iter().take(cap.saturating_sub(1)));
    Ok(CandidateSet { question_id: q.id.clone(), doc_id: q.doc_id.clone(), programs })
}

/// Rollout record for a candidate with simulated region confidences.
pub fn simulated_record(doc: &Document, q: &Question, program: &Trace) -> RolloutRecord {
    let probs = program
        .vsc
        .iter()
        .enumerate()
        .map(|(t, s)| match q.gold.gold_regions.as_ref().and_then(|g| g.get(t)) {
            Some(g) if region_matches(doc, &s.region, g) => P_GOLD_REGION,
            _ => P_OTHER_REGION,
        })
        .collect();
    RolloutRecord::new(&serialize_trace(program), probs, &q.question, &q.doc_id)
}

#[derive(Debug, Clone, Copy)]
pub struct GrpoConfig {
    pub group: usize,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: RewardWeights,
    pub gated: bool,
    pub max_len: usize,
    pub max_candidates: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group: 8,
            iters: 300,
            lr: 0.5,
            seed: 1,
            weights: RewardWeights::default(),
            gated: false,
            max_len: DEFAULT_MAX_LEN,
            max_candidates: DEFAULT_MAX_CANDIDATES,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterLog {
    pub iter: usize,
    /// Mean reward over every rollout sampled this iteration.
    pub mean_reward: f64,
    /// Per question, after the update: probability mass on the
    /// reward-maximal candidates.
    pub p_best: Vec<f64>,
    /// Per question, the group's advantages.
    pub advantages: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoLog {
    pub question_ids: Vec<String>,
    /// Per question, the composite reward of every candidate.
    pub rewards: Vec<Vec<f64>>,
    /// Per question, indices of the reward-maximal candidates.
    pub best: Vec<Vec<usize>>,
    pub rows: Vec<IterLog>,
    pub final_logits: Vec<Vec<f64>>,
}

impl GrpoLog {
    /// `iter,mean_reward,p_best_<id>...` with 17-significant-digit floats.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,mean_reward");
        for id in &self.question_ids {
            let _ = write!(s, ",p_best_{id}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.iter, format_g17(r.mean_reward));
            for p in &r.p_best {
                let _ = write!(s, ",{}", format_g17(*p));
            }
            s.push('\n');
        }
        s
    }
}

fn best_set(rewards: &[f64]) -> Vec<usize> {
    let max = rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (0..rewards.len()).filter(|&i| rewards[i] == max).collect()
}

/// Composite reward of every candidate of every question.
pub fn candidate_rewards(
    fx: &GrpoFixture,
    sets: &[CandidateSet],
    cfg: &GrpoConfig,
) -> Result<Vec<Vec<f64>>, GrpoError> {
    fx.questions
        .iter()
        .zip(sets)
        .map(|(q, set)| {
            let doc = fx.document(&q.doc_id).expect("checked at load");
            set.programs
                .iter()
                .map(|p| {
                    Ok(composite_reward(&simulated_record(doc, q, p), doc, &q.gold, &cfg.weights, cfg.gated)?.total)
                })
                .collect()
        })
        .collect()
}

pub fn build_candidate_sets(fx: &GrpoFixture, cfg: &GrpoConfig) -> Result<Vec<CandidateSet>, GrpoError> {
    fx.questions
        .iter()
        .map(|q| candidate_set(fx.document(&q.doc_id).expect("checked at load"), q, cfg.max_len, cfg.max_candidates))
        .collect()
}

/// Sample, score, normalize, update; once per question per iteration, all
/// draws from one generator seeded with `cfg.seed`.
pub fn run_grpo_demo(fx: &GrpoFixture, cfg: &GrpoConfig) -> Result<GrpoLog, GrpoError> {
    if cfg.group < 2 {
        return Err(GrpoError::GroupTooSmall(cfg.group));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(GrpoError::Config(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    if cfg.max_candidates == 0 {
        return Err(GrpoError::Config("at least one candidate per question is needed".into()));
    }
    let sets = build_candidate_sets(fx, cfg)?;
    let rewards = candidate_rewards(fx, &sets, cfg)?;
    let best: Vec<Vec<usize>> = rewards.iter().map(|r| best_set(r)).collect();
    let mut logits: Vec<Vec<f64>> = sets.iter().map(|s| vec![0.0; s.programs.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::with_capacity(cfg.iters);

    for iter in 1..=cfg.iters {
        let mut sampled_rewards = Vec::new();
        let mut advantages = Vec::with_capacity(sets.len());
        for (qi, l) in logits.iter_mut().enumerate() {
            let idx = sample_with(l, cfg.group, &mut rng);
            let r: Vec<f64> = idx.iter().map(|&k| rewards[qi][k]).collect();
            let a = group_advantages(&r)?;
            *l = policy_update(l, &idx, &a, cfg.lr)?;
            sampled_rewards.extend(r);
            advantages.push(a);
        }
        let p_best = logits
            .iter()
            .zip(&best)
            .map(|(l, b)| {
                let pi = softmax(l);
                b.iter().map(|&k| pi[k]).sum()
            })
            .collect();
        rows.push(IterLog {
            iter,
            mean_reward: exact_sum(sampled_rewards.iter().copied()) / sampled_rewards.len() as f64,
            p_best,
            advantages,
        });
    }

    Ok(GrpoLog {
        question_ids: fx.questions.iter().map(|q| q.id.clone()).collect(),
        rewards,
        best,
        rows,
        final_logits: logits,
    })
}
