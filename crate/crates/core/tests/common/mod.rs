//! Shared generators for the integration tests.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub const CORPUS_SEED: u64 = 2024;

/// A question the corpus draws from, with a chain that is valid on its
/// document.
pub struct CorpusQuestion {
    pub doc_id: &'static str,
    pub question: &'static str,
    pub gold: &'static str,
    pub steps: Value,
    pub analysis: &'static str,
}

pub fn corpus_questions() -> Vec<CorpusQuestion> {
    vec![
        CorpusQuestion {
            doc_id: "toy_table",
            question: "What is the total revenue?",
            gold: "315",
            steps: json!([
                {"op": "Select", "region": "t1", "args": {"key": "Revenue"}},
                {"op": "Read", "region": "t1", "args": {}},
                {"op": "Aggregate", "region": "t1", "args": {"fn": "sum"}}
            ]),
            analysis: "Select the revenue row, read it and sum the cells.",
        },
        CorpusQuestion {
            doc_id: "toy_table",
            question: "What was revenue in 2023?",
            gold: "120 thousand US dollars per year",
            steps: json!([
                {"op": "Select", "region": "table", "args": {"key": "Revenue"}},
                {"op": "Read", "region": "table", "args": {}},
                {"op": "Filter", "region": "t1", "args": {"field": "col_key", "cmp": "eq", "value": "2023"}}
            ]),
            analysis: "Select the revenue row and keep the 2023 column.",
        },
        CorpusQuestion {
            doc_id: "invoice",
            question: "Who is the invoice addressed to?",
            gold: "Alpha Corp",
            steps: json!([
                {"op": "Select", "region": "kv_to", "args": {}},
                {"op": "Read", "region": "kv_to", "args": {}}
            ]),
            analysis: "Select the Invoice To field and read it.",
        },
        CorpusQuestion {
            doc_id: "invoice",
            question: "What is the total due?",
            gold: "1,250.00 dollars due on receipt",
            steps: json!([
                {"op": "Select", "region": "key_value", "args": {"key": "Total"}},
                {"op": "Read", "region": "kv_total", "args": {}}
            ]),
            analysis: "Select the Total Due field and read it.",
        },
    ]
}

/// How a corpus record was corrupted; the oracle decides from this label
/// and an independently computed F1.
#[derive(Debug, Clone, PartialEq)]
pub enum Corruption {
    None,
    /// Answer replaced; F1 graded by dropping and adding tokens.
    Answer,
    Format(&'static str),
    Schema(&'static str),
}

pub struct CorpusRecord {
    pub line: String,
    pub corruption: Corruption,
    pub question: usize,
    pub answer: Option<String>,
}

/// `doc_id`/`question`/`answers` lines for the corpus questions.
pub fn corpus_gold_lines() -> Vec<String> {
    corpus_questions()
        .iter()
        .map(|q| json!({"doc_id": q.doc_id, "question": q.question, "answers": [q.gold]}).to_string())
        .collect()
}

fn oracle_tokens(s: &str) -> Vec<String> {
    let lowered: String = s.to_lowercase().chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    lowered.split_whitespace().map(str::to_string).collect()
}

/// Token F1 as a reduced fraction `(2·common, |pred| + |gold|)`.
pub fn oracle_f1_fraction(pred: &str, gold: &str) -> (usize, usize) {
    let p = oracle_tokens(pred);
    let mut g = oracle_tokens(gold);
    if p.is_empty() && g.is_empty() {
        return (1, 1);
    }
    let mut common = 0;
    for t in &p {
        if let Some(i) = g.iter().position(|x| x == t) {
            g.swap_remove(i);
            common += 1;
        }
    }
    (2 * common, p.len() + oracle_tokens(gold).len())
}

/// Retention rule with exact rational arithmetic: `F1 >= 4/5`.
pub fn oracle_retain(r: &CorpusRecord, questions: &[CorpusQuestion]) -> bool {
    match (&r.corruption, &r.answer) {
        (Corruption::None | Corruption::Answer, Some(a)) => {
            let (num, den) = oracle_f1_fraction(a, questions[r.question].gold);
            5 * num >= 4 * den
        }
        _ => false,
    }
}

const JUNK: [&str; 8] = ["approximately", "total", "the", "value", "is", "reported", "maybe", "units"];

fn graded_answer(gold: &str, rng: &mut ChaCha8Rng) -> String {
    let mut toks: Vec<String> = gold.split_whitespace().map(str::to_string).collect();
    let drop = rng.gen_range(0..=toks.len().saturating_sub(1).min(3));
    for _ in 0..drop {
        let i = rng.gen_range(0..toks.len());
        toks.remove(i);
    }
    let add = rng.gen_range(0..=3);
    for _ in 0..add {
        let i = rng.gen_range(0..=toks.len());
        toks.insert(i, JUNK.choose(rng).unwrap().to_string());
    }
    if rng.gen_bool(0.15) {
        toks = vec!["unrelated".into(), "answer".into()];
    }
    toks.join(" ")
}

fn trace_value(q: &CorpusQuestion, answer: &str) -> Value {
    json!({"question_analysis": q.analysis, "vsc": q.steps.clone(), "answer": answer})
}

/// 200 rollout lines with injected corruptions, deterministic under
/// [`CORPUS_SEED`].
pub fn corrupted_corpus() -> Vec<CorpusRecord> {
    let qs = corpus_questions();
    let mut rng = ChaCha8Rng::seed_from_u64(CORPUS_SEED);
    let mut out = Vec::with_capacity(200);
    for i in 0..200 {
        let qi = i % qs.len();
        let q = &qs[qi];
        let n_steps = q.steps.as_array().unwrap().len();
        let kind = rng.gen_range(0..10);
        let (mut raw, corruption, answer) = match kind {
            0..=1 => (trace_value(q, q.gold).to_string(), Corruption::None, Some(q.gold.to_string())),
            2..=5 => {
                let a = graded_answer(q.gold, &mut rng);
                (trace_value(q, &a).to_string(), Corruption::Answer, Some(a))
            }
            6..=7 => {
                let mut v = trace_value(q, q.gold);
                let what =
                    *["drop_answer", "vsc_string", "step_no_args", "analysis_number", "truncate", "prose", "empty_vsc"]
                        .choose(&mut rng)
                        .unwrap();
                match what {
                    "drop_answer" => {
                        v.as_object_mut().unwrap().remove("answer");
                    }
                    "vsc_string" => v["vsc"] = json!("Select t1 then Read"),
                    "step_no_args" => {
                        let k = rng.gen_range(0..n_steps);
                        v["vsc"][k].as_object_mut().unwrap().remove("args");
                    }
                    "analysis_number" => v["question_analysis"] = json!(42),
                    "empty_vsc" => v["vsc"] = json!([]),
                    _ => {}
                }
                let mut raw = v.to_string();
                if what == "truncate" {
                    let cut = rng.gen_range(1..raw.len() - 1);
                    raw.truncate(cut);
                } else if what == "prose" {
                    raw = format!("The answer is {}.", q.gold);
                }
                (raw, Corruption::Format(what), Some(q.gold.to_string()))
            }
            _ => {
                let mut v = trace_value(q, q.gold);
                let what =
                    *["first_read", "unknown_region", "aggregate_first", "bad_fn", "unknown_op", "region_mismatch"]
                        .choose(&mut rng)
                        .unwrap();
                match what {
                    "first_read" => v["vsc"][0]["op"] = json!("Read"),
                    "unknown_region" => v["vsc"][0]["region"] = json!("figure_9"),
                    "aggregate_first" => {
                        v["vsc"][1] =
                            json!({"op": "Aggregate", "region": v["vsc"][0]["region"].clone(), "args": {"fn": "sum"}})
                    }
                    "bad_fn" => {
                        let region = v["vsc"][0]["region"].clone();
                        v["vsc"]
                            .as_array_mut()
                            .unwrap()
                            .push(json!({"op": "Aggregate", "region": region, "args": {"fn": "avg"}}));
                    }
                    "unknown_op" => v["vsc"][1]["op"] = json!("Join"),
                    _ => v["vsc"][1]["region"] = json!("p1"),
                }
                (v.to_string(), Corruption::Schema(what), Some(q.gold.to_string()))
            }
        };
        if rng.gen_bool(0.1) && matches!(corruption, Corruption::Schema(_)) {
            raw = raw.replace(q.gold, "wrong");
        }
        let probs: Vec<f64> = (0..n_steps).map(|_| rng.gen_range(0.3..=1.0)).collect();
        let line = json!({"doc_id": q.doc_id, "question": q.question, "raw": raw, "region_probs": probs}).to_string();
        out.push(CorpusRecord { line, corruption, question: qi, answer });
    }
    out
}
