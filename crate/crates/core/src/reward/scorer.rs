//! Batch scoring against a fixed set of documents and gold references.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{composite_reward, rejection_filter, GoldReference, RewardBreakdown, RewardError, RewardWeights};
use crate::codes::Code;
use crate::doc::Document;
use crate::vsc::RolloutRecord;

/// One line of a gold JSON-lines file: the join key plus the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldRecord {
    pub doc_id: String,
    #[serde(default)]
    pub question: String,
    #[serde(flatten)]
    pub reference: GoldReference,
}

/// `(doc_id, question)`.
pub type GoldKey = (String, String);

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("no gold reference for document `{0}`, question `{1}`")]
    MissingGold(String, String),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("malformed rollout line: {0}")]
    BadRecord(String),
}

impl ScoreError {
    pub fn code(&self) -> &'static str {
        match self {
            ScoreError::UnknownDocument(_) => "E_UNKNOWN_DOC",
            ScoreError::MissingGold(..) => "E_MISSING_GOLD",
            ScoreError::Reward(e) => e.code().as_str(),
            ScoreError::BadRecord(_) => Code::Parse.as_str(),
        }
    }
}

/// Reads a gold JSON-lines file. Any malformed line is an error naming its
/// line number.
pub fn load_gold_file<R: BufRead>(reader: R) -> Result<HashMap<GoldKey, GoldReference>, String> {
    let mut out = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", n + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: GoldRecord = serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", n + 1))?;
        rec.reference.check().map_err(|e| format!("line {}: {e}", n + 1))?;
        out.insert((rec.doc_id, rec.question), rec.reference);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredRecord {
    pub doc_id: String,
    pub breakdown: RewardBreakdown,
    pub retain: bool,
}

/// Immutable scoring configuration; `score` has no side effects, so one
/// scorer can serve many threads.
#[derive(Debug, Clone)]
pub struct Scorer {
    docs: HashMap<String, Document>,
    gold: HashMap<GoldKey, GoldReference>,
    pub weights: RewardWeights,
    pub gated: bool,
    /// Overrides every gold reference's `tau` when set.
    pub tau: Option<f64>,
}

impl Scorer {
    pub fn new(
        docs: Vec<Document>,
        gold: HashMap<GoldKey, GoldReference>,
        weights: RewardWeights,
        gated: bool,
    ) -> Self {
        let docs = docs.into_iter().map(|d| (d.id.clone(), d)).collect();
        Scorer { docs, gold, weights, gated, tau: None }
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.docs.get(id)
    }

    fn lookup(&self, record: &RolloutRecord) -> Result<(&Document, GoldReference), ScoreError> {
        let doc = self.docs.get(&record.doc_id).ok_or_else(|| ScoreError::UnknownDocument(record.doc_id.clone()))?;
        let key = (record.doc_id.clone(), record.question.clone());
        let mut gold = self
            .gold
            .get(&key)
            .cloned()
            .ok_or_else(|| ScoreError::MissingGold(record.doc_id.clone(), record.question.clone()))?;
        if let Some(tau) = self.tau {
            gold.tau = tau;
        }
        Ok((doc, gold))
    }

    pub fn score(&self, record: &RolloutRecord) -> Result<ScoredRecord, ScoreError> {
        let (doc, gold) = self.lookup(record)?;
        let breakdown = composite_reward(record, doc, &gold, &self.weights, self.gated)?;
        let retain = rejection_filter(record, doc, &gold).is_retain();
        Ok(ScoredRecord { doc_id: record.doc_id.clone(), breakdown, retain })
    }

    pub fn filter(&self, record: &RolloutRecord) -> Result<super::Decision, ScoreError> {
        let (doc, gold) = self.lookup(record)?;
        Ok(rejection_filter(record, doc, &gold))
    }

    /// Scores one JSON line as the `score` command prints it.
    pub fn score_line(&self, line: &str) -> serde_json::Value {
        let result = RolloutRecord::from_json_line(line)
            .map_err(|e| (String::new(), ScoreError::BadRecord(e.to_string())))
            .and_then(|rec| self.score(&rec).map_err(|e| (rec.doc_id.clone(), e)));
        match result {
            Ok(s) => serde_json::to_value(&s).expect("scored record serializes"),
            Err((doc_id, e)) => serde_json::json!({
                "doc_id": doc_id,
                "error": e.code(),
                "message": e.to_string(),
            }),
        }
    }
}
