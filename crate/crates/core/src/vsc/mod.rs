//! The chain language: `⟨op, region, args⟩` steps wrapped in a
//! `⟨question_analysis, vsc, answer⟩` trace.
//!
//! Wire format (one JSON object):
//!
//! ```json
//! {"question_analysis": "...", "vsc": [{"op": "Select", "region": "table", "args": {"key": "Revenue"}}], "answer": "..."}
//! ```

mod args;
mod parse;
mod validate;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codes::Code;

pub use args::{AggFn, Cmp, Metric, OpArgs, Predicate};
pub use parse::{parse_trace, parse_trace_with, serialize_trace, ParseOptions, DEFAULT_MAX_STEPS};
pub use validate::{validate_schema, CheckCounts, Tally, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Operator {
    Select,
    Read,
    Filter,
    Compare,
    Aggregate,
}

impl Operator {
    pub const ALL: [Operator; 5] =
        [Operator::Select, Operator::Read, Operator::Filter, Operator::Compare, Operator::Aggregate];

    pub fn as_str(self) -> &'static str {
        match self {
            Operator::Select => "Select",
            Operator::Read => "Read",
            Operator::Filter => "Filter",
            Operator::Compare => "Compare",
            Operator::Aggregate => "Aggregate",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Operator {
    type Err = ();

    /// Case-insensitive.
    fn from_str(s: &str) -> Result<Self, ()> {
        Operator::ALL.iter().copied().find(|op| op.as_str().eq_ignore_ascii_case(s)).ok_or(())
    }
}

impl Serialize for Operator {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for Operator {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(|_| serde::de::Error::custom(format!("unknown operator `{s}`")))
    }
}

/// A scalar argument: either a string or a JSON number (kept verbatim).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArgValue {
    Number(serde_json::Number),
    Text(String),
}

impl ArgValue {
    pub fn text(s: &str) -> Self {
        ArgValue::Text(s.to_string())
    }

    /// The value as it would appear in a document: numbers in their JSON
    /// spelling, strings as-is.
    pub fn as_text(&self) -> String {
        match self {
            ArgValue::Number(n) => n.to_string(),
            ArgValue::Text(s) => s.clone(),
        }
    }
}

pub type ArgMap = BTreeMap<String, ArgValue>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VscStep {
    pub op: Operator,
    /// A region id or a region-type label.
    pub region: String,
    pub args: ArgMap,
}

impl VscStep {
    pub fn new(op: Operator, region: &str) -> Self {
        VscStep { op, region: region.to_string(), args: ArgMap::new() }
    }

    pub fn arg(mut self, key: &str, value: ArgValue) -> Self {
        self.args.insert(key.to_string(), value);
        self
    }

    /// Canonical single-step JSON, used for the diversity statistic.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&parse::StepWire::from(self)).expect("step serialization is infallible")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub question_analysis: String,
    pub vsc: Vec<VscStep>,
    pub answer: String,
}

impl Trace {
    /// Steps that carry a region field. The wire format makes `region`
    /// mandatory, so this is every step.
    pub fn region_steps(&self) -> usize {
        self.vsc.len()
    }
}

/// A located problem with a trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: Code,
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(code: Code, path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { code, path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} at {}: {}", self.code, self.path, self.message)
    }
}

/// One model output plus the per-step region-token probabilities reported by
/// the host model.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub raw: String,
    pub trace: Option<Trace>,
    pub region_probs: Vec<f64>,
    pub question: String,
    pub doc_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RolloutLine {
    doc_id: String,
    #[serde(default)]
    question: String,
    raw: String,
    #[serde(default)]
    region_probs: Vec<f64>,
}

impl RolloutRecord {
    /// Builds a record, parsing `raw` with default options.
    pub fn new(raw: &str, region_probs: Vec<f64>, question: &str, doc_id: &str) -> Self {
        RolloutRecord {
            raw: raw.to_string(),
            trace: parse_trace(raw).ok(),
            region_probs,
            question: question.to_string(),
            doc_id: doc_id.to_string(),
        }
    }

    /// Parses one line of a rollout JSON-lines file.
    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        let l: RolloutLine = serde_json::from_str(line)?;
        Ok(RolloutRecord::new(&l.raw, l.region_probs, &l.question, &l.doc_id))
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&RolloutLine {
            doc_id: self.doc_id.clone(),
            question: self.question.clone(),
            raw: self.raw.clone(),
            region_probs: self.region_probs.clone(),
        })
        .expect("record serialization is infallible")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn operator_names() {
        assert_eq!("select".parse::<Operator>(), Ok(Operator::Select));
        assert_eq!("Aggregate".parse::<Operator>(), Ok(Operator::Aggregate));
        assert!("Join".parse::<Operator>().is_err());
    }

    #[test]
    fn rollout_line_parses_raw() {
        let trace = r#"{"question_analysis":"q","vsc":[{"op":"Select","region":"table","args":{}}],"answer":"a"}"#;
        let line = serde_json::json!({"doc_id": "d", "question": "q?", "raw": trace, "region_probs": [0.5]});
        let rec = RolloutRecord::from_json_line(&line.to_string()).unwrap();
        assert!(rec.trace.is_some());
        assert_eq!(rec.region_probs, vec![0.5]);
        let again = RolloutRecord::from_json_line(&rec.to_json_line()).unwrap();
        assert_eq!(rec, again);

        let bad = serde_json::json!({"doc_id": "d", "raw": "oops"});
        let rec = RolloutRecord::from_json_line(&bad.to_string()).unwrap();
        assert!(rec.trace.is_none());
    }
}
