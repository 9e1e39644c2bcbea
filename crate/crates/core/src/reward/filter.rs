use serde::Serialize;

use super::{best_answer_f1, structure_reward, GoldReference};
use crate::doc::Document;
use crate::vsc::{validate_schema, RolloutRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Output format checks not all passed.
    Structure,
    /// Well-formed JSON that is not a valid chain for the document.
    Schema,
    /// Answer token F1 below `tau`.
    LowF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Retain,
    Discard(DiscardReason),
}

impl Decision {
    pub fn is_retain(&self) -> bool {
        matches!(self, Decision::Retain)
    }
}

/// Keeps a rollout for supervised fine-tuning only if its format is fully
/// compliant, its chain validates against the document, and its answer
/// reaches token F1 `>= gold.tau` against some gold answer. The first failed
/// criterion is reported.
pub fn rejection_filter(record: &RolloutRecord, doc: &Document, gold: &GoldReference) -> Decision {
    if structure_reward(&record.raw) < 1.0 {
        return Decision::Discard(DiscardReason::Structure);
    }
    let Some(trace) = &record.trace else {
        return Decision::Discard(DiscardReason::Schema);
    };
    if !validate_schema(trace, Some(doc)).schema_ok {
        return Decision::Discard(DiscardReason::Schema);
    }
    if best_answer_f1(&trace.answer, gold) < gold.tau {
        return Decision::Discard(DiscardReason::LowF1);
    }
    Decision::Retain
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy_table_doc;
    use crate::reward::token_f1;
    use crate::vsc::{serialize_trace, ArgValue, Operator, Trace, VscStep};

    fn record(answer: &str) -> RolloutRecord {
        let t = Trace {
            question_analysis: "select revenue and sum".into(),
            vsc: vec![
                VscStep::new(Operator::Select, "table").arg("key", ArgValue::text("Revenue")),
                VscStep::new(Operator::Read, "table"),
                VscStep::new(Operator::Aggregate, "table").arg("fn", ArgValue::text("sum")),
            ],
            answer: answer.into(),
        };
        RolloutRecord::new(&serialize_trace(&t), vec![], "q", "toy_table")
    }

    #[test]
    fn exact_answer_retained() {
        let gold = GoldReference::new(vec!["315".into()]);
        assert_eq!(rejection_filter(&record("315"), &toy_table_doc(), &gold), Decision::Retain);
    }

    #[test]
    fn low_f1_discarded() {
        let gold = GoldReference::new(vec!["total 315".into()]);
        // One of two tokens each side: F1 = 0.5.
        assert_eq!(token_f1("revenue 315", "total 315"), 0.5);
        assert_eq!(
            rejection_filter(&record("revenue 315"), &toy_table_doc(), &gold),
            Decision::Discard(DiscardReason::LowF1)
        );
    }

    #[test]
    fn structure_and_schema_failures() {
        let gold = GoldReference::new(vec!["315".into()]);
        let doc = toy_table_doc();
        let bad = RolloutRecord::new("{oops", vec![], "q", "toy_table");
        assert_eq!(rejection_filter(&bad, &doc, &gold), Decision::Discard(DiscardReason::Structure));

        let unknown_op = r#"{"question_analysis":"","answer":"315","vsc":[{"op":"Join","region":"table","args":{}}]}"#;
        let rec = RolloutRecord::new(unknown_op, vec![], "q", "toy_table");
        assert_eq!(rejection_filter(&rec, &doc, &gold), Decision::Discard(DiscardReason::Schema));

        let figure = r#"{"question_analysis":"","answer":"315","vsc":[{"op":"Select","region":"figure","args":{}}]}"#;
        let rec = RolloutRecord::new(figure, vec![], "q", "toy_table");
        assert_eq!(rejection_filter(&rec, &doc, &gold), Decision::Discard(DiscardReason::Schema));
    }
}
