use serde::Serialize;
use serde_json::{Map, Value};

use super::{ArgMap, ArgValue, Operator, Trace, Violation, VscStep};
use crate::codes::Code;

pub const DEFAULT_MAX_STEPS: usize = 16;

#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub max_steps: usize,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions { max_steps: DEFAULT_MAX_STEPS }
    }
}

/// Parses a raw model output into a [`Trace`].
///
/// Never panics. On failure every violation found is returned, not just the
/// first one.
pub fn parse_trace(raw: &str) -> Result<Trace, Vec<Violation>> {
    parse_trace_with(raw, ParseOptions::default())
}

pub fn parse_trace_with(raw: &str, opts: ParseOptions) -> Result<Trace, Vec<Violation>> {
    let value: Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(e) => return Err(vec![Violation::new(Code::Parse, "$", e.to_string())]),
    };
    let Value::Object(obj) = value else {
        return Err(vec![Violation::new(Code::Parse, "$", "top level is not a JSON object")]);
    };

    let mut issues = Vec::new();
    let question_analysis = string_field(&obj, "question_analysis", "$", &mut issues);
    let answer = string_field(&obj, "answer", "$", &mut issues);

    let mut steps = Vec::new();
    match obj.get("vsc") {
        None => issues.push(Violation::new(Code::MissingField, "$.vsc", "missing field `vsc`")),
        Some(Value::Array(items)) => {
            if items.is_empty() {
                issues.push(Violation::new(Code::EmptyChain, "$.vsc", "chain has no steps"));
            }
            if items.len() > opts.max_steps {
                issues.push(Violation::new(
                    Code::ChainTooLong,
                    "$.vsc",
                    format!("chain has {} steps, limit is {}", items.len(), opts.max_steps),
                ));
            }
            for (i, item) in items.iter().enumerate() {
                if let Some(step) = parse_step(item, &format!("$.vsc[{i}]"), &mut issues) {
                    steps.push((i, step));
                }
            }
        }
        Some(_) => issues.push(Violation::new(Code::FieldType, "$.vsc", "`vsc` must be a list")),
    }

    if let Some((0, first)) = steps.first() {
        if first.op != Operator::Select {
            issues.push(Violation::new(
                Code::FirstNotSelect,
                "$.vsc[0].op",
                format!("chain must start with Select, found {}", first.op),
            ));
        }
    }
    for (i, s) in &steps {
        if s.op == Operator::Select && s.region.is_empty() {
            issues.push(Violation::new(
                Code::EmptyRegion,
                format!("$.vsc[{i}].region"),
                "Select needs a region selector",
            ));
        }
    }

    if !issues.is_empty() {
        return Err(issues);
    }
    Ok(Trace {
        question_analysis: question_analysis.unwrap_or_default(),
        vsc: steps.into_iter().map(|(_, s)| s).collect(),
        answer: answer.unwrap_or_default(),
    })
}

fn string_field(obj: &Map<String, Value>, key: &str, at: &str, issues: &mut Vec<Violation>) -> Option<String> {
    match obj.get(key) {
        Some(Value::String(s)) => Some(s.clone()),
        Some(_) => {
            issues.push(Violation::new(Code::FieldType, format!("{at}.{key}"), format!("`{key}` must be a string")));
            None
        }
        None => {
            issues.push(Violation::new(Code::MissingField, format!("{at}.{key}"), format!("missing field `{key}`")));
            None
        }
    }
}

fn parse_step(item: &Value, at: &str, issues: &mut Vec<Violation>) -> Option<VscStep> {
    let Value::Object(obj) = item else {
        issues.push(Violation::new(Code::FieldType, at, "step must be an object"));
        return None;
    };
    let before = issues.len();
    let op = string_field(obj, "op", at, issues).and_then(|s| match s.parse::<Operator>() {
        Ok(op) => Some(op),
        Err(()) => {
            issues.push(Violation::new(Code::UnknownOp, format!("{at}.op"), format!("unknown operator `{s}`")));
            None
        }
    });
    let region = string_field(obj, "region", at, issues);
    let mut args = ArgMap::new();
    match obj.get("args") {
        Some(Value::Object(m)) => {
            for (k, v) in m {
                match v {
                    Value::String(s) => {
                        args.insert(k.clone(), ArgValue::Text(s.clone()));
                    }
                    Value::Number(n) => {
                        args.insert(k.clone(), ArgValue::Number(n.clone()));
                    }
                    _ => issues.push(Violation::new(
                        Code::FieldType,
                        format!("{at}.args.{k}"),
                        "argument values must be strings or numbers",
                    )),
                }
            }
        }
        Some(_) => issues.push(Violation::new(Code::FieldType, format!("{at}.args"), "`args` must be an object")),
        None => issues.push(Violation::new(Code::MissingField, format!("{at}.args"), "missing field `args`")),
    }
    if issues.len() > before {
        return None;
    }
    Some(VscStep { op: op?, region: region?, args })
}

// Field order here is the canonical (sorted) key order.
#[derive(Serialize)]
pub(crate) struct StepWire<'a> {
    args: &'a ArgMap,
    op: Operator,
    region: &'a str,
}

impl<'a> From<&'a VscStep> for StepWire<'a> {
    fn from(s: &'a VscStep) -> Self {
        StepWire { args: &s.args, op: s.op, region: &s.region }
    }
}

#[derive(Serialize)]
struct TraceWire<'a> {
    answer: &'a str,
    question_analysis: &'a str,
    vsc: Vec<StepWire<'a>>,
}

/// Canonical compact JSON: every object's keys sorted, no whitespace.
pub fn serialize_trace(t: &Trace) -> String {
    let wire = TraceWire {
        answer: &t.answer,
        question_analysis: &t.question_analysis,
        vsc: t.vsc.iter().map(StepWire::from).collect(),
    };
    serde_json::to_string(&wire).expect("trace serialization is infallible")
}
