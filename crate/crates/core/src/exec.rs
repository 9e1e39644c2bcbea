//! Deterministic interpreter for chains over a [`Document`].
//!
//! State threads through the five operators:
//! Select replaces the selection (and clears the working set), Read turns
//! the selection into bindings, Filter and Compare narrow the bindings, and
//! Aggregate collapses them into one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rust_decimal::Decimal;
use serde::{Serialize, Serializer};

use crate::codes::Code;
use crate::doc::{Document, RegionType};
use crate::vsc::{AggFn, ArgValue, Cmp, Metric, OpArgs, Operator, Predicate, Trace};

pub const DEFAULT_CONCAT_SEP: &str = ", ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecError {
    pub code: Code,
    pub message: String,
}

impl ExecError {
    fn new(code: Code, message: impl Into<String>) -> Self {
        ExecError { code, message: message.into() }
    }
}

impl fmt::Display for ExecError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for ExecError {}

/// Parses document text as a decimal after stripping currency symbols,
/// thousands separators, `%` and surrounding whitespace.
///
/// Accepts only plain decimals (`-12`, `3.50`); anything else is `None`.
pub fn parse_numeric(text: &str) -> Option<Decimal> {
    let cleaned: String = text.trim().chars().filter(|c| !matches!(c, '$' | '€' | '£' | '¥' | ',' | '%')).collect();
    let cleaned = cleaned.trim();
    let body = cleaned.strip_prefix(['-', '+']).unwrap_or(cleaned);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
    if !digits(int) || !frac.is_none_or(digits) {
        return None;
    }
    Decimal::from_str(cleaned.strip_prefix('+').unwrap_or(cleaned)).ok()
}

/// A field value inside a binding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Text(String),
    Number(Decimal),
}

impl Value {
    pub fn as_text(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Number(d) => d.to_string(),
        }
    }

    pub fn as_number(&self) -> Option<Decimal> {
        match self {
            Value::Text(s) => parse_numeric(s),
            Value::Number(d) => Some(*d),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.as_text())
    }
}

/// Named fields read from one region or cell: `text`, `region`, and when
/// available `key`, `row_key`, `col_key`, `numeric`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
#[serde(transparent)]
pub struct Binding {
    pub fields: BTreeMap<String, Value>,
}

impl Binding {
    pub fn get(&self, field: &str) -> Option<&Value> {
        self.fields.get(field)
    }

    pub fn text(&self) -> &str {
        match self.fields.get("text") {
            Some(Value::Text(s)) => s,
            _ => "",
        }
    }

    pub fn numeric(&self) -> Option<Decimal> {
        match self.fields.get("numeric") {
            Some(Value::Number(d)) => Some(*d),
            _ => None,
        }
    }

    fn with_text(text: &str) -> Self {
        let mut fields = BTreeMap::new();
        fields.insert("text".to_string(), Value::Text(text.to_string()));
        if let Some(n) = parse_numeric(text) {
            fields.insert("numeric".to_string(), Value::Number(n));
        }
        Binding { fields }
    }

    fn put(&mut self, field: &str, value: Option<&String>) {
        if let Some(v) = value {
            self.fields.insert(field.to_string(), Value::Text(v.clone()));
        }
    }
}

/// A selected region, or one cell of a table region (indices into the
/// document).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SelectionItem {
    pub region: usize,
    pub cell: Option<usize>,
}

impl SelectionItem {
    pub fn label(&self, doc: &Document) -> String {
        let r = &doc.regions[self.region];
        match self.cell {
            None => r.id.clone(),
            Some(c) => {
                let cell = &r.cells()[c];
                format!("{}[{},{}]", r.id, cell.row, cell.col)
            }
        }
    }
}

fn contains_ci(haystack: &str, needle: &str) -> bool {
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

/// Resolves a selector to selection items.
///
/// The selector is first tried as a region id, then as a region-type label.
/// A label matching several regions needs a key hint to disambiguate. The
/// key hint keeps regions whose `key` contains it and, inside tables, cells
/// whose `row_key` or `col_key` contains it (case-insensitive).
pub fn resolve_selection(
    doc: &Document,
    selector: &str,
    key_hint: Option<&str>,
) -> Result<Vec<SelectionItem>, ExecError> {
    let candidates: Vec<usize> = if let Some(i) = doc.regions.iter().position(|r| r.id == selector) {
        vec![i]
    } else if let Ok(t) = selector.parse::<RegionType>() {
        let matches: Vec<usize> =
            doc.regions.iter().enumerate().filter(|(_, r)| r.region_type == t).map(|(i, _)| i).collect();
        if matches.is_empty() {
            return Err(ExecError::new(Code::RegionUnresolved, format!("document has no `{selector}` region")));
        }
        if matches.len() > 1 && key_hint.is_none() {
            return Err(ExecError::new(
                Code::RegionUnresolved,
                format!("`{selector}` matches {} regions; add a key to disambiguate", matches.len()),
            ));
        }
        matches
    } else {
        return Err(ExecError::new(
            Code::RegionUnresolved,
            format!("`{selector}` is neither a region id nor a region type"),
        ));
    };

    let Some(hint) = key_hint else {
        return Ok(candidates.into_iter().map(|region| SelectionItem { region, cell: None }).collect());
    };

    let mut items = Vec::new();
    for ri in candidates {
        let region = &doc.regions[ri];
        if region.key.as_deref().is_some_and(|k| contains_ci(k, hint)) {
            items.push(SelectionItem { region: ri, cell: None });
            continue;
        }
        for (ci, cell) in region.cells().iter().enumerate() {
            let hit = [&cell.row_key, &cell.col_key].iter().any(|k| k.as_deref().is_some_and(|k| contains_ci(k, hint)));
            if hit {
                items.push(SelectionItem { region: ri, cell: Some(ci) });
            }
        }
    }
    if items.is_empty() {
        return Err(ExecError::new(
            Code::EmptySelection,
            format!("no `{selector}` candidate has a key containing `{hint}`"),
        ));
    }
    Ok(items)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepSnapshot {
    pub step: usize,
    pub op: Operator,
    pub selection: Vec<String>,
    pub working: Vec<Binding>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExecState {
    pub selection: Vec<SelectionItem>,
    pub working: Vec<Binding>,
    pub log: Vec<StepSnapshot>,
}

pub fn exec_select(
    doc: &Document,
    mut state: ExecState,
    selector: &str,
    key_hint: Option<&str>,
) -> Result<ExecState, ExecError> {
    state.selection = resolve_selection(doc, selector, key_hint)?;
    state.working.clear();
    Ok(state)
}

/// Tables are read cell by cell in row-major order.
pub fn exec_read(doc: &Document, mut state: ExecState) -> Result<ExecState, ExecError> {
    if state.selection.is_empty() {
        return Err(ExecError::new(Code::NoSelection, "Read with nothing selected"));
    }
    let mut working = Vec::new();
    for item in &state.selection {
        let region = &doc.regions[item.region];
        let cell_binding = |ci: usize| {
            let cell = &region.cells()[ci];
            let mut b = Binding::with_text(&cell.text);
            b.put("region", Some(&region.id));
            b.put("key", region.key.as_ref());
            b.put("row_key", cell.row_key.as_ref());
            b.put("col_key", cell.col_key.as_ref());
            b
        };
        match item.cell {
            Some(ci) => working.push(cell_binding(ci)),
            None if !region.cells().is_empty() => working.extend((0..region.cells().len()).map(cell_binding)),
            None => {
                let mut b = Binding::with_text(&region.text);
                b.put("region", Some(&region.id));
                b.put("key", region.key.as_ref());
                working.push(b);
            }
        }
    }
    state.working = working;
    Ok(state)
}

fn values_equal(a: &Value, b: &ArgValue) -> bool {
    let lit = b.as_text();
    match (a.as_number(), parse_numeric(&lit)) {
        (Some(x), Some(y)) => x == y,
        _ => a.as_text() == lit,
    }
}

pub fn exec_filter(mut state: ExecState, p: &Predicate) -> Result<ExecState, ExecError> {
    if state.working.is_empty() {
        return Err(ExecError::new(Code::NoWorking, "Filter with no working values"));
    }
    if state.working.iter().all(|b| b.get(&p.field).is_none()) {
        return Err(ExecError::new(Code::FieldMissing, format!("no binding has field `{}`", p.field)));
    }
    let bound =
        if p.cmp.is_ordered() {
            Some(p.numeric_literal().ok_or_else(|| {
                ExecError::new(Code::NotNumeric, format!("`{}` needs a numeric literal", p.cmp.as_str()))
            })?)
        } else {
            None
        };

    let mut kept = Vec::with_capacity(state.working.len());
    for b in state.working {
        let Some(v) = b.get(&p.field) else { continue };
        let keep = match p.cmp {
            Cmp::Contains => contains_ci(&v.as_text(), &p.literal.as_text()),
            Cmp::Eq => values_equal(v, &p.literal),
            Cmp::Neq => !values_equal(v, &p.literal),
            ordered => {
                let x = v.as_number().ok_or_else(|| {
                    ExecError::new(
                        Code::NotNumeric,
                        format!("field `{}` value `{}` is not numeric", p.field, v.as_text()),
                    )
                })?;
                let y = bound.expect("ordered comparisons carry a bound");
                match ordered {
                    Cmp::Lt => x < y,
                    Cmp::Le => x <= y,
                    Cmp::Gt => x > y,
                    _ => x >= y,
                }
            }
        };
        if keep {
            kept.push(b);
        }
    }
    state.working = kept;
    Ok(state)
}

/// `eq` keeps bindings whose text equals `reference`; `max`/`min` keep every
/// binding attaining the extremum.
pub fn exec_compare(
    mut state: ExecState,
    metric: Metric,
    reference: Option<&ArgValue>,
) -> Result<ExecState, ExecError> {
    if state.working.is_empty() {
        return Err(ExecError::new(Code::NoWorking, "Compare with no working values"));
    }
    match metric {
        Metric::Eq => {
            let r = reference.ok_or_else(|| ExecError::new(Code::MissingReference, "eq needs a reference value"))?;
            state.working.retain(|b| values_equal(&Value::Text(b.text().to_string()), r));
        }
        Metric::Max | Metric::Min => {
            let nums: Vec<Decimal> = state.working.iter().filter_map(|b| b.numeric()).collect();
            let best = if metric == Metric::Max { nums.iter().max() } else { nums.iter().min() };
            let best = *best.ok_or_else(|| ExecError::new(Code::NotNumeric, "no numeric values to compare"))?;
            state.working.retain(|b| b.numeric() == Some(best));
        }
    }
    Ok(state)
}

pub fn exec_aggregate(mut state: ExecState, func: AggFn, sep: Option<&str>) -> Result<ExecState, ExecError> {
    if state.working.is_empty() {
        return Err(ExecError::new(Code::NoWorking, "Aggregate with no working values"));
    }
    let out = match func {
        AggFn::Sum => {
            let mut total = Decimal::ZERO;
            for b in &state.working {
                let n = b.numeric().ok_or_else(|| {
                    ExecError::new(Code::NotNumeric, format!("cannot sum non-numeric `{}`", b.text()))
                })?;
                total = total.checked_add(n).ok_or_else(|| ExecError::new(Code::Overflow, "sum overflows"))?;
            }
            let total = total.normalize();
            let mut b = Binding::default();
            b.fields.insert("text".into(), Value::Text(total.to_string()));
            b.fields.insert("numeric".into(), Value::Number(total));
            b
        }
        AggFn::Concat => {
            let joined =
                state.working.iter().map(|b| b.text()).collect::<Vec<_>>().join(sep.unwrap_or(DEFAULT_CONCAT_SEP));
            let mut b = Binding::default();
            b.fields.insert("text".into(), Value::Text(joined));
            b
        }
    };
    state.working = vec![out];
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ExecStatus {
    Ok,
    /// `step` equal to the chain length means every step ran but the final
    /// working set did not hold exactly one non-empty value.
    Failed {
        step: usize,
        code: Code,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecResult {
    pub answer: String,
    pub final_state: ExecState,
    pub status: ExecStatus,
}

impl ExecResult {
    pub fn is_ok(&self) -> bool {
        self.status == ExecStatus::Ok
    }

    /// `{"answer", "status", "log"}` as emitted by the `exec` command.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "answer": self.answer,
            "status": self.status,
            "log": self.final_state.log,
        })
    }
}

fn exec_step(
    doc: &Document,
    state: ExecState,
    op: Operator,
    region: &str,
    args: &OpArgs,
) -> Result<ExecState, ExecError> {
    match (op, args) {
        (Operator::Select, OpArgs::Select { key }) => exec_select(doc, state, region, key.as_deref()),
        (Operator::Read, OpArgs::Read) => exec_read(doc, state),
        (Operator::Filter, OpArgs::Filter(p)) => exec_filter(state, p),
        (Operator::Compare, OpArgs::Compare { metric, reference }) => exec_compare(state, *metric, reference.as_ref()),
        (Operator::Aggregate, OpArgs::Aggregate { func, sep }) => exec_aggregate(state, *func, sep.as_deref()),
        _ => unreachable!("typed args always match their operator"),
    }
}

/// Runs every step in order. Failures are reported in the result, with the
/// log covering the steps that completed.
pub fn run_chain(doc: &Document, t: &Trace) -> ExecResult {
    let mut state = ExecState::default();
    for (i, step) in t.vsc.iter().enumerate() {
        let outcome = step
            .typed_args()
            .map_err(|v| {
                ExecError::new(Code::ArgSchema, v.iter().map(|x| x.message.as_str()).collect::<Vec<_>>().join("; "))
            })
            .and_then(|args| exec_step(doc, state.clone(), step.op, &step.region, &args));
        match outcome {
            Ok(mut next) => {
                next.log.push(StepSnapshot {
                    step: i,
                    op: step.op,
                    selection: next.selection.iter().map(|s| s.label(doc)).collect(),
                    working: next.working.clone(),
                });
                state = next;
            }
            Err(e) => {
                return ExecResult {
                    answer: String::new(),
                    final_state: state,
                    status: ExecStatus::Failed { step: i, code: e.code, message: e.message },
                };
            }
        }
    }
    let failed = |message: String, state: ExecState| ExecResult {
        answer: String::new(),
        final_state: state,
        status: ExecStatus::Failed { step: t.vsc.len(), code: Code::NoAnswer, message },
    };
    match state.working.as_slice() {
        [only] if !only.text().is_empty() => {
            let answer = only.text().to_string();
            ExecResult { answer, final_state: state, status: ExecStatus::Ok }
        }
        [_] => failed("final value is empty".into(), state),
        many => failed(format!("chain ends with {} values, expected exactly one", many.len()), state),
    }
}
