//! Per-operator argument schema.
//!
//! | op        | keys                                                     |
//! |-----------|----------------------------------------------------------|
//! | Select    | `key`? (string, non-empty)                               |
//! | Read      | none                                                     |
//! | Filter    | `field` (string), `cmp` (contains/eq/neq/lt/le/gt/ge), `value` |
//! | Compare   | `metric` (eq/max/min), `ref` (required for eq)           |
//! | Aggregate | `fn` (sum/concat), `sep`? (string)                       |
//!
//! Ordered comparisons (`lt`, `le`, `gt`, `ge`) need a numeric `value`.

use rust_decimal::Decimal;

use super::{ArgMap, ArgValue, Operator, VscStep};
use crate::codes::Code;
use crate::exec::parse_numeric;
use crate::vsc::Violation;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Contains,
    Eq,
    Neq,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub const ALL: [Cmp; 7] = [Cmp::Contains, Cmp::Eq, Cmp::Neq, Cmp::Lt, Cmp::Le, Cmp::Gt, Cmp::Ge];

    pub fn as_str(self) -> &'static str {
        match self {
            Cmp::Contains => "contains",
            Cmp::Eq => "eq",
            Cmp::Neq => "neq",
            Cmp::Lt => "lt",
            Cmp::Le => "le",
            Cmp::Gt => "gt",
            Cmp::Ge => "ge",
        }
    }

    pub fn is_ordered(self) -> bool {
        matches!(self, Cmp::Lt | Cmp::Le | Cmp::Gt | Cmp::Ge)
    }

    fn parse(s: &str) -> Option<Cmp> {
        // `==`/`!=` spellings are accepted alongside the names.
        match s {
            "==" => Some(Cmp::Eq),
            "!=" => Some(Cmp::Neq),
            "<" => Some(Cmp::Lt),
            "<=" => Some(Cmp::Le),
            ">" => Some(Cmp::Gt),
            ">=" => Some(Cmp::Ge),
            _ => Cmp::ALL.iter().copied().find(|c| c.as_str() == s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predicate {
    pub field: String,
    pub cmp: Cmp,
    pub literal: ArgValue,
}

impl Predicate {
    pub fn new(field: &str, cmp: Cmp, literal: ArgValue) -> Self {
        Predicate { field: field.to_string(), cmp, literal }
    }

    pub fn numeric_literal(&self) -> Option<Decimal> {
        literal_number(&self.literal)
    }
}

pub(crate) fn literal_number(v: &ArgValue) -> Option<Decimal> {
    parse_numeric(&v.as_text())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Eq,
    Max,
    Min,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Eq => "eq",
            Metric::Max => "max",
            Metric::Min => "min",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Sum,
    Concat,
}

impl AggFn {
    pub fn as_str(self) -> &'static str {
        match self {
            AggFn::Sum => "sum",
            AggFn::Concat => "concat",
        }
    }
}

/// Arguments of one step after schema checking.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpArgs {
    Select { key: Option<String> },
    Read,
    Filter(Predicate),
    Compare { metric: Metric, reference: Option<ArgValue> },
    Aggregate { func: AggFn, sep: Option<String> },
}

struct Checker<'a> {
    args: &'a ArgMap,
    path: String,
    issues: Vec<Violation>,
}

impl<'a> Checker<'a> {
    fn bad(&mut self, key: &str, msg: String) {
        self.issues.push(Violation::new(Code::ArgSchema, format!("{}.{key}", self.path), msg));
    }

    fn only(&mut self, allowed: &[&str]) {
        for k in self.args.keys() {
            if !allowed.contains(&k.as_str()) {
                self.bad(k, format!("unexpected argument `{k}`"));
            }
        }
    }

    fn string(&mut self, key: &str, required: bool) -> Option<String> {
        match self.args.get(key) {
            Some(ArgValue::Text(s)) if !s.is_empty() => Some(s.clone()),
            Some(ArgValue::Text(_)) => {
                self.bad(key, format!("`{key}` must be non-empty"));
                None
            }
            Some(ArgValue::Number(_)) => {
                self.bad(key, format!("`{key}` must be a string"));
                None
            }
            None => {
                if required {
                    self.bad(key, format!("missing required argument `{key}`"));
                }
                None
            }
        }
    }

    /// Like [`Checker::string`] but empty strings are allowed.
    fn any_string(&mut self, key: &str) -> Option<String> {
        match self.args.get(key) {
            Some(ArgValue::Text(s)) => Some(s.clone()),
            Some(ArgValue::Number(_)) => {
                self.bad(key, format!("`{key}` must be a string"));
                None
            }
            None => None,
        }
    }
}

impl VscStep {
    /// Checks this step's arguments against its operator's schema.
    /// `path` prefixes violation paths (e.g. `vsc[2].args`).
    pub fn typed_args_at(&self, path: &str) -> Result<OpArgs, Vec<Violation>> {
        let mut c = Checker { args: &self.args, path: path.to_string(), issues: Vec::new() };
        let parsed = match self.op {
            Operator::Select => {
                c.only(&["key"]);
                let key = c.string("key", false);
                Some(OpArgs::Select { key })
            }
            Operator::Read => {
                c.only(&[]);
                Some(OpArgs::Read)
            }
            Operator::Filter => {
                c.only(&["field", "cmp", "value"]);
                let field = c.string("field", true);
                let cmp = c.string("cmp", true).and_then(|s| {
                    let parsed = Cmp::parse(&s);
                    if parsed.is_none() {
                        c.bad("cmp", format!("unknown comparison `{s}`"));
                    }
                    parsed
                });
                let literal = c.args.get("value").cloned();
                if literal.is_none() {
                    c.bad("value", "missing required argument `value`".into());
                }
                match (field, cmp, literal) {
                    (Some(field), Some(cmp), Some(literal)) => {
                        if cmp.is_ordered() && literal_number(&literal).is_none() {
                            c.bad("value", format!("`{}` needs a numeric value", cmp.as_str()));
                            None
                        } else {
                            Some(OpArgs::Filter(Predicate { field, cmp, literal }))
                        }
                    }
                    _ => None,
                }
            }
            Operator::Compare => {
                c.only(&["metric", "ref"]);
                let metric = c.string("metric", true).and_then(|s| {
                    let m = match s.as_str() {
                        "eq" => Some(Metric::Eq),
                        "max" => Some(Metric::Max),
                        "min" => Some(Metric::Min),
                        _ => None,
                    };
                    if m.is_none() {
                        c.bad("metric", format!("unknown metric `{s}`"));
                    }
                    m
                });
                let reference = c.args.get("ref").cloned();
                match metric {
                    Some(Metric::Eq) if reference.is_none() => {
                        c.bad("ref", "`eq` needs a `ref` argument".into());
                        None
                    }
                    Some(metric) => Some(OpArgs::Compare { metric, reference }),
                    None => None,
                }
            }
            Operator::Aggregate => {
                c.only(&["fn", "sep"]);
                let func = c.string("fn", true).and_then(|s| {
                    let f = match s.as_str() {
                        "sum" => Some(AggFn::Sum),
                        "concat" => Some(AggFn::Concat),
                        _ => None,
                    };
                    if f.is_none() {
                        c.bad("fn", format!("unknown aggregate `{s}`"));
                    }
                    f
                });
                let sep = c.any_string("sep");
                func.map(|func| OpArgs::Aggregate { func, sep })
            }
        };
        match parsed {
            Some(a) if c.issues.is_empty() => Ok(a),
            _ => Err(c.issues),
        }
    }

    pub fn typed_args(&self) -> Result<OpArgs, Vec<Violation>> {
        self.typed_args_at("args")
    }
}

impl OpArgs {
    /// Inverse of [`VscStep::typed_args`]: the canonical argument map.
    pub fn to_arg_map(&self) -> ArgMap {
        let mut m = ArgMap::new();
        let mut put = |k: &str, v: ArgValue| {
            m.insert(k.to_string(), v);
        };
        match self {
            OpArgs::Select { key } => {
                if let Some(k) = key {
                    put("key", ArgValue::text(k));
                }
            }
            OpArgs::Read => {}
            OpArgs::Filter(p) => {
                put("field", ArgValue::text(&p.field));
                put("cmp", ArgValue::text(p.cmp.as_str()));
                put("value", p.literal.clone());
            }
            OpArgs::Compare { metric, reference } => {
                put("metric", ArgValue::text(metric.as_str()));
                if let Some(r) = reference {
                    put("ref", r.clone());
                }
            }
            OpArgs::Aggregate { func, sep } => {
                put("fn", ArgValue::text(func.as_str()));
                if let Some(s) = sep {
                    put("sep", ArgValue::text(s));
                }
            }
        }
        m
    }
}
