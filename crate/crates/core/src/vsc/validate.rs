use std::collections::{BTreeSet, HashSet};

use serde::Serialize;

use super::{Operator, Trace, Violation};
use crate::codes::Code;
use crate::doc::Document;
use crate::exec::resolve_selection;
use crate::vsc::{OpArgs, DEFAULT_MAX_STEPS};

/// `passed` out of `total` checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Tally {
    pub passed: usize,
    pub total: usize,
}

impl Tally {
    fn record(&mut self, ok: bool) {
        self.total += 1;
        if ok {
            self.passed += 1;
        }
    }

    /// `passed / total`; 1 for an empty tally.
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            1.0
        } else {
            self.passed as f64 / self.total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct CheckCounts {
    /// Steps whose arguments match their operator's schema.
    pub arg_schema: Tally,
    /// Steps whose ordering precondition holds.
    pub ordering: Tally,
    /// Region references that resolve (Select) or echo the live selection.
    pub region: Tally,
    /// Distinct canonical steps out of all steps.
    pub diversity: Tally,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub schema_ok: bool,
    pub violations: Vec<Violation>,
    pub checked_counts: CheckCounts,
    pub diversity: f64,
}

/// Runs the four check families over a parsed trace: argument schema,
/// operator ordering, region consistency and step diversity.
///
/// Ordering rules: the chain starts with Select; Filter, Compare and
/// Aggregate need a Read since the most recent Select. Region rules: a
/// Select selector must resolve against `doc` (when given); every other
/// step must name the live selection, either by the same selector string
/// or by a selector resolving to the same regions.
pub fn validate_schema(t: &Trace, doc: Option<&Document>) -> ValidationReport {
    let mut violations = Vec::new();
    let mut counts = CheckCounts::default();

    if t.vsc.is_empty() {
        violations.push(Violation::new(Code::EmptyChain, "$.vsc", "chain has no steps"));
    }
    if t.vsc.len() > DEFAULT_MAX_STEPS {
        violations.push(Violation::new(
            Code::ChainTooLong,
            "$.vsc",
            format!("chain has {} steps, limit is {DEFAULT_MAX_STEPS}", t.vsc.len()),
        ));
    }

    // Live selection: the selector string of the latest Select and, with a
    // document, the set of regions it resolved to.
    let mut live: Option<(String, Option<BTreeSet<usize>>)> = None;
    let mut read_since_select = false;

    for (i, step) in t.vsc.iter().enumerate() {
        let at = format!("$.vsc[{i}]");

        let typed = step.typed_args_at(&format!("{at}.args"));
        counts.arg_schema.record(typed.is_ok());
        let typed = match typed {
            Ok(a) => Some(a),
            Err(issues) => {
                violations.extend(issues);
                None
            }
        };

        let ordered = match step.op {
            Operator::Select => true,
            Operator::Read => live.is_some(),
            Operator::Filter | Operator::Compare | Operator::Aggregate => read_since_select,
        };
        if i == 0 && step.op != Operator::Select {
            violations.push(Violation::new(Code::FirstNotSelect, format!("{at}.op"), "chain must start with Select"));
        } else if !ordered {
            let msg = match step.op {
                Operator::Read => "Read before any Select".to_string(),
                op => format!("{op} needs a Read after the latest Select"),
            };
            violations.push(Violation::new(Code::Order, format!("{at}.op"), msg));
        }
        counts.ordering.record(ordered);

        let region_ok = match step.op {
            Operator::Select => {
                read_since_select = false;
                let key = match &typed {
                    Some(OpArgs::Select { key }) => key.clone(),
                    _ => None,
                };
                if step.region.is_empty() {
                    violations.push(Violation::new(
                        Code::EmptyRegion,
                        format!("{at}.region"),
                        "Select needs a region selector",
                    ));
                    live = Some((String::new(), None));
                    false
                } else if let Some(doc) = doc {
                    match resolve_selection(doc, &step.region, key.as_deref()) {
                        Ok(items) => {
                            let regions = items.iter().map(|it| it.region).collect();
                            live = Some((step.region.clone(), Some(regions)));
                            true
                        }
                        Err(e) => {
                            violations.push(Violation::new(e.code, format!("{at}.region"), e.message));
                            live = Some((step.region.clone(), None));
                            false
                        }
                    }
                } else {
                    live = Some((step.region.clone(), None));
                    true
                }
            }
            _ => {
                if step.op == Operator::Read {
                    read_since_select = true;
                }
                let echoes = match &live {
                    None => false,
                    Some((sel, regions)) => {
                        step.region == *sel
                            || match (doc, regions) {
                                (Some(doc), Some(regions)) if !step.region.is_empty() => {
                                    resolve_selection(doc, &step.region, None)
                                        .map(|items| {
                                            items.iter().map(|it| it.region).collect::<BTreeSet<_>>() == *regions
                                        })
                                        .unwrap_or(false)
                                }
                                _ => false,
                            }
                    }
                };
                if !echoes {
                    violations.push(Violation::new(
                        Code::RegionUnresolved,
                        format!("{at}.region"),
                        format!("`{}` does not refer to the current selection", step.region),
                    ));
                }
                echoes
            }
        };
        counts.region.record(region_ok);
    }

    let distinct: HashSet<String> = t.vsc.iter().map(|s| s.canonical()).collect();
    counts.diversity = Tally { passed: distinct.len(), total: t.vsc.len() };
    let diversity = if t.vsc.is_empty() { 0.0 } else { counts.diversity.fraction() };

    ValidationReport { schema_ok: violations.is_empty(), violations, checked_counts: counts, diversity }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::toy_table_doc;
    use crate::vsc::{ArgValue, VscStep};

    fn trace(steps: Vec<VscStep>) -> Trace {
        Trace { question_analysis: String::new(), vsc: steps, answer: String::new() }
    }

    fn codes(r: &ValidationReport) -> Vec<Code> {
        r.violations.iter().map(|v| v.code).collect()
    }

    #[test]
    fn select_read_sum_on_toy_table() {
        let doc = toy_table_doc();
        let t = trace(vec![
            VscStep::new(Operator::Select, "table"),
            VscStep::new(Operator::Read, "table"),
            VscStep::new(Operator::Aggregate, "table").arg("fn", ArgValue::text("sum")),
        ]);
        let r = validate_schema(&t, Some(&doc));
        assert!(r.schema_ok, "{:?}", r.violations);
        assert_eq!(r.diversity, 1.0);
        assert_eq!(r.checked_counts.region, Tally { passed: 3, total: 3 });
    }

    #[test]
    fn unresolved_figure() {
        let doc = toy_table_doc();
        let t = trace(vec![VscStep::new(Operator::Select, "figure")]);
        let r = validate_schema(&t, Some(&doc));
        assert!(!r.schema_ok);
        assert_eq!(codes(&r), [Code::RegionUnresolved]);
        // Without a document selectors are not resolved.
        assert!(validate_schema(&t, None).schema_ok);
    }

    #[test]
    fn repeated_reads_lower_diversity() {
        let mut steps = vec![VscStep::new(Operator::Select, "table")];
        steps.extend(std::iter::repeat_n(VscStep::new(Operator::Read, "table"), 4));
        let r = validate_schema(&trace(steps), None);
        assert!(r.schema_ok);
        assert_eq!(r.diversity, 2.0 / 5.0);
    }

    #[test]
    fn ordering_rules() {
        let t = trace(vec![
            VscStep::new(Operator::Select, "table"),
            VscStep::new(Operator::Compare, "table").arg("metric", ArgValue::text("max")),
            VscStep::new(Operator::Read, "table"),
            VscStep::new(Operator::Compare, "table").arg("metric", ArgValue::text("max")),
        ]);
        let r = validate_schema(&t, None);
        assert_eq!(codes(&r), [Code::Order]);
        assert_eq!(r.checked_counts.ordering, Tally { passed: 3, total: 4 });

        let t = trace(vec![VscStep::new(Operator::Read, "table")]);
        let r = validate_schema(&t, None);
        assert_eq!(codes(&r), [Code::FirstNotSelect, Code::RegionUnresolved]);
    }

    #[test]
    fn region_echo_by_id_or_label() {
        let doc = toy_table_doc();
        let t = trace(vec![
            VscStep::new(Operator::Select, "table").arg("key", ArgValue::text("Revenue")),
            VscStep::new(Operator::Read, "t1"),
            VscStep::new(Operator::Aggregate, "figure").arg("fn", ArgValue::text("sum")),
        ]);
        let r = validate_schema(&t, Some(&doc));
        assert_eq!(codes(&r), [Code::RegionUnresolved]);
        assert_eq!(r.violations[0].path, "$.vsc[2].region");
        assert_eq!(r.checked_counts.region, Tally { passed: 2, total: 3 });
    }

    #[test]
    fn key_hint_that_matches_nothing() {
        let doc = toy_table_doc();
        let t = trace(vec![VscStep::new(Operator::Select, "table").arg("key", ArgValue::text("Dividends"))]);
        assert_eq!(codes(&validate_schema(&t, Some(&doc))), [Code::EmptySelection]);
    }

    #[test]
    fn pure_function() {
        let doc = toy_table_doc();
        let t = trace(vec![
            VscStep::new(Operator::Select, "nope"),
            VscStep::new(Operator::Filter, "x").arg("cmp", ArgValue::text("lt")),
        ]);
        assert_eq!(validate_schema(&t, Some(&doc)), validate_schema(&t, Some(&doc)));
    }
}
