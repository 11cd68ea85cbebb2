//! Branch predicates and parameter expressions.
//!
//! The grammar is deliberately small: comparisons of a status, metric or
//! binding reference against a literal, combined with and/or/not. Evaluation
//! is total. A comparison against something missing, or against a value of
//! an incomparable type, is simply false.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::{ParamValue, Work};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

/// What a comparison reads from the terminated Work.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRef {
    Status,
    Metric(String),
    Binding(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase", deny_unknown_fields)]
pub enum PredicateExpr {
    Literal {
        value: bool,
    },
    Compare {
        cmp: CmpOp,
        left: ValueRef,
        right: ParamValue,
    },
    And {
        args: Vec<PredicateExpr>,
    },
    Or {
        args: Vec<PredicateExpr>,
    },
    Not {
        arg: Box<PredicateExpr>,
    },
}

impl PredicateExpr {
    pub fn always() -> Self {
        PredicateExpr::Literal { value: true }
    }

    pub fn never() -> Self {
        PredicateExpr::Literal { value: false }
    }

    pub fn status_is(status: &str) -> Self {
        PredicateExpr::Compare {
            cmp: CmpOp::Eq,
            left: ValueRef::Status,
            right: ParamValue::Str(status.to_string()),
        }
    }

    pub fn metric(name: &str, cmp: CmpOp, value: impl Into<ParamValue>) -> Self {
        PredicateExpr::Compare {
            cmp,
            left: ValueRef::Metric(name.to_string()),
            right: value.into(),
        }
    }

    pub fn binding(name: &str, cmp: CmpOp, value: impl Into<ParamValue>) -> Self {
        PredicateExpr::Compare {
            cmp,
            left: ValueRef::Binding(name.to_string()),
            right: value.into(),
        }
    }

    pub fn and(args: Vec<PredicateExpr>) -> Self {
        PredicateExpr::And { args }
    }

    pub fn or(args: Vec<PredicateExpr>) -> Self {
        PredicateExpr::Or { args }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn not(arg: PredicateExpr) -> Self {
        PredicateExpr::Not { arg: Box::new(arg) }
    }

    pub fn eval(&self, work: &Work) -> bool {
        match self {
            PredicateExpr::Literal { value } => *value,
            PredicateExpr::Compare { cmp, left, right } => match resolve(left, work) {
                Some(lhs) => compare(*cmp, &lhs, right),
                None => false,
            },
            PredicateExpr::And { args } => args.iter().all(|a| a.eval(work)),
            PredicateExpr::Or { args } => args.iter().any(|a| a.eval(work)),
            PredicateExpr::Not { arg } => !arg.eval(work),
        }
    }

    /// Every reference used anywhere in the expression.
    pub fn refs(&self) -> Vec<&ValueRef> {
        let mut out = Vec::new();
        self.collect_refs(&mut out);
        out
    }

    fn collect_refs<'a>(&'a self, out: &mut Vec<&'a ValueRef>) {
        match self {
            PredicateExpr::Literal { .. } => {}
            PredicateExpr::Compare { left, .. } => out.push(left),
            PredicateExpr::And { args } | PredicateExpr::Or { args } => {
                args.iter().for_each(|a| a.collect_refs(out))
            }
            PredicateExpr::Not { arg } => arg.collect_refs(out),
        }
    }

    /// Literals appearing on the right-hand side of comparisons.
    pub(crate) fn literals(&self) -> Vec<&ParamValue> {
        match self {
            PredicateExpr::Literal { .. } => Vec::new(),
            PredicateExpr::Compare { right, .. } => vec![right],
            PredicateExpr::And { args } | PredicateExpr::Or { args } => {
                args.iter().flat_map(|a| a.literals()).collect()
            }
            PredicateExpr::Not { arg } => arg.literals(),
        }
    }
}

fn resolve(r: &ValueRef, work: &Work) -> Option<ParamValue> {
    match r {
        ValueRef::Status => Some(ParamValue::Str(work.status.as_str().to_string())),
        ValueRef::Metric(m) => work.output_metrics.get(m).map(|v| ParamValue::Float(*v)),
        ValueRef::Binding(b) => work.bindings.get(b).cloned(),
    }
}

fn order(a: &ParamValue, b: &ParamValue) -> Option<Ordering> {
    match (a, b) {
        (ParamValue::Int(x), ParamValue::Int(y)) => Some(x.cmp(y)),
        (ParamValue::Str(x), ParamValue::Str(y)) => Some(x.cmp(y)),
        (ParamValue::Bool(x), ParamValue::Bool(y)) => Some(x.cmp(y)),
        _ => match (a.as_f64(), b.as_f64()) {
            (Some(x), Some(y)) => x.partial_cmp(&y),
            _ => None,
        },
    }
}

fn compare(op: CmpOp, a: &ParamValue, b: &ParamValue) -> bool {
    let Some(ord) = order(a, b) else {
        return false;
    };
    let boolean = matches!(a, ParamValue::Bool(_));
    match op {
        CmpOp::Eq => ord == Ordering::Equal,
        CmpOp::Ne => ord != Ordering::Equal,
        _ if boolean => false,
        CmpOp::Lt => ord == Ordering::Less,
        CmpOp::Le => ord != Ordering::Greater,
        CmpOp::Gt => ord == Ordering::Greater,
        CmpOp::Ge => ord != Ordering::Less,
    }
}

/// Computes a destination binding from the terminated Work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamExpr {
    Literal(ParamValue),
    Binding(String),
    Metric(String),
    Add(Box<ParamExpr>, Box<ParamExpr>),
}

impl ParamExpr {
    pub fn add(a: ParamExpr, b: ParamExpr) -> Self {
        ParamExpr::Add(Box::new(a), Box::new(b))
    }

    pub(crate) fn binding_refs(&self) -> Vec<&str> {
        match self {
            ParamExpr::Binding(b) => vec![b.as_str()],
            ParamExpr::Add(a, b) => {
                let mut v = a.binding_refs();
                v.extend(b.binding_refs());
                v
            }
            _ => Vec::new(),
        }
    }
}

/// Evaluates `expr` against `work`. `None` means a referenced binding or
/// metric is missing, or `add` was applied to non-numbers.
pub fn eval_param_expr(expr: &ParamExpr, work: &Work) -> Option<ParamValue> {
    match expr {
        ParamExpr::Literal(v) => Some(v.clone()),
        ParamExpr::Binding(b) => work.bindings.get(b).cloned(),
        ParamExpr::Metric(m) => work.output_metrics.get(m).map(|v| ParamValue::Float(*v)),
        ParamExpr::Add(a, b) => {
            let (a, b) = (eval_param_expr(a, work)?, eval_param_expr(b, work)?);
            match (&a, &b) {
                (ParamValue::Int(x), ParamValue::Int(y)) => x.checked_add(*y).map(ParamValue::Int),
                _ => Some(ParamValue::Float(a.as_f64()? + b.as_f64()?)),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::WorkStatus;
    use std::collections::BTreeMap;

    fn work(status: WorkStatus, metrics: &[(&str, f64)]) -> Work {
        Work {
            work_id: "w".into(),
            template_name: "t".into(),
            bindings: BTreeMap::from([("n".to_string(), ParamValue::Int(3))]),
            status,
            output_metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            generation: 0,
        }
    }

    #[test]
    fn status_equality() {
        let w = work(WorkStatus::Finished, &[]);
        assert!(PredicateExpr::status_is("Finished").eval(&w));
        assert!(!PredicateExpr::status_is("Failed").eval(&w));
    }

    #[test]
    fn metric_threshold_fires() {
        let w = work(WorkStatus::Finished, &[("loss", 0.05)]);
        assert!(PredicateExpr::metric("loss", CmpOp::Lt, 0.1).eval(&w));
        assert!(!PredicateExpr::metric("loss", CmpOp::Gt, 0.1).eval(&w));
    }

    #[test]
    fn missing_metric_is_false_for_every_operator() {
        let w = work(WorkStatus::Finished, &[]);
        for op in [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Le, CmpOp::Gt, CmpOp::Ge] {
            assert!(!PredicateExpr::metric("loss", op, 0.1).eval(&w));
        }
        // negation of a false comparison is true; that is the caller's choice
        assert!(PredicateExpr::not(PredicateExpr::metric("loss", CmpOp::Lt, 0.1)).eval(&w));
    }

    #[test]
    fn mixed_numeric_and_type_mismatch() {
        let w = work(WorkStatus::Finished, &[("k", 3.0)]);
        assert!(PredicateExpr::metric("k", CmpOp::Eq, 3i64).eval(&w));
        assert!(PredicateExpr::binding("n", CmpOp::Ge, 2.5).eval(&w));
        assert!(!PredicateExpr::binding("n", CmpOp::Eq, "3").eval(&w));
        assert!(!PredicateExpr::binding("n", CmpOp::Ne, "3").eval(&w));
    }

    #[test]
    fn nan_metric_never_matches() {
        let w = work(WorkStatus::Finished, &[("x", f64::NAN)]);
        for op in [CmpOp::Eq, CmpOp::Ne, CmpOp::Lt, CmpOp::Ge] {
            assert!(!PredicateExpr::metric("x", op, 1.0).eval(&w));
        }
    }

    #[test]
    fn combinators() {
        let w = work(WorkStatus::Failed, &[("loss", 1.0)]);
        let p = PredicateExpr::or(vec![
            PredicateExpr::status_is("Finished"),
            PredicateExpr::and(vec![
                PredicateExpr::status_is("Failed"),
                PredicateExpr::metric("loss", CmpOp::Ge, 1.0),
            ]),
        ]);
        assert!(p.eval(&w));
        assert!(PredicateExpr::and(vec![]).eval(&w));
        assert!(!PredicateExpr::or(vec![]).eval(&w));
    }

    #[test]
    fn param_add() {
        let w = work(WorkStatus::Finished, &[("m", 0.5)]);
        let e = ParamExpr::add(
            ParamExpr::Binding("n".into()),
            ParamExpr::Literal(ParamValue::Int(1)),
        );
        assert_eq!(eval_param_expr(&e, &w), Some(ParamValue::Int(4)));
        let e = ParamExpr::add(ParamExpr::Binding("n".into()), ParamExpr::Metric("m".into()));
        assert_eq!(eval_param_expr(&e, &w), Some(ParamValue::Float(3.5)));
        assert_eq!(eval_param_expr(&ParamExpr::Metric("zz".into()), &w), None);
    }

    #[test]
    fn json_shape() {
        let p = PredicateExpr::and(vec![
            PredicateExpr::status_is("Finished"),
            PredicateExpr::metric("loss", CmpOp::Lt, 0.1),
        ]);
        let s = serde_json::to_string(&p).unwrap();
        assert_eq!(
            s,
            r#"{"op":"and","args":[{"op":"compare","cmp":"eq","left":"status","right":"Finished"},{"op":"compare","cmp":"lt","left":{"metric":"loss"},"right":0.1}]}"#
        );
        let back: PredicateExpr = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<PredicateExpr>(r#"{"op":"literal","value":true,"x":1}"#)
            .is_err());
    }
}
