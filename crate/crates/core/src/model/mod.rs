//! Directed-graph workflow programs.
//!
//! A [`Workflow`] is a fixed set of [`WorkTemplate`]s plus [`ConditionBranch`]es
//! between them. Entry templates are instantiated when the workflow starts;
//! every time a [`Work`] terminates the branches whose source is its template
//! are evaluated and may instantiate further Works. Branches may form cycles,
//! bounded by per-template and per-workflow instantiation caps.
//!
//! Everything here is pure: no I/O and no interior mutability.

mod engine;
mod predicate;
mod subst;
mod validate;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use engine::{
    evaluate_activation, evaluate_conditions, evaluate_conditions_lenient, instantiate_entry_works,
    instantiate_entry_works_in, Evaluation, SuppressReason, Suppressed,
};
pub use predicate::{eval_param_expr, CmpOp, ParamExpr, PredicateExpr, ValueRef};
pub use subst::{placeholders, substitute_params};
pub use validate::{validate_workflow, ValidationReport, Violation};

pub const DEFAULT_MAX_INSTANTIATIONS: u32 = 100;
pub const DEFAULT_MAX_TOTAL_WORKS: u32 = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no binding for parameter `{0}`")]
    MissingBinding(String),
    #[error("parameter `{param}` of template `{template}` expects {expected}, got {got}")]
    TypeMismatch {
        template: String,
        param: String,
        expected: ParamType,
        got: String,
    },
    #[error("unknown template `{0}`")]
    UnknownTemplate(String),
}

/// A bound parameter value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl ParamValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            ParamValue::Bool(_) => "bool",
            ParamValue::Int(_) => "int",
            ParamValue::Float(_) => "float",
            ParamValue::Str(_) => "string",
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(i) => Some(*i as f64),
            ParamValue::Float(f) => Some(*f),
            _ => None,
        }
    }

    /// Coerces the value into `ty`: ints widen to floats, integral floats
    /// narrow to ints. Anything else is a mismatch.
    pub fn coerce(&self, ty: ParamType) -> Option<ParamValue> {
        match (ty, self) {
            (ParamType::Bool, ParamValue::Bool(_))
            | (ParamType::Int, ParamValue::Int(_))
            | (ParamType::Float, ParamValue::Float(_))
            | (ParamType::String, ParamValue::Str(_)) => Some(self.clone()),
            (ParamType::Float, ParamValue::Int(i)) => Some(ParamValue::Float(*i as f64)),
            (ParamType::Int, ParamValue::Float(f))
                if f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15 =>
            {
                Some(ParamValue::Int(*f as i64))
            }
            _ => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        !matches!(self, ParamValue::Float(f) if !f.is_finite())
    }
}

/// Canonical text rendering used by placeholder substitution.
impl fmt::Display for ParamValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamValue::Bool(b) => write!(f, "{b}"),
            ParamValue::Int(i) => write!(f, "{i}"),
            ParamValue::Float(x) => write!(f, "{x}"),
            ParamValue::Str(s) => f.write_str(s),
        }
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Int(v)
    }
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Float(v)
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Bool(v)
    }
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    Int,
    Float,
    String,
    Bool,
}

impl fmt::Display for ParamType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ParamType::Int => "int",
            ParamType::Float => "float",
            ParamType::String => "string",
            ParamType::Bool => "bool",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamSlot {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<ParamValue>,
}

impl ParamSlot {
    pub fn new(name: &str, ty: ParamType) -> Self {
        Self {
            name: name.to_string(),
            ty,
            default: None,
        }
    }

    pub fn with_default(mut self, v: impl Into<ParamValue>) -> Self {
        self.default = Some(v.into());
        self
    }
}

/// One file of an inline collection listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub name: String,
    #[serde(default)]
    pub size_bytes: u64,
    /// Data identifiers (`scope:name/file`) that must be processed before this
    /// file may be released.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depends_on: Vec<String>,
    /// Handed to the WFM with the job. A JSON null reads back as absent, so
    /// it is not written either.
    #[serde(default, skip_serializing_if = "payload_absent")]
    pub payload: Option<serde_json::Value>,
}

fn payload_absent(p: &Option<serde_json::Value>) -> bool {
    p.as_ref().is_none_or(serde_json::Value::is_null)
}

/// A dataset reference. `scope` and `name` may carry `%{param}` placeholders.
/// When `files` is present the listing is taken verbatim instead of being
/// resolved through the data-management backend.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectionSpec {
    pub scope: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub files: Option<Vec<FileSpec>>,
}

impl CollectionSpec {
    pub fn new(scope: &str, name: &str) -> Self {
        Self {
            scope: scope.to_string(),
            name: name.to_string(),
            files: None,
        }
    }

    pub fn inline(scope: &str, name: &str, files: Vec<FileSpec>) -> Self {
        Self {
            scope: scope.to_string(),
            name: name.to_string(),
            files: Some(files),
        }
    }

    /// `scope:name/file`
    pub fn did(scope: &str, name: &str, file: &str) -> String {
        format!("{scope}:{name}/{file}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkKind {
    Processing,
    DecisionMaking,
}

fn default_max_instantiations() -> u32 {
    DEFAULT_MAX_INSTANTIATIONS
}

fn default_max_total_works() -> u32 {
    DEFAULT_MAX_TOTAL_WORKS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkTemplate {
    pub name: String,
    pub work_kind: WorkKind,
    #[serde(default)]
    pub parameters: Vec<ParamSlot>,
    pub input_spec: CollectionSpec,
    pub output_spec: CollectionSpec,
    #[serde(default)]
    pub executable_spec: String,
    #[serde(default)]
    pub is_entry: bool,
    #[serde(default = "default_max_instantiations")]
    pub max_instantiations: u32,
}

impl WorkTemplate {
    /// A processing template reading `scope:name` and writing `scope:name.out`.
    pub fn processing(name: &str, input: CollectionSpec) -> Self {
        let output = CollectionSpec::new(&input.scope, &format!("{}.out", input.name));
        Self {
            name: name.to_string(),
            work_kind: WorkKind::Processing,
            parameters: Vec::new(),
            input_spec: input,
            output_spec: output,
            executable_spec: String::new(),
            is_entry: false,
            max_instantiations: DEFAULT_MAX_INSTANTIATIONS,
        }
    }

    pub fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.parameters.iter().find(|p| p.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Destination {
    pub template: String,
    #[serde(default)]
    pub param_map: BTreeMap<String, ParamExpr>,
}

/// When a branch is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// At the source Work's termination, against its final metrics.
    #[default]
    Terminated,
    /// As soon as the source Work is activated. The source has no metrics
    /// yet, so metric comparisons are false.
    Activated,
}

impl Trigger {
    fn is_terminated(&self) -> bool {
        *self == Trigger::Terminated
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionBranch {
    pub source_template: String,
    pub predicate: PredicateExpr,
    pub destinations: Vec<Destination>,
    #[serde(default, skip_serializing_if = "Trigger::is_terminated")]
    pub trigger: Trigger,
}

impl ConditionBranch {
    pub fn new(source: &str, predicate: PredicateExpr, dests: &[&str]) -> Self {
        Self {
            source_template: source.to_string(),
            predicate,
            destinations: dests
                .iter()
                .map(|d| Destination {
                    template: d.to_string(),
                    param_map: BTreeMap::new(),
                })
                .collect(),
            trigger: Trigger::Terminated,
        }
    }

    pub fn on_activation(mut self) -> Self {
        self.trigger = Trigger::Activated;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workflow {
    pub name: String,
    pub templates: Vec<WorkTemplate>,
    #[serde(default)]
    pub conditions: Vec<ConditionBranch>,
    #[serde(default)]
    pub initial_bindings: BTreeMap<String, ParamValue>,
    #[serde(default = "default_max_total_works")]
    pub max_total_works: u32,
}

impl Workflow {
    pub fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            templates: Vec::new(),
            conditions: Vec::new(),
            initial_bindings: BTreeMap::new(),
            max_total_works: DEFAULT_MAX_TOTAL_WORKS,
        }
    }

    pub fn template(&self, name: &str) -> Option<&WorkTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    pub fn has_activation_branches(&self, template: &str) -> bool {
        self.conditions
            .iter()
            .any(|c| c.source_template == template && c.trigger == Trigger::Activated)
    }

    /// Ids of every child `work_id` can spawn through branches fired by
    /// `trigger`, whether or not the branch fires.
    pub fn child_ids(&self, work_id: &str, template: &str, trigger: Trigger) -> Vec<String> {
        let mut out = Vec::new();
        for (bi, c) in self.conditions.iter().enumerate() {
            if c.source_template == template && c.trigger == trigger {
                for di in 0..c.destinations.len() {
                    out.push(crate::ids::child_work_id(work_id, bi, di));
                }
            }
        }
        out
    }

    /// Bindings for a fresh instantiation of `tpl`: template defaults, then
    /// workflow initial bindings for declared slots.
    pub(crate) fn base_bindings(&self, tpl: &WorkTemplate) -> BTreeMap<String, ParamValue> {
        let mut out = BTreeMap::new();
        for slot in &tpl.parameters {
            if let Some(v) = self.initial_bindings.get(&slot.name) {
                out.insert(slot.name.clone(), v.clone());
            } else if let Some(d) = &slot.default {
                out.insert(slot.name.clone(), d.clone());
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum WorkStatus {
    New,
    Activated,
    Running,
    Terminating,
    Finished,
    SubFinished,
    Failed,
}

impl WorkStatus {
    pub const ALL: [WorkStatus; 7] = [
        WorkStatus::New,
        WorkStatus::Activated,
        WorkStatus::Running,
        WorkStatus::Terminating,
        WorkStatus::Finished,
        WorkStatus::SubFinished,
        WorkStatus::Failed,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            WorkStatus::Finished | WorkStatus::SubFinished | WorkStatus::Failed
        )
    }

    pub fn can_transition(self, to: WorkStatus) -> bool {
        use WorkStatus::*;
        matches!(
            (self, to),
            (New, Activated)
                | (Activated, Running)
                | (Running, Terminating)
                | (Terminating, Finished)
                | (Terminating, SubFinished)
                | (Terminating, Failed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WorkStatus::New => "New",
            WorkStatus::Activated => "Activated",
            WorkStatus::Running => "Running",
            WorkStatus::Terminating => "Terminating",
            WorkStatus::Finished => "Finished",
            WorkStatus::SubFinished => "SubFinished",
            WorkStatus::Failed => "Failed",
        }
    }
}

impl fmt::Display for WorkStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A runtime instantiation of a template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Work {
    pub work_id: String,
    pub template_name: String,
    pub bindings: BTreeMap<String, ParamValue>,
    pub status: WorkStatus,
    #[serde(default)]
    pub output_metrics: BTreeMap<String, f64>,
    pub generation: u32,
}

impl Work {
    /// Walks the status machine one edge. Returns false (and changes nothing)
    /// on an illegal edge.
    pub fn advance(&mut self, to: WorkStatus) -> bool {
        if self.status.can_transition(to) {
            self.status = to;
            true
        } else {
            false
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn work_status_edges() {
        use WorkStatus::*;
        let legal = [
            (New, Activated),
            (Activated, Running),
            (Running, Terminating),
            (Terminating, Finished),
            (Terminating, SubFinished),
            (Terminating, Failed),
        ];
        for a in WorkStatus::ALL {
            for b in WorkStatus::ALL {
                assert_eq!(a.can_transition(b), legal.contains(&(a, b)), "{a}->{b}");
            }
        }
    }

    #[test]
    fn coercions() {
        assert_eq!(
            ParamValue::Int(2).coerce(ParamType::Float),
            Some(ParamValue::Float(2.0))
        );
        assert_eq!(
            ParamValue::Float(3.0).coerce(ParamType::Int),
            Some(ParamValue::Int(3))
        );
        assert_eq!(ParamValue::Float(3.5).coerce(ParamType::Int), None);
        assert_eq!(ParamValue::Str("x".into()).coerce(ParamType::Int), None);
        assert_eq!(ParamValue::Bool(true).coerce(ParamType::String), None);
    }

    #[test]
    fn param_value_json_keeps_int_float_apart() {
        let v: Vec<ParamValue> = serde_json::from_str(r#"[1, 1.0, "a", true]"#).unwrap();
        assert_eq!(
            v,
            vec![
                ParamValue::Int(1),
                ParamValue::Float(1.0),
                ParamValue::Str("a".into()),
                ParamValue::Bool(true)
            ]
        );
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"[1,1.0,"a",true]"#);
    }
}
