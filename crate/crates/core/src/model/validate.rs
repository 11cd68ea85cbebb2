use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{placeholders, ValueRef, Workflow};

/// A single well-formedness problem. Violations are data, not errors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    EmptyName { what: String },
    DuplicateTemplate { template: String },
    DuplicateParameter { template: String, param: String },
    NoEntryTemplate,
    MaxTotalBelowEntries { max_total_works: u32, entries: u32 },
    ZeroMaxInstantiations { template: String },
    UnknownTemplate { condition: usize, template: String },
    UnknownPlaceholder { template: String, placeholder: String },
    DefaultTypeMismatch { template: String, param: String },
    UnknownBindingRef { condition: usize, binding: String },
    UnknownDestinationParam { condition: usize, template: String, param: String },
    UnboundParameter { template: String, param: String },
    NonFiniteValue { location: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyName { what } => write!(f, "{what} has an empty name"),
            Violation::DuplicateTemplate { template } => {
                write!(f, "template `{template}` declared twice")
            }
            Violation::DuplicateParameter { template, param } => {
                write!(f, "template `{template}` declares `{param}` twice")
            }
            Violation::NoEntryTemplate => f.write_str("no entry template"),
            Violation::MaxTotalBelowEntries {
                max_total_works,
                entries,
            } => write!(
                f,
                "max_total_works {max_total_works} is below the {entries} entry templates"
            ),
            Violation::ZeroMaxInstantiations { template } => {
                write!(f, "template `{template}` has max_instantiations 0")
            }
            Violation::UnknownTemplate {
                condition,
                template,
            } => write!(f, "condition {condition} names unknown template `{template}`"),
            Violation::UnknownPlaceholder {
                template,
                placeholder,
            } => write!(
                f,
                "template `{template}` uses undeclared placeholder `%{{{placeholder}}}`"
            ),
            Violation::DefaultTypeMismatch { template, param } => {
                write!(f, "default of `{template}.{param}` does not match its type")
            }
            Violation::UnknownBindingRef { condition, binding } => write!(
                f,
                "condition {condition} reads binding `{binding}` its source does not declare"
            ),
            Violation::UnknownDestinationParam {
                condition,
                template,
                param,
            } => write!(
                f,
                "condition {condition} maps `{param}` which `{template}` does not declare"
            ),
            Violation::UnboundParameter { template, param } => write!(
                f,
                "`{template}.{param}` has no default, initial binding or mapping"
            ),
            Violation::NonFiniteValue { location } => {
                write!(f, "non-finite number at {location}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for v in &self.violations {
            writeln!(f, "- {v}")?;
        }
        Ok(())
    }
}

pub fn validate_workflow(wf: &Workflow) -> ValidationReport {
    let mut v = Vec::new();
    if wf.name.is_empty() {
        v.push(Violation::EmptyName {
            what: "workflow".into(),
        });
    }

    let mut seen = HashSet::new();
    for t in &wf.templates {
        if t.name.is_empty() {
            v.push(Violation::EmptyName {
                what: "template".into(),
            });
        }
        if !seen.insert(t.name.as_str()) {
            v.push(Violation::DuplicateTemplate {
                template: t.name.clone(),
            });
        }
        if t.max_instantiations == 0 {
            v.push(Violation::ZeroMaxInstantiations {
                template: t.name.clone(),
            });
        }
        let mut params = HashSet::new();
        for p in &t.parameters {
            if !params.insert(p.name.as_str()) {
                v.push(Violation::DuplicateParameter {
                    template: t.name.clone(),
                    param: p.name.clone(),
                });
            }
            if let Some(d) = &p.default {
                if d.coerce(p.ty).is_none() {
                    v.push(Violation::DefaultTypeMismatch {
                        template: t.name.clone(),
                        param: p.name.clone(),
                    });
                }
                if !d.is_finite() {
                    v.push(Violation::NonFiniteValue {
                        location: format!("{}.{}", t.name, p.name),
                    });
                }
            }
        }
        let texts = [
            t.input_spec.scope.as_str(),
            t.input_spec.name.as_str(),
            t.output_spec.scope.as_str(),
            t.output_spec.name.as_str(),
            t.executable_spec.as_str(),
        ];
        let mut reported = BTreeSet::new();
        for ph in texts.iter().flat_map(|s| placeholders(s)) {
            if !params.contains(ph) && reported.insert(ph) {
                v.push(Violation::UnknownPlaceholder {
                    template: t.name.clone(),
                    placeholder: ph.to_string(),
                });
            }
        }
    }

    let entries = wf.templates.iter().filter(|t| t.is_entry).count() as u32;
    if entries == 0 {
        v.push(Violation::NoEntryTemplate);
    } else if wf.max_total_works < entries {
        v.push(Violation::MaxTotalBelowEntries {
            max_total_works: wf.max_total_works,
            entries,
        });
    }

    for (k, val) in &wf.initial_bindings {
        if !val.is_finite() {
            v.push(Violation::NonFiniteValue {
                location: format!("initial_bindings.{k}"),
            });
        }
    }

    // Entry templates only ever see defaults and initial bindings.
    for t in wf.templates.iter().filter(|t| t.is_entry) {
        for p in &t.parameters {
            if p.default.is_none() && !wf.initial_bindings.contains_key(&p.name) {
                v.push(Violation::UnboundParameter {
                    template: t.name.clone(),
                    param: p.name.clone(),
                });
            }
        }
    }

    for (i, c) in wf.conditions.iter().enumerate() {
        let source = wf.template(&c.source_template);
        if source.is_none() {
            v.push(Violation::UnknownTemplate {
                condition: i,
                template: c.source_template.clone(),
            });
        }
        let declared = |name: &str| source.is_some_and(|s| s.slot(name).is_some());
        for r in c.predicate.refs() {
            if let ValueRef::Binding(b) = r {
                if source.is_some() && !declared(b) {
                    v.push(Violation::UnknownBindingRef {
                        condition: i,
                        binding: b.clone(),
                    });
                }
            }
        }
        if c.predicate.literals().iter().any(|l| !l.is_finite()) {
            v.push(Violation::NonFiniteValue {
                location: format!("conditions[{i}].predicate"),
            });
        }
        for d in &c.destinations {
            let Some(dest) = wf.template(&d.template) else {
                v.push(Violation::UnknownTemplate {
                    condition: i,
                    template: d.template.clone(),
                });
                continue;
            };
            for (param, expr) in &d.param_map {
                if dest.slot(param).is_none() {
                    v.push(Violation::UnknownDestinationParam {
                        condition: i,
                        template: dest.name.clone(),
                        param: param.clone(),
                    });
                }
                for b in expr.binding_refs() {
                    if source.is_some() && !declared(b) {
                        v.push(Violation::UnknownBindingRef {
                            condition: i,
                            binding: b.to_string(),
                        });
                    }
                }
            }
            for p in &dest.parameters {
                if p.default.is_none()
                    && !wf.initial_bindings.contains_key(&p.name)
                    && !d.param_map.contains_key(&p.name)
                {
                    v.push(Violation::UnboundParameter {
                        template: dest.name.clone(),
                        param: p.name.clone(),
                    });
                }
            }
        }
    }

    ValidationReport { violations: v }
}
