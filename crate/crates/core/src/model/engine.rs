//! Instantiation of entry Works and branch evaluation on termination.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{eval_param_expr, ModelError, Trigger, Work, WorkStatus, Workflow};
use crate::ids;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuppressReason {
    TemplateCap,
    WorkflowCap,
    TypeMismatch,
    MissingBinding,
    UnknownTemplate,
}

/// A destination that would have fired but was not instantiated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suppressed {
    pub branch: usize,
    pub destination: usize,
    pub template: String,
    pub reason: SuppressReason,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evaluation {
    pub works: Vec<Work>,
    pub suppressed: Vec<Suppressed>,
}

/// Entry Works for `wf`, with ids rooted at the workflow name.
pub fn instantiate_entry_works(wf: &Workflow) -> Result<Vec<Work>, ModelError> {
    instantiate_entry_works_in(wf, &wf.name)
}

/// Entry Works with ids rooted at `root` (a request id in the pipeline).
pub fn instantiate_entry_works_in(wf: &Workflow, root: &str) -> Result<Vec<Work>, ModelError> {
    let mut out = Vec::new();
    for (i, tpl) in wf.templates.iter().enumerate().filter(|(_, t)| t.is_entry) {
        let raw = wf.base_bindings(tpl);
        let mut bindings = BTreeMap::new();
        for slot in &tpl.parameters {
            let v = raw
                .get(&slot.name)
                .ok_or_else(|| ModelError::MissingBinding(slot.name.clone()))?;
            let v = v.coerce(slot.ty).ok_or_else(|| ModelError::TypeMismatch {
                template: tpl.name.clone(),
                param: slot.name.clone(),
                expected: slot.ty,
                got: v.type_name().to_string(),
            })?;
            bindings.insert(slot.name.clone(), v);
        }
        out.push(Work {
            work_id: ids::entry_work_id(root, i),
            template_name: tpl.name.clone(),
            bindings,
            status: WorkStatus::New,
            output_metrics: BTreeMap::new(),
            generation: 0,
        });
    }
    Ok(out)
}

/// Evaluates the branches sourced at `terminated`'s template.
///
/// `existing_count_per_template` holds how many Works of each template exist
/// already, not counting earlier children of `terminated` itself. Firing
/// destinations are produced in branch order, then destination order. A
/// destination whose mapped parameters do not fit its slot types fails the
/// whole evaluation with [`ModelError::TypeMismatch`].
pub fn evaluate_conditions(
    wf: &Workflow,
    terminated: &Work,
    existing_count_per_template: &BTreeMap<String, u32>,
) -> Result<Evaluation, ModelError> {
    debug_assert!(terminated.status.is_terminal());
    evaluate(wf, terminated, existing_count_per_template, true, Trigger::Terminated)
}

/// Like [`evaluate_conditions`], but a mistyped or unbound destination is
/// recorded as suppressed instead of failing the evaluation.
pub fn evaluate_conditions_lenient(
    wf: &Workflow,
    terminated: &Work,
    existing_count_per_template: &BTreeMap<String, u32>,
) -> Evaluation {
    debug_assert!(terminated.status.is_terminal());
    evaluate(wf, terminated, existing_count_per_template, false, Trigger::Terminated)
        .expect("lenient evaluation does not fail")
}

/// Evaluates the activation-triggered branches of a Work that has just left
/// New. Failing destinations are suppressed, as in
/// [`evaluate_conditions_lenient`].
pub fn evaluate_activation(
    wf: &Workflow,
    activated: &Work,
    existing_count_per_template: &BTreeMap<String, u32>,
) -> Evaluation {
    evaluate(wf, activated, existing_count_per_template, false, Trigger::Activated)
        .expect("lenient evaluation does not fail")
}

fn evaluate(
    wf: &Workflow,
    terminated: &Work,
    existing: &BTreeMap<String, u32>,
    strict: bool,
    trigger: Trigger,
) -> Result<Evaluation, ModelError> {
    let mut counts = existing.clone();
    let mut total: u64 = existing.values().map(|c| u64::from(*c)).sum();
    let mut eval = Evaluation::default();

    let branches = wf
        .conditions
        .iter()
        .enumerate()
        .filter(|(_, c)| c.source_template == terminated.template_name && c.trigger == trigger);
    for (bi, branch) in branches {
        if !branch.predicate.eval(terminated) {
            continue;
        }
        for (di, dest) in branch.destinations.iter().enumerate() {
            let Some(tpl) = wf.template(&dest.template) else {
                if strict {
                    return Err(ModelError::UnknownTemplate(dest.template.clone()));
                }
                eval.suppressed.push(Suppressed {
                    branch: bi,
                    destination: di,
                    template: dest.template.clone(),
                    reason: SuppressReason::UnknownTemplate,
                    detail: String::new(),
                });
                continue;
            };
            let suppress = |reason, detail: String| Suppressed {
                branch: bi,
                destination: di,
                template: tpl.name.clone(),
                reason,
                detail,
            };

            let mut raw = wf.base_bindings(tpl);
            let mut failure = None;
            for (param, expr) in &dest.param_map {
                match eval_param_expr(expr, terminated) {
                    Some(v) => {
                        raw.insert(param.clone(), v);
                    }
                    None => {
                        failure = Some(ModelError::MissingBinding(param.clone()));
                        break;
                    }
                }
            }
            let mut bindings = BTreeMap::new();
            if failure.is_none() {
                for slot in &tpl.parameters {
                    match raw.get(&slot.name) {
                        None => {
                            failure = Some(ModelError::MissingBinding(slot.name.clone()));
                            break;
                        }
                        Some(v) => match v.coerce(slot.ty) {
                            Some(v) => {
                                bindings.insert(slot.name.clone(), v);
                            }
                            None => {
                                failure = Some(ModelError::TypeMismatch {
                                    template: tpl.name.clone(),
                                    param: slot.name.clone(),
                                    expected: slot.ty,
                                    got: v.type_name().to_string(),
                                });
                                break;
                            }
                        },
                    }
                }
            }
            if let Some(err) = failure {
                if strict {
                    return Err(err);
                }
                let reason = match err {
                    ModelError::MissingBinding(_) => SuppressReason::MissingBinding,
                    _ => SuppressReason::TypeMismatch,
                };
                eval.suppressed.push(suppress(reason, err.to_string()));
                continue;
            }

            let count = counts.entry(tpl.name.clone()).or_insert(0);
            if *count >= tpl.max_instantiations {
                eval.suppressed
                    .push(suppress(SuppressReason::TemplateCap, String::new()));
                continue;
            }
            if total >= u64::from(wf.max_total_works) {
                eval.suppressed
                    .push(suppress(SuppressReason::WorkflowCap, String::new()));
                continue;
            }
            *count += 1;
            total += 1;
            eval.works.push(Work {
                work_id: ids::child_work_id(&terminated.work_id, bi, di),
                template_name: tpl.name.clone(),
                bindings,
                status: WorkStatus::New,
                output_metrics: BTreeMap::new(),
                generation: terminated.generation + 1,
            });
        }
    }
    Ok(eval)
}
