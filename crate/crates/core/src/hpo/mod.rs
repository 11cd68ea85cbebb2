//! Hyperparameter optimisation on top of the pipeline.
//!
//! Each round of points is one Work in scope [`HPO_SCOPE`]: the
//! [`HpoPointSource`] answers the Work's dataset lookup by generating the
//! next round from the losses already recorded in the store, and the
//! [`EvaluatorHub`] hands the points to evaluators and reports their losses
//! back as content metrics. A round that yields no points ends the loop.

mod evaluator;
mod run;
mod sampler;
mod source;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use evaluator::{EvaluatorHub, Objective, PointTicket, SimEvaluatorConfig};
pub use run::{hpo_workflow, read_trials, run_hpo, HpoResult, ROUND_TEMPLATE};
pub use sampler::{generate_points, next_iteration, should_stop};
pub use source::HpoPointSource;

pub use crate::pipeline::HPO_SCOPE;
use crate::model::ParamValue;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HpoError {
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("grid fully enumerated")]
    ExhaustedSpace,
    #[error("unknown point `{0}`")]
    UnknownPoint(String),
    #[error("point `{0}` already has a different loss")]
    ConflictingLoss(String),
    #[error("point `{0}` has not been dispatched")]
    NotDispatched(String),
    #[error("loss {0} is not a finite number")]
    InvalidLoss(f64),
    #[error("pipeline: {0}")]
    Pipeline(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DimKind {
    Continuous { lo: f64, hi: f64 },
    Integer { lo: i64, hi: i64 },
    Categorical { values: Vec<ParamValue> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dimension {
    pub name: String,
    pub kind: DimKind,
}

impl Dimension {
    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::Continuous { lo, hi },
        }
    }

    pub fn integer(name: &str, lo: i64, hi: i64) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::Integer { lo, hi },
        }
    }

    pub fn categorical(name: &str, values: Vec<ParamValue>) -> Self {
        Self {
            name: name.into(),
            kind: DimKind::Categorical { values },
        }
    }

    pub fn contains(&self, v: &ParamValue) -> bool {
        match (&self.kind, v) {
            (DimKind::Continuous { lo, hi }, ParamValue::Float(x)) => (*lo..=*hi).contains(x),
            (DimKind::Integer { lo, hi }, ParamValue::Int(x)) => (*lo..=*hi).contains(x),
            (DimKind::Categorical { values }, v) => values.contains(v),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub dimensions: Vec<Dimension>,
}

impl SearchSpace {
    pub fn new(dimensions: Vec<Dimension>) -> Self {
        Self { dimensions }
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        let bad = |m: String| Err(HpoError::InvalidTask(m));
        if self.dimensions.is_empty() {
            return bad("search space has no dimensions".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for d in &self.dimensions {
            if !names.insert(d.name.as_str()) {
                return bad(format!("dimension `{}` declared twice", d.name));
            }
            match &d.kind {
                DimKind::Continuous { lo, hi } => {
                    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return bad(format!("`{}`: need finite lo < hi", d.name));
                    }
                }
                DimKind::Integer { lo, hi } => {
                    if lo >= hi {
                        return bad(format!("`{}`: need lo < hi", d.name));
                    }
                }
                DimKind::Categorical { values } => {
                    if values.is_empty() {
                        return bad(format!("`{}`: no categories", d.name));
                    }
                    for (i, v) in values.iter().enumerate() {
                        if values[..i].contains(v) {
                            return bad(format!("`{}`: duplicate category", d.name));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, values: &BTreeMap<String, ParamValue>) -> bool {
        values.len() == self.dimensions.len()
            && self
                .dimensions
                .iter()
                .all(|d| values.get(&d.name).is_some_and(|v| d.contains(v)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Random,
    Grid,
    Evolutionary,
}

fn unbounded() -> u32 {
    u32::MAX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpoTaskSpec {
    pub space: SearchSpace,
    pub sampler: SamplerKind,
    /// Grid: `resolution`. Evolutionary: `mu`, `sigma` (absolute step on
    /// numeric dimensions) and `p_categorical` (chance a categorical gene
    /// is redrawn).
    #[serde(default)]
    pub sampler_params: BTreeMap<String, f64>,
    pub points_per_iteration: u32,
    pub max_points: u32,
    /// Consecutive non-improving rounds tolerated before stopping; absent
    /// means never stop early.
    #[serde(default = "unbounded")]
    pub patience: u32,
    #[serde(default)]
    pub seed: u64,
}

impl HpoTaskSpec {
    pub fn new(space: SearchSpace, sampler: SamplerKind, points_per_iteration: u32, max_points: u32) -> Self {
        Self {
            space,
            sampler,
            sampler_params: BTreeMap::new(),
            points_per_iteration,
            max_points,
            patience: unbounded(),
            seed: 0,
        }
    }

    pub fn with_param(mut self, name: &str, v: f64) -> Self {
        self.sampler_params.insert(name.into(), v);
        self
    }

    pub fn validate(&self) -> Result<(), HpoError> {
        self.space.validate()?;
        if self.points_per_iteration == 0 {
            return Err(HpoError::InvalidTask("points_per_iteration must be positive".into()));
        }
        if self.points_per_iteration > self.max_points {
            return Err(HpoError::InvalidTask("points_per_iteration exceeds max_points".into()));
        }
        for (k, v) in &self.sampler_params {
            if !v.is_finite() || *v < 0.0 {
                return Err(HpoError::InvalidTask(format!("sampler param `{k}` must be a non-negative number")));
            }
        }
        Ok(())
    }

    /// Upper bound on rounds, including the final empty one.
    pub fn max_rounds(&self) -> u32 {
        self.max_points.div_ceil(self.points_per_iteration) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointStatus {
    Generated,
    Dispatched,
    Evaluated,
    Lost,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPoint {
    pub point_id: String,
    pub values: BTreeMap<String, ParamValue>,
    pub status: PointStatus,
    /// Present iff Evaluated.
    pub loss: Option<f64>,
    pub iteration: u32,
}

impl TrialPoint {
    pub fn evaluated(&self) -> Option<f64> {
        match self.status {
            PointStatus::Evaluated => self.loss,
            _ => None,
        }
    }
}

/// Point name within a task: round and position.
pub fn point_name(iteration: u32, k: usize) -> String {
    format!("i{iteration:04}-p{k:04}")
}
