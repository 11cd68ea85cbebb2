//! Use-case shorthands, expanded here into full wire requests so the
//! service only ever sees the strict schema.

use dds_core::carousel::{carousel_workflow, CarouselPolicy};
use dds_core::dag::{build_active_learning, ingest_job_graph, ActiveLearningSpec, JobGraph};
use dds_core::hpo::{hpo_workflow, HpoTaskSpec};
use dds_core::model::CollectionSpec;
use dds_core::wire::{WireError, WireRequest};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const DEFAULT_CONSUMER: &str = "default";

fn default_consumer() -> String {
    DEFAULT_CONSUMER.to_string()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "use_case", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shorthand {
    Carousel {
        #[serde(default = "default_consumer")]
        consumer: String,
        dataset: CollectionSpec,
        /// `file-level`, `dataset-level`, with the usual suffixes.
        #[serde(default)]
        policy: Option<String>,
    },
    Hpo {
        #[serde(default = "default_consumer")]
        consumer: String,
        task_name: String,
        task: HpoTaskSpec,
    },
    Dag {
        #[serde(default = "default_consumer")]
        consumer: String,
        name: String,
        graph: JobGraph,
    },
    ActiveLearning {
        #[serde(default = "default_consumer")]
        consumer: String,
        spec: ActiveLearningSpec,
    },
}

impl Shorthand {
    pub fn expand(&self) -> CliResult<WireRequest> {
        let invalid = |e: String| CliError::Validation(e);
        let (wf, consumer) = match self {
            Shorthand::Carousel {
                consumer,
                dataset,
                policy,
            } => {
                let p: CarouselPolicy = match policy {
                    Some(s) => s.parse().map_err(invalid)?,
                    None => CarouselPolicy::file_level(),
                };
                (carousel_workflow(dataset, &p), consumer)
            }
            Shorthand::Hpo {
                consumer,
                task_name,
                task,
            } => (hpo_workflow(task_name, task).map_err(|e| invalid(e.to_string()))?, consumer),
            Shorthand::Dag { consumer, name, graph } => {
                (ingest_job_graph(graph, name).map_err(|e| invalid(e.to_string()))?, consumer)
            }
            Shorthand::ActiveLearning { consumer, spec } => {
                (build_active_learning(spec).map_err(|e| invalid(e.to_string()))?, consumer)
            }
        };
        Ok(WireRequest::new(wf, consumer))
    }
}

fn syntax(e: serde_json::Error) -> CliError {
    CliError::Validation(format!(
        "malformed document at line {}, column {}: {e}",
        e.line(),
        e.column()
    ))
}

fn wire_error(e: WireError) -> CliError {
    match e {
        WireError::Syntax { line, column, message } => {
            CliError::Validation(format!("malformed request at line {line}, column {column}: {message}"))
        }
        other => CliError::Validation(other.to_string()),
    }
}

/// A submit document: a wire request as is, or a shorthand (an object with
/// a `use_case` field). Either way the result has been validated.
pub fn load_document(text: &str) -> CliResult<WireRequest> {
    let v: Value = serde_json::from_str(text).map_err(syntax)?;
    let req = if v.get("use_case").is_some() {
        let s: Shorthand = serde_json::from_str(text).map_err(syntax)?;
        s.expand()?
    } else {
        WireRequest::parse(text).map_err(wire_error)?
    };
    // Revalidate the rendered form, exactly as the service will see it.
    WireRequest::parse_valid(&req.render()).map_err(wire_error)
}
