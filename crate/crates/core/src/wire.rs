//! Canonical JSON wire form of a client request.
//!
//! The schema is closed: unknown fields anywhere in the document are
//! rejected, and `wire_version` must be [`WIRE_VERSION`]. Rendering is
//! deterministic (struct fields in declaration order, maps sorted), so
//! `render(parse(render(x)))` is byte-identical to `render(x)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{validate_workflow, ValidationReport, Workflow};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub wire_version: u32,
    pub workflow: Workflow,
    pub consumer: String,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("malformed request at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported wire_version {0} (expected {WIRE_VERSION})")]
    Version(u32),
    #[error("workflow is not well-formed:\n{0}")]
    Invalid(ValidationReport),
}

impl WireError {
    pub fn report(&self) -> Option<&ValidationReport> {
        match self {
            WireError::Invalid(r) => Some(r),
            _ => None,
        }
    }
}

impl WireRequest {
    pub fn new(workflow: Workflow, consumer: &str) -> Self {
        Self {
            wire_version: WIRE_VERSION,
            workflow,
            consumer: consumer.to_string(),
        }
    }

    pub fn render(&self) -> String {
        serde_json::to_string(self).expect("wire request serializes")
    }

    pub fn render_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("wire request serializes")
    }

    /// Strict parse. Checks syntax, schema and version, not workflow validity.
    pub fn parse(text: &str) -> Result<Self, WireError> {
        let req: WireRequest = serde_json::from_str(text).map_err(|e| WireError::Syntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if req.wire_version != WIRE_VERSION {
            return Err(WireError::Version(req.wire_version));
        }
        Ok(req)
    }

    /// Strict parse followed by workflow validation.
    pub fn parse_valid(text: &str) -> Result<Self, WireError> {
        let req = Self::parse(text)?;
        let report = validate_workflow(&req.workflow);
        if report.is_empty() {
            Ok(req)
        } else {
            Err(WireError::Invalid(report))
        }
    }
}
