//! Blocking HTTP client for the head service.

use std::time::Duration;

use serde_json::Value;

use crate::error::{CliError, CliResult};

pub struct Client {
    agent: ureq::Agent,
    base: String,
    token: Option<String>,
}

/// A 2xx reply.
pub struct Reply {
    pub status: u16,
    pub body: String,
}

impl Reply {
    pub fn json(&self) -> CliResult<Value> {
        serde_json::from_str(&self.body).map_err(|e| CliError::Transport(format!("unreadable reply: {e}")))
    }
}

impl Client {
    pub fn new(base: &str, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(60)))
            .build()
            .into();
        Self {
            agent,
            base: base.trim_end_matches('/').to_string(),
            token,
        }
    }

    pub fn get(&self, path: &str, query: &[(&str, String)]) -> CliResult<Reply> {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        for (k, v) in query {
            req = req.query(*k, v);
        }
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        self.finish(req.call())
    }

    pub fn post(&self, path: &str, body: &str, idempotency_key: Option<&str>) -> CliResult<Reply> {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base))
            .content_type("application/json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        if let Some(k) = idempotency_key {
            req = req.header("Idempotency-Key", k);
        }
        self.finish(req.send(body))
    }

    fn finish(&self, r: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> CliResult<Reply> {
        let mut resp = r.map_err(|e| CliError::Transport(format!("{}: {e}", self.base)))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| CliError::Transport(format!("reading reply: {e}")))?;
        if (200..300).contains(&status) {
            return Ok(Reply { status, body });
        }
        let msg = describe(status, &body);
        Err(match status {
            400 | 409 | 422 => CliError::Validation(msg),
            404 => CliError::NotFound(msg),
            _ => CliError::Transport(msg),
        })
    }
}

/// `code: message` plus any details, from an error body.
fn describe(status: u16, body: &str) -> String {
    let Ok(v) = serde_json::from_str::<Value>(body) else {
        return format!("HTTP {status}: {}", body.trim());
    };
    let mut s = format!(
        "HTTP {status} {}: {}",
        v["code"].as_str().unwrap_or("error"),
        v["message"].as_str().unwrap_or("")
    );
    match &v["details"] {
        Value::Null => {}
        d => {
            s.push('\n');
            s.push_str(&serde_json::to_string_pretty(d).unwrap_or_default());
        }
    }
    s
}
