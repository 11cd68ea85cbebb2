//! Static bearer tokens loaded from a JSON file.

use std::collections::HashMap;
use std::path::Path;

use axum::extract::{Request, State};
use axum::http::header::AUTHORIZATION;
use axum::middleware::Next;
use axum::response::Response;
use dds_core::clock::Millis;
use serde::{Deserialize, Serialize};

use crate::api::AppState;
use crate::error::ApiError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApiToken {
    pub token: String,
    /// Requester name recorded on submitted requests.
    pub subject: String,
    /// Milliseconds on the service clock (Unix epoch for a real
    /// deployment). The token is rejected from this instant on.
    pub expires_at: Millis,
}

/// The authenticated requester, attached to each request by [`require_token`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subject(pub String);

#[derive(Debug, Clone, Default)]
pub struct TokenStore {
    by_token: HashMap<String, ApiToken>,
}

impl TokenStore {
    pub fn new(tokens: Vec<ApiToken>) -> Result<Self, String> {
        let mut by_token = HashMap::new();
        for t in tokens {
            if t.token.is_empty() || t.subject.is_empty() {
                return Err("token and subject must be non-empty".into());
            }
            if t.subject.contains(':') {
                return Err(format!("subject `{}` may not contain `:`", t.subject));
            }
            let key = t.token.clone();
            if by_token.insert(key, t).is_some() {
                return Err("duplicate token".into());
            }
        }
        Ok(Self { by_token })
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let tokens: Vec<ApiToken> = serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::parse(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    /// The subject of a live token.
    pub fn authenticate(&self, token: &str, now: Millis) -> Result<&str, ApiError> {
        match self.by_token.get(token) {
            Some(t) if now < t.expires_at => Ok(&t.subject),
            Some(_) => Err(ApiError::unauthorized("token expired")),
            None => Err(ApiError::unauthorized("unknown token")),
        }
    }
}

pub async fn require_token(State(state): State<AppState>, mut req: Request, next: Next) -> Result<Response, ApiError> {
    let header = req
        .headers()
        .get(AUTHORIZATION)
        .ok_or_else(|| ApiError::unauthorized("missing Authorization header"))?;
    let token = header
        .to_str()
        .ok()
        .and_then(|h| h.strip_prefix("Bearer "))
        .map(str::trim)
        .ok_or_else(|| ApiError::unauthorized("expected `Authorization: Bearer <token>`"))?;
    let subject = state.tokens().authenticate(token, state.store().now())?.to_string();
    req.extensions_mut().insert(Subject(subject));
    Ok(next.run(req).await)
}
