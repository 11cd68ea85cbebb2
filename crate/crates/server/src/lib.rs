//! HTTP head service: authenticates clients, stores submitted requests and
//! answers status, listing and metrics queries. It never executes
//! workflows itself; the daemons run in-process only when asked to
//! ([`host::start_daemons`]) and otherwise in a separate process sharing
//! the store.

pub mod api;
pub mod auth;
pub mod error;
pub mod host;
pub mod metrics;

pub use api::{router, AppState};
pub use auth::{ApiToken, TokenStore};
pub use error::ApiError;
pub use host::{BackendConfig, Hosted};

/// Header carrying the client's deduplication key on `POST /requests`.
pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub const DEFAULT_PAGE_SIZE: usize = 100;
pub const MAX_PAGE_SIZE: usize = 1_000;
