//! Serves a live detection stream over HTTP so that an analyst can answer
//! queries and volunteer labels.
//!
//! | method | path        | body / query          | response                 |
//! |--------|-------------|-----------------------|--------------------------|
//! | GET    | `/state`    | `?since=t` (default 0) | records with `t > since` |
//! | GET    | `/queries`  |                       | `{mode, queries}`        |
//! | POST   | `/feedback` | `{id or t, y, submitter}` | `{applied, t, tau, moved}` |
//!
//! Rejected feedback comes back as `{"error": message, "kind": ...}` with
//! 422 for invalid input, 404 for unknown ids or steps outside the window,
//! 409 for duplicates and 410 for expired queries.

pub mod api;
mod engine;
mod http;

pub use api::{
    FeedbackAck, FeedbackError, FeedbackSubmission, ObservationSummary, PendingQuery, QueriesResponse, ServiceStats,
};
pub use engine::{feed_lines, feed_records, spawn, InputLine, ServiceHandle, ServiceOptions};
pub use http::{router, serve};
