//! Wire types for the three endpoints.

use hedgefilter::detect::HedgeMode;
use hedgefilter::hedge::Label;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coarse view of an observation, enough for an analyst to recognize it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSummary {
    pub dim: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl ObservationSummary {
    pub fn of(z: &[f64]) -> Self {
        let dim = z.len();
        let mean = if dim == 0 { 0.0 } else { z.iter().sum::<f64>() / dim as f64 };
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { dim, mean, min, max }
    }
}

/// A step waiting for an analyst's label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingQuery {
    pub id: u64,
    pub t: u64,
    pub z: ObservationSummary,
    pub log_belief: f64,
    pub zeta: f64,
    pub tau: f64,
    pub y_hat: Label,
    /// Unix time in milliseconds.
    pub created_at: u64,
    /// Unix time in milliseconds after which the step proceeds unlabeled.
    pub deadline: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueriesResponse {
    pub mode: HedgeMode,
    pub queries: Vec<PendingQuery>,
}

/// A label from the analyst.
///
/// Queried steps are answered by `id`; in arbitrary mode any recent step can
/// be labeled by `t`. `y` stays a raw integer so that bad values get a
/// validation error instead of a parse failure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackSubmission {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<u64>,
    pub y: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submitter: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackAck {
    pub applied: bool,
    /// Timestep the label was applied to.
    pub t: u64,
    /// Threshold after the update.
    pub tau: f64,
    /// Whether the label disagreed with the decision and moved the threshold.
    pub moved: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedbackError {
    #[error("label must be -1 or +1, got {y}")]
    InvalidLabel { y: i64 },
    #[error("this mode answers queries by id")]
    MissingId,
    #[error("this mode takes feedback by timestep t")]
    MissingTimestep,
    #[error("no query with id {id}")]
    UnknownQuery { id: u64 },
    #[error("query {id} was already answered")]
    DuplicateQuery { id: u64 },
    #[error("query {id} expired before it was answered")]
    Expired { id: u64 },
    #[error("timestep {t} is outside the feedback window")]
    OutsideWindow { t: u64 },
    #[error("timestep {t} already has feedback")]
    DuplicateTimestep { t: u64 },
    #[error("the detection loop has stopped")]
    Stopped,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub records: u64,
    pub errors: u64,
    pub queries: u64,
    pub expired: u64,
    pub accepted: u64,
    pub rejected: u64,
    /// Threshold updates performed for accepted submissions.
    pub updates: u64,
}
