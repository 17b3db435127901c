//! Streaming anomaly detection from noisy observations.
//!
//! A mirror-descent filter tracks a drifting exponential-family parameter from
//! corrupted samples, and a threshold forecaster turns the filter's beliefs into
//! anomaly flags using whatever label feedback is available.

pub mod checks;
pub mod config;
pub mod detect;
pub mod error;
pub mod expfam;
pub mod filter;
pub mod harness;
pub mod hedge;
pub mod noise;
pub mod record;
pub mod simulate;

pub use error::{Error, Result};
pub use expfam::{FamilyModel, FeasibleBox, IsingGraph, MeanParam, NaturalParam};
pub use filter::{run_filter, FilterState, FilterStep, FilterTrace, NoisyMirrorDescent, StepSchedule};
pub use hedge::{
    hinge_loss, query_probability, FeedbackEvent, FeedbackRequest, FeedbackSource, HedgeState, HedgeStep, Label,
    LearningRate, ZetaTransform,
};
pub use noise::{NoisyChannel, StatBound};
