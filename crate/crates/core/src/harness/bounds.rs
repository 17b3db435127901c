//! Closed-form regret and mistake bounds.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::expfam::FeasibleBox;

/// Box constants entering the filter's regret bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretConstants {
    /// `H`
    pub strong_convexity: f64,
    /// `D`, the KL diameter of the box.
    pub kl_diameter: f64,
    /// `M`
    pub mean_bound: f64,
}

impl RegretConstants {
    pub fn from_box(bx: &FeasibleBox) -> Result<Self> {
        let (h, d, m) = bx.constants()?;
        Ok(Self { strong_convexity: h, kl_diameter: d, mean_bound: m })
    }

    fn gradient_term(&self, stat_bound: f64) -> f64 {
        (stat_bound + self.mean_bound).powi(2) / self.strong_convexity
    }
}

/// Regret bound against a static comparator after `t` steps of the `1/t` schedule:
/// `D(θ̂_1‖θ) + ((K + M)²/H)(log t + 1)`.
pub fn static_regret_bound(c: &RegretConstants, initial_kl: f64, stat_bound: f64, t: u64) -> f64 {
    initial_kl + c.gradient_term(stat_bound) * ((t as f64).ln() + 1.0)
}

/// Regret bound against a comparator sequence of variation `V` after `t` steps of
/// the `1/√t` schedule:
/// `D(θ̂_1‖θ_1) + D√(t+1) + 4M√t V + ((K + M)²/H)(2√t − 1)`.
pub fn tracking_regret_bound(c: &RegretConstants, initial_kl: f64, stat_bound: f64, variation: f64, t: u64) -> f64 {
    let t = t as f64;
    initial_kl
        + c.kl_diameter * (t + 1.0).sqrt()
        + 4.0 * c.mean_bound * t.sqrt() * variation
        + c.gradient_term(stat_bound) * (2.0 * t.sqrt() - 1.0)
}

/// Mistakes minus hinge loss of any threshold, full feedback with `η = 1/√T`: `√T`.
pub fn mistake_bound(horizon: u64) -> f64 {
    (horizon as f64).sqrt()
}

/// The same restricted to `m` feedback times out of `T`: `(1 + m/T)√T / 2`.
pub fn sparse_feedback_mistake_bound(feedback_count: u64, horizon: u64) -> f64 {
    let t = horizon as f64;
    (1.0 + feedback_count as f64 / t) * t.sqrt() / 2.0
}
