//! Threshold forecasters that turn beliefs into anomaly flags.
//!
//! A belief `p̂_t` is mapped through a monotone transform `ζ`, compared with the
//! current threshold `τ_t`, and flagged anomalous when `ζ_t < τ_t`. Feedback on
//! a mistake moves `τ` by `±η` and clamps it back onto `[τ_min, τ_max]`.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A binary verdict: `+1` anomalous, `−1` nominal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Nominal,
    Anomalous,
}

impl Label {
    pub fn from_i64(v: i64) -> Result<Self> {
        match v {
            1 => Ok(Self::Anomalous),
            -1 => Ok(Self::Nominal),
            other => Err(Error::InvalidLabel(other)),
        }
    }

    pub fn as_i8(self) -> i8 {
        match self {
            Self::Anomalous => 1,
            Self::Nominal => -1,
        }
    }

    pub fn sign(self) -> f64 {
        f64::from(self.as_i8())
    }

    pub fn flip(self) -> Self {
        match self {
            Self::Anomalous => Self::Nominal,
            Self::Nominal => Self::Anomalous,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Self::Anomalous
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:+}", self.as_i8())
    }
}

impl Serialize for Label {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.as_i8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_i64(v).map_err(serde::de::Error::custom)
    }
}

/// Monotone map from beliefs to the thresholding scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZetaTransform {
    /// `ζ(s) = C·s`, stored as `log C` so that huge scales such as `e^220` are representable.
    LinearScale { log_c: f64 },
    /// `ζ(s) = C·log s`.
    LogScale { c: f64 },
}

impl ZetaTransform {
    pub fn linear(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidHedge(format!("zeta scale must be positive, got {c}")));
        }
        Ok(Self::LinearScale { log_c: c.ln() })
    }

    pub fn linear_with_log_scale(log_c: f64) -> Result<Self> {
        if !log_c.is_finite() {
            return Err(Error::InvalidHedge("log zeta scale must be finite".into()));
        }
        Ok(Self::LinearScale { log_c })
    }

    pub fn log(c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidHedge(format!("zeta scale must be positive, got {c}")));
        }
        Ok(Self::LogScale { c })
    }

    /// Log-scale transform with `C` chosen so the median `|ζ|` over the warmup beliefs is 1.
    pub fn calibrate_log(warmup_log_beliefs: &[f64]) -> Result<Self> {
        let mut mags: Vec<f64> = warmup_log_beliefs.iter().map(|l| l.abs()).filter(|m| m.is_finite()).collect();
        if mags.is_empty() {
            return Err(Error::Empty("calibration window"));
        }
        mags.sort_by(f64::total_cmp);
        let n = mags.len();
        let median = if n % 2 == 1 { mags[n / 2] } else { 0.5 * (mags[n / 2 - 1] + mags[n / 2]) };
        if median == 0.0 {
            return Err(Error::InvalidHedge("calibration window has zero median log-belief".into()));
        }
        Self::log(1.0 / median)
    }

    /// `ζ(p̂)`.
    pub fn apply(&self, p_hat: f64) -> Result<f64> {
        match *self {
            Self::LinearScale { log_c } if p_hat >= 0.0 => Ok(log_c.exp() * p_hat),
            Self::LogScale { c } if p_hat > 0.0 => Ok(c * p_hat.ln()),
            _ => Err(Error::InvalidHedge(format!("belief {p_hat} outside the transform's domain"))),
        }
    }

    /// `ζ(exp(log_p))`, evaluated without forming `p̂`.
    pub fn apply_log(&self, log_p: f64) -> f64 {
        match *self {
            Self::LinearScale { log_c } => (log_c + log_p).exp(),
            Self::LogScale { c } => c * log_p,
        }
    }
}

/// Step size of the threshold update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LearningRate {
    Fixed(f64),
    /// `η_t = 1/√t` with `t` the global timestep.
    InverseSqrtT,
}

/// `(1 − (τ − ζ) y)_+`.
pub fn hinge_loss(tau: f64, zeta: f64, y: Label) -> f64 {
    (1.0 - (tau - zeta) * y.sign()).max(0.0)
}

/// `1 / (1 + |ζ − τ|)`.
pub fn query_probability(zeta: f64, tau: f64) -> f64 {
    1.0 / (1.0 + (zeta - tau).abs())
}

/// Threshold state of a forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedgeState {
    tau: f64,
    tau_min: f64,
    tau_max: f64,
    rate: LearningRate,
    t: u64,
}

impl HedgeState {
    /// Starts at `t = 1` with `τ_1 = tau_init`, or `τ_min` when `None`.
    pub fn new(tau_min: f64, tau_max: f64, rate: LearningRate, tau_init: Option<f64>) -> Result<Self> {
        if !(tau_min.is_finite() && tau_max.is_finite() && tau_min < tau_max) {
            return Err(Error::InvalidHedge(format!("need tau_min < tau_max, got [{tau_min}, {tau_max}]")));
        }
        if let LearningRate::Fixed(eta) = rate {
            if !(eta > 0.0 && eta.is_finite()) {
                return Err(Error::InvalidHedge(format!("eta must be positive, got {eta}")));
            }
        }
        let tau = tau_init.unwrap_or(tau_min);
        if !tau.is_finite() {
            return Err(Error::InvalidHedge("initial threshold must be finite".into()));
        }
        Ok(Self { tau: tau.clamp(tau_min, tau_max), tau_min, tau_max, rate, t: 1 })
    }

    /// Fixed horizon `T` with `η = 1/√T`.
    pub fn for_horizon(tau_min: f64, tau_max: f64, horizon: u64) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::InvalidHedge("horizon must be positive".into()));
        }
        Self::new(tau_min, tau_max, LearningRate::Fixed(1.0 / (horizon as f64).sqrt()), None)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.tau_min, self.tau_max)
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn rate(&self) -> LearningRate {
        self.rate
    }

    pub fn eta(&self) -> f64 {
        match self.rate {
            LearningRate::Fixed(eta) => eta,
            LearningRate::InverseSqrtT => 1.0 / (self.t as f64).sqrt(),
        }
    }

    pub fn project(&self, tau: f64) -> f64 {
        tau.clamp(self.tau_min, self.tau_max)
    }

    /// Resets the current threshold (clamped), e.g. to `ζ(p̂_1)`.
    pub fn set_tau(&mut self, tau: f64) {
        self.tau = self.project(tau);
    }

    /// `ŷ = sgn(τ − ζ)`, with `sgn(0) = −1`.
    pub fn decide(&self, zeta: f64) -> Label {
        if zeta < self.tau {
            Label::Anomalous
        } else {
            Label::Nominal
        }
    }

    /// `τ_{t+1} = Π(τ_t + η y 1{ŷ ≠ y})`.
    pub fn update_full(&self, y_hat: Label, y: Label) -> HedgeState {
        let mut next = self.clone();
        if y_hat != y {
            next.tau = self.project(self.tau + self.eta() * y.sign());
        }
        next.t += 1;
        next
    }

    /// Applies a label for an earlier decision `y_hat` without advancing time.
    ///
    /// Used when feedback arrives after the step it refers to; returns whether `τ` moved.
    pub fn apply_feedback(&mut self, y_hat: Label, y: Label) -> bool {
        let before = self.tau;
        if y_hat != y {
            self.tau = self.project(self.tau + self.eta() * y.sign());
        }
        self.tau != before
    }

    fn skip(&mut self) {
        self.t += 1;
    }

    /// Full feedback: the source must label every step.
    pub fn step_full<F: FeedbackSource + ?Sized>(&mut self, zeta: f64, source: &mut F) -> Result<HedgeStep> {
        let (t, tau, y_hat) = (self.t, self.tau, self.decide(zeta));
        let y = source
            .feedback(&FeedbackRequest { t, zeta, tau, y_hat, requested: true })?
            .ok_or_else(|| Error::Feedback(format!("no label at t = {t} under full feedback")))?;
        *self = self.update_full(y_hat, y);
        Ok(HedgeStep { t, zeta, tau, y_hat, queried: true, feedback: Some(y), tau_next: self.tau })
    }

    /// Label-efficient forecaster: queries with probability `1/(1 + |ζ − τ|)`.
    ///
    /// `coin(q)` must return `true` with probability `q`.
    pub fn step_label_efficient<C, F>(&mut self, zeta: f64, coin: &mut C, source: &mut F) -> Result<HedgeStep>
    where
        C: FnMut(f64) -> bool + ?Sized,
        F: FeedbackSource + ?Sized,
    {
        let (t, tau, y_hat) = (self.t, self.tau, self.decide(zeta));
        let queried = coin(query_probability(zeta, tau));
        let feedback =
            if queried { source.feedback(&FeedbackRequest { t, zeta, tau, y_hat, requested: true })? } else { None };
        match feedback {
            Some(y) => *self = self.update_full(y_hat, y),
            None => self.skip(),
        }
        Ok(HedgeStep { t, zeta, tau, y_hat, queried, feedback, tau_next: self.tau })
    }

    /// Arbitrary feedback: update only when a label happens to be supplied.
    pub fn step_arbitrary(&mut self, zeta: f64, feedback: Option<Label>) -> HedgeStep {
        let (t, tau, y_hat) = (self.t, self.tau, self.decide(zeta));
        match feedback {
            Some(y) => *self = self.update_full(y_hat, y),
            None => self.skip(),
        }
        HedgeStep { t, zeta, tau, y_hat, queried: false, feedback, tau_next: self.tau }
    }

    /// Arbitrary feedback drawn from a source that sees the decision first.
    pub fn step_with_source<F: FeedbackSource + ?Sized>(&mut self, zeta: f64, source: &mut F) -> Result<HedgeStep> {
        let (t, tau, y_hat) = (self.t, self.tau, self.decide(zeta));
        let feedback = source.feedback(&FeedbackRequest { t, zeta, tau, y_hat, requested: false })?;
        Ok(self.step_arbitrary(zeta, feedback))
    }
}

/// What a feedback source sees when asked for a label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackRequest {
    pub t: u64,
    pub zeta: f64,
    pub tau: f64,
    pub y_hat: Label,
    /// True when the forecaster explicitly asked for the label.
    pub requested: bool,
}

/// Supplier of ground-truth labels: a synthetic oracle or a human.
pub trait FeedbackSource {
    /// Returns the label for step `t`, or `None` when no feedback is given.
    fn feedback(&mut self, request: &FeedbackRequest) -> Result<Option<Label>>;
}

impl<F: FeedbackSource + ?Sized> FeedbackSource for &mut F {
    fn feedback(&mut self, request: &FeedbackRequest) -> Result<Option<Label>> {
        (**self).feedback(request)
    }
}

/// A label observed by the forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: u64,
    pub y: Label,
    pub requested: bool,
    pub provided: bool,
}

/// One forecaster step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HedgeStep {
    pub t: u64,
    pub zeta: f64,
    /// `τ_t`, the threshold the decision was made against.
    pub tau: f64,
    pub y_hat: Label,
    pub queried: bool,
    pub feedback: Option<Label>,
    /// `τ_{t+1}`.
    pub tau_next: f64,
}

impl HedgeStep {
    pub fn event(&self) -> Option<FeedbackEvent> {
        self.feedback.map(|y| FeedbackEvent { t: self.t, y, requested: self.queried, provided: !self.queried })
    }
}
