use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{seeded_rng, RngPurpose};
use crate::error::{Error, Result};
use crate::hedge::{FeedbackRequest, FeedbackSource, Label};

/// Feedback policies of a simulated end user.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OracleKind {
    /// Answers every explicit query truthfully, volunteers nothing.
    TruthOnQuery,
    /// Labels every declared anomaly, and a missed anomaly with probability `miss_prob`.
    OnDeclared { miss_prob: f64 },
    /// Labels every step.
    Always,
}

/// A feedback source backed by ground-truth labels.
#[derive(Debug, Clone)]
pub struct SyntheticOracle {
    kind: OracleKind,
    labels: Vec<Label>,
    rng: ChaCha8Rng,
}

impl SyntheticOracle {
    pub fn new(kind: OracleKind, labels: Vec<Label>, seed: u64) -> Result<Self> {
        if let OracleKind::OnDeclared { miss_prob } = kind {
            if !(0.0..=1.0).contains(&miss_prob) {
                return Err(Error::Feedback(format!("miss probability {miss_prob} not in [0, 1]")));
            }
        }
        Ok(Self { kind, labels, rng: seeded_rng(seed, RngPurpose::Oracle) })
    }

    pub fn kind(&self) -> OracleKind {
        self.kind
    }
}

impl FeedbackSource for SyntheticOracle {
    fn feedback(&mut self, r: &FeedbackRequest) -> Result<Option<Label>> {
        let y =
            *r.t.checked_sub(1)
                .and_then(|i| self.labels.get(i as usize))
                .ok_or_else(|| Error::Feedback(format!("no ground truth for t = {}", r.t)))?;
        Ok(match self.kind {
            OracleKind::Always => Some(y),
            OracleKind::TruthOnQuery => r.requested.then_some(y),
            OracleKind::OnDeclared { miss_prob } => {
                // Flagged steps are always reviewed; a missed anomaly only sometimes.
                let reviewed = r.y_hat.is_anomalous() || (y.is_anomalous() && self.rng.random::<f64>() < miss_prob);
                reviewed.then_some(y)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hedge::{HedgeState, LearningRate};

    fn request(t: u64, y_hat: Label, requested: bool) -> FeedbackRequest {
        FeedbackRequest { t, zeta: 0.0, tau: 0.0, y_hat, requested }
    }

    #[test]
    fn always_oracle_reproduces_full_feedback() {
        let labels: Vec<Label> = (0..50).map(|k| if k % 7 < 2 { Label::Anomalous } else { Label::Nominal }).collect();
        let zetas: Vec<f64> = (0..50).map(|k| ((k * 37) % 23) as f64 / 23.0).collect();
        let mut full = HedgeState::new(0.0, 1.0, LearningRate::Fixed(0.1), None).unwrap();
        let mut arb = full.clone();
        let mut a = SyntheticOracle::new(OracleKind::Always, labels.clone(), 0).unwrap();
        let mut b = SyntheticOracle::new(OracleKind::Always, labels, 0).unwrap();
        for &z in &zetas {
            let x = full.step_full(z, &mut a).unwrap();
            let y = arb.step_with_source(z, &mut b).unwrap();
            assert_eq!(x.tau_next, y.tau_next);
        }
    }

    #[test]
    fn zero_miss_probability_only_labels_declared() {
        let labels = vec![Label::Anomalous, Label::Anomalous, Label::Nominal];
        let mut o = SyntheticOracle::new(OracleKind::OnDeclared { miss_prob: 0.0 }, labels, 1).unwrap();
        assert_eq!(o.feedback(&request(1, Label::Anomalous, false)).unwrap(), Some(Label::Anomalous));
        assert_eq!(o.feedback(&request(2, Label::Nominal, false)).unwrap(), None);
        assert_eq!(o.feedback(&request(3, Label::Nominal, false)).unwrap(), None);
        assert_eq!(o.feedback(&request(3, Label::Anomalous, false)).unwrap(), Some(Label::Nominal));
    }

    #[test]
    fn miss_probability_rate() {
        let n = 10_000u64;
        let mut o =
            SyntheticOracle::new(OracleKind::OnDeclared { miss_prob: 0.2 }, vec![Label::Anomalous; n as usize], 5)
                .unwrap();
        let given = (1..=n).filter(|&t| o.feedback(&request(t, Label::Nominal, false)).unwrap().is_some()).count();
        let frac = given as f64 / n as f64;
        assert!((frac - 0.2).abs() < 0.02, "{frac}");
    }

    #[test]
    fn truth_on_query_waits_to_be_asked() {
        let mut o = SyntheticOracle::new(OracleKind::TruthOnQuery, vec![Label::Nominal], 0).unwrap();
        assert_eq!(o.feedback(&request(1, Label::Anomalous, false)).unwrap(), None);
        assert_eq!(o.feedback(&request(1, Label::Anomalous, true)).unwrap(), Some(Label::Nominal));
        assert!(o.feedback(&request(2, Label::Anomalous, true)).is_err());
    }
}
