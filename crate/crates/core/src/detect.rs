//! The online detector: filter and forecaster advanced in lockstep.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::NoisyMirrorDescent;
use crate::hedge::{query_probability, FeedbackSource, HedgeState, HedgeStep, Label, ZetaTransform};
use crate::record::StreamRecord;

/// How the first threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauInit {
    /// `τ_1 = τ_min`
    #[default]
    Min,
    /// `τ_1 = ζ(p̂_1)`, clamped to the bounds.
    FirstZeta,
}

/// Which forecaster drives the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HedgeMode {
    /// A label after every step.
    Full,
    /// Random queries with probability `1/(1 + |ζ − τ|)`.
    LabelEfficient,
    /// Whatever labels the environment volunteers.
    Arbitrary,
}

#[derive(Debug, Clone)]
pub struct Detector {
    filter: NoisyMirrorDescent,
    hedge: HedgeState,
    zeta: ZetaTransform,
    tau_init: TauInit,
}

impl Detector {
    pub fn new(filter: NoisyMirrorDescent, hedge: HedgeState, zeta: ZetaTransform, tau_init: TauInit) -> Result<Self> {
        if filter.state().t() != hedge.t() {
            return Err(Error::InvalidHedge("filter and forecaster must start at the same timestep".into()));
        }
        Ok(Self { filter, hedge, zeta, tau_init })
    }

    pub fn filter(&self) -> &NoisyMirrorDescent {
        &self.filter
    }

    pub fn hedge(&self) -> &HedgeState {
        &self.hedge
    }

    pub fn zeta_transform(&self) -> ZetaTransform {
        self.zeta
    }

    /// The next timestep to be scored.
    pub fn t(&self) -> u64 {
        self.filter.state().t()
    }

    /// Scores `z_t` and decides `ŷ_t`; the threshold update waits for [`Detector::finish`].
    ///
    /// The belief uses `θ̂_t`, which depends only on `z_1, …, z_{t−1}`.
    pub fn score(&mut self, z: &[f64], x: Option<&[f64]>, y_true: Option<Label>) -> Result<StreamRecord> {
        if self.filter.state().t() != self.hedge.t() {
            return Err(Error::InvalidHedge(format!("step {} is still awaiting its threshold update", self.hedge.t())));
        }
        let model = self.filter.state().model();
        let h = self.filter.channel().unbiased_stat(model, z)?;
        let step = self.filter.step_with_stat(&h, x)?;
        let zeta = self.zeta.apply_log(step.log_belief);
        if self.hedge.t() == 1 && self.tau_init == TauInit::FirstZeta {
            self.hedge.set_tau(zeta);
        }
        Ok(StreamRecord {
            t: step.t,
            z: z.to_vec(),
            h,
            filtering_loss: step.filtering_loss,
            log_belief: step.log_belief,
            zeta,
            tau: self.hedge.tau(),
            y_hat: self.hedge.decide(zeta),
            feedback: None,
            queried: false,
            true_loss: step.true_loss,
            y_true,
        })
    }

    /// Probability with which the label-efficient forecaster queries a scored step.
    pub fn query_probability(&self, scored: &StreamRecord) -> f64 {
        query_probability(scored.zeta, scored.tau)
    }

    /// Completes a scored step with whatever feedback arrived for it.
    pub fn finish(&mut self, mut scored: StreamRecord, queried: bool, feedback: Option<Label>) -> Result<StreamRecord> {
        if scored.t != self.hedge.t() || self.filter.state().t() != self.hedge.t() + 1 {
            return Err(Error::InvalidHedge(format!("record t = {} is not the pending step", scored.t)));
        }
        self.hedge.step_arbitrary(scored.zeta, feedback);
        scored.queried = queried;
        scored.feedback = feedback;
        Ok(scored)
    }

    /// Applies feedback for an already finished step `ŷ`; returns whether `τ` moved.
    pub fn apply_late_feedback(&mut self, y_hat: Label, y: Label) -> bool {
        self.hedge.apply_feedback(y_hat, y)
    }

    /// Scores and updates in one go, drawing feedback from `source`.
    pub fn step<C, F>(
        &mut self,
        z: &[f64],
        x: Option<&[f64]>,
        y_true: Option<Label>,
        mode: HedgeMode,
        coin: &mut C,
        source: &mut F,
    ) -> Result<StreamRecord>
    where
        C: FnMut(f64) -> bool + ?Sized,
        F: FeedbackSource + ?Sized,
    {
        let mut rec = self.score(z, x, y_true)?;
        let step: HedgeStep = match mode {
            HedgeMode::Full => self.hedge.step_full(rec.zeta, source)?,
            HedgeMode::LabelEfficient => self.hedge.step_label_efficient(rec.zeta, coin, source)?,
            HedgeMode::Arbitrary => self.hedge.step_with_source(rec.zeta, source)?,
        };
        debug_assert_eq!(step.y_hat, rec.y_hat);
        rec.queried = step.queried;
        rec.feedback = step.feedback;
        Ok(rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{FamilyModel, FeasibleBox};
    use crate::filter::{FilterState, StepSchedule};
    use crate::hedge::{FeedbackRequest, LearningRate};
    use crate::noise::NoisyChannel;

    fn detector(tau_init: TauInit) -> Detector {
        let m = FamilyModel::bernoulli(2).unwrap();
        let bx = m.certify_box(&FeasibleBox::uniform(2, -3.0, 3.0).unwrap()).unwrap();
        let state = FilterState::new(m, bx, StepSchedule::InverseSqrtT, None).unwrap();
        let filter = NoisyMirrorDescent::new(state, NoisyChannel::Identity).unwrap();
        let hedge = HedgeState::new(-3.0, 0.0, LearningRate::Fixed(0.5), None).unwrap();
        Detector::new(filter, hedge, ZetaTransform::log(1.0).unwrap(), tau_init).unwrap()
    }

    struct Fixed(Option<Label>);

    impl FeedbackSource for Fixed {
        fn feedback(&mut self, _: &FeedbackRequest) -> Result<Option<Label>> {
            Ok(self.0)
        }
    }

    #[test]
    fn first_belief_is_the_midpoint_density() {
        let mut d = detector(TauInit::Min);
        let rec = d.score(&[1.0, 0.0], None, None).unwrap();
        assert_eq!(rec.t, 1);
        assert!((rec.log_belief + 2.0 * 2f64.ln()).abs() < 1e-12);
        assert_eq!(rec.tau, -3.0);
        assert_eq!(rec.y_hat, Label::Nominal);
    }

    #[test]
    fn two_phase_matches_one_shot() {
        let zs = [[1.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        let mut a = detector(TauInit::FirstZeta);
        let mut b = a.clone();
        for z in &zs {
            let one =
                a.step(z, None, None, HedgeMode::Full, &mut |_| true, &mut Fixed(Some(Label::Anomalous))).unwrap();
            let scored = b.score(z, None, None).unwrap();
            let two = b.finish(scored, true, Some(Label::Anomalous)).unwrap();
            assert_eq!(one, two);
        }
        assert_eq!(a.hedge(), b.hedge());
        assert_eq!(a.t(), 6);
    }

    #[test]
    fn first_zeta_initialization() {
        let mut d = detector(TauInit::FirstZeta);
        let rec = d.score(&[1.0, 0.0], None, None).unwrap();
        assert!((rec.tau - rec.zeta).abs() < 1e-15);
        assert_eq!(rec.y_hat, Label::Nominal);
    }

    #[test]
    fn out_of_order_calls_are_rejected() {
        let mut d = detector(TauInit::Min);
        let rec = d.score(&[1.0, 0.0], None, None).unwrap();
        assert!(d.score(&[1.0, 0.0], None, None).is_err());
        let mut stale = rec.clone();
        stale.t = 7;
        assert!(d.finish(stale, false, None).is_err());
        d.finish(rec, false, None).unwrap();
        assert!(d.score(&[1.0], None, None).is_err());
        assert_eq!(d.t(), 2);
    }
}
