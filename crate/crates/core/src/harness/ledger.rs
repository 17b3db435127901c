use std::io::Write;

use serde::{Deserialize, Serialize};

use super::bounds::{static_regret_bound, tracking_regret_bound, RegretConstants};
use super::comparator::{PiecewiseComparator, PrefixBestTheta};
use crate::error::{Error, Result};
use crate::expfam::{FamilyModel, FeasibleBox};
use crate::filter::{filtering_loss, FilterStep};

/// Cumulative filtering-loss regret of a run next to its theoretical bound, at every `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretLedger {
    pub constants: RegretConstants,
    /// `K(z^T)`
    pub stat_bound: f64,
    pub online_loss: f64,
    pub comparator_loss: f64,
    /// `regret[t-1]` is the regret over the first `t` steps.
    pub regret: Vec<f64>,
    pub bound: Vec<f64>,
}

fn check_lengths(steps: &[FilterStep], stats: &[Vec<f64>]) -> Result<()> {
    if steps.len() != stats.len() {
        return Err(Error::LengthMismatch(format!("{} filter steps for {} statistics", steps.len(), stats.len())));
    }
    Ok(())
}

impl RegretLedger {
    /// Against the best static parameter of each prefix, for the `1/t` schedule.
    pub fn against_static(
        model: &FamilyModel,
        bx: &FeasibleBox,
        theta_init: &[f64],
        steps: &[FilterStep],
        stats: &[Vec<f64>],
    ) -> Result<Self> {
        check_lengths(steps, stats)?;
        let constants = RegretConstants::from_box(bx)?;
        let mut prefix = PrefixBestTheta::new(model.dim());
        let mut ledger = Self::empty(constants, steps.len());
        for (step, h) in steps.iter().zip(stats) {
            prefix.push(h)?;
            let (theta_star, comparator_loss) = prefix.best(model, bx)?;
            ledger.online_loss += step.filtering_loss;
            ledger.comparator_loss = comparator_loss;
            ledger.stat_bound = step.stat_bound;
            let initial_kl = model.kl_divergence(theta_init, &theta_star)?;
            ledger.regret.push(ledger.online_loss - comparator_loss);
            ledger.bound.push(static_regret_bound(&constants, initial_kl, step.stat_bound, step.t));
        }
        Ok(ledger)
    }

    /// Against a piecewise-constant comparator, for the `1/√t` schedule.
    pub fn against_piecewise(
        model: &FamilyModel,
        bx: &FeasibleBox,
        theta_init: &[f64],
        steps: &[FilterStep],
        stats: &[Vec<f64>],
        comparator: &PiecewiseComparator,
    ) -> Result<Self> {
        check_lengths(steps, stats)?;
        let constants = RegretConstants::from_box(bx)?;
        let initial_kl = model.kl_divergence(theta_init, comparator.theta_at(1))?;
        let mut ledger = Self::empty(constants, steps.len());
        for (step, h) in steps.iter().zip(stats) {
            ledger.online_loss += step.filtering_loss;
            ledger.comparator_loss += filtering_loss(model, comparator.theta_at(step.t), h)?;
            ledger.stat_bound = step.stat_bound;
            ledger.regret.push(ledger.online_loss - ledger.comparator_loss);
            ledger.bound.push(tracking_regret_bound(
                &constants,
                initial_kl,
                step.stat_bound,
                comparator.variation_through(step.t),
                step.t,
            ));
        }
        Ok(ledger)
    }

    fn empty(constants: RegretConstants, capacity: usize) -> Self {
        Self {
            constants,
            stat_bound: 0.0,
            online_loss: 0.0,
            comparator_loss: 0.0,
            regret: Vec::with_capacity(capacity),
            bound: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.regret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regret.is_empty()
    }

    /// Timesteps where the regret exceeds the bound.
    pub fn violations(&self) -> Vec<u64> {
        self.regret.iter().zip(&self.bound).enumerate().filter(|(_, (r, b))| r > b).map(|(i, _)| i as u64 + 1).collect()
    }

    /// Smallest `bound − regret` over the run.
    pub fn min_slack(&self) -> f64 {
        self.regret.iter().zip(&self.bound).map(|(r, b)| b - r).fold(f64::INFINITY, f64::min)
    }

    /// CSV with header `t,regret,bound`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,regret,bound")?;
        for (i, (r, b)) in self.regret.iter().zip(&self.bound).enumerate() {
            writeln!(w, "{},{},{}", i + 1, r, b)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::{run_filter, StepSchedule};
    use crate::noise::NoisyChannel;

    #[test]
    fn static_ledger_on_a_short_stream() {
        let m = FamilyModel::bernoulli(2).unwrap();
        let bx = m.certify_box(&FeasibleBox::uniform(2, -2.0, 2.0).unwrap()).unwrap();
        let xs: Vec<Vec<f64>> = (0..40).map(|k| vec![f64::from(k % 3 == 0), f64::from(k % 2 == 0)]).collect();
        let trace = run_filter(
            &m,
            &bx,
            NoisyChannel::Identity,
            StepSchedule::InverseT,
            None,
            xs.iter().map(|x| (x.as_slice(), None)),
            false,
        )
        .unwrap();
        let ledger = RegretLedger::against_static(&m, &bx, &bx.midpoint(), &trace.steps, &xs).unwrap();
        assert_eq!(ledger.len(), 40);
        assert!(ledger.violations().is_empty());
        let mut csv = Vec::new();
        ledger.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("t,regret,bound\n1,"));
        assert_eq!(text.lines().count(), 41);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let m = FamilyModel::bernoulli(1).unwrap();
        let bx = m.certify_box(&FeasibleBox::uniform(1, -2.0, 2.0).unwrap()).unwrap();
        assert!(RegretLedger::against_static(&m, &bx, &[0.0], &[], &[vec![1.0]]).is_err());
    }
}
