use std::fmt;

use serde::{Deserialize, Serialize};

use super::ledger::RegretLedger;
use crate::error::{Error, Result};
use crate::hedge::Label;
use crate::record::StreamRecord;

/// Detection quality of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub horizon: usize,
    pub total_errors: usize,
    /// `ŷ = +1`, `y = −1`
    pub false_alarms: usize,
    /// `ŷ = −1`, `y = +1`
    pub detection_misses: usize,
    /// Labels explicitly requested by the forecaster.
    pub queries: usize,
    /// Labels received, requested or not.
    pub feedback: usize,
    /// Best threshold in hindsight and its error count, when computed.
    pub static_threshold: Option<(f64, usize)>,
    pub regret: Vec<f64>,
    pub bound: Vec<f64>,
}

/// Scores a run's records against the truth, attaching the ledger's series if given.
pub fn evaluate_run(steps: &[StreamRecord], truth: &[Label], ledger: Option<&RegretLedger>) -> Result<RunReport> {
    if steps.len() != truth.len() {
        return Err(Error::LengthMismatch(format!("{} forecaster steps for {} labels", steps.len(), truth.len())));
    }
    if let Some(l) = ledger {
        if l.len() != steps.len() {
            return Err(Error::LengthMismatch(format!("ledger has {} rows for {} steps", l.len(), steps.len())));
        }
    }
    let mut report = RunReport { horizon: steps.len(), ..RunReport::default() };
    for (s, &y) in steps.iter().zip(truth) {
        match (s.y_hat, y) {
            (Label::Anomalous, Label::Nominal) => report.false_alarms += 1,
            (Label::Nominal, Label::Anomalous) => report.detection_misses += 1,
            _ => {}
        }
        report.queries += usize::from(s.queried);
        report.feedback += usize::from(s.feedback.is_some());
    }
    report.total_errors = report.false_alarms + report.detection_misses;
    if let Some(l) = ledger {
        report.regret = l.regret.clone();
        report.bound = l.bound.clone();
    }
    Ok(report)
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "steps            {}", self.horizon)?;
        writeln!(f, "total errors     {}", self.total_errors)?;
        writeln!(f, "false alarms     {}", self.false_alarms)?;
        writeln!(f, "detection misses {}", self.detection_misses)?;
        writeln!(f, "queries          {}", self.queries)?;
        writeln!(f, "feedback labels  {}", self.feedback)?;
        if let Some((tau, errors)) = self.static_threshold {
            writeln!(f, "best static tau  {tau} ({errors} errors)")?;
        }
        if let (Some(r), Some(b)) = (self.regret.last(), self.bound.last()) {
            let violations = self.regret.iter().zip(&self.bound).filter(|(r, b)| r > b).count();
            writeln!(f, "final regret     {r:.4}")?;
            writeln!(f, "final bound      {b:.4}")?;
            writeln!(f, "bound violations {violations}")?;
        }
        Ok(())
    }
}
