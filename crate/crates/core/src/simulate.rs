//! Synthetic end-to-end runs: generate, corrupt, filter, hedge, evaluate.

use rand::Rng;

use crate::config::{FeedbackMode, RunConfig};
use crate::error::{Error, Result};
use crate::filter::{FilterStep, StepSchedule};
use crate::harness::{
    best_static_tau, corrupt_stream, evaluate_run, generate_stream, seeded_rng, OracleKind, PiecewiseComparator,
    PiecewiseSpec, RegretLedger, RngPurpose, RunReport, SyntheticOracle,
};
use crate::record::StreamRecord;

#[derive(Debug, Clone)]
pub struct Simulation {
    pub spec: PiecewiseSpec,
    pub records: Vec<StreamRecord>,
    pub ledger: RegretLedger,
    pub report: RunReport,
}

impl Simulation {
    pub fn zetas(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.zeta).collect()
    }

    pub fn filtering_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.filtering_loss).collect()
    }

    /// Log-loss of the clean observations under the running belief.
    pub fn true_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.true_loss.unwrap_or(f64::NAN)).collect()
    }
}

fn oracle_kind(config: &RunConfig) -> Result<OracleKind> {
    match config.mode {
        FeedbackMode::Full => Ok(OracleKind::Always),
        FeedbackMode::Label => Ok(OracleKind::TruthOnQuery),
        FeedbackMode::Arbitrary => Ok(OracleKind::OnDeclared { miss_prob: config.miss_prob }),
        FeedbackMode::Service => {
            Err(Error::InvalidSpec("service mode takes feedback from the HTTP service, not a simulated user".into()))
        }
    }
}

/// Runs a generator-backed configuration with a simulated user; deterministic given the seed.
pub fn simulate(config: &RunConfig) -> Result<Simulation> {
    let spec = config
        .piecewise_spec()?
        .ok_or_else(|| Error::InvalidSpec("simulation needs the generator data source".into()))?;
    let clean = generate_stream(&spec)?;
    let zs = corrupt_stream(&config.model, &config.channel, &clean.xs, config.seed)?;

    let mut detector = config.detector()?;
    let theta_init = detector.filter().state().theta_hat().to_vec();
    let mut oracle = SyntheticOracle::new(oracle_kind(config)?, clean.labels.clone(), config.seed)?;
    let mut coins = seeded_rng(config.seed, RngPurpose::QueryCoins);
    let mut coin = |q: f64| coins.random::<f64>() < q;
    let mode = config.hedge_mode();

    let mut records = Vec::with_capacity(zs.len());
    for ((z, x), &y) in zs.iter().zip(&clean.xs).zip(&clean.labels) {
        records.push(detector.step(z, Some(x), Some(y), mode, &mut coin, &mut oracle)?);
    }

    let steps: Vec<FilterStep> = records
        .iter()
        .scan(0.0f64, |k, r| {
            *k = k.max(0.5 * crate::expfam::norm(&r.h));
            Some(FilterStep {
                t: r.t,
                filtering_loss: r.filtering_loss,
                true_loss: r.true_loss,
                log_belief: r.log_belief,
                stat_bound: *k,
            })
        })
        .collect();
    let stats: Vec<Vec<f64>> = records.iter().map(|r| r.h.clone()).collect();
    let bx = &config.feasible_box;
    let ledger = match config.schedule {
        StepSchedule::InverseT => RegretLedger::against_static(&config.model, bx, &theta_init, &steps, &stats)?,
        _ => {
            let comparator = PiecewiseComparator::fit(&config.model, bx, &stats, &spec.segment_starts())?;
            RegretLedger::against_piecewise(&config.model, bx, &theta_init, &steps, &stats, &comparator)?
        }
    };

    let mut report = evaluate_run(&records, &clean.labels, Some(&ledger))?;
    let zetas: Vec<f64> = records.iter().map(|r| r.zeta).collect();
    report.static_threshold = Some(best_static_tau(&zetas, &clean.labels, config.hedge.tau_min, config.hedge.tau_max)?);
    Ok(Simulation { spec, records, ledger, report })
}
