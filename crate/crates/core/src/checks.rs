//! The acceptance battery: each check recomputes its reference values with an
//! independent oracle and reports pass or fail with a one-line summary.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::RunConfig;
use crate::error::Result;
use crate::expfam::{FamilyModel, FeasibleBox};
use crate::filter::{bregman_project, filtering_loss, run_filter, StepSchedule};
use crate::harness::{
    best_static_tau, corrupt_stream, count_mistakes, generate_stream, mistake_bound, sparse_feedback_mistake_bound,
    OracleKind, PiecewiseComparator, PiecewiseSpec, RegretLedger, SyntheticOracle,
};
use crate::hedge::{hinge_loss, FeedbackRequest, FeedbackSource, HedgeState, Label};
use crate::noise::NoisyChannel;
use crate::simulate::{simulate, Simulation};

/// Sizes of the battery.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scale {
    pub identity_samples: usize,
    pub roundtrip_samples: usize,
    pub gradient_samples: usize,
    pub regret_seeds: u64,
    pub regret_horizon: u64,
    pub martingale_runs: usize,
    pub fuzz_sequences: usize,
    pub fuzz_horizons: [u64; 3],
    pub tau_grid: usize,
    pub mc_sequences: usize,
    pub mc_realizations: usize,
    pub experiment_seeds: u64,
    pub experiment_dim: usize,
    pub oracle_instances: usize,
}

impl Scale {
    /// The sizes the acceptance criteria are stated at.
    pub fn full() -> Self {
        Self {
            identity_samples: 10_000,
            roundtrip_samples: 1000,
            gradient_samples: 100,
            regret_seeds: 50,
            regret_horizon: 2000,
            martingale_runs: 200,
            fuzz_sequences: 500,
            fuzz_horizons: [64, 256, 1024],
            tau_grid: 101,
            mc_sequences: 10,
            mc_realizations: 500,
            experiment_seeds: 50,
            experiment_dim: 500,
            oracle_instances: 1000,
        }
    }

    /// A quick pass over the same checks.
    pub fn reduced() -> Self {
        Self {
            identity_samples: 2000,
            roundtrip_samples: 200,
            gradient_samples: 50,
            regret_seeds: 10,
            regret_horizon: 1000,
            martingale_runs: 200,
            fuzz_sequences: 100,
            fuzz_horizons: [64, 256, 1024],
            tau_grid: 101,
            mc_sequences: 3,
            mc_realizations: 500,
            experiment_seeds: 10,
            experiment_dim: 500,
            oracle_instances: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:>2} {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = match f() {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckOutcome { id, name, passed, detail, elapsed: start.elapsed() }
}

/// Number of checks in the battery.
pub const CHECK_COUNT: u8 = 12;

/// Runs one check by number.
pub fn run_check(id: u8, scale: &Scale) -> Option<CheckOutcome> {
    Some(match id {
        1 => timed(1, "strong-convexity identity", || strong_convexity_identity(scale)),
        2 => timed(2, "duality round trip and gradient", || duality_and_gradient(scale)),
        3 => timed(3, "static regret bound", || static_regret(scale)),
        4 => timed(4, "tracking regret bound", || tracking_regret(scale)),
        5 => timed(5, "filtering loss is unbiased", || martingale(scale)),
        6 => timed(6, "full-feedback mistake bound", || full_feedback_mistakes(scale)),
        7 => timed(7, "sparse-feedback mistake bound", || sparse_feedback_mistakes(scale)),
        8 => timed(8, "label-efficient expected mistakes", || label_efficient_mistakes(scale)),
        9 => timed(9, "drifting-source filtering", || drifting_source(scale)),
        10 => timed(10, "adaptive threshold beats static", || adaptive_vs_static(scale)),
        11 => timed(11, "forecaster couplings", || couplings(scale)),
        12 => timed(12, "oracle equivalences", || oracle_equivalences(scale)),
        _ => return None,
    })
}

pub fn run_all(scale: &Scale) -> Vec<CheckOutcome> {
    (1..=CHECK_COUNT).filter_map(|id| run_check(id, scale)).collect()
}

// ---------------------------------------------------------------------------
// Independent reference computations.

fn log_sum_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + values.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Every point of a small discrete sample space with its sufficient statistic.
fn enumerate(model: &FamilyModel) -> Vec<(Vec<f64>, Vec<f64>)> {
    match model {
        FamilyModel::BernoulliProduct { dim } => (0..1usize << dim)
            .map(|mask| {
                let x: Vec<f64> = (0..*dim).map(|i| f64::from((mask >> i & 1) as u8)).collect();
                (x.clone(), x)
            })
            .collect(),
        FamilyModel::Ising(g) => (0..1usize << g.vertices())
            .map(|mask| {
                let s: Vec<f64> = (0..g.vertices()).map(|v| if mask >> v & 1 == 1 { 1.0 } else { -1.0 }).collect();
                let mut phi = s.clone();
                phi.extend(g.edges().iter().map(|&(a, b)| s[a] * s[b]));
                (s, phi)
            })
            .collect(),
        FamilyModel::GaussianUnitVar { .. } => Vec::new(),
    }
}

fn brute_log_weights(space: &[(Vec<f64>, Vec<f64>)], theta: &[f64]) -> Vec<f64> {
    space.iter().map(|(_, phi)| phi.iter().zip(theta).map(|(a, b)| a * b).sum()).collect()
}

/// `Σ_x p_1(x) log(p_1(x) / p_2(x))` by enumeration.
fn brute_kl(space: &[(Vec<f64>, Vec<f64>)], theta1: &[f64], theta2: &[f64]) -> f64 {
    let w1 = brute_log_weights(space, theta1);
    let w2 = brute_log_weights(space, theta2);
    let (z1, z2) = (log_sum_exp(&w1), log_sum_exp(&w2));
    w1.iter().zip(&w2).map(|(a, b)| (a - z1).exp() * ((a - z1) - (b - z2))).sum()
}

fn brute_log_partition(space: &[(Vec<f64>, Vec<f64>)], theta: &[f64]) -> f64 {
    log_sum_exp(&brute_log_weights(space, theta))
}

/// Minimizer of a unimodal `f` on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - r * (hi - lo);
    let mut b = lo + r * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    while hi - lo > 1e-12 {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - r * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + r * (hi - lo);
            fb = f(b);
        }
    }
    0.5 * (lo + hi)
}

fn random_theta(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    (0..dim).map(|_| rng.random_range(-radius..=radius)).collect()
}

fn random_ising(rng: &mut ChaCha8Rng, max_vertices: usize) -> FamilyModel {
    let v = rng.random_range(2..=max_vertices);
    let edges: Vec<(usize, usize)> =
        (0..v).flat_map(|a| (a + 1..v).map(move |b| (a, b))).filter(|_| rng.random_bool(0.6)).collect();
    FamilyModel::ising(v, edges).expect("valid random graph")
}

fn random_family(rng: &mut ChaCha8Rng) -> FamilyModel {
    match rng.random_range(0..3) {
        0 => FamilyModel::bernoulli(rng.random_range(1..=8)).expect("positive dim"),
        1 => FamilyModel::gaussian(rng.random_range(1..=8)).expect("positive dim"),
        _ => random_ising(rng, 4),
    }
}

// ---------------------------------------------------------------------------
// 1, 2: exponential-family identities.

fn strong_convexity_identity(scale: &Scale) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..scale.identity_samples {
        let model = random_family(&mut rng);
        let d = model.dim();
        let theta = random_theta(&mut rng, d, 4.0);
        let theta2 = random_theta(&mut rng, d, 4.0);
        let h: Vec<f64> = (0..d)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                2.0 * e
            })
            .collect();
        let lhs = filtering_loss(&model, &theta, &h)? - filtering_loss(&model, &theta2, &h)?;
        let grad2 = model.grad_log_partition(&theta2)?;
        let inner: f64 =
            grad2.iter().zip(&h).zip(theta.iter().zip(&theta2)).map(|((g, hv), (a, b))| (g - hv) * (a - b)).sum();
        let kl = model.kl_divergence(&theta2, &theta)?;
        worst = worst.max((lhs - inner - kl).abs() / (1.0 + kl.abs()));
    }
    Ok((worst <= 1e-8, format!("{} triples, worst scaled residual {worst:.2e} (limit 1e-8)", scale.identity_samples)))
}

fn duality_and_gradient(scale: &Scale) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let families = [
        FamilyModel::bernoulli(6)?,
        FamilyModel::gaussian(6)?,
        FamilyModel::ising(4, vec![(0, 1), (1, 2), (2, 3), (0, 3), (0, 2)])?,
    ];
    let mut worst_roundtrip: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for model in &families {
        let d = model.dim();
        for _ in 0..scale.roundtrip_samples {
            let theta = random_theta(&mut rng, d, 2.0);
            let back = model.inverse_grad(&model.grad_log_partition(&theta)?)?;
            let err = back.iter().zip(&theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst_roundtrip = worst_roundtrip.max(err);
        }
        for _ in 0..scale.gradient_samples {
            let theta = random_theta(&mut rng, d, 2.0);
            let grad = model.grad_log_partition(&theta)?;
            let step = 1e-5;
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..d {
                let mut up = theta.clone();
                let mut down = theta.clone();
                up[i] += step;
                down[i] -= step;
                let fd = (model.log_partition(&up)? - model.log_partition(&down)?) / (2.0 * step);
                num += (fd - grad[i]).powi(2);
                den += grad[i].powi(2);
            }
            worst_grad = worst_grad.max(num.sqrt() / den.sqrt().max(1e-12));
        }
    }
    Ok((
        worst_roundtrip <= 1e-8 && worst_grad <= 1e-6,
        format!("round trip max error {worst_roundtrip:.2e} (limit 1e-8), gradient relative error {worst_grad:.2e} (limit 1e-6)"),
    ))
}

// ---------------------------------------------------------------------------
// 3, 4, 5: filter regret and unbiasedness.

struct FilterRun {
    model: FamilyModel,
    bx: FeasibleBox,
    spec: PiecewiseSpec,
    xs: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    steps: Vec<crate::filter::FilterStep>,
}

fn filter_run(
    spec: PiecewiseSpec,
    channel: NoisyChannel,
    schedule: StepSchedule,
    noise_seed: u64,
) -> Result<FilterRun> {
    let model = spec.model()?;
    let bx = model.certify_box(&FeasibleBox::uniform(spec.dim, -3.0, 3.0)?)?;
    let clean = generate_stream(&spec)?;
    let zs = corrupt_stream(&model, &channel, &clean.xs, noise_seed)?;
    let hs: Vec<Vec<f64>> = zs.iter().map(|z| channel.unbiased_stat(&model, z)).collect::<Result<_>>()?;
    let trace = run_filter(
        &model,
        &bx,
        channel,
        schedule,
        None,
        zs.iter().zip(&clean.xs).map(|(z, x)| (z.as_slice(), Some(x.as_slice()))),
        false,
    )?;
    Ok(FilterRun { model, bx, spec, xs: clean.xs, hs, steps: trace.steps })
}

fn regret_channels() -> [NoisyChannel; 2] {
    [NoisyChannel::Identity, NoisyChannel::Bsc { p: 0.1 }]
}

fn static_regret(scale: &Scale) -> Result<(bool, String)> {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for channel in regret_channels() {
        for seed in 0..scale.regret_seeds {
            let spec = PiecewiseSpec::random(5, scale.regret_horizon, &[], 0, 3000 + seed, (0.05, 0.95))?;
            let run = filter_run(spec, channel, StepSchedule::InverseT, seed)?;
            let ledger = RegretLedger::against_static(&run.model, &run.bx, &run.bx.midpoint(), &run.steps, &run.hs)?;
            violations += ledger.violations().len();
            min_slack = min_slack.min(ledger.min_slack());
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} runs x {} steps, {violations} violations, smallest slack {min_slack:.3}",
            2 * scale.regret_seeds,
            scale.regret_horizon
        ),
    ))
}

fn three_jump_spec(dim: usize, horizon: u64, seed: u64) -> Result<PiecewiseSpec> {
    let q = horizon / 4;
    PiecewiseSpec::random(dim, horizon, &[q, 2 * q, 3 * q], 0, seed, (0.05, 0.95))
}

fn tracking_regret(scale: &Scale) -> Result<(bool, String)> {
    let mut violations = 0;
    let mut min_slack = f64::INFINITY;
    for channel in regret_channels() {
        for seed in 0..scale.regret_seeds {
            let spec = three_jump_spec(5, scale.regret_horizon, 4000 + seed)?;
            let run = filter_run(spec, channel, StepSchedule::InverseSqrtT, seed)?;
            let comparator = PiecewiseComparator::fit(&run.model, &run.bx, &run.hs, &run.spec.segment_starts())?;
            let ledger = RegretLedger::against_piecewise(
                &run.model,
                &run.bx,
                &run.bx.midpoint(),
                &run.steps,
                &run.hs,
                &comparator,
            )?;
            violations += ledger.violations().len();
            min_slack = min_slack.min(ledger.min_slack());
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} runs x {} steps, {violations} violations, smallest slack {min_slack:.3}",
            2 * scale.regret_seeds,
            scale.regret_horizon
        ),
    ))
}

fn martingale(scale: &Scale) -> Result<(bool, String)> {
    let spec = three_jump_spec(5, 500, 5000)?;
    let channel = NoisyChannel::Bsc { p: 0.1 };
    let mut gaps = Vec::with_capacity(scale.martingale_runs);
    for r in 0..scale.martingale_runs {
        let run = filter_run(spec.clone(), channel, StepSchedule::InverseSqrtT, 10_000 + r as u64)?;
        let noisy: f64 = run.steps.iter().map(|s| s.filtering_loss).sum();
        let clean: f64 = run.steps.iter().map(|s| s.true_loss.unwrap_or(f64::NAN)).sum();
        debug_assert_eq!(run.xs.len(), run.steps.len());
        gaps.push(noisy - clean);
    }
    let n = gaps.len() as f64;
    let mean = gaps.iter().sum::<f64>() / n;
    let std = (gaps.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let limit = 4.0 * std / n.sqrt();
    Ok((mean.abs() <= limit, format!("{} realizations, |mean gap| {:.3} vs limit {limit:.3}", gaps.len(), mean.abs())))
}

// ---------------------------------------------------------------------------
// 6, 7, 8, 11: threshold forecasters.

const FUZZ_KINDS: u64 = 5;

/// Draws `(ζ_t, y_t)` given the forecaster's current state; some kinds adapt to it.
fn adversary(kind: u64, state: &HedgeState, rng: &mut ChaCha8Rng) -> (f64, Label) {
    let coin = |rng: &mut ChaCha8Rng| if rng.random_bool(0.5) { Label::Anomalous } else { Label::Nominal };
    match kind % FUZZ_KINDS {
        0 => (rng.random_range(-0.5..1.5), coin(rng)),
        // Sit exactly on the threshold and call it anomalous: a miss every step.
        1 => (state.tau(), Label::Anomalous),
        // Jitter around the threshold and contradict the decision.
        2 => {
            let z = state.tau() + rng.random_range(-1.0..1.0) * state.eta();
            (z, state.decide(z).flip())
        }
        3 => {
            let z: f64 = rng.random_range(0.0..1.0);
            let y = if z < 0.3 { Label::Anomalous } else { Label::Nominal };
            (z, if rng.random_bool(0.2) { y.flip() } else { y })
        }
        _ => (state.tau() + rng.random_range(-2.0..2.0), coin(rng)),
    }
}

fn tau_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 / (n - 1) as f64).collect()
}

fn full_feedback_mistakes(scale: &Scale) -> Result<(bool, String)> {
    let grid = tau_grid(scale.tau_grid);
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for &horizon in &scale.fuzz_horizons {
        for k in 0..scale.fuzz_sequences as u64 {
            let mut state = HedgeState::for_horizon(0.0, 1.0, horizon)?;
            let mut zetas = Vec::with_capacity(horizon as usize);
            let mut labels = Vec::with_capacity(horizon as usize);
            let mut mistakes = 0usize;
            for _ in 0..horizon {
                let (z, y) = adversary(k, &state, &mut rng);
                let y_hat = state.decide(z);
                mistakes += usize::from(y_hat != y);
                state = state.update_full(y_hat, y);
                zetas.push(z);
                labels.push(y);
            }
            for &tau in &grid {
                let hinge: f64 = zetas.iter().zip(&labels).map(|(&z, &y)| hinge_loss(tau, z, y)).sum();
                let slack = hinge + mistake_bound(horizon) - mistakes as f64;
                min_slack = min_slack.min(slack);
                violations += usize::from(slack < 0.0);
            }
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} sequences x {} thresholds, {violations} violations, smallest slack {min_slack:.3}",
            scale.fuzz_sequences * 3,
            grid.len()
        ),
    ))
}

/// Whether the environment volunteers a label at this step.
fn volunteers(kind: u64, mistake: bool, rng: &mut ChaCha8Rng) -> bool {
    match kind % 4 {
        0 => rng.random_bool(0.1),
        1 => rng.random_bool(0.5),
        2 => rng.random_bool(0.9),
        // Only at mistakes: every label moves the threshold.
        _ => mistake,
    }
}

fn sparse_feedback_mistakes(scale: &Scale) -> Result<(bool, String)> {
    let grid = tau_grid(scale.tau_grid);
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    for &horizon in &scale.fuzz_horizons {
        for k in 0..scale.fuzz_sequences as u64 {
            let mut state = HedgeState::for_horizon(0.0, 1.0, horizon)?;
            let mut given = Vec::new();
            let mut mistakes = 0usize;
            for _ in 0..horizon {
                let (z, y) = adversary(k, &state, &mut rng);
                let mistake = state.decide(z) != y;
                let feedback = volunteers(k / FUZZ_KINDS, mistake, &mut rng).then_some(y);
                let step = state.step_arbitrary(z, feedback);
                if let Some(y) = step.feedback {
                    mistakes += usize::from(step.y_hat != y);
                    given.push((z, y));
                }
            }
            let bound = sparse_feedback_mistake_bound(given.len() as u64, horizon);
            for &tau in &grid {
                let hinge: f64 = given.iter().map(|&(z, y)| hinge_loss(tau, z, y)).sum();
                let slack = hinge + bound - mistakes as f64;
                min_slack = min_slack.min(slack);
                violations += usize::from(slack < 0.0);
            }
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} sequences x {} thresholds, {violations} violations, smallest slack {min_slack:.3}",
            scale.fuzz_sequences * 3,
            grid.len()
        ),
    ))
}

struct Truth<'a>(&'a [Label]);

impl FeedbackSource for Truth<'_> {
    fn feedback(&mut self, r: &FeedbackRequest) -> Result<Option<Label>> {
        Ok(r.requested.then(|| self.0[(r.t - 1) as usize]))
    }
}

/// A fixed sequence drawn without looking at the forecaster.
fn oblivious_sequence(kind: u64, horizon: u64, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<Label>) {
    let mut zetas = Vec::with_capacity(horizon as usize);
    let mut labels = Vec::with_capacity(horizon as usize);
    for t in 0..horizon {
        let (z, y) = match kind % 3 {
            0 => (rng.random_range(-0.5..1.5), if rng.random_bool(0.5) { Label::Anomalous } else { Label::Nominal }),
            1 => {
                let z: f64 = rng.random_range(0.0..1.0);
                let y = if z < 0.4 { Label::Anomalous } else { Label::Nominal };
                (z, if rng.random_bool(0.15) { y.flip() } else { y })
            }
            // Drifting boundary: what counts as anomalous changes over time.
            _ => {
                let boundary = 0.2 + 0.6 * (t as f64 / horizon as f64);
                let z: f64 = rng.random_range(0.0..1.0);
                (z, if z < boundary { Label::Anomalous } else { Label::Nominal })
            }
        };
        zetas.push(z);
        labels.push(y);
    }
    (zetas, labels)
}

fn label_efficient_mistakes(scale: &Scale) -> Result<(bool, String)> {
    let grid = tau_grid(scale.tau_grid);
    let mut violations = 0usize;
    let mut min_slack = f64::INFINITY;
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    for &horizon in &scale.fuzz_horizons {
        for k in 0..scale.mc_sequences as u64 {
            let (zetas, labels) = oblivious_sequence(k, horizon, &mut rng);
            let mut counts = Vec::with_capacity(scale.mc_realizations);
            for _ in 0..scale.mc_realizations {
                let mut state = HedgeState::for_horizon(0.0, 1.0, horizon)?;
                let mut coin = |q: f64| rng.random::<f64>() < q;
                let mut mistakes = 0usize;
                for (&z, &y) in zetas.iter().zip(&labels) {
                    let step = state.step_label_efficient(z, &mut coin, &mut Truth(&labels))?;
                    mistakes += usize::from(step.y_hat != y);
                }
                counts.push(mistakes as f64);
            }
            let n = counts.len() as f64;
            let mean = counts.iter().sum::<f64>() / n;
            let std = (counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            for &tau in &grid {
                let hinge: f64 = zetas.iter().zip(&labels).map(|(&z, &y)| hinge_loss(tau, z, y)).sum();
                let slack = hinge + mistake_bound(horizon) + 4.0 * std / n.sqrt() - mean;
                min_slack = min_slack.min(slack);
                violations += usize::from(slack < 0.0);
            }
        }
    }
    Ok((
        violations == 0,
        format!(
            "{} sequences x {} query draws x {} thresholds, {violations} violations, smallest slack {min_slack:.3}",
            scale.mc_sequences * 3,
            scale.mc_realizations,
            grid.len()
        ),
    ))
}

fn couplings(scale: &Scale) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut mismatches = 0usize;
    let mut compared = 0usize;
    for k in 0..scale.fuzz_sequences as u64 {
        let horizon = scale.fuzz_horizons[(k % 3) as usize];
        let (zetas, labels) = oblivious_sequence(k, horizon, &mut rng);
        let start = HedgeState::for_horizon(0.0, 1.0, horizon)?;
        let (mut full, mut le, mut arb) = (start.clone(), start.clone(), start);
        let mut always = SyntheticOracle::new(OracleKind::Always, labels.clone(), k)?;
        let mut always2 = SyntheticOracle::new(OracleKind::Always, labels.clone(), k)?;
        let mut asked = SyntheticOracle::new(OracleKind::TruthOnQuery, labels.clone(), k)?;
        for &z in &zetas {
            let a = full.step_full(z, &mut always)?;
            let b = le.step_label_efficient(z, &mut |_| true, &mut asked)?;
            let c = arb.step_with_source(z, &mut always2)?;
            compared += 1;
            let key = |s: &crate::hedge::HedgeStep| (s.t, s.y_hat, s.tau.to_bits(), s.tau_next.to_bits(), s.feedback);
            mismatches += usize::from(key(&a) != key(&b) || key(&a) != key(&c));
        }
    }
    Ok((mismatches == 0, format!("{compared} steps compared across three forecasters, {mismatches} mismatches")))
}

// ---------------------------------------------------------------------------
// 9, 10: reproduction of the drifting-source experiments.

fn experiment_config(preset: &str, dim: usize, seed: u64) -> Result<RunConfig> {
    let mut config = RunConfig::preset(preset)?;
    config.seed = seed;
    if let crate::config::DataSource::Generator(g) = &mut config.data {
        // Fresh segment means for every seed.
        g.means = None;
    }
    if dim != config.model.dim() {
        config.model = FamilyModel::bernoulli(dim)?;
        config.feasible_box = config.model.certify_box(&FeasibleBox::uniform(dim, -3.0, 3.0)?)?;
    }
    Ok(config)
}

fn spike_at_jumps(sim: &Simulation) -> bool {
    let losses = sim.true_losses();
    sim.spec.segment_starts().iter().skip(1).all(|&jump| {
        let j = (jump - 1) as usize;
        if j < 50 || j + 10 > losses.len() {
            return true;
        }
        let after = losses[j..j + 10].iter().sum::<f64>() / 10.0;
        let before = losses[j - 50..j].iter().sum::<f64>() / 50.0;
        after > before
    })
}

fn variance(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn drifting_source(scale: &Scale) -> Result<(bool, String)> {
    let seeds = scale.experiment_seeds;
    let (mut bound_ok, mut spikes, mut noisier) = (0u64, 0u64, 0u64);
    for seed in 0..seeds {
        let config = experiment_config("exp1", scale.experiment_dim, seed)?;
        let noisy = simulate(&config)?;
        let mut clean_config = config.clone();
        clean_config.channel = NoisyChannel::Identity;
        let clean = simulate(&clean_config)?;
        bound_ok += u64::from(noisy.ledger.violations().is_empty());
        spikes += u64::from(spike_at_jumps(&noisy));
        noisier += u64::from(variance(&noisy.filtering_losses()) > variance(&clean.filtering_losses()));
    }
    let need = (seeds * 9).div_ceil(10);
    Ok((
        bound_ok == seeds && spikes >= need && noisier >= need,
        format!(
            "regret within bound {bound_ok}/{seeds}, loss spikes {spikes}/{seeds}, noisier losses {noisier}/{seeds} (need {need})"
        ),
    ))
}

fn adaptive_vs_static(scale: &Scale) -> Result<(bool, String)> {
    let seeds = scale.experiment_seeds;
    let need = (seeds * 8).div_ceil(10);
    let mut parts = Vec::new();
    let mut passed = true;
    for preset in ["exp2a", "exp2b"] {
        let mut wins = 0u64;
        let (mut adaptive, mut fixed) = (0usize, 0usize);
        for seed in 0..seeds {
            let sim = simulate(&experiment_config(preset, scale.experiment_dim, seed)?)?;
            let (_, static_errors) = sim.report.static_threshold.unwrap_or((0.0, 0));
            wins += u64::from(sim.report.total_errors < static_errors);
            adaptive += sim.report.total_errors;
            fixed += static_errors;
        }
        passed &= wins >= need;
        parts.push(format!(
            "{preset} wins {wins}/{seeds} (mean errors {:.1} vs {:.1})",
            adaptive as f64 / seeds as f64,
            fixed as f64 / seeds as f64
        ));
    }
    Ok((passed, format!("{}, need {need}", parts.join("; "))))
}

// ---------------------------------------------------------------------------
// 12: implementations against brute force.

fn oracle_equivalences(scale: &Scale) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1212);

    let mut kl_err: f64 = 0.0;
    let mut mass_err: f64 = 0.0;
    for k in 0..scale.oracle_instances {
        let model =
            if k % 2 == 0 { FamilyModel::bernoulli(rng.random_range(1..=3))? } else { random_ising(&mut rng, 4) };
        let space = enumerate(&model);
        let a = random_theta(&mut rng, model.dim(), 3.0);
        let b = random_theta(&mut rng, model.dim(), 3.0);
        kl_err = kl_err.max((model.kl_divergence(&a, &b)? - brute_kl(&space, &a, &b)).abs());
        let mass: f64 = space.iter().map(|(x, _)| model.log_density(&a, x).map(f64::exp)).sum::<Result<f64>>()?;
        mass_err = mass_err.max((mass - 1.0).abs());
    }

    // Thresholds on a 0.01 lattice, so a 1e-4 grid visits every interval between them.
    let mut tau_mismatches = 0usize;
    let grid: Vec<f64> = (0..=10_000).map(|j| j as f64 / 10_000.0).collect();
    for _ in 0..scale.oracle_instances {
        let n = rng.random_range(1..=20);
        let zetas: Vec<f64> = (0..n).map(|_| rng.random_range(-10..=110) as f64 / 100.0).collect();
        let labels: Vec<Label> =
            (0..n).map(|_| if rng.random_bool(0.4) { Label::Anomalous } else { Label::Nominal }).collect();
        let (tau, m) = best_static_tau(&zetas, &labels, 0.0, 1.0)?;
        let scan = grid.iter().map(|&g| count_mistakes(&zetas, &labels, g)).min().unwrap_or(usize::MAX);
        tau_mismatches += usize::from(scan != m || count_mistakes(&zetas, &labels, tau) != m);
    }

    let mut proj_err: f64 = 0.0;
    for k in 0..scale.oracle_instances.min(200) {
        let (model, bx) = match k % 3 {
            0 => (FamilyModel::bernoulli(4)?, FeasibleBox::uniform(4, -2.0, 1.5)?),
            1 => (FamilyModel::gaussian(4)?, FeasibleBox::uniform(4, -1.0, 2.0)?),
            _ => (FamilyModel::ising(3, vec![(0, 1), (1, 2)])?, FeasibleBox::uniform(5, -0.5, 0.5)?),
        };
        let target = random_theta(&mut rng, model.dim(), 4.0);
        let projected = bregman_project(&model, &target, &bx)?;
        let reference = golden_projection(&model, &target, &bx);
        let err = projected.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        proj_err = proj_err.max(err);
    }

    Ok((
        kl_err <= 1e-10 && mass_err <= 1e-10 && tau_mismatches == 0 && proj_err <= 1e-6,
        format!(
            "KL error {kl_err:.2e}, mass error {mass_err:.2e}, threshold mismatches {tau_mismatches}, projection error {proj_err:.2e}"
        ),
    ))
}

/// `argmin_{θ ∈ box} D(θ̃‖θ)` by cyclic golden-section search on each coordinate.
fn golden_projection(model: &FamilyModel, target: &[f64], bx: &FeasibleBox) -> Vec<f64> {
    let space = enumerate(model);
    let log_partition = |theta: &[f64]| -> f64 {
        match model {
            FamilyModel::GaussianUnitVar { .. } => 0.5 * theta.iter().map(|t| t * t).sum::<f64>(),
            FamilyModel::BernoulliProduct { .. } => theta.iter().map(|&t| (1.0 + t.exp()).ln()).sum(),
            FamilyModel::Ising(_) => brute_log_partition(&space, theta),
        }
    };
    // D(θ̃‖θ) = Φ(θ) − ⟨∇Φ(θ̃), θ⟩ + const, with ∇Φ(θ̃) by central differences.
    let mean: Vec<f64> = (0..target.len())
        .map(|i| {
            let mut up = target.to_vec();
            let mut down = target.to_vec();
            up[i] += 1e-6;
            down[i] -= 1e-6;
            (log_partition(&up) - log_partition(&down)) / 2e-6
        })
        .collect();
    let objective = |theta: &[f64]| log_partition(theta) - theta.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    let mut theta = bx.midpoint();
    for _ in 0..500 {
        let before = theta.clone();
        for i in 0..theta.len() {
            let best = golden_section(
                |v| {
                    let mut trial = theta.clone();
                    trial[i] = v;
                    objective(&trial)
                },
                bx.lo[i],
                bx.hi[i],
            );
            theta[i] = best;
        }
        let moved = theta.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if moved < 1e-11 {
            break;
        }
    }
    theta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Segment;

    #[test]
    fn golden_section_finds_parabola_minimum() {
        assert!((golden_section(|x| (x - 0.3).powi(2), -1.0, 1.0) - 0.3).abs() < 1e-9);
        assert!((golden_section(|x| x, -1.0, 1.0) + 1.0).abs() < 1e-9);
    }

    #[test]
    fn brute_kl_of_a_fair_coin() {
        let space = enumerate(&FamilyModel::bernoulli(1).unwrap());
        let p: f64 = 0.25;
        let theta = (p / (1.0 - p)).ln();
        let expected = 0.5 * (0.5 / p).ln() + 0.5 * (0.5 / (1.0 - p)).ln();
        assert!((brute_kl(&space, &[0.0], &[theta]) - expected).abs() < 1e-14);
    }

    #[test]
    fn segments_are_public_for_custom_specs() {
        let spec = PiecewiseSpec {
            dim: 1,
            horizon: 3,
            segments: vec![Segment { start: 1, mean: vec![0.5] }],
            anomaly_window: 0,
            seed: 0,
        };
        assert!(spec.validate().is_ok());
    }
}
