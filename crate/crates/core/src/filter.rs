//! Sequential probability assignment by noisy mirror descent.
//!
//! At each step the filter scores the incoming noisy observation under its
//! current belief `p_{θ̂_t}`, then moves in the mean-parameter space along the
//! filtering-loss gradient `∇Φ(θ̂_t) − h(z_t)` and projects back onto the box
//! in KL geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{dot, FamilyModel, FeasibleBox, NaturalParam};
use crate::noise::{NoisyChannel, StatBound};

/// Step sizes `η_t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    /// `η_t = 1/t`, for logarithmic regret against static comparators.
    InverseT,
    /// `η_t = 1/√t`, for tracking slowly varying comparators.
    InverseSqrtT,
    Constant(f64),
}

impl StepSchedule {
    pub fn eta(&self, t: u64) -> f64 {
        let t = t.max(1) as f64;
        match *self {
            Self::InverseT => 1.0 / t,
            Self::InverseSqrtT => 1.0 / t.sqrt(),
            Self::Constant(eta) => eta,
        }
    }
}

/// `ℓ̂(θ, z) = −⟨θ, h(z)⟩ + Φ(θ)`.
pub fn filtering_loss(model: &FamilyModel, theta: &[f64], h: &[f64]) -> Result<f64> {
    if h.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: h.len() });
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("unbiased statistic"));
    }
    Ok(model.log_partition(theta)? - dot(theta, h))
}

/// `ℓ(θ, x) = −⟨θ, φ(x)⟩ + Φ(θ) = −log p_θ(x)`.
pub fn true_loss(model: &FamilyModel, theta: &[f64], x: &[f64]) -> Result<f64> {
    let phi = model.sufficient_stat(x)?;
    filtering_loss(model, theta, &phi)
}

/// `argmin_{θ ∈ box} D(θ̃ ‖ θ)`.
pub fn bregman_project(model: &FamilyModel, theta_tilde: &[f64], bx: &FeasibleBox) -> Result<NaturalParam> {
    if theta_tilde.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: theta_tilde.len() });
    }
    if theta_tilde.iter().any(|t| t.is_nan()) {
        return Err(Error::NonFinite("theta"));
    }
    match model {
        // D(θ̃‖θ) is separable and convex in each θ_i with its minimum at θ̃_i.
        FamilyModel::BernoulliProduct { .. } | FamilyModel::GaussianUnitVar { .. } => {
            Ok(NaturalParam::new(bx.clamp(theta_tilde)))
        }
        FamilyModel::Ising(_) => {
            let mu = model.grad_log_partition(theta_tilde)?;
            model.dual_projection(&mu, bx)
        }
    }
}

/// Filter state: the current belief `θ̂_t` and everything needed to advance it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterState {
    t: u64,
    theta_hat: NaturalParam,
    model: FamilyModel,
    bx: FeasibleBox,
    schedule: StepSchedule,
}

impl FilterState {
    /// Starts at `t = 1` from `theta_init`, or the box midpoint when `None`.
    pub fn new(
        model: FamilyModel,
        bx: FeasibleBox,
        schedule: StepSchedule,
        theta_init: Option<Vec<f64>>,
    ) -> Result<Self> {
        if !bx.is_certified() {
            return Err(Error::Uncertified);
        }
        if bx.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), got: bx.dim() });
        }
        let theta = theta_init.unwrap_or_else(|| bx.midpoint());
        if !bx.contains(&theta) {
            return Err(Error::DegenerateBox("initial parameter lies outside the box".into()));
        }
        Ok(Self { t: 1, theta_hat: NaturalParam::new(theta), model, bx, schedule })
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn theta_hat(&self) -> &NaturalParam {
        &self.theta_hat
    }

    pub fn model(&self) -> &FamilyModel {
        &self.model
    }

    pub fn feasible_box(&self) -> &FeasibleBox {
        &self.bx
    }

    pub fn schedule(&self) -> StepSchedule {
        self.schedule
    }

    /// One projected mirror-descent update with the statistic `h = h(z_t)`.
    pub fn md_step(&self, h: &[f64]) -> Result<FilterState> {
        let mut next = self.clone();
        next.advance(h)?;
        Ok(next)
    }

    pub(crate) fn advance(&mut self, h: &[f64]) -> Result<()> {
        if h.len() != self.model.dim() {
            return Err(Error::DimensionMismatch { expected: self.model.dim(), got: h.len() });
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unbiased statistic"));
        }
        let eta = self.schedule.eta(self.t);
        let mu = self.model.grad_log_partition(&self.theta_hat)?;
        // μ̂′ = μ̂ − η (∇Φ(θ̂) − h)
        let mu_prime: Vec<f64> = mu.iter().zip(h).map(|(m, hv)| m - eta * (m - hv)).collect();
        self.theta_hat = self.model.dual_projection(&mu_prime, &self.bx)?;
        self.t += 1;
        Ok(())
    }
}

/// Per-step filter output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterStep {
    pub t: u64,
    /// `ℓ̂(θ̂_t, z_t)`.
    pub filtering_loss: f64,
    /// `ℓ(θ̂_t, x_t)`, when the clean observation is known.
    pub true_loss: Option<f64>,
    /// Log of the belief handed to hedging, `−ℓ̂(θ̂_t, z_t)`.
    pub log_belief: f64,
    /// `K(z^t)` after this step.
    pub stat_bound: f64,
}

/// A running filter bound to a channel.
#[derive(Debug, Clone)]
pub struct NoisyMirrorDescent {
    state: FilterState,
    channel: NoisyChannel,
    k: StatBound,
}

impl NoisyMirrorDescent {
    pub fn new(state: FilterState, channel: NoisyChannel) -> Result<Self> {
        channel.check_compatible(state.model())?;
        Ok(Self { state, channel, k: StatBound::default() })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn channel(&self) -> NoisyChannel {
        self.channel
    }

    pub fn stat_bound(&self) -> f64 {
        self.k.value()
    }

    /// Scores `z_t` under `θ̂_t`, then updates to `θ̂_{t+1}`.
    pub fn observe(&mut self, z: &[f64], x: Option<&[f64]>) -> Result<FilterStep> {
        let h = self.channel.unbiased_stat(self.state.model(), z)?;
        self.step_with_stat(&h, x)
    }

    pub fn step_with_stat(&mut self, h: &[f64], x: Option<&[f64]>) -> Result<FilterStep> {
        let model = self.state.model();
        let theta = self.state.theta_hat();
        let loss = filtering_loss(model, theta, h)?;
        let true_loss = x.map(|x| true_loss(model, theta, x)).transpose()?;
        let t = self.state.t();
        let k = self.k.observe(h);
        self.state.advance(h)?;
        Ok(FilterStep { t, filtering_loss: loss, true_loss, log_belief: -loss, stat_bound: k })
    }
}

/// Output of [`run_filter`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub steps: Vec<FilterStep>,
    /// `θ̂_t` for each step, when requested.
    pub thetas: Option<Vec<NaturalParam>>,
}

impl FilterTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Runs the filter over `(z_t, x_t)` pairs; `x_t` is optional ground truth.
#[allow(clippy::too_many_arguments)]
pub fn run_filter<'a, I>(
    model: &FamilyModel,
    bx: &FeasibleBox,
    channel: NoisyChannel,
    schedule: StepSchedule,
    theta_init: Option<Vec<f64>>,
    stream: I,
    keep_thetas: bool,
) -> Result<FilterTrace>
where
    I: IntoIterator<Item = (&'a [f64], Option<&'a [f64]>)>,
{
    let state = FilterState::new(model.clone(), bx.clone(), schedule, theta_init)?;
    let mut filter = NoisyMirrorDescent::new(state, channel)?;
    let mut trace = FilterTrace { steps: Vec::new(), thetas: keep_thetas.then(Vec::new) };
    for (z, x) in stream {
        if let Some(thetas) = trace.thetas.as_mut() {
            thetas.push(filter.state().theta_hat().clone());
        }
        trace.steps.push(filter.observe(z, x)?);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::{logit_saturating, sigmoid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bernoulli_box(d: usize, lo: f64, hi: f64) -> (FamilyModel, FeasibleBox) {
        let m = FamilyModel::bernoulli(d).unwrap();
        let bx = m.certify_box(&FeasibleBox::uniform(d, lo, hi).unwrap()).unwrap();
        (m, bx)
    }

    #[test]
    fn filtering_loss_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert!((filtering_loss(&b, &[0.0], &[1.125]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let g = FamilyModel::gaussian(2).unwrap();
        assert!((filtering_loss(&g, &[1.0, 0.0], &[1.0, 0.0]).unwrap() + 0.5).abs() < 1e-15);
        assert!(matches!(filtering_loss(&g, &[1.0, 0.0], &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn true_loss_is_negative_log_density() {
        let b = FamilyModel::bernoulli(3).unwrap();
        let theta = [0.4, -1.3, 2.2];
        let x = [1.0, 1.0, 0.0];
        let l = true_loss(&b, &theta, &x).unwrap();
        assert!((l + b.log_density(&theta, &x).unwrap()).abs() < 1e-15);
        let ising = FamilyModel::ising(2, vec![(0, 1)]).unwrap();
        for x in [[1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]] {
            assert!((true_loss(&ising, &[0.0; 3], &x).unwrap() - 4f64.ln()).abs() < 1e-14);
        }
        let b1 = FamilyModel::bernoulli(1).unwrap();
        assert!((true_loss(&b1, &[0.0], &[1.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn projection_examples() {
        let (m, bx) = bernoulli_box(1, -2.0, 2.0);
        assert_eq!(bregman_project(&m, &[0.7], &bx).unwrap().as_slice(), &[0.7]);
        assert_eq!(bregman_project(&m, &[5.0], &bx).unwrap().as_slice(), &[2.0]);
        let (m, single) = bernoulli_box(1, 0.3, 0.3);
        assert_eq!(bregman_project(&m, &[-4.0], &single).unwrap().as_slice(), &[0.3]);
    }

    #[test]
    fn md_step_hand_trace() {
        let (m, bx) = bernoulli_box(1, -2.0, 2.0);
        let state = FilterState::new(m.clone(), bx, StepSchedule::InverseT, Some(vec![0.0])).unwrap();
        // μ̂ = 0.5, μ̂′ = 0.5 − 1·(0.5 − 1) = 1, saturating logit, clamp to 2.
        let next = state.md_step(&[1.0]).unwrap();
        assert_eq!(next.theta_hat().as_slice(), &[2.0]);
        assert_eq!(next.t(), 2);
        // Clamping μ̂′ to 1 − ε before the inverse lands on the same point.
        assert_eq!(logit_saturating(1.0 - 1e-6).clamp(-2.0, 2.0), 2.0);
    }

    #[test]
    fn md_step_fixed_points() {
        let (m, bx) = bernoulli_box(2, -3.0, 3.0);
        let zero = FilterState::new(m.clone(), bx.clone(), StepSchedule::Constant(0.0), Some(vec![0.4, -1.0])).unwrap();
        let next = zero.md_step(&[1.0, 0.0]).unwrap();
        assert!((next.theta_hat()[0] - 0.4).abs() < 1e-12 && (next.theta_hat()[1] + 1.0).abs() < 1e-12);

        let theta = [0.4, -1.0];
        let mu: Vec<f64> = theta.iter().map(|&t| sigmoid(t)).collect();
        let st = FilterState::new(m, bx, StepSchedule::InverseT, Some(theta.to_vec())).unwrap();
        let next = st.md_step(&mu).unwrap();
        for (a, b) in next.theta_hat().iter().zip(&theta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn md_step_stays_in_box() {
        let (m, bx) = bernoulli_box(3, -1.5, 2.5);
        let mut st = FilterState::new(m, bx.clone(), StepSchedule::InverseSqrtT, None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..500 {
            let h: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            st = st.md_step(&h).unwrap();
            assert!(bx.contains(st.theta_hat()));
        }
        assert_eq!(st.t(), 501);
    }

    #[test]
    fn run_filter_edge_cases() {
        let (m, bx) = bernoulli_box(1, -3.0, 3.0);
        let empty: Vec<(&[f64], Option<&[f64]>)> = Vec::new();
        let trace = run_filter(&m, &bx, NoisyChannel::Identity, StepSchedule::InverseT, None, empty, false).unwrap();
        assert!(trace.is_empty());

        let z = [1.0];
        let one = run_filter(
            &m,
            &bx,
            NoisyChannel::Identity,
            StepSchedule::InverseT,
            Some(vec![0.5]),
            [(&z[..], Some(&z[..]))],
            true,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        let expected = true_loss(&m, &[0.5], &z).unwrap();
        assert_eq!(one.steps[0].filtering_loss, expected);
        assert_eq!(one.steps[0].true_loss, Some(expected));
        assert_eq!(one.thetas.unwrap()[0].as_slice(), &[0.5]);
    }

    #[test]
    fn consistent_with_empirical_mean() {
        let (m, bx) = bernoulli_box(1, -3.0, 3.0);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let xs: Vec<[f64; 1]> = (0..5000).map(|_| [if rng.random::<f64>() < 0.9 { 1.0 } else { 0.0 }]).collect();
        let stream = xs.iter().map(|x| (&x[..], Some(&x[..])));
        let state = FilterState::new(m.clone(), bx, StepSchedule::InverseT, None).unwrap();
        let mut f = NoisyMirrorDescent::new(state, NoisyChannel::Identity).unwrap();
        for (z, x) in stream {
            f.observe(z, x).unwrap();
        }
        let mu = sigmoid(f.state().theta_hat()[0]);
        let empirical = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!((mu - 0.9).abs() < 0.05, "{mu}");
        // With η_t = 1/t the mean parameter tracks the running average; early
        // clamping to the box leaves an O(1/t) residue.
        assert!((mu - empirical).abs() < 1e-3, "{mu} vs {empirical}");
    }

    #[test]
    fn beliefs_are_causal() {
        let (m, bx) = bernoulli_box(2, -3.0, 3.0);
        let zs = [[1.0, 1.0], [0.0, 0.0], [1.0, 0.0]];
        let mut a = NoisyMirrorDescent::new(
            FilterState::new(m.clone(), bx.clone(), StepSchedule::InverseSqrtT, None).unwrap(),
            NoisyChannel::Identity,
        )
        .unwrap();
        let mut b = a.clone();
        let sa: Vec<_> = zs.iter().map(|z| a.observe(z, None).unwrap()).collect();
        // Changing z_3 must not change the loss recorded at steps 1 and 2.
        let sb: Vec<_> = [[1.0, 1.0], [0.0, 0.0], [0.0, 1.0]].iter().map(|z| b.observe(z, None).unwrap()).collect();
        assert_eq!(sa[0], sb[0]);
        assert_eq!(sa[1], sb[1]);
        assert_eq!(sa[0].filtering_loss, 2.0 * 2f64.ln());
    }
}
