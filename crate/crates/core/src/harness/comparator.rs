//! Offline comparators chosen in hindsight.

use crate::error::{Error, Result};
use crate::expfam::{dot, norm, FamilyModel, FeasibleBox, NaturalParam};
use crate::hedge::Label;

/// `argmin_{θ ∈ box} Σ_t (Φ(θ) − ⟨θ, s_t⟩)` and its cumulative loss.
///
/// With `s_t = φ(x_t)` this is the best static density for the clean stream;
/// with `s_t = h(z_t)` it is the best static parameter under the filtering loss.
pub fn best_static_theta(model: &FamilyModel, bx: &FeasibleBox, stats: &[Vec<f64>]) -> Result<(NaturalParam, f64)> {
    let mut prefix = PrefixBestTheta::new(model.dim());
    for s in stats {
        prefix.push(s)?;
    }
    prefix.best(model, bx)
}

/// Running best static parameter over a growing prefix.
#[derive(Debug, Clone)]
pub struct PrefixBestTheta {
    sum: Vec<f64>,
    n: u64,
}

impl PrefixBestTheta {
    pub fn new(dim: usize) -> Self {
        Self { sum: vec![0.0; dim], n: 0 }
    }

    pub fn push(&mut self, s: &[f64]) -> Result<()> {
        if s.len() != self.sum.len() {
            return Err(Error::DimensionMismatch { expected: self.sum.len(), got: s.len() });
        }
        for (acc, v) in self.sum.iter_mut().zip(s) {
            *acc += v;
        }
        self.n += 1;
        Ok(())
    }

    pub fn len(&self) -> u64 {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// The objective is `n (Φ(θ) − ⟨θ, s̄⟩)`, so the minimizer is the dual
    /// projection of the prefix mean `s̄`.
    pub fn best(&self, model: &FamilyModel, bx: &FeasibleBox) -> Result<(NaturalParam, f64)> {
        if self.n == 0 {
            return Err(Error::Empty("comparator sequence"));
        }
        let n = self.n as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let theta = model.dual_projection(&mean, bx)?;
        let loss = n * model.log_partition(&theta)? - dot(&theta, &self.sum);
        Ok((theta, loss))
    }
}

/// Piecewise-constant comparator: the best static parameter on each segment.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseComparator {
    starts: Vec<u64>,
    thetas: Vec<NaturalParam>,
}

impl PiecewiseComparator {
    /// Fits one parameter per segment; `starts` are 1-based and begin at 1.
    pub fn fit(model: &FamilyModel, bx: &FeasibleBox, stats: &[Vec<f64>], starts: &[u64]) -> Result<Self> {
        if starts.first() != Some(&1) || starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidSpec("segment starts must begin at 1 and increase".into()));
        }
        let t_max = stats.len() as u64;
        let mut thetas = Vec::with_capacity(starts.len());
        for (k, &start) in starts.iter().enumerate() {
            let end = starts.get(k + 1).map_or(t_max + 1, |&s| s.min(t_max + 1));
            if start > t_max {
                // A segment beyond the data still needs a parameter; reuse the last one.
                let last = thetas.last().cloned().unwrap_or_else(|| NaturalParam::new(bx.midpoint()));
                thetas.push(last);
                continue;
            }
            let slice = &stats[(start - 1) as usize..(end - 1) as usize];
            thetas.push(best_static_theta(model, bx, slice)?.0);
        }
        Ok(Self { starts: starts.to_vec(), thetas })
    }

    pub fn from_parts(starts: Vec<u64>, thetas: Vec<NaturalParam>) -> Result<Self> {
        if starts.len() != thetas.len() || starts.is_empty() {
            return Err(Error::LengthMismatch(format!("{} starts for {} parameters", starts.len(), thetas.len())));
        }
        Ok(Self { starts, thetas })
    }

    pub fn theta_at(&self, t: u64) -> &NaturalParam {
        let k = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        &self.thetas[k]
    }

    pub fn segment_thetas(&self) -> &[NaturalParam] {
        &self.thetas
    }

    /// `V_t = Σ_{s=1}^{t} ‖θ_s − θ_{s+1}‖`, which counts a switch landing at `t + 1`.
    pub fn variation_through(&self, t: u64) -> f64 {
        let mut v = 0.0;
        for k in 1..self.starts.len() {
            if self.starts[k] <= t + 1 {
                v += distance(&self.thetas[k - 1], &self.thetas[k]);
            }
        }
        v
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff)
}

/// Path length `Σ ‖θ_{k+1} − θ_k‖` of a parameter sequence.
pub fn variation(thetas: &[NaturalParam]) -> f64 {
    thetas.windows(2).map(|w| distance(&w[0], &w[1])).sum()
}

/// `Σ 1{sgn(τ − ζ_t) ≠ y_t}`.
pub fn count_mistakes(zetas: &[f64], labels: &[Label], tau: f64) -> usize {
    zetas.iter().zip(labels).filter(|(&z, &y)| (z < tau) != y.is_anomalous()).count()
}

/// Exact minimizer of the mistake count over `τ ∈ [τ_min, τ_max]`, smallest on ties.
///
/// The count is constant on each interval `(ζ_(k), ζ_(k+1)]`, so it suffices to
/// evaluate at `τ_min`, at every `ζ` inside the range and at `τ_max`.
pub fn best_static_tau(zetas: &[f64], labels: &[Label], tau_min: f64, tau_max: f64) -> Result<(f64, usize)> {
    if zetas.len() != labels.len() {
        return Err(Error::LengthMismatch(format!("{} zetas for {} labels", zetas.len(), labels.len())));
    }
    if zetas.is_empty() {
        return Err(Error::Empty("threshold comparator"));
    }
    if tau_min.is_nan() || tau_max.is_nan() || tau_min >= tau_max {
        return Err(Error::InvalidHedge(format!("need tau_min < tau_max, got [{tau_min}, {tau_max}]")));
    }
    if zetas.iter().any(|z| z.is_nan()) {
        return Err(Error::NonFinite("zeta"));
    }
    let mut anomalous: Vec<f64> = Vec::new();
    let mut nominal: Vec<f64> = Vec::new();
    for (&z, &y) in zetas.iter().zip(labels) {
        if y.is_anomalous() {
            anomalous.push(z);
        } else {
            nominal.push(z);
        }
    }
    anomalous.sort_by(f64::total_cmp);
    nominal.sort_by(f64::total_cmp);
    // Anomalies at or above τ are missed; nominal points below τ are false alarms.
    let mistakes =
        |tau: f64| anomalous.len() - anomalous.partition_point(|&z| z < tau) + nominal.partition_point(|&z| z < tau);

    let mut candidates: Vec<f64> = zetas.iter().copied().filter(|&z| tau_min < z && z < tau_max).collect();
    candidates.push(tau_min);
    candidates.push(tau_max);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best = (tau_min, usize::MAX);
    for tau in candidates {
        let m = mistakes(tau);
        if m < best.1 {
            best = (tau, m);
        }
    }
    Ok(best)
}
