//! Exponential-family models and their Legendre/Bregman machinery.
//!
//! Every family here has density `p_θ(x) = exp{⟨θ, φ(x)⟩ − Φ(θ)}` with respect
//! to a fixed base measure. The log-partition `Φ` is the Legendre potential,
//! `∇Φ` maps natural parameters to mean parameters, and the Bregman divergence
//! of `Φ` is the KL divergence between members of the family.

use std::ops::Deref;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest vertex count for which the Ising log-partition is enumerated.
pub const MAX_ISING_VERTICES: usize = 20;

/// Largest Ising natural-parameter dimension certified without a user-supplied `H`.
pub const MAX_ISING_CERTIFY_DIM: usize = 12;

const NEWTON_TOL: f64 = 1e-10;
const NEWTON_MAX_ITER: usize = 200;
const NEWTON_MAX_HALVINGS: usize = 50;
const PROJECTION_MAX_ITER: usize = 500;

macro_rules! param_newtype {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn zeros(dim: usize) -> Self {
                Self(vec![0.0; dim])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(v)
            }
        }
    };
}

param_newtype!(
    /// Natural (canonical) parameter θ.
    NaturalParam
);
param_newtype!(
    /// Mean parameter μ = ∇Φ(θ) = E_θ[φ(X)].
    MeanParam
);

/// Overflow-safe `log(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    if t > 30.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `log(μ / (1 − μ))`, saturating to ±∞ outside the open unit interval.
pub fn logit_saturating(mu: f64) -> f64 {
    if mu <= 0.0 {
        f64::NEG_INFINITY
    } else if mu >= 1.0 {
        f64::INFINITY
    } else {
        mu.ln() - (-mu).ln_1p()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// An undirected graph for the exact Ising model on spins in {−1, +1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsingGraph {
    vertices: usize,
    edges: Vec<(usize, usize)>,
}

impl IsingGraph {
    pub fn new(vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if vertices == 0 {
            return Err(Error::InvalidModel("ising graph needs at least one vertex".into()));
        }
        if vertices > MAX_ISING_VERTICES {
            return Err(Error::IsingTooLarge(vertices));
        }
        for (k, &(a, b)) in edges.iter().enumerate() {
            if a >= vertices || b >= vertices || a == b {
                return Err(Error::InvalidModel(format!("edge {k} = ({a}, {b}) is invalid")));
            }
            if edges[..k].iter().any(|&(c, d)| (c, d) == (a, b) || (c, d) == (b, a)) {
                return Err(Error::InvalidModel(format!("edge ({a}, {b}) is repeated")));
            }
        }
        Ok(Self { vertices, edges })
    }

    pub fn vertices(&self) -> usize {
        self.vertices
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn dim(&self) -> usize {
        self.vertices + self.edges.len()
    }

    /// Spin configuration encoded by the bits of `mask` (bit set → +1).
    fn spins(&self, mask: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.vertices).map(move |v| if mask >> v & 1 == 1 { 1.0 } else { -1.0 })
    }

    fn features_into(&self, mask: usize, out: &mut [f64]) {
        for (v, s) in self.spins(mask).enumerate() {
            out[v] = s;
        }
        for (k, &(a, b)) in self.edges.iter().enumerate() {
            out[self.vertices + k] = out[a] * out[b];
        }
    }

    fn configurations(&self) -> usize {
        1 << self.vertices
    }

    /// Log-partition, mean and (optionally) covariance of φ by full enumeration.
    fn moments(&self, theta: &[f64], want_cov: bool) -> (f64, Vec<f64>, Option<DMatrix<f64>>) {
        let dim = self.dim();
        let n = self.configurations();
        let mut phi = vec![0.0; dim];
        let mut scores = Vec::with_capacity(n);
        for mask in 0..n {
            self.features_into(mask, &mut phi);
            scores.push(dot(theta, &phi));
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut mean = vec![0.0; dim];
        let mut second = want_cov.then(|| DMatrix::<f64>::zeros(dim, dim));
        for (mask, s) in scores.iter().enumerate() {
            let w = (s - max).exp();
            total += w;
            self.features_into(mask, &mut phi);
            for (m, p) in mean.iter_mut().zip(&phi) {
                *m += w * p;
            }
            if let Some(sec) = second.as_mut() {
                for i in 0..dim {
                    for j in i..dim {
                        sec[(i, j)] += w * phi[i] * phi[j];
                    }
                }
            }
        }
        for m in mean.iter_mut() {
            *m /= total;
        }
        let cov = second.map(|mut sec| {
            for i in 0..dim {
                for j in i..dim {
                    let c = sec[(i, j)] / total - mean[i] * mean[j];
                    sec[(i, j)] = c;
                    sec[(j, i)] = c;
                }
            }
            sec
        });
        (max + total.ln(), mean, cov)
    }
}

/// An exponential family over a finite-dimensional sufficient statistic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FamilyModel {
    /// Independent Bernoulli coordinates on {0,1}^d with φ(x) = x.
    BernoulliProduct { dim: usize },
    /// Unit-variance Gaussian on ℝ^d, with the standard Gaussian as base measure.
    GaussianUnitVar { dim: usize },
    /// Ising model on {−1,+1}^V: vertex spins then edge products, in edge order.
    Ising(IsingGraph),
}

impl FamilyModel {
    pub fn bernoulli(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        Ok(Self::BernoulliProduct { dim })
    }

    pub fn gaussian(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        Ok(Self::GaussianUnitVar { dim })
    }

    pub fn ising(vertices: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        IsingGraph::new(vertices, edges).map(Self::Ising)
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::BernoulliProduct { dim } | Self::GaussianUnitVar { dim } => *dim,
            Self::Ising(g) => g.dim(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::BernoulliProduct { .. } => "bernoulli",
            Self::GaussianUnitVar { .. } => "gaussian",
            Self::Ising(_) => "ising",
        }
    }

    /// Dimension of a raw observation (number of spins for Ising).
    pub fn observation_dim(&self) -> usize {
        match self {
            Self::Ising(g) => g.vertices(),
            _ => self.dim(),
        }
    }

    fn check_theta(&self, theta: &[f64], what: &'static str) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: theta.len() });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite(what));
        }
        Ok(())
    }

    pub fn log_partition(&self, theta: &[f64]) -> Result<f64> {
        self.check_theta(theta, "theta")?;
        Ok(match self {
            Self::BernoulliProduct { .. } => theta.iter().map(|&t| softplus(t)).sum(),
            Self::GaussianUnitVar { .. } => 0.5 * dot(theta, theta),
            Self::Ising(g) => g.moments(theta, false).0,
        })
    }

    pub fn grad_log_partition(&self, theta: &[f64]) -> Result<MeanParam> {
        self.check_theta(theta, "theta")?;
        Ok(MeanParam(match self {
            Self::BernoulliProduct { .. } => theta.iter().map(|&t| sigmoid(t)).collect(),
            Self::GaussianUnitVar { .. } => theta.to_vec(),
            Self::Ising(g) => g.moments(theta, false).1,
        }))
    }

    /// `Φ(θ)` and `∇Φ(θ)` from a single pass.
    pub fn value_and_grad(&self, theta: &[f64]) -> Result<(f64, MeanParam)> {
        self.check_theta(theta, "theta")?;
        Ok(match self {
            Self::Ising(g) => {
                let (phi, mean, _) = g.moments(theta, false);
                (phi, MeanParam(mean))
            }
            _ => (self.log_partition(theta)?, self.grad_log_partition(theta)?),
        })
    }

    /// Fisher information ∇²Φ(θ).
    pub fn fisher_information(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta, "theta")?;
        let d = self.dim();
        Ok(match self {
            Self::BernoulliProduct { .. } => DMatrix::from_diagonal(&DVector::from_iterator(
                d,
                theta.iter().map(|&t| {
                    let s = sigmoid(t);
                    s * (1.0 - s)
                }),
            )),
            Self::GaussianUnitVar { .. } => DMatrix::identity(d, d),
            Self::Ising(g) => g.moments(theta, true).2.expect("covariance requested"),
        })
    }

    /// Inverse of the mean map: returns θ with ∇Φ(θ) = μ.
    pub fn inverse_grad(&self, mu: &[f64]) -> Result<NaturalParam> {
        if mu.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: mu.len() });
        }
        if mu.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean parameter"));
        }
        match self {
            Self::BernoulliProduct { .. } => {
                if let Some((i, m)) = mu.iter().enumerate().find(|(_, &m)| m <= 0.0 || m >= 1.0) {
                    return Err(Error::MeanOutOfRange(format!("coordinate {i} = {m} not in (0,1)")));
                }
                Ok(NaturalParam(mu.iter().map(|&m| logit_saturating(m)).collect()))
            }
            Self::GaussianUnitVar { .. } => Ok(NaturalParam(mu.to_vec())),
            Self::Ising(g) => {
                if let Some((i, m)) = mu.iter().enumerate().find(|(_, &m)| m.abs() >= 1.0) {
                    return Err(Error::MeanOutOfRange(format!("coordinate {i} = {m} not in (-1,1)")));
                }
                ising_newton(g, mu)
            }
        }
    }

    /// `D(p_θ1 ‖ p_θ2) = Φ(θ2) − Φ(θ1) − ⟨∇Φ(θ1), θ2 − θ1⟩`.
    pub fn kl_divergence(&self, theta1: &[f64], theta2: &[f64]) -> Result<f64> {
        self.check_theta(theta1, "theta1")?;
        self.check_theta(theta2, "theta2")?;
        match self {
            // Summed per coordinate so that the terms cancel exactly at θ1 = θ2.
            Self::BernoulliProduct { .. } => Ok(theta1.iter().zip(theta2).map(|(&a, &b)| bernoulli_kl(a, b)).sum()),
            Self::GaussianUnitVar { .. } => Ok(theta1.iter().zip(theta2).map(|(&a, &b)| 0.5 * (b - a) * (b - a)).sum()),
            Self::Ising(_) => {
                let (phi1, mu1) = self.value_and_grad(theta1)?;
                let phi2 = self.log_partition(theta2)?;
                let lin: f64 = mu1.iter().zip(theta1.iter().zip(theta2)).map(|(m, (a, b))| m * (b - a)).sum();
                Ok(phi2 - phi1 - lin)
            }
        }
    }

    /// Validates a raw observation against the sample space.
    pub fn check_observation(&self, x: &[f64]) -> Result<()> {
        let expected = self.observation_dim();
        if x.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: x.len() });
        }
        let bad = match self {
            Self::BernoulliProduct { .. } => x.iter().position(|&v| v != 0.0 && v != 1.0),
            Self::GaussianUnitVar { .. } => x.iter().position(|v| !v.is_finite()),
            Self::Ising(_) => x.iter().position(|&v| v != 1.0 && v != -1.0),
        };
        match bad {
            Some(i) => Err(Error::InvalidObservation(format!(
                "coordinate {i} = {} is not in the {} alphabet",
                x[i],
                self.name()
            ))),
            None => Ok(()),
        }
    }

    pub fn sufficient_stat(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_observation(x)?;
        Ok(match self {
            Self::Ising(g) => {
                let mut out = vec![0.0; g.dim()];
                out[..g.vertices()].copy_from_slice(x);
                for (k, &(a, b)) in g.edges().iter().enumerate() {
                    out[g.vertices() + k] = x[a] * x[b];
                }
                out
            }
            _ => x.to_vec(),
        })
    }

    pub fn log_density(&self, theta: &[f64], x: &[f64]) -> Result<f64> {
        let phi = self.sufficient_stat(x)?;
        Ok(dot(theta, &phi) - self.log_partition(theta)?)
    }

    /// One draw from `p_θ`.
    pub fn sample<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_theta(theta, "theta")?;
        Ok(match self {
            Self::BernoulliProduct { .. } => {
                theta.iter().map(|&t| if rng.random::<f64>() < sigmoid(t) { 1.0 } else { 0.0 }).collect()
            }
            Self::GaussianUnitVar { .. } => theta
                .iter()
                .map(|&t| {
                    let e: f64 = StandardNormal.sample(&mut *rng);
                    t + e
                })
                .collect::<Vec<f64>>(),
            Self::Ising(g) => {
                let log_z = g.moments(theta, false).0;
                let u: f64 = rng.random();
                let mut phi = vec![0.0; g.dim()];
                let mut cumulative = 0.0;
                let mut chosen = g.configurations() - 1;
                for mask in 0..g.configurations() {
                    g.features_into(mask, &mut phi);
                    cumulative += (dot(theta, &phi) - log_z).exp();
                    if u < cumulative {
                        chosen = mask;
                        break;
                    }
                }
                g.spins(chosen).collect()
            }
        })
    }

    /// `argmin_{θ ∈ box} Φ(θ) − ⟨μ′, θ⟩`.
    ///
    /// When μ′ lies in the mean range this is the KL projection of ∇Φ*(μ′) onto
    /// the box; otherwise it is the limit of that projection, which is still the
    /// exact solution of the mirror-descent step in proximal form.
    pub fn dual_projection(&self, mu_prime: &[f64], bx: &FeasibleBox) -> Result<NaturalParam> {
        if mu_prime.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: mu_prime.len() });
        }
        if mu_prime.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("mean parameter"));
        }
        bx.check_dim(self.dim())?;
        match self {
            Self::BernoulliProduct { .. } => Ok(NaturalParam(
                mu_prime
                    .iter()
                    .zip(bx.lo.iter().zip(&bx.hi))
                    .map(|(&m, (&lo, &hi))| logit_saturating(m).clamp(lo, hi))
                    .collect(),
            )),
            Self::GaussianUnitVar { .. } => Ok(NaturalParam(
                mu_prime.iter().zip(bx.lo.iter().zip(&bx.hi)).map(|(&m, (&lo, &hi))| m.clamp(lo, hi)).collect(),
            )),
            Self::Ising(g) => projected_newton(g, mu_prime, bx),
        }
    }

    /// Fills in the strong-convexity constant `H`, the KL diameter and the
    /// mean-norm bound of `bx`.
    pub fn certify_box(&self, bx: &FeasibleBox) -> Result<FeasibleBox> {
        self.certify_box_with_grid(bx, 5)
    }

    pub fn certify_box_with_grid(&self, bx: &FeasibleBox, grid_points: usize) -> Result<FeasibleBox> {
        bx.check_dim(self.dim())?;
        let mut out = bx.clone();
        match self {
            Self::BernoulliProduct { .. } => {
                let h = bx
                    .lo
                    .iter()
                    .zip(&bx.hi)
                    .map(|(lo, hi)| {
                        let s = sigmoid(lo.abs().max(hi.abs()));
                        s * (1.0 - s) / 2.0
                    })
                    .fold(f64::INFINITY, f64::min);
                let dmax =
                    bx.lo.iter().zip(&bx.hi).map(|(&lo, &hi)| bernoulli_kl(lo, hi).max(bernoulli_kl(hi, lo))).sum();
                let m = 0.5 * norm(&bx.hi.iter().map(|&hi| sigmoid(hi)).collect::<Vec<_>>());
                out.strong_convexity = Some(bx.strong_convexity.unwrap_or(h));
                out.kl_diameter = Some(dmax);
                out.mean_bound = Some(m);
            }
            Self::GaussianUnitVar { .. } => {
                let dmax = bx.lo.iter().zip(&bx.hi).map(|(lo, hi)| 0.5 * (hi - lo) * (hi - lo)).sum();
                let m =
                    0.5 * bx.lo.iter().zip(&bx.hi).map(|(lo, hi)| lo.abs().max(hi.abs()).powi(2)).sum::<f64>().sqrt();
                out.strong_convexity = Some(bx.strong_convexity.unwrap_or(0.5));
                out.kl_diameter = Some(dmax);
                out.mean_bound = Some(m);
            }
            Self::Ising(_) => {
                if bx.strong_convexity.is_none() && self.dim() > MAX_ISING_CERTIFY_DIM {
                    return Err(Error::InvalidModel(format!(
                        "ising dimension {} exceeds {MAX_ISING_CERTIFY_DIM}; supply H explicitly",
                        self.dim()
                    )));
                }
                let points = scan_points(bx, grid_points.max(2));
                let mut stats = Vec::with_capacity(points.len());
                let mut h = f64::INFINITY;
                let mut m: f64 = 0.0;
                for p in &points {
                    let (phi, mu) = self.value_and_grad(p)?;
                    m = m.max(0.5 * norm(&mu));
                    if bx.strong_convexity.is_none() {
                        let fisher = self.fisher_information(p)?;
                        let min_eig = fisher.symmetric_eigenvalues().min();
                        h = h.min(min_eig / 2.0);
                    }
                    stats.push((phi, mu));
                }
                let mut dmax: f64 = 0.0;
                for (i, a) in points.iter().enumerate() {
                    for (j, b) in points.iter().enumerate() {
                        if i != j {
                            let lin: f64 =
                                stats[i].1.iter().zip(a.iter().zip(b)).map(|(mu, (x, y))| mu * (y - x)).sum();
                            dmax = dmax.max(stats[j].0 - stats[i].0 - lin);
                        }
                    }
                }
                if bx.strong_convexity.is_none() && (h.is_nan() || h <= 0.0) {
                    return Err(Error::InvalidModel("Fisher information is singular on the box".into()));
                }
                out.strong_convexity = Some(bx.strong_convexity.unwrap_or(h));
                out.kl_diameter = Some(dmax);
                out.mean_bound = Some(m);
            }
        }
        Ok(out)
    }
}

fn bernoulli_kl(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    softplus(b) - softplus(a) - sigmoid(a) * (b - a)
}

/// Scan points for heuristic certification: the full grid when small, else
/// corners, the centre and a deterministic sample of grid nodes.
fn scan_points(bx: &FeasibleBox, grid_points: usize) -> Vec<Vec<f64>> {
    const CAP: usize = 4096;
    let d = bx.lo.len();
    let node = |i: usize, k: usize| {
        if grid_points == 1 {
            0.5 * (bx.lo[i] + bx.hi[i])
        } else {
            bx.lo[i] + (bx.hi[i] - bx.lo[i]) * k as f64 / (grid_points - 1) as f64
        }
    };
    let total = (grid_points as f64).powi(d as i32);
    let mut points = Vec::new();
    if total <= CAP as f64 {
        let n = total as usize;
        for mut idx in 0..n {
            let p = (0..d)
                .map(|i| {
                    let k = idx % grid_points;
                    idx /= grid_points;
                    node(i, k)
                })
                .collect();
            points.push(p);
        }
    } else {
        points.push(bx.midpoint());
        let corners = if d < 12 { 1usize << d } else { CAP / 2 };
        for c in 0..corners {
            // Beyond 2^12 corners, enumerate a strided subset of corner masks.
            let mask = if d < 12 { c as u64 } else { (c as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) };
            points.push((0..d).map(|i| if mask >> (i % 64) & 1 == 1 { bx.hi[i] } else { bx.lo[i] }).collect());
        }
        let mut state: u64 = 0x2545_F491_4F6C_DD1D;
        while points.len() < CAP {
            points.push(
                (0..d)
                    .map(|i| {
                        state ^= state << 13;
                        state ^= state >> 7;
                        state ^= state << 17;
                        node(i, (state % grid_points as u64) as usize)
                    })
                    .collect(),
            );
        }
    }
    points
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    let n = h.nrows();
    let mut ridge = 0.0;
    loop {
        let reg = h + DMatrix::identity(n, n) * ridge;
        if let Some(ch) = reg.cholesky() {
            return ch.solve(rhs);
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
    }
}

fn ising_newton(g: &IsingGraph, mu: &[f64]) -> Result<NaturalParam> {
    let dim = g.dim();
    let mut theta = vec![0.0; dim];
    let (_, mut mean, mut cov) = g.moments(&theta, true);
    let mut residual = max_abs_diff(&mean, mu);
    for _ in 0..NEWTON_MAX_ITER {
        if residual == 0.0 {
            break;
        }
        let rhs = DVector::from_iterator(dim, mu.iter().zip(&mean).map(|(m, e)| m - e));
        let step = solve_spd(cov.as_ref().expect("covariance"), &rhs);
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..=NEWTON_MAX_HALVINGS {
            let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let (_, cand_mean, cand_cov) = g.moments(&candidate, true);
            let cand_residual = max_abs_diff(&cand_mean, mu);
            if cand_residual < residual {
                let moved = max_abs_diff(&candidate, &theta);
                theta = candidate;
                mean = cand_mean;
                cov = cand_cov;
                residual = cand_residual;
                // Keep polishing past the mean tolerance: θ error is the residual
                // amplified by the inverse covariance.
                accepted = moved > 1e-15;
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if residual <= NEWTON_TOL {
        Ok(NaturalParam(theta))
    } else {
        Err(Error::NoConvergence { what: "inverse mean map (Newton)", iterations: NEWTON_MAX_ITER })
    }
}

/// Projected Newton for `min_{θ ∈ box} Φ(θ) − ⟨μ′, θ⟩` on an Ising model.
fn projected_newton(g: &IsingGraph, mu_prime: &[f64], bx: &FeasibleBox) -> Result<NaturalParam> {
    let dim = g.dim();
    let objective = |theta: &[f64]| {
        let (phi, mean, cov) = g.moments(theta, true);
        (phi - dot(mu_prime, theta), mean, cov.expect("covariance"))
    };
    let project = |theta: &mut [f64]| {
        for ((t, lo), hi) in theta.iter_mut().zip(&bx.lo).zip(&bx.hi) {
            *t = t.clamp(*lo, *hi);
        }
    };
    let mut theta = bx.midpoint();
    let (mut value, mut mean, mut cov) = objective(&theta);
    for _ in 0..PROJECTION_MAX_ITER {
        let grad: Vec<f64> = mean.iter().zip(mu_prime).map(|(m, mp)| m - mp).collect();
        let pg = theta
            .iter()
            .zip(&grad)
            .zip(bx.lo.iter().zip(&bx.hi))
            .map(|((t, gr), (lo, hi))| (t - (t - gr).clamp(*lo, *hi)).abs())
            .fold(0.0, f64::max);
        if pg <= 1e-11 {
            return Ok(NaturalParam(theta));
        }
        let eps = pg.min(1e-8);
        let free: Vec<usize> = (0..dim)
            .filter(|&i| {
                let at_lo = theta[i] <= bx.lo[i] + eps && grad[i] > 0.0;
                let at_hi = theta[i] >= bx.hi[i] - eps && grad[i] < 0.0;
                !(at_lo || at_hi)
            })
            .collect();
        let mut direction = vec![0.0; dim];
        if !free.is_empty() {
            let sub = DMatrix::from_fn(free.len(), free.len(), |a, b| cov[(free[a], free[b])]);
            let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -grad[i]));
            let step = solve_spd(&sub, &rhs);
            for (k, &i) in free.iter().enumerate() {
                direction[i] = step[k];
            }
        }
        let mut accepted = false;
        for attempt in 0..2 {
            if attempt == 1 {
                // Newton direction failed the line search; fall back to steepest descent.
                direction = grad.iter().map(|g| -g).collect();
            }
            let mut scale = 1.0;
            for _ in 0..=NEWTON_MAX_HALVINGS {
                let mut candidate: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t + scale * d).collect();
                project(&mut candidate);
                let decrease: f64 = grad.iter().zip(candidate.iter().zip(&theta)).map(|(g, (c, t))| g * (c - t)).sum();
                let (cand_value, cand_mean, cand_cov) = objective(&candidate);
                if cand_value <= value + 1e-4 * decrease && candidate != theta {
                    theta = candidate;
                    value = cand_value;
                    mean = cand_mean;
                    cov = cand_cov;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if accepted {
                break;
            }
        }
        if !accepted {
            // No representable decrease remains: stationary to machine precision.
            if pg <= 1e-7 {
                return Ok(NaturalParam(theta));
            }
            break;
        }
    }
    Err(Error::NoConvergence { what: "box projection (projected Newton)", iterations: PROJECTION_MAX_ITER })
}

/// Coordinatewise box Λ = [lo, hi] with its certification constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `H`: half the smallest Fisher-information eigenvalue over the box.
    pub strong_convexity: Option<f64>,
    /// `D`: the largest KL divergence between two points of the box.
    pub kl_diameter: Option<f64>,
    /// `M`: half the largest norm of ∇Φ over the box.
    pub mean_bound: Option<f64>,
}

impl FeasibleBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch { expected: lo.len(), got: hi.len() });
        }
        if lo.is_empty() {
            return Err(Error::DegenerateBox("empty box".into()));
        }
        for (i, (l, h)) in lo.iter().zip(&hi).enumerate() {
            if !l.is_finite() || !h.is_finite() {
                return Err(Error::DegenerateBox(format!("coordinate {i} has non-finite bounds")));
            }
            if l > h {
                return Err(Error::DegenerateBox(format!("coordinate {i}: lo {l} > hi {h}")));
            }
        }
        Ok(Self { lo, hi, strong_convexity: None, kl_diameter: None, mean_bound: None })
    }

    /// The box `[lo, hi]^dim`.
    pub fn uniform(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    /// Replaces the certified `H` with a user-supplied value.
    pub fn with_strong_convexity(mut self, h: f64) -> Result<Self> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::DegenerateBox(format!("H must be positive, got {h}")));
        }
        self.strong_convexity = Some(h);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if self.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.dim() });
        }
        Ok(())
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim() && theta.iter().zip(self.lo.iter().zip(&self.hi)).all(|(t, (l, h))| l <= t && t <= h)
    }

    pub fn clamp(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(self.lo.iter().zip(&self.hi)).map(|(t, (l, h))| t.clamp(*l, *h)).collect()
    }

    pub fn is_certified(&self) -> bool {
        self.strong_convexity.is_some() && self.kl_diameter.is_some() && self.mean_bound.is_some()
    }

    /// `(H, D, M)`, or an error when the box has not been certified.
    pub fn constants(&self) -> Result<(f64, f64, f64)> {
        match (self.strong_convexity, self.kl_diameter, self.mean_bound) {
            (Some(h), Some(d), Some(m)) => Ok((h, d, m)),
            _ => Err(Error::Uncertified),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair() -> FamilyModel {
        FamilyModel::ising(2, vec![(0, 1)]).unwrap()
    }

    #[test]
    fn log_partition_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert!((b.log_partition(&[0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
        let g = FamilyModel::gaussian(3).unwrap();
        assert_eq!(g.log_partition(&[0.0; 3]).unwrap(), 0.0);
        assert!((pair().log_partition(&[0.0; 3]).unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn log_partition_rejects_bad_input() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert!(matches!(b.log_partition(&[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(matches!(FamilyModel::ising(21, vec![]), Err(Error::IsingTooLarge(21))));
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!((softplus(31.0) - (1.0 + 31f64.exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn grad_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert_eq!(b.grad_log_partition(&[0.0]).unwrap().as_slice(), &[0.5]);
        let g = FamilyModel::gaussian(2).unwrap();
        assert_eq!(g.grad_log_partition(&[1.0, -1.0]).unwrap().as_slice(), &[1.0, -1.0]);
        let mu = pair().grad_log_partition(&[0.0; 3]).unwrap();
        assert!(mu.iter().all(|m| m.abs() < 1e-15));
    }

    #[test]
    fn inverse_grad_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert_eq!(b.inverse_grad(&[0.5]).unwrap().as_slice(), &[0.0]);
        assert!((b.inverse_grad(&[0.9]).unwrap()[0] - 9f64.ln()).abs() < 1e-12);
        assert!(matches!(b.inverse_grad(&[1.0]), Err(Error::MeanOutOfRange(_))));
        let g = FamilyModel::gaussian(2).unwrap();
        assert_eq!(g.inverse_grad(&[0.3, -0.7]).unwrap().as_slice(), &[0.3, -0.7]);
    }

    #[test]
    fn ising_inverse_grad_recovers_theta() {
        let m = FamilyModel::ising(3, vec![(0, 1), (1, 2)]).unwrap();
        let theta = [0.3, -0.2, 0.5, 0.4, -0.6];
        let mu = m.grad_log_partition(&theta).unwrap();
        let back = m.inverse_grad(&mu).unwrap();
        assert!(max_abs_diff(&back, &theta) < 1e-8);
    }

    #[test]
    fn kl_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        assert_eq!(b.kl_divergence(&[0.3], &[0.3]).unwrap(), 0.0);
        // Σ p log(p/q) with p = Bernoulli(0.5), q = Bernoulli(0.9).
        let brute = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = b.kl_divergence(&[0.0], &[9f64.ln()]).unwrap();
        assert!((kl - brute).abs() < 1e-12);
        assert!((kl - 0.510826).abs() < 1e-6);
        let g = FamilyModel::gaussian(1).unwrap();
        assert!((g.kl_divergence(&[0.0], &[1.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sufficient_stat_examples() {
        let b = FamilyModel::bernoulli(3).unwrap();
        assert_eq!(b.sufficient_stat(&[1.0, 0.0, 1.0]).unwrap(), vec![1.0, 0.0, 1.0]);
        assert_eq!(pair().sufficient_stat(&[1.0, -1.0]).unwrap(), vec![1.0, -1.0, -1.0]);
        let g = FamilyModel::gaussian(2).unwrap();
        assert_eq!(g.sufficient_stat(&[0.4, -1.1]).unwrap(), vec![0.4, -1.1]);
        assert!(b.sufficient_stat(&[1.0, 2.0, 0.0]).is_err());
        assert!(matches!(b.sufficient_stat(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(pair().sufficient_stat(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn log_density_examples() {
        let b1 = FamilyModel::bernoulli(1).unwrap();
        assert!((b1.log_density(&[0.0], &[1.0]).unwrap() + 2f64.ln()).abs() < 1e-15);
        let b2 = FamilyModel::bernoulli(2).unwrap();
        assert!((b2.log_density(&[0.0, 0.0], &[1.0, 0.0]).unwrap() + 2.0 * 2f64.ln()).abs() < 1e-15);
        let g = FamilyModel::gaussian(1).unwrap();
        assert_eq!(g.log_density(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn sampling_examples() {
        let b = FamilyModel::bernoulli(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(b.sample(&[-50.0; 4], &mut rng).unwrap(), vec![0.0; 4]);
        }
        let theta = [0.2, -0.4, 1.0, 0.0];
        let a = b.sample(&theta, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = b.sample(&theta, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, c);

        let b1 = FamilyModel::bernoulli(1).unwrap();
        let logit = 9f64.ln();
        let n = 100_000;
        let mean = (0..n).map(|_| b1.sample(&[logit], &mut rng).unwrap()[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.9).abs() < 0.01, "{mean}");
    }

    #[test]
    fn ising_sampling_matches_marginals() {
        let m = pair();
        let theta = [0.4, -0.3, 0.8];
        let mu = m.grad_log_partition(&theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40_000;
        let mut acc = [0.0; 3];
        for _ in 0..n {
            let x = m.sample(&theta, &mut rng).unwrap();
            let phi = m.sufficient_stat(&x).unwrap();
            for (a, p) in acc.iter_mut().zip(&phi) {
                *a += p / n as f64;
            }
        }
        for (a, m) in acc.iter().zip(mu.iter()) {
            assert!((a - m).abs() < 0.02, "{a} vs {m}");
        }
    }

    #[test]
    fn certify_examples() {
        let b = FamilyModel::bernoulli(1).unwrap();
        let bx = b.certify_box(&FeasibleBox::uniform(1, -2.0, 2.0).unwrap()).unwrap();
        let s = sigmoid(2.0);
        let h = bx.strong_convexity.unwrap();
        assert!((h - s * (1.0 - s) / 2.0).abs() < 1e-15);
        assert!((h - 0.0525).abs() < 1e-4);
        let g = FamilyModel::gaussian(5).unwrap();
        let gb = g.certify_box(&FeasibleBox::uniform(5, -1.0, 3.0).unwrap()).unwrap();
        assert_eq!(gb.strong_convexity, Some(0.5));
        let single = b.certify_box(&FeasibleBox::uniform(1, 0.0, 0.0).unwrap()).unwrap();
        assert_eq!(single.kl_diameter, Some(0.0));
        assert!(matches!(FeasibleBox::new(vec![1.0], vec![0.0]), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn ising_certification_is_positive_and_overridable() {
        let m = pair();
        let bx = m.certify_box(&FeasibleBox::uniform(3, -0.5, 0.5).unwrap()).unwrap();
        let (h, d, mb) = bx.constants().unwrap();
        assert!(h > 0.0 && d > 0.0 && mb > 0.0);
        let big = FamilyModel::ising(5, (0..4).map(|i| (i, i + 1)).chain([(0, 2), (1, 3), (2, 4), (0, 4)]).collect())
            .unwrap();
        assert_eq!(big.dim(), 13);
        let plain = FeasibleBox::uniform(13, -0.2, 0.2).unwrap();
        assert!(big.certify_box(&plain).is_err());
        let user = big.certify_box(&plain.with_strong_convexity(0.01).unwrap()).unwrap();
        assert_eq!(user.strong_convexity, Some(0.01));
    }

    #[test]
    fn dual_projection_saturates_outside_mean_range() {
        let b = FamilyModel::bernoulli(2).unwrap();
        let bx = FeasibleBox::uniform(2, -2.0, 2.0).unwrap();
        let p = b.dual_projection(&[1.125, -0.125], &bx).unwrap();
        assert_eq!(p.as_slice(), &[2.0, -2.0]);
    }

    #[test]
    fn ising_projection_is_interior_solution_when_feasible() {
        let m = FamilyModel::ising(3, vec![(0, 1), (0, 2)]).unwrap();
        let bx = FeasibleBox::uniform(5, -1.0, 1.0).unwrap();
        let theta = [0.2, -0.1, 0.3, 0.5, -0.4];
        let mu = m.grad_log_partition(&theta).unwrap();
        let p = m.dual_projection(&mu, &bx).unwrap();
        assert!(max_abs_diff(&p, &theta) < 1e-8);
    }
}
