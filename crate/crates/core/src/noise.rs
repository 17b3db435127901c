//! Memoryless corruption channels and unbiased estimators of the sufficient
//! statistic, `E[h(z) | x] = φ(x)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expfam::{norm, FamilyModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoisyChannel {
    Identity,
    /// Each bit (or spin) flipped independently with probability `p < 1/2`.
    Bsc {
        p: f64,
    },
    /// Additive white Gaussian noise with variance `sigma2`.
    Awgn {
        sigma2: f64,
    },
}

impl NoisyChannel {
    pub fn bsc(p: f64) -> Result<Self> {
        if !(0.0..0.5).contains(&p) {
            return Err(Error::InvalidChannel(format!("crossover probability {p} not in [0, 0.5)")));
        }
        Ok(Self::Bsc { p })
    }

    pub fn awgn(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidChannel(format!("noise variance {sigma2} must be positive")));
        }
        Ok(Self::Awgn { sigma2 })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Bsc { .. } => "bsc",
            Self::Awgn { .. } => "awgn",
        }
    }

    pub fn is_compatible(&self, model: &FamilyModel) -> bool {
        matches!(
            (self, model),
            (Self::Identity, _)
                | (Self::Bsc { .. }, FamilyModel::BernoulliProduct { .. } | FamilyModel::Ising(_))
                | (Self::Awgn { .. }, FamilyModel::GaussianUnitVar { .. })
        )
    }

    pub fn check_compatible(&self, model: &FamilyModel) -> Result<()> {
        if self.is_compatible(model) {
            Ok(())
        } else {
            Err(Error::IncompatibleChannel { channel: self.name().into(), family: model.name().into() })
        }
    }

    /// Passes a clean observation through the channel.
    pub fn corrupt<R: Rng + ?Sized>(&self, model: &FamilyModel, x: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        self.check_compatible(model)?;
        model.check_observation(x)?;
        Ok(match *self {
            Self::Identity => x.to_vec(),
            Self::Bsc { p } => {
                let ising = matches!(model, FamilyModel::Ising(_));
                x.iter()
                    .map(|&v| {
                        if rng.random::<f64>() < p {
                            if ising {
                                -v
                            } else {
                                1.0 - v
                            }
                        } else {
                            v
                        }
                    })
                    .collect()
            }
            Self::Awgn { sigma2 } => {
                let normal = Normal::new(0.0, sigma2.sqrt()).expect("positive variance");
                x.iter().map(|&v| v + normal.sample(&mut *rng)).collect()
            }
        })
    }

    /// Checks that a noisy observation lies in the channel's output alphabet.
    pub fn check_output(&self, model: &FamilyModel, z: &[f64]) -> Result<()> {
        self.check_compatible(model)?;
        match self {
            // AWGN output is real-valued even though the clean input is Gaussian too.
            Self::Awgn { .. } => {
                let expected = model.observation_dim();
                if z.len() != expected {
                    return Err(Error::DimensionMismatch { expected, got: z.len() });
                }
                if let Some(i) = z.iter().position(|v| !v.is_finite()) {
                    return Err(Error::InvalidObservation(format!("coordinate {i} is not finite")));
                }
                Ok(())
            }
            _ => model.check_observation(z),
        }
    }

    /// The unbiased statistic `h(z)`.
    pub fn unbiased_stat(&self, model: &FamilyModel, z: &[f64]) -> Result<Vec<f64>> {
        self.check_output(model, z)?;
        Ok(match (*self, model) {
            (Self::Identity, _) => model.sufficient_stat(z)?,
            (Self::Bsc { p }, FamilyModel::BernoulliProduct { .. }) => {
                let scale = 1.0 - 2.0 * p;
                z.iter().map(|&v| (v - p) / scale).collect()
            }
            (Self::Bsc { p }, FamilyModel::Ising(g)) => {
                // A sign flip with probability p scales E[z_v] by (1 − 2p) and
                // E[z_a z_b] by (1 − 2p)^2 for independent flips.
                let scale = 1.0 - 2.0 * p;
                let mut h = Vec::with_capacity(g.dim());
                h.extend(z.iter().map(|&v| v / scale));
                h.extend(g.edges().iter().map(|&(a, b)| z[a] * z[b] / (scale * scale)));
                h
            }
            (Self::Awgn { .. }, FamilyModel::GaussianUnitVar { .. }) => z.to_vec(),
            _ => unreachable!("compatibility checked above"),
        })
    }
}

/// Running value of `K(z^t) = ½ max_{s ≤ t} ‖h(z_s)‖`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StatBound {
    value: f64,
}

impl StatBound {
    pub fn observe(&mut self, h: &[f64]) -> f64 {
        self.value = self.value.max(0.5 * norm(h));
        self.value
    }

    pub fn value(&self) -> f64 {
        self.value
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn corrupt_examples() {
        let b = FamilyModel::bernoulli(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = [1.0, 0.0, 1.0];
        assert_eq!(NoisyChannel::Identity.corrupt(&b, &x, &mut rng).unwrap(), x.to_vec());
        let b2 = FamilyModel::bernoulli(2).unwrap();
        let zero = NoisyChannel::bsc(0.0).unwrap();
        assert_eq!(zero.corrupt(&b2, &[0.0, 1.0], &mut rng).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn bsc_flip_rate() {
        let n = 100_000;
        let b = FamilyModel::bernoulli(n).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = NoisyChannel::bsc(0.1).unwrap().corrupt(&b, &vec![1.0; n], &mut rng).unwrap();
        let zeros = z.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((zeros - 0.1).abs() < 0.005, "{zeros}");
    }

    #[test]
    fn unbiased_stat_examples() {
        let b = FamilyModel::bernoulli(2).unwrap();
        let ch = NoisyChannel::bsc(0.1).unwrap();
        let h = ch.unbiased_stat(&b, &[1.0, 0.0]).unwrap();
        assert!((h[0] - 1.125).abs() < 1e-15);
        assert!((h[1] + 0.125).abs() < 1e-15);
        let ising = FamilyModel::ising(2, vec![(0, 1)]).unwrap();
        let x = [1.0, -1.0];
        assert_eq!(NoisyChannel::Identity.unbiased_stat(&ising, &x).unwrap(), ising.sufficient_stat(&x).unwrap());
    }

    #[test]
    fn incompatible_pairs_are_rejected() {
        let g = FamilyModel::gaussian(2).unwrap();
        let b = FamilyModel::bernoulli(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            NoisyChannel::bsc(0.1).unwrap().corrupt(&g, &[0.0, 0.0], &mut rng),
            Err(Error::IncompatibleChannel { .. })
        ));
        assert!(NoisyChannel::awgn(1.0).unwrap().unbiased_stat(&b, &[0.0, 1.0]).is_err());
        assert!(NoisyChannel::bsc(0.5).is_err());
        assert!(NoisyChannel::awgn(0.0).is_err());
    }

    #[test]
    fn vanishing_noise_reduces_to_phi() {
        let b = FamilyModel::bernoulli(3).unwrap();
        let ch = NoisyChannel::bsc(0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = [1.0, 0.0, 1.0];
        let z = ch.corrupt(&b, &x, &mut rng).unwrap();
        assert_eq!(ch.unbiased_stat(&b, &z).unwrap(), x.to_vec());

        let g = FamilyModel::gaussian(3).unwrap();
        let awgn = NoisyChannel::awgn(1e-12).unwrap();
        let xg = [0.3, -1.2, 2.0];
        let h = awgn.unbiased_stat(&g, &awgn.corrupt(&g, &xg, &mut rng).unwrap()).unwrap();
        for (a, b) in h.iter().zip(&xg) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn stat_bound_is_running_max() {
        let mut k = StatBound::default();
        assert_eq!(k.observe(&[3.0, 4.0]), 2.5);
        assert_eq!(k.observe(&[1.0, 0.0]), 2.5);
        assert_eq!(k.observe(&[6.0, 8.0]), 5.0);
    }
}
