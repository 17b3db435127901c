use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{seeded_rng, RngPurpose};
use crate::error::{Error, Result};
use crate::expfam::FamilyModel;
use crate::hedge::Label;
use crate::noise::NoisyChannel;

/// A stretch of the stream with constant Bernoulli means `β*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// First timestep of the segment (1-based).
    pub start: u64,
    pub mean: Vec<f64>,
}

/// Piecewise-constant Bernoulli product stream with anomalies planted at each jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseSpec {
    pub dim: usize,
    pub horizon: u64,
    pub segments: Vec<Segment>,
    /// Steps labeled anomalous starting at each jump, the jump step included.
    pub anomaly_window: u64,
    pub seed: u64,
}

impl PiecewiseSpec {
    /// Segment means drawn i.i.d. uniform on `mean_range` from `seed`.
    pub fn random(
        dim: usize,
        horizon: u64,
        jumps: &[u64],
        anomaly_window: u64,
        seed: u64,
        mean_range: (f64, f64),
    ) -> Result<Self> {
        let (lo, hi) = mean_range;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidSpec(format!("mean range [{lo}, {hi}] must lie inside (0, 1)")));
        }
        let mut rng = seeded_rng(seed, RngPurpose::SegmentMeans);
        let segments = std::iter::once(1)
            .chain(jumps.iter().copied())
            .map(|start| Segment { start, mean: (0..dim).map(|_| rng.random_range(lo..=hi)).collect() })
            .collect();
        let spec = Self { dim, horizon, segments, anomaly_window, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidSpec("dimension must be positive".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidSpec("horizon must be positive".into()));
        }
        let first = self.segments.first().ok_or_else(|| Error::InvalidSpec("no segments".into()))?;
        if first.start != 1 {
            return Err(Error::InvalidSpec(format!("first segment starts at {}, expected 1", first.start)));
        }
        for pair in self.segments.windows(2) {
            if pair[1].start <= pair[0].start {
                return Err(Error::InvalidSpec("segment starts must be strictly increasing".into()));
            }
        }
        for (k, seg) in self.segments.iter().enumerate() {
            if seg.mean.len() != self.dim {
                return Err(Error::InvalidSpec(format!(
                    "segment {k} has {} means for dimension {}",
                    seg.mean.len(),
                    self.dim
                )));
            }
            if let Some(b) = seg.mean.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
                return Err(Error::InvalidSpec(format!("segment {k} mean {b} outside (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn segment_starts(&self) -> Vec<u64> {
        self.segments.iter().map(|s| s.start).collect()
    }

    /// Index of the segment active at timestep `t`.
    pub fn segment_index(&self, t: u64) -> usize {
        self.segments.partition_point(|s| s.start <= t).saturating_sub(1)
    }

    /// Ground-truth labels for `t = 1..=horizon`.
    pub fn labels(&self) -> Vec<Label> {
        let mut labels = vec![Label::Nominal; self.horizon as usize];
        for seg in self.segments.iter().skip(1) {
            let end = (seg.start + self.anomaly_window).min(self.horizon + 1);
            for t in seg.start..end {
                labels[(t - 1) as usize] = Label::Anomalous;
            }
        }
        labels
    }

    pub fn model(&self) -> Result<FamilyModel> {
        FamilyModel::bernoulli(self.dim)
    }
}

/// Clean observations and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanStream {
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

/// Draws `x_t ~ Π_i Bernoulli(β*_{i,t})`, deterministic given the stream seed.
pub fn generate_stream(spec: &PiecewiseSpec) -> Result<CleanStream> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, RngPurpose::CleanSamples);
    let xs = (1..=spec.horizon)
        .map(|t| {
            let mean = &spec.segments[spec.segment_index(t)].mean;
            mean.iter().map(|&b| if rng.random::<f64>() < b { 1.0 } else { 0.0 }).collect()
        })
        .collect();
    Ok(CleanStream { xs, labels: spec.labels() })
}

/// Passes every observation through the channel with noise drawn from `seed`.
pub fn corrupt_stream(
    model: &FamilyModel,
    channel: &NoisyChannel,
    xs: &[Vec<f64>],
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = seeded_rng(seed, RngPurpose::ChannelNoise);
    xs.iter().map(|x| channel.corrupt(model, x, &mut rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_jumps(seed: u64) -> PiecewiseSpec {
        PiecewiseSpec::random(4, 1000, &[100, 500, 700], 25, seed, (0.05, 0.95)).unwrap()
    }

    #[test]
    fn single_segment_is_all_nominal() {
        let spec = PiecewiseSpec::random(3, 50, &[], 25, 1, (0.05, 0.95)).unwrap();
        assert!(generate_stream(&spec).unwrap().labels.iter().all(|&y| y == Label::Nominal));
    }

    #[test]
    fn planted_anomalies_follow_jumps() {
        let labels = three_jumps(3).labels();
        let positives: Vec<u64> = (1..=1000).filter(|&t| labels[t as usize - 1].is_anomalous()).collect();
        assert_eq!(positives.len(), 75);
        let expected: Vec<u64> = (100..=124).chain(500..=524).chain(700..=724).collect();
        assert_eq!(positives, expected);
    }

    #[test]
    fn windows_are_truncated_at_the_horizon() {
        let spec = PiecewiseSpec::random(2, 110, &[100], 25, 0, (0.05, 0.95)).unwrap();
        assert_eq!(spec.labels().iter().filter(|y| y.is_anomalous()).count(), 11);
    }

    #[test]
    fn empirical_mean_matches() {
        let spec = PiecewiseSpec {
            dim: 1,
            horizon: 10_000,
            segments: vec![Segment { start: 1, mean: vec![0.5] }],
            anomaly_window: 0,
            seed: 9,
        };
        let s = generate_stream(&spec).unwrap();
        let mean = s.xs.iter().map(|x| x[0]).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_stream(&three_jumps(11)).unwrap();
        let b = generate_stream(&three_jumps(11)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.xs, generate_stream(&three_jumps(12)).unwrap().xs);
    }

    #[test]
    fn segment_lookup() {
        let spec = three_jumps(0);
        assert_eq!(spec.segment_index(1), 0);
        assert_eq!(spec.segment_index(99), 0);
        assert_eq!(spec.segment_index(100), 1);
        assert_eq!(spec.segment_index(1000), 3);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = three_jumps(0);
        spec.segments[0].start = 2;
        assert!(spec.validate().is_err());
        let mut spec = three_jumps(0);
        spec.segments.swap(1, 2);
        assert!(spec.validate().is_err());
        let mut spec = three_jumps(0);
        spec.segments[1].mean[0] = 1.0;
        assert!(spec.validate().is_err());
        assert!(PiecewiseSpec::random(2, 0, &[], 1, 0, (0.1, 0.9)).is_err());
    }
}
