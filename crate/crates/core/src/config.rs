//! Run configuration: a TOML file of `key = value` sections.
//!
//! ```toml
//! seed = 1
//! mode = "label"                # full | label | arbitrary | service
//!
//! [model]
//! family = "bernoulli"          # bernoulli | gaussian | ising
//! dim = 500                     # bernoulli, gaussian
//! # vertices = 4                # ising
//! # edges = [[0, 1], [1, 2]]
//!
//! [box]
//! lo = -3.0                     # scalar, or one value per coordinate
//! hi = 3.0
//! # strong_convexity = 0.01     # required for ising models with more than 12 parameters
//!
//! [channel]
//! kind = "bsc"                  # identity | bsc | awgn
//! p = 0.1                       # bsc crossover probability
//! # sigma2 = 0.5                # awgn variance
//!
//! [filter]
//! schedule = "inverse_sqrt_t"   # inverse_t | inverse_sqrt_t | constant
//! # eta = 0.05                  # constant schedule
//! # theta_init = [0.0, ...]     # defaults to the box midpoint
//!
//! [hedge]
//! tau_min = 0.0
//! tau_max = 1.0
//! horizon = 1000                # eta = 1/sqrt(horizon); omit with eta for eta_t = 1/sqrt(t)
//! # eta = 0.03
//! zeta = "linear"               # linear | log
//! log_scale = 220.0             # linear: C = exp(log_scale)
//! # scale = 1.0                 # C itself
//! tau_init = "min"              # min | first_zeta
//!
//! [feedback]
//! miss_prob = 0.2               # arbitrary mode: chance a missed anomaly is labeled
//!
//! [service]
//! address = "127.0.0.1:8080"
//! policy = "label"              # label | arbitrary
//! timeout_secs = 300.0
//! window = 100                  # arbitrary policy: how many past steps accept labels
//!
//! [data]
//! source = "generator"          # generator | file | stdin
//! horizon = 1000
//! jumps = [100, 500, 700]
//! anomaly_window = 25
//! mean_range = [0.05, 0.95]
//! # means = [[...], ...]        # one row per segment; drawn from the seed when omitted
//! # path = "input.jsonl"        # file source
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use crate::detect::{Detector, HedgeMode, TauInit};
use crate::error::{Error, Result};
use crate::expfam::{FamilyModel, FeasibleBox};
use crate::filter::{FilterState, NoisyMirrorDescent, StepSchedule};
use crate::harness::{PiecewiseSpec, Segment};
use crate::hedge::{HedgeState, LearningRate, ZetaTransform};
use crate::noise::NoisyChannel;

/// Built-in configurations.
pub const PRESETS: [&str; 3] = ["exp1", "exp2a", "exp2b"];

fn preset_text(name: &str) -> Option<&'static str> {
    match name {
        "exp1" => Some(include_str!("../presets/exp1.toml")),
        "exp2a" => Some(include_str!("../presets/exp2a.toml")),
        "exp2b" => Some(include_str!("../presets/exp2b.toml")),
        _ => None,
    }
}

/// Where feedback comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackMode {
    /// Ground truth after every step.
    Full,
    /// Ground truth on the label-efficient forecaster's queries.
    Label,
    /// Ground truth volunteered by a simulated user.
    Arbitrary,
    /// Labels submitted over HTTP by a human.
    Service,
}

impl FeedbackMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "label" => Ok(Self::Label),
            "arbitrary" => Ok(Self::Arbitrary),
            "service" => Ok(Self::Service),
            other => Err(Error::Config { line: 0, message: format!("unknown mode {other:?}") }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HedgeConfig {
    pub tau_min: f64,
    pub tau_max: f64,
    pub rate: LearningRate,
    pub zeta: ZetaTransform,
    pub tau_init: TauInit,
}

impl HedgeConfig {
    pub fn state(&self) -> Result<HedgeState> {
        HedgeState::new(self.tau_min, self.tau_max, self.rate, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub address: Option<String>,
    /// `LabelEfficient` or `Arbitrary`.
    pub policy: HedgeMode,
    pub timeout: Duration,
    pub window: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { address: None, policy: HedgeMode::LabelEfficient, timeout: Duration::from_secs(300), window: 100 }
    }
}

/// Parameters of the synthetic piecewise-constant source.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub horizon: u64,
    pub jumps: Vec<u64>,
    pub anomaly_window: u64,
    pub mean_range: (f64, f64),
    pub means: Option<Vec<Vec<f64>>>,
}

impl GeneratorConfig {
    pub fn spec(&self, dim: usize, seed: u64) -> Result<PiecewiseSpec> {
        match &self.means {
            None => PiecewiseSpec::random(dim, self.horizon, &self.jumps, self.anomaly_window, seed, self.mean_range),
            Some(means) => {
                let segments = std::iter::once(1)
                    .chain(self.jumps.iter().copied())
                    .zip(means)
                    .map(|(start, mean)| Segment { start, mean: mean.clone() })
                    .collect();
                let spec =
                    PiecewiseSpec { dim, horizon: self.horizon, segments, anomaly_window: self.anomaly_window, seed };
                spec.validate()?;
                Ok(spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Generator(GeneratorConfig),
    File(PathBuf),
    Stdin,
}

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: FeedbackMode,
    pub model: FamilyModel,
    /// Certified feasible box.
    pub feasible_box: FeasibleBox,
    pub channel: NoisyChannel,
    pub schedule: StepSchedule,
    pub theta_init: Option<Vec<f64>>,
    pub hedge: HedgeConfig,
    pub miss_prob: f64,
    pub service: ServiceConfig,
    pub data: DataSource,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| Error::Config {
            line: 0,
            message: format!("unknown preset {name:?}; expected one of {}", PRESETS.join(", ")),
        })?;
        Self::from_toml_str(text)
    }

    pub fn preset_source(name: &str) -> Option<&'static str> {
        preset_text(name)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        raw.validate(text)
    }

    /// The forecaster driving this run.
    pub fn hedge_mode(&self) -> HedgeMode {
        match self.mode {
            FeedbackMode::Full => HedgeMode::Full,
            FeedbackMode::Label => HedgeMode::LabelEfficient,
            FeedbackMode::Arbitrary => HedgeMode::Arbitrary,
            FeedbackMode::Service => self.service.policy,
        }
    }

    /// Number of steps when the source is finite and known up front.
    pub fn horizon(&self) -> Option<u64> {
        match &self.data {
            DataSource::Generator(g) => Some(g.horizon),
            _ => None,
        }
    }

    pub fn detector(&self) -> Result<Detector> {
        let state =
            FilterState::new(self.model.clone(), self.feasible_box.clone(), self.schedule, self.theta_init.clone())?;
        let filter = NoisyMirrorDescent::new(state, self.channel)?;
        Detector::new(filter, self.hedge.state()?, self.hedge.zeta, self.hedge.tau_init)
    }

    /// The stream spec for the generator source at this run's seed.
    pub fn piecewise_spec(&self) -> Result<Option<PiecewiseSpec>> {
        match &self.data {
            DataSource::Generator(g) => g.spec(self.model.dim(), self.seed).map(Some),
            _ => Ok(None),
        }
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key` inside `[section]` (top level when empty), falling back to the section header.
fn locate(text: &str, section: &str, key: &str) -> usize {
    let mut current = String::new();
    let mut header_line = None;
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|s| s.split(']').next()) {
            current = name.trim().to_string();
            if current == section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some((k, _)) = trimmed.split_once('=') {
                if k.trim() == key {
                    return i + 1;
                }
            }
        }
    }
    header_line.unwrap_or(0)
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum ScalarOrVec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl ScalarOrVec {
    fn expand(&self, dim: usize) -> Option<Vec<f64>> {
        match self {
            Self::Scalar(v) => Some(vec![*v; dim]),
            Self::Vector(v) if v.len() == dim => Some(v.clone()),
            Self::Vector(_) => None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    seed: u64,
    mode: FeedbackMode,
    model: RawModel,
    #[serde(rename = "box")]
    bx: RawBox,
    #[serde(default)]
    channel: Option<NoisyChannel>,
    #[serde(default)]
    filter: RawFilter,
    hedge: RawHedge,
    #[serde(default)]
    feedback: RawFeedback,
    #[serde(default)]
    service: RawService,
    data: RawData,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawModel {
    family: String,
    dim: Option<usize>,
    vertices: Option<usize>,
    edges: Option<Vec<(usize, usize)>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBox {
    lo: ScalarOrVec,
    hi: ScalarOrVec,
    strong_convexity: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    schedule: String,
    eta: Option<f64>,
    theta_init: Option<Vec<f64>>,
}

impl Default for RawFilter {
    fn default() -> Self {
        Self { schedule: "inverse_sqrt_t".into(), eta: None, theta_init: None }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHedge {
    tau_min: f64,
    tau_max: f64,
    horizon: Option<u64>,
    eta: Option<f64>,
    #[serde(default = "default_zeta")]
    zeta: String,
    scale: Option<f64>,
    log_scale: Option<f64>,
    #[serde(default)]
    tau_init: TauInit,
}

fn default_zeta() -> String {
    "log".into()
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFeedback {
    miss_prob: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawService {
    address: Option<String>,
    policy: Option<String>,
    timeout_secs: Option<f64>,
    window: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    source: String,
    path: Option<PathBuf>,
    horizon: Option<u64>,
    #[serde(default)]
    jumps: Vec<u64>,
    #[serde(default)]
    anomaly_window: u64,
    mean_range: Option<(f64, f64)>,
    means: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOutput {
    dir: Option<PathBuf>,
}

impl RawConfig {
    fn validate(self, text: &str) -> Result<RunConfig> {
        let err =
            |section: &str, key: &str, message: String| Error::Config { line: locate(text, section, key), message };
        let wrap = |section: &'static str, key: &'static str| move |e: Error| err(section, key, e.to_string());

        let model = match self.model.family.as_str() {
            "bernoulli" | "gaussian" => {
                let dim = self.model.dim.ok_or_else(|| err("model", "family", "missing model.dim".into()))?;
                if self.model.family == "bernoulli" {
                    FamilyModel::bernoulli(dim).map_err(wrap("model", "dim"))?
                } else {
                    FamilyModel::gaussian(dim).map_err(wrap("model", "dim"))?
                }
            }
            "ising" => {
                let vertices =
                    self.model.vertices.ok_or_else(|| err("model", "family", "missing model.vertices".into()))?;
                FamilyModel::ising(vertices, self.model.edges.unwrap_or_default()).map_err(wrap("model", "edges"))?
            }
            other => return Err(err("model", "family", format!("unknown family {other:?}"))),
        };
        let dim = model.dim();

        let lo = self.bx.lo.expand(dim).ok_or_else(|| err("box", "lo", format!("box.lo must have {dim} entries")))?;
        let hi = self.bx.hi.expand(dim).ok_or_else(|| err("box", "hi", format!("box.hi must have {dim} entries")))?;
        let mut bx = FeasibleBox::new(lo, hi).map_err(wrap("box", "lo"))?;
        if let Some(h) = self.bx.strong_convexity {
            bx = bx.with_strong_convexity(h).map_err(wrap("box", "strong_convexity"))?;
        }
        let feasible_box = model.certify_box(&bx).map_err(wrap("box", "lo"))?;

        let channel = self.channel.unwrap_or(NoisyChannel::Identity);
        match channel {
            NoisyChannel::Bsc { p } => {
                NoisyChannel::bsc(p).map_err(wrap("channel", "p"))?;
            }
            NoisyChannel::Awgn { sigma2 } => {
                NoisyChannel::awgn(sigma2).map_err(wrap("channel", "sigma2"))?;
            }
            NoisyChannel::Identity => {}
        }
        channel.check_compatible(&model).map_err(wrap("channel", "kind"))?;

        let schedule = match (self.filter.schedule.as_str(), self.filter.eta) {
            ("inverse_t", _) => StepSchedule::InverseT,
            ("inverse_sqrt_t", _) => StepSchedule::InverseSqrtT,
            ("constant", Some(eta)) if eta > 0.0 && eta <= 1.0 => StepSchedule::Constant(eta),
            ("constant", _) => return Err(err("filter", "eta", "constant schedule needs 0 < eta <= 1".into())),
            (other, _) => return Err(err("filter", "schedule", format!("unknown schedule {other:?}"))),
        };
        if let Some(theta) = &self.filter.theta_init {
            if !feasible_box.contains(theta) {
                return Err(err("filter", "theta_init", "theta_init must lie inside the box".into()));
            }
        }

        let h = &self.hedge;
        let rate = match (h.horizon, h.eta) {
            (Some(_), Some(_)) => return Err(err("hedge", "eta", "set hedge.horizon or hedge.eta, not both".into())),
            (Some(0), None) => return Err(err("hedge", "horizon", "hedge.horizon must be positive".into())),
            (Some(t), None) => LearningRate::Fixed(1.0 / (t as f64).sqrt()),
            (None, Some(eta)) => LearningRate::Fixed(eta),
            (None, None) => LearningRate::InverseSqrtT,
        };
        let zeta = match (h.zeta.as_str(), h.scale, h.log_scale) {
            (_, Some(_), Some(_)) => {
                return Err(err("hedge", "log_scale", "set hedge.scale or hedge.log_scale, not both".into()))
            }
            ("linear", None, Some(lc)) => ZetaTransform::linear_with_log_scale(lc),
            ("linear", scale, None) => ZetaTransform::linear(scale.unwrap_or(1.0)),
            ("log", None, Some(lc)) => ZetaTransform::log(lc.exp()),
            ("log", scale, None) => ZetaTransform::log(scale.unwrap_or(1.0)),
            (other, _, _) => return Err(err("hedge", "zeta", format!("unknown zeta transform {other:?}"))),
        }
        .map_err(wrap("hedge", "scale"))?;
        let hedge = HedgeConfig { tau_min: h.tau_min, tau_max: h.tau_max, rate, zeta, tau_init: h.tau_init };
        hedge.state().map_err(wrap("hedge", "tau_min"))?;

        let miss_prob = self.feedback.miss_prob.unwrap_or(0.0);
        if !(0.0..=1.0).contains(&miss_prob) {
            return Err(err("feedback", "miss_prob", format!("miss_prob {miss_prob} not in [0, 1]")));
        }

        let mut service = ServiceConfig { address: self.service.address, ..ServiceConfig::default() };
        match self.service.policy.as_deref() {
            None | Some("label") => {}
            Some("arbitrary") => service.policy = HedgeMode::Arbitrary,
            Some(other) => return Err(err("service", "policy", format!("unknown service policy {other:?}"))),
        }
        if let Some(secs) = self.service.timeout_secs {
            if !(secs >= 0.0 && secs.is_finite()) {
                return Err(err("service", "timeout_secs", "timeout must be a nonnegative number".into()));
            }
            service.timeout = Duration::from_secs_f64(secs);
        }
        if let Some(w) = self.service.window {
            service.window = w;
        }

        let d = self.data;
        let data = match d.source.as_str() {
            "generator" => {
                if !matches!(model, FamilyModel::BernoulliProduct { .. }) {
                    return Err(err("data", "source", "the generator produces Bernoulli streams only".into()));
                }
                let horizon = d.horizon.ok_or_else(|| err("data", "source", "missing data.horizon".into()))?;
                if horizon == 0 {
                    return Err(err("data", "horizon", "data.horizon must be positive".into()));
                }
                let gen = GeneratorConfig {
                    horizon,
                    jumps: d.jumps,
                    anomaly_window: d.anomaly_window,
                    mean_range: d.mean_range.unwrap_or((0.05, 0.95)),
                    means: d.means,
                };
                if let Some(means) = &gen.means {
                    if means.len() != gen.jumps.len() + 1 {
                        return Err(err(
                            "data",
                            "means",
                            format!("{} mean rows for {} segments", means.len(), gen.jumps.len() + 1),
                        ));
                    }
                }
                gen.spec(dim, self.seed).map_err(|e| {
                    let key = if gen.means.is_some() && e.to_string().contains("mean") { "means" } else { "jumps" };
                    err("data", key, e.to_string())
                })?;
                DataSource::Generator(gen)
            }
            "file" => {
                DataSource::File(d.path.ok_or_else(|| err("data", "source", "file source needs data.path".into()))?)
            }
            "stdin" => DataSource::Stdin,
            other => return Err(err("data", "source", format!("unknown data source {other:?}"))),
        };
        Ok(RunConfig {
            seed: self.seed,
            mode: self.mode,
            model,
            feasible_box,
            channel,
            schedule,
            theta_init: self.filter.theta_init,
            hedge,
            miss_prob,
            service,
            data,
            output_dir: self.output.dir,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = r#"
seed = 3
mode = "label"

[model]
family = "bernoulli"
dim = 4

[box]
lo = -3.0
hi = 3.0

[channel]
kind = "bsc"
p = 0.1

[hedge]
tau_min = 0.0
tau_max = 1.0
horizon = 100
zeta = "linear"
log_scale = 2.0

[data]
source = "generator"
horizon = 100
jumps = [40]
anomaly_window = 5
"#;

    #[test]
    fn parses_a_small_config() {
        let c = RunConfig::from_toml_str(SMALL).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.hedge_mode(), HedgeMode::LabelEfficient);
        assert_eq!(c.channel, NoisyChannel::Bsc { p: 0.1 });
        assert_eq!(c.hedge.rate, LearningRate::Fixed(0.1));
        assert_eq!(c.hedge.zeta, ZetaTransform::LinearScale { log_c: 2.0 });
        assert!(c.feasible_box.is_certified());
        let spec = c.piecewise_spec().unwrap().unwrap();
        assert_eq!(spec.segment_starts(), vec![1, 40]);
        c.detector().unwrap();
    }

    #[test]
    fn zero_horizon_is_reported_with_its_line() {
        let text = SMALL.replace("horizon = 100\njumps", "horizon = 0\njumps");
        match RunConfig::from_toml_str(&text) {
            Err(Error::Config { line, message }) => {
                assert_eq!(text.lines().nth(line - 1).unwrap(), "horizon = 0");
                assert!(message.contains("positive"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_and_unknown_keys_carry_lines() {
        let text = SMALL.replace("dim = 4", "dim = 4\ncolour = 3");
        let Err(Error::Config { line, .. }) = RunConfig::from_toml_str(&text) else { panic!() };
        assert_eq!(text.lines().nth(line - 1).unwrap(), "colour = 3");
        let text = SMALL.replace("p = 0.1", "p = = 0.1");
        let Err(Error::Config { line, .. }) = RunConfig::from_toml_str(&text) else { panic!() };
        assert_eq!(text.lines().nth(line - 1).unwrap(), "p = = 0.1");
    }

    #[test]
    fn incompatible_channel() {
        let text = SMALL.replace("kind = \"bsc\"\np = 0.1", "kind = \"awgn\"\nsigma2 = 1.0");
        let Err(Error::Config { line, message }) = RunConfig::from_toml_str(&text) else { panic!() };
        assert_eq!(text.lines().nth(line - 1).unwrap(), "kind = \"awgn\"");
        assert!(message.contains("incompatible"));
    }

    #[test]
    fn presets_parse() {
        for name in PRESETS {
            let c = RunConfig::preset(name).unwrap();
            let spec = c.piecewise_spec().unwrap().unwrap();
            assert_eq!((spec.dim, spec.horizon), (500, 1000));
            assert_eq!(spec.segment_starts(), vec![1, 100, 500, 700]);
            assert_eq!(spec.labels().iter().filter(|y| y.is_anomalous()).count(), 75);
        }
        assert_eq!(RunConfig::preset("exp2a").unwrap().mode, FeedbackMode::Label);
        assert_eq!(RunConfig::preset("exp2b").unwrap().miss_prob, 0.2);
        assert!(RunConfig::preset("exp3").is_err());
    }
}
