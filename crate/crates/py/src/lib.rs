//! Python bindings: families, channels, the filter, the threshold forecaster,
//! the full detector and the simulation harness.

use hedgefilter::checks::{run_all, run_check, Scale};
use hedgefilter::config::{FeedbackMode, RunConfig};
use hedgefilter::detect::{Detector as CoreDetector, HedgeMode};
use hedgefilter::harness::{best_static_tau, mistake_bound, seeded_rng, RngPurpose};
use hedgefilter::hedge::{hinge_loss, query_probability, FeedbackRequest, FeedbackSource, Label, LearningRate};
use hedgefilter::simulate::simulate as core_simulate;
use hedgefilter::{FamilyModel, FeasibleBox, FilterState, HedgeState, NoisyChannel, NoisyMirrorDescent, StepSchedule};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use rand::Rng;
use serde::Serialize;

create_exception!(hedgefilter_py, HedgeFilterError, PyException);

fn err(e: hedgefilter::Error) -> PyErr {
    HedgeFilterError::new_err(e.to_string())
}

/// Converts through JSON so Python sees plain dicts and lists.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn label(y: i64) -> PyResult<Label> {
    Label::from_i64(y).map_err(err)
}

/// An exponential family: "bernoulli", "gaussian" or a small Ising model.
#[pyclass(name = "Family", frozen, from_py_object)]
#[derive(Clone)]
struct PyFamily(FamilyModel);

#[pymethods]
impl PyFamily {
    #[staticmethod]
    fn bernoulli(dim: usize) -> PyResult<Self> {
        FamilyModel::bernoulli(dim).map(Self).map_err(err)
    }

    #[staticmethod]
    fn gaussian(dim: usize) -> PyResult<Self> {
        FamilyModel::gaussian(dim).map(Self).map_err(err)
    }

    #[staticmethod]
    fn ising(vertices: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        FamilyModel::ising(vertices, edges).map(Self).map_err(err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn log_partition(&self, theta: Vec<f64>) -> PyResult<f64> {
        self.0.log_partition(&theta).map_err(err)
    }

    /// Mean parameters.
    fn grad_log_partition(&self, theta: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_log_partition(&theta).map(|m| m.to_vec()).map_err(err)
    }

    fn inverse_grad(&self, mu: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.inverse_grad(&mu).map(|t| t.to_vec()).map_err(err)
    }

    /// KL(p_theta1 || p_theta2).
    fn kl_divergence(&self, theta1: Vec<f64>, theta2: Vec<f64>) -> PyResult<f64> {
        self.0.kl_divergence(&theta1, &theta2).map_err(err)
    }

    fn sufficient_stat(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.sufficient_stat(&x).map_err(err)
    }

    fn log_density(&self, theta: Vec<f64>, x: Vec<f64>) -> PyResult<f64> {
        self.0.log_density(&theta, &x).map_err(err)
    }

    #[pyo3(signature = (theta, n, seed=0))]
    fn sample(&self, theta: Vec<f64>, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = seeded_rng(seed, RngPurpose::CleanSamples);
        (0..n).map(|_| self.0.sample(&theta, &mut rng)).collect::<hedgefilter::Result<_>>().map_err(err)
    }

    /// Strong convexity, KL diameter and mean bound of the box `[lo, hi]^dim`.
    fn box_constants(&self, lo: f64, hi: f64) -> PyResult<(f64, f64, f64)> {
        self.certified(lo, hi)?.constants().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Family({}, dim={})", self.0.name(), self.0.dim())
    }
}

impl PyFamily {
    fn certified(&self, lo: f64, hi: f64) -> PyResult<FeasibleBox> {
        let bx = FeasibleBox::uniform(self.0.dim(), lo, hi).map_err(err)?;
        self.0.certify_box(&bx).map_err(err)
    }
}

/// A memoryless corruption channel.
#[pyclass(name = "Channel", frozen, from_py_object)]
#[derive(Clone)]
struct PyChannel(NoisyChannel);

#[pymethods]
impl PyChannel {
    #[staticmethod]
    fn identity() -> Self {
        Self(NoisyChannel::Identity)
    }

    #[staticmethod]
    fn bsc(p: f64) -> PyResult<Self> {
        NoisyChannel::bsc(p).map(Self).map_err(err)
    }

    #[staticmethod]
    fn awgn(sigma2: f64) -> PyResult<Self> {
        NoisyChannel::awgn(sigma2).map(Self).map_err(err)
    }

    #[pyo3(signature = (family, x, seed=0))]
    fn corrupt(&self, family: &PyFamily, x: Vec<f64>, seed: u64) -> PyResult<Vec<f64>> {
        let mut rng = seeded_rng(seed, RngPurpose::ChannelNoise);
        self.0.corrupt(&family.0, &x, &mut rng).map_err(err)
    }

    /// Unbiased estimate of the clean sufficient statistic.
    fn unbiased_stat(&self, family: &PyFamily, z: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.unbiased_stat(&family.0, &z).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Channel({:?})", self.0)
    }
}

fn schedule(name: &str, eta: Option<f64>) -> PyResult<StepSchedule> {
    match (name, eta) {
        ("inverse_t", _) => Ok(StepSchedule::InverseT),
        ("inverse_sqrt_t", _) => Ok(StepSchedule::InverseSqrtT),
        ("constant", Some(eta)) => Ok(StepSchedule::Constant(eta)),
        ("constant", None) => Err(PyValueError::new_err("the constant schedule needs eta")),
        (other, _) => Err(PyValueError::new_err(format!("unknown schedule {other:?}"))),
    }
}

/// Mirror-descent filter on noisy observations.
#[pyclass(name = "Filter")]
struct PyFilter(NoisyMirrorDescent);

#[pymethods]
impl PyFilter {
    #[new]
    #[pyo3(signature = (family, lo, hi, channel=None, schedule="inverse_sqrt_t", eta=None, theta_init=None))]
    fn new(
        family: &PyFamily,
        lo: f64,
        hi: f64,
        channel: Option<PyChannel>,
        schedule: &str,
        eta: Option<f64>,
        theta_init: Option<Vec<f64>>,
    ) -> PyResult<Self> {
        let bx = family.certified(lo, hi)?;
        let state = FilterState::new(family.0.clone(), bx, self::schedule(schedule, eta)?, theta_init).map_err(err)?;
        let channel = channel.map_or(NoisyChannel::Identity, |c| c.0);
        NoisyMirrorDescent::new(state, channel).map(Self).map_err(err)
    }

    /// Consumes one noisy observation; returns the step's losses and belief.
    #[pyo3(signature = (z, x=None))]
    fn observe<'py>(&mut self, py: Python<'py>, z: Vec<f64>, x: Option<Vec<f64>>) -> PyResult<Bound<'py, PyAny>> {
        let step = self.0.observe(&z, x.as_deref()).map_err(err)?;
        to_py(py, &step)
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.0.state().theta_hat().to_vec()
    }

    #[getter]
    fn t(&self) -> u64 {
        self.0.state().t()
    }
}

/// Threshold forecaster over anomaly scores; labels are +1 (anomalous) or -1.
#[pyclass(name = "Hedge")]
struct PyHedge(HedgeState);

#[pymethods]
impl PyHedge {
    #[new]
    #[pyo3(signature = (tau_min, tau_max, horizon=None, eta=None, tau_init=None))]
    fn new(
        tau_min: f64,
        tau_max: f64,
        horizon: Option<u64>,
        eta: Option<f64>,
        tau_init: Option<f64>,
    ) -> PyResult<Self> {
        let rate = match (horizon, eta) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("give horizon or eta, not both")),
            (Some(0), None) => return Err(PyValueError::new_err("horizon must be positive")),
            (Some(t), None) => LearningRate::Fixed(1.0 / (t as f64).sqrt()),
            (None, Some(eta)) => LearningRate::Fixed(eta),
            (None, None) => LearningRate::InverseSqrtT,
        };
        HedgeState::new(tau_min, tau_max, rate, tau_init).map(Self).map_err(err)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.0.tau()
    }

    #[getter]
    fn eta(&self) -> f64 {
        self.0.eta()
    }

    #[getter]
    fn t(&self) -> u64 {
        self.0.t()
    }

    fn decide(&self, zeta: f64) -> i8 {
        self.0.decide(zeta).as_i8()
    }

    /// One step with the label `y` revealed, or none; returns the decision.
    #[pyo3(signature = (zeta, y=None))]
    fn step(&mut self, zeta: f64, y: Option<i64>) -> PyResult<i8> {
        let y = y.map(label).transpose()?;
        Ok(self.0.step_arbitrary(zeta, y).y_hat.as_i8())
    }
}

/// Feedback carried alongside the observation.
struct Given {
    y: Option<Label>,
    volunteered: bool,
}

impl FeedbackSource for Given {
    fn feedback(&mut self, request: &FeedbackRequest) -> hedgefilter::Result<Option<Label>> {
        Ok(if request.requested || self.volunteered { self.y } else { None })
    }
}

fn load_config(
    preset: Option<&str>,
    config: Option<&str>,
    seed: Option<u64>,
    mode: Option<&str>,
) -> PyResult<RunConfig> {
    let mut cfg = match (preset, config) {
        (Some(name), None) => RunConfig::preset(name),
        (None, Some(text)) => RunConfig::from_toml_str(text),
        _ => return Err(PyValueError::new_err("give exactly one of preset or config")),
    }
    .map_err(err)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.mode = FeedbackMode::parse(mode).map_err(err)?;
    }
    Ok(cfg)
}

/// Filter and threshold run together, configured from a preset or TOML text.
#[pyclass(name = "Detector")]
struct PyDetector {
    inner: CoreDetector,
    mode: HedgeMode,
    coins: rand_chacha::ChaCha8Rng,
}

#[pymethods]
impl PyDetector {
    #[new]
    #[pyo3(signature = (preset=None, config=None, seed=None, mode=None))]
    fn new(preset: Option<&str>, config: Option<&str>, seed: Option<u64>, mode: Option<&str>) -> PyResult<Self> {
        let cfg = load_config(preset, config, seed, mode)?;
        let mode = cfg.hedge_mode();
        Ok(Self { inner: cfg.detector().map_err(err)?, mode, coins: seeded_rng(cfg.seed, RngPurpose::QueryCoins) })
    }

    /// Scores `z` and updates the threshold with whatever of `y` the mode uses.
    #[pyo3(signature = (z, y=None, x=None))]
    fn step<'py>(
        &mut self,
        py: Python<'py>,
        z: Vec<f64>,
        y: Option<i64>,
        x: Option<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let y = y.map(label).transpose()?;
        if self.mode == HedgeMode::Full && y.is_none() {
            return Err(PyValueError::new_err("full feedback mode needs y on every step"));
        }
        let mut source = Given { y, volunteered: self.mode == HedgeMode::Arbitrary };
        let coins = &mut self.coins;
        let mut coin = |q: f64| coins.random::<f64>() < q;
        let record = self.inner.step(&z, x.as_deref(), y, self.mode, &mut coin, &mut source).map_err(err)?;
        to_py(py, &record)
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.hedge().tau()
    }

    #[getter]
    fn t(&self) -> u64 {
        self.inner.t()
    }
}

/// Runs a synthetic experiment; returns the records, report and regret ledger.
#[pyfunction]
#[pyo3(signature = (preset=None, config=None, seed=None, mode=None))]
fn simulate<'py>(
    py: Python<'py>,
    preset: Option<&str>,
    config: Option<&str>,
    seed: Option<u64>,
    mode: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = load_config(preset, config, seed, mode)?;
    let sim = py.detach(|| core_simulate(&cfg)).map_err(err)?;
    #[derive(Serialize)]
    struct Out<'a> {
        records: &'a [hedgefilter::record::StreamRecord],
        report: &'a hedgefilter::harness::RunReport,
        ledger: &'a hedgefilter::harness::RegretLedger,
    }
    to_py(py, &Out { records: &sim.records, report: &sim.report, ledger: &sim.ledger })
}

/// Runs acceptance checks; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (ids=None, full=false))]
fn run_checks(py: Python<'_>, ids: Option<Vec<u8>>, full: bool) -> Vec<(u8, &'static str, bool, String)> {
    let scale = if full { Scale::full() } else { Scale::reduced() };
    let outcomes = py.detach(|| match ids {
        Some(ids) => ids.iter().filter_map(|&id| run_check(id, &scale)).collect(),
        None => run_all(&scale),
    });
    outcomes.into_iter().map(|o| (o.id, o.name, o.passed, o.detail)).collect()
}

/// Threshold with the fewest errors in hindsight and that error count.
#[pyfunction(name = "best_static_tau")]
fn py_best_static_tau(zetas: Vec<f64>, labels: Vec<i64>, tau_min: f64, tau_max: f64) -> PyResult<(f64, usize)> {
    let labels = labels.into_iter().map(label).collect::<PyResult<Vec<_>>>()?;
    best_static_tau(&zetas, &labels, tau_min, tau_max).map_err(err)
}

#[pyfunction(name = "hinge_loss")]
fn py_hinge_loss(tau: f64, zeta: f64, y: i64) -> PyResult<f64> {
    Ok(hinge_loss(tau, zeta, label(y)?))
}

#[pyfunction(name = "query_probability")]
fn py_query_probability(zeta: f64, tau: f64) -> f64 {
    query_probability(zeta, tau)
}

#[pyfunction(name = "mistake_bound")]
fn py_mistake_bound(horizon: u64) -> f64 {
    mistake_bound(horizon)
}

/// Adds every class and function to `m`.
pub fn register(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("HedgeFilterError", m.py().get_type::<HedgeFilterError>())?;
    m.add_class::<PyFamily>()?;
    m.add_class::<PyChannel>()?;
    m.add_class::<PyFilter>()?;
    m.add_class::<PyHedge>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(py_best_static_tau, m)?)?;
    m.add_function(wrap_pyfunction!(py_hinge_loss, m)?)?;
    m.add_function(wrap_pyfunction!(py_query_probability, m)?)?;
    m.add_function(wrap_pyfunction!(py_mistake_bound, m)?)?;
    Ok(())
}

#[pymodule]
fn hedgefilter_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    register(m)
}
