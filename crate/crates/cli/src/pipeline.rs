//! Simulate, snapshot, reduce and evaluate, with stage-tagged errors.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use phred::basis::{
    h2eps_ph_bases, hybrid_bases, linearize, pod_ph_bases, snapshots_from_trajectory, IterationLog, LinearPhModel,
    ReductionBasis, SnapshotSet,
};
use phred::deim::{build_split, deim_basis_from_snapshots, deim_reduce, remainder_snapshots, DeimEnergy, DeimModel, HamiltonianSplit};
use phred::integrate::{simulate, IntegratorConfig};
use phred::models::{gaussian_pulse, ladder_network, toda_lattice};
use phred::phcore::{InputSignal, NlphSystem, Trajectory, WeightedMetric};
use phred::reduce::{error_metrics, init_reduced_state, project_ph, simulate_reduced, ErrorMetrics, ReducedSystem};
use serde::Serialize;

use crate::config::{InputConfig, Method, MetricChoice, ModelConfig, RunConfig};
use crate::{CliError, StageExt};

pub fn build_model(model: &ModelConfig) -> Result<NlphSystem, CliError> {
    let sys = match model {
        ModelConfig::Ladder(p) => ladder_network(p),
        ModelConfig::Toda(p) => toda_lattice(p),
    };
    sys.map_err(|e| CliError::Config(format!("model: {e}")))
}

pub fn build_input(input: &InputConfig, m_in: usize) -> Result<InputSignal, CliError> {
    Ok(match *input {
        InputConfig::GaussianPulse {
            magnitude,
            sigma,
            center,
            window,
        } => {
            let pulse = gaussian_pulse(magnitude, sigma, center, window).map_err(|e| CliError::Config(format!("input: {e}")))?;
            InputSignal::new("gaussian-pulse", m_in, move |t| {
                let mut u = DVector::zeros(m_in);
                u[0] = pulse.eval(t)[0];
                u
            })
        }
        InputConfig::Sinusoid { amplitude, omega } => {
            InputSignal::first_port("sinusoid", m_in, move |t| amplitude * (omega * t).sin())
        }
        InputConfig::Constant { value } => InputSignal::first_port("constant", m_in, move |_| value),
        InputConfig::Zero => InputSignal::zero(m_in),
    })
}

pub fn build_metric(sys: &NlphSystem, choice: MetricChoice) -> Result<WeightedMetric, CliError> {
    match choice {
        MetricChoice::Identity => Ok(WeightedMetric::identity(sys.n())),
        MetricChoice::HessianAt0 => {
            let q = linearize(sys).stage("metric")?.q;
            WeightedMetric::new(q).stage("metric")
        }
    }
}

/// Everything shared by all reduction points of one configuration.
pub struct Experiment {
    pub sys: NlphSystem,
    pub metric: WeightedMetric,
    pub integrator: IntegratorConfig,
    pub t_span: (f64, f64),
    pub training: InputSignal,
    pub test: Option<InputSignal>,
    /// Linearization at the origin, built on first use by H2 methods.
    linear: std::sync::OnceLock<Result<LinearPhModel, phred::PhError>>,
}

impl Experiment {
    pub fn new(cfg: &RunConfig) -> Result<Self, CliError> {
        let sys = build_model(&cfg.model)?;
        let metric = build_metric(&sys, cfg.metric)?;
        let training = build_input(&cfg.input, sys.m_in())?;
        let test = cfg.test_input.as_ref().map(|i| build_input(i, sys.m_in())).transpose()?;
        Ok(Self {
            metric,
            integrator: IntegratorConfig::new(cfg.scheme, cfg.dt),
            t_span: cfg.t_span(),
            training,
            test,
            sys,
            linear: std::sync::OnceLock::new(),
        })
    }

    pub fn simulate_full(&self, input: &InputSignal) -> Result<Trajectory, CliError> {
        simulate(&self.sys, input, self.t_span, &self.integrator).stage("simulate-full")
    }

    pub fn linearization(&self) -> Result<&LinearPhModel, CliError> {
        self.linear
            .get_or_init(|| linearize(&self.sys))
            .as_ref()
            .map_err(|e| CliError::Numerical {
                stage: "linearize",
                source: e.clone(),
            })
    }

    /// Named inputs: training first, then the test input if configured.
    pub fn inputs<'a>(&'a self, cfg: &RunConfig) -> Vec<(String, &'a InputSignal)> {
        let mut out = vec![(format!("train:{}", cfg.input.label()), &self.training)];
        if let (Some(t), Some(ic)) = (&self.test, &cfg.test_input) {
            out.push((format!("test:{}", ic.label()), t));
        }
        out
    }
}

/// One point of the method/order grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ReductionSpec {
    pub method: Method,
    pub r: usize,
    pub m: Option<usize>,
    pub r_pod: Option<usize>,
    pub r_h2: Option<usize>,
}

impl ReductionSpec {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            method: cfg.method,
            r: cfg.r,
            m: cfg.m,
            r_pod: cfg.r_pod,
            r_h2: cfg.r_h2,
        }
    }
}

pub struct DeimParts {
    pub split: HamiltonianSplit,
    pub model: DeimModel,
    pub energy: Arc<DeimEnergy>,
}

pub struct ReducedModel {
    pub spec: ReductionSpec,
    /// Basis used by `system`; Q-normalized for DEIM methods.
    pub basis: ReductionBasis,
    pub system: ReducedSystem,
    pub deim: Option<DeimParts>,
    pub h2_log: Option<IterationLog>,
    pub snapshot_singular_values: Option<Vec<f64>>,
}

pub fn snapshots(exp: &Experiment, training: &Trajectory, stride: usize) -> Result<SnapshotSet, CliError> {
    snapshots_from_trajectory(&exp.sys, training, stride, Some(&exp.metric)).stage("snapshots")
}

/// Build bases and the reduced system for one spec from training snapshots.
pub fn build_reduced(
    exp: &Experiment,
    cfg: &RunConfig,
    spec: ReductionSpec,
    snaps: &SnapshotSet,
) -> Result<ReducedModel, CliError> {
    cfg.validate_method(spec.method, spec.r, spec.m, spec.r_pod, spec.r_h2)?;
    let mut h2_log = None;
    let mut h2 = |r: usize| -> Result<ReductionBasis, CliError> {
        let (b, log) = h2eps_ph_bases(exp.linearization()?, r, &cfg.h2).stage("basis")?;
        h2_log = Some(log);
        Ok(b)
    };
    let basis = match spec.method {
        Method::Pod | Method::PodDeim => pod_ph_bases(snaps, spec.r).stage("basis")?,
        Method::H2eps | Method::H2epsDeim => h2(spec.r)?,
        Method::Hybrid => {
            let pod = pod_ph_bases(snaps, spec.r_pod.unwrap_or(0)).stage("basis")?;
            let h = h2(spec.r_h2.unwrap_or(0))?;
            hybrid_bases(&pod, &h).stage("basis")?
        }
    };
    for w in &basis.warnings {
        log::warn!("{}: {w}", spec.method.as_str());
    }
    let snapshot_singular_values = Some(snaps.singular_values_x().iter().copied().collect());
    if !spec.method.uses_deim() {
        let system = project_ph(&exp.sys, &basis).stage("projection")?;
        return Ok(ReducedModel {
            spec,
            basis,
            system,
            deim: None,
            h2_log,
            snapshot_singular_values,
        });
    }
    let basis = basis.q_normalized(&exp.metric).stage("projection")?;
    let split = build_split(&exp.sys, exp.metric.clone()).stage("deim")?;
    let g = remainder_snapshots(snaps, &split);
    let model = deim_basis_from_snapshots(&g, spec.m.unwrap_or(0), &exp.metric).stage("deim")?;
    let (system, energy) = deim_reduce(&exp.sys, &basis, &split, model.clone()).stage("deim")?;
    Ok(ReducedModel {
        spec,
        basis,
        system,
        deim: Some(DeimParts { split, model, energy }),
        h2_log,
        snapshot_singular_values,
    })
}

pub fn simulate_reduced_model(exp: &Experiment, red: &ReducedModel, input: &InputSignal) -> Result<Trajectory, CliError> {
    let x0 = init_reduced_state(&red.basis, &DVector::zeros(exp.sys.n()));
    simulate_reduced(&red.system, input, exp.t_span, &exp.integrator, &x0).stage("simulate-reduced")
}

pub fn compare(exp: &Experiment, red: &ReducedModel, full: &Trajectory, reduced: &Trajectory) -> Result<ErrorMetrics, CliError> {
    error_metrics(full, reduced, &red.system.lift, &exp.metric).stage("evaluate")
}

/// Median wall time in seconds of `runs` calls after one warm-up call.
pub fn median_time<T>(runs: usize, mut f: impl FnMut() -> Result<T, CliError>) -> Result<f64, CliError> {
    f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let k = times.len();
    Ok(if k % 2 == 1 {
        times[k / 2]
    } else {
        0.5 * (times[k / 2 - 1] + times[k / 2])
    })
}

/// One row of the error tables.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorRow {
    pub method: String,
    pub r: usize,
    pub r_pod: Option<usize>,
    pub r_h2: Option<usize>,
    pub m: Option<usize>,
    pub input: String,
    pub avg_rel_output_error: f64,
    pub avg_rel_state_error: f64,
    pub l2_output_err: f64,
    pub l2_state_err_q: f64,
}

impl ErrorRow {
    pub fn new(spec: &ReductionSpec, input: &str, m: &ErrorMetrics) -> Self {
        Self {
            method: spec.method.as_str().into(),
            r: spec.r,
            r_pod: spec.r_pod.filter(|_| spec.method == Method::Hybrid),
            r_h2: spec.r_h2.filter(|_| spec.method == Method::Hybrid),
            m: spec.m.filter(|_| spec.method.uses_deim()),
            input: input.into(),
            avg_rel_output_error: m.avg_rel_output_error,
            avg_rel_state_error: m.avg_rel_state_error,
            l2_output_err: m.l2_output_err,
            l2_state_err_q: m.l2_state_err_q,
        }
    }
}
