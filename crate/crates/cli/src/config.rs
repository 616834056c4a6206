//! Run configuration: one JSON document per experiment.

use std::path::{Path, PathBuf};

use phred::basis::H2Options;
use phred::bounds::BoundOptions;
use phred::integrate::Scheme;
use phred::models::{LadderParams, TodaParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelConfig {
    Ladder(LadderParams),
    Toda(TodaParams),
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Ladder(_) => "ladder",
            Self::Toda(_) => "toda",
        }
    }
}

/// Input signals; scalar signals drive the first port only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum InputConfig {
    GaussianPulse {
        #[serde(default = "pulse_magnitude")]
        magnitude: f64,
        #[serde(default = "pulse_sigma")]
        sigma: f64,
        #[serde(default = "pulse_center")]
        center: f64,
        #[serde(default = "pulse_window")]
        window: f64,
    },
    Sinusoid {
        #[serde(default = "one")]
        amplitude: f64,
        #[serde(default = "one")]
        omega: f64,
    },
    Constant {
        value: f64,
    },
    Zero,
}

fn pulse_magnitude() -> f64 {
    3.0
}
fn pulse_sigma() -> f64 {
    0.5
}
fn pulse_center() -> f64 {
    1.5
}
fn pulse_window() -> f64 {
    3.0
}
fn one() -> f64 {
    1.0
}

impl InputConfig {
    /// Short label used in output tables.
    pub fn label(&self) -> String {
        match self {
            Self::GaussianPulse { .. } => "gaussian-pulse".into(),
            Self::Sinusoid { .. } => "sinusoid".into(),
            Self::Constant { .. } => "constant".into(),
            Self::Zero => "zero".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Pod,
    H2eps,
    Hybrid,
    PodDeim,
    H2epsDeim,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Pod => "pod",
            Self::H2eps => "h2eps",
            Self::Hybrid => "hybrid",
            Self::PodDeim => "pod-deim",
            Self::H2epsDeim => "h2eps-deim",
        }
    }

    pub fn uses_deim(&self) -> bool {
        matches!(self, Self::PodDeim | Self::H2epsDeim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricChoice {
    Identity,
    HessianAt0,
}

/// Cross-product lists for `sweep`; empty lists fall back to the scalar fields.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub methods: Vec<Method>,
    pub r: Vec<usize>,
    pub m: Vec<usize>,
    /// `(r_pod, r_h2)` pairs for hybrid points; only pairs summing to `r` are used.
    pub splits: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Training input.
    pub input: InputConfig,
    /// Test input for `evaluate`; defaults to none.
    #[serde(default)]
    pub test_input: Option<InputConfig>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub dt: f64,
    #[serde(default)]
    pub scheme: Scheme,
    pub method: Method,
    pub r: usize,
    #[serde(default)]
    pub r_pod: Option<usize>,
    #[serde(default)]
    pub r_h2: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_metric")]
    pub metric: MetricChoice,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub h2: H2Options,
    #[serde(default)]
    pub bounds: BoundOptions,
    #[serde(default)]
    pub sweep: SweepConfig,
    /// Online timing repetitions after one warm-up run; the median is reported.
    #[serde(default = "default_timing_runs")]
    pub timing_runs: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_stride() -> usize {
    1
}
fn default_metric() -> MetricChoice {
    MetricChoice::HessianAt0
}
fn default_timing_runs() -> usize {
    5
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn t_span(&self) -> (f64, f64) {
        (self.t_start, self.t_end)
    }

    /// Checks the fields required by the selected method.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if !(self.dt > 0.0) || !(self.t_end > self.t_start) {
            return bad(format!("need dt > 0 and t_end > t_start, got dt = {}, span = {:?}", self.dt, self.t_span()));
        }
        if self.r == 0 {
            return bad("r must be positive".into());
        }
        if self.stride == 0 {
            return bad("stride must be positive".into());
        }
        if self.timing_runs == 0 {
            return bad("timing_runs must be positive".into());
        }
        self.validate_method(self.method, self.r, self.m, self.r_pod, self.r_h2)
    }

    pub(crate) fn validate_method(
        &self,
        method: Method,
        r: usize,
        m: Option<usize>,
        r_pod: Option<usize>,
        r_h2: Option<usize>,
    ) -> Result<(), CliError> {
        if method.uses_deim() && !m.is_some_and(|m| m > 0) {
            return Err(CliError::Config(format!("method {} requires m >= 1", method.as_str())));
        }
        if method == Method::Hybrid {
            match (r_pod, r_h2) {
                (Some(a), Some(b)) if a + b == r && a > 0 && b > 0 => {}
                (Some(a), Some(b)) => {
                    return Err(CliError::Config(format!(
                        "hybrid split r_pod + r_h2 = {a} + {b} must equal r = {r} with both positive"
                    )))
                }
                _ => return Err(CliError::Config("method hybrid requires r_pod and r_h2".into())),
            }
        }
        Ok(())
    }
}
