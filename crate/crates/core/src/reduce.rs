//! Petrov–Galerkin projection that keeps the port-Hamiltonian form, reduced
//! simulation, and error metrics against the full model.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::ReductionBasis;
use crate::error::{PhError, Result};
use crate::integrate::{integrate, IntegratorConfig, PortDynamics};
use crate::linalg::{all_finite, skew_part, sym_part, trapezoid};
use crate::phcore::{
    dissipation_margin_with, validate_structure, Hamiltonian, InputSignal, NlphSystem, StructureReport,
    Trajectory, WeightedMetric,
};

/// Reduced energy `H_r` and its gradient in reduced coordinates.
pub trait ReducedEnergy: Send + Sync {
    fn value(&self, x_r: &DVector<f64>) -> f64;
    fn gradient(&self, x_r: &DVector<f64>) -> Result<DVector<f64>>;
    fn kind(&self) -> &'static str;
}

/// `H_r(x_r) = H(Vx_r)`, `∇H_r = Vᵀ∇H(Vx_r)`.
pub struct LiftedEnergy {
    v: DMatrix<f64>,
    ham: Arc<dyn Hamiltonian>,
}

impl LiftedEnergy {
    pub fn new(v: DMatrix<f64>, ham: Arc<dyn Hamiltonian>) -> Self {
        Self { v, ham }
    }
}

impl ReducedEnergy for LiftedEnergy {
    fn value(&self, x_r: &DVector<f64>) -> f64 {
        self.ham.value(&(&self.v * x_r))
    }

    fn gradient(&self, x_r: &DVector<f64>) -> Result<DVector<f64>> {
        let x = &self.v * x_r;
        let g = self.ham.gradient(&x);
        if !all_finite(g.as_slice()) {
            return Err(PhError::Evaluation {
                detail: "gradient of H at lifted reduced state is not finite".into(),
                state_norm: x.norm(),
                state: x.as_slice().to_vec(),
            });
        }
        Ok(self.v.tr_mul(&g))
    }

    fn kind(&self) -> &'static str {
        "exact"
    }
}

/// `ẋ_r = (J_r − R_r)∇H_r(x_r) + B_r u`, `y_r = B_rᵀ∇H_r(x_r)`.
#[derive(Clone)]
pub struct ReducedSystem {
    pub j_r: DMatrix<f64>,
    pub r_r: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
    pub energy: Arc<dyn ReducedEnergy>,
    /// Lift `V`: full state ≈ `V x_r`.
    pub lift: DMatrix<f64>,
    /// Basis provenance followed by the gradient kind, e.g. `pod+deim`.
    pub provenance: String,
}

impl fmt::Debug for ReducedSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReducedSystem")
            .field("r", &self.r())
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl ReducedSystem {
    /// Projected matrices with exact skew/symmetric parts and the given energy.
    pub fn assemble(sys: &NlphSystem, basis: &ReductionBasis, energy: Arc<dyn ReducedEnergy>) -> Self {
        let w = &basis.w;
        let j_r = skew_part(&w.tr_mul(&(sys.j() * w)));
        let r_r = sym_part(&w.tr_mul(&(sys.r() * w)));
        let b_r = w.tr_mul(sys.b());
        let provenance = format!("{}+{}", basis.provenance.as_str(), energy.kind());
        Self {
            j_r,
            r_r,
            b_r,
            energy,
            lift: basis.v.clone(),
            provenance,
        }
    }

    pub fn r(&self) -> usize {
        self.j_r.nrows()
    }

    pub fn hamiltonian(&self, x_r: &DVector<f64>) -> f64 {
        self.energy.value(x_r)
    }

    pub fn validate_structure(&self) -> StructureReport {
        validate_structure(&self.j_r, &self.r_r, &self.b_r).expect("projected shapes are consistent")
    }

    pub fn dissipation_margin(&self, traj: &Trajectory) -> f64 {
        dissipation_margin_with(traj, |x| self.energy.value(x))
    }

    pub fn lift_state(&self, x_r: &DVector<f64>) -> DVector<f64> {
        &self.lift * x_r
    }
}

impl PortDynamics for ReducedSystem {
    fn state_dim(&self) -> usize {
        self.r()
    }
    fn input_dim(&self) -> usize {
        self.b_r.ncols()
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.energy.gradient(x)?;
        Ok((&self.j_r - &self.r_r) * g + &self.b_r * u)
    }
    fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.b_r.tr_mul(&self.energy.gradient(x)?))
    }
}

/// Structure-preserving projection with the exact lifted gradient.
pub fn project_ph(sys: &NlphSystem, basis: &ReductionBasis) -> Result<ReducedSystem> {
    if basis.n() != sys.n() {
        return Err(PhError::InvalidArgument(format!(
            "basis has {} rows, system has n = {}",
            basis.n(),
            sys.n()
        )));
    }
    let energy = Arc::new(LiftedEnergy::new(basis.v.clone(), sys.hamiltonian_model().clone()));
    Ok(ReducedSystem::assemble(sys, basis, energy))
}

/// `x_r(0) = Wᵀx(0)`.
pub fn init_reduced_state(basis: &ReductionBasis, x0: &DVector<f64>) -> DVector<f64> {
    basis.w.tr_mul(x0)
}

pub fn simulate_reduced(
    red: &ReducedSystem,
    input: &InputSignal,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    x_r0: &DVector<f64>,
) -> Result<Trajectory> {
    integrate(red, input, x_r0, t_span, cfg)
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorMetrics {
    /// `Σ‖y − y_r‖ / Σ‖y‖` over the grid.
    pub avg_rel_output_error: f64,
    /// `Σ‖x − Vx_r‖_Q / Σ‖x‖_Q` over the grid.
    pub avg_rel_state_error: f64,
    pub output_error_series: Vec<f64>,
    pub state_error_series: Vec<f64>,
    /// `∫‖y − y_r‖² dt`.
    pub l2_output_err: f64,
    /// `∫‖x − Vx_r‖²_Q dt`.
    pub l2_state_err_q: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

pub fn same_grid(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0))
}

pub fn error_metrics(
    full: &Trajectory,
    red: &Trajectory,
    lift: &DMatrix<f64>,
    metric: &WeightedMetric,
) -> Result<ErrorMetrics> {
    if !same_grid(&full.times, &red.times) {
        return Err(PhError::GridMismatch(format!(
            "{} full samples vs {} reduced samples",
            full.len(),
            red.len()
        )));
    }
    if lift.ncols() != red.states.nrows() || lift.nrows() != full.states.nrows() {
        return Err(PhError::InvalidArgument("lift does not match trajectory dimensions".into()));
    }
    let lifted = lift * &red.states;
    let mut out_err = Vec::with_capacity(full.len());
    let mut state_err = Vec::with_capacity(full.len());
    let (mut out_ref, mut state_ref) = (0.0, 0.0);
    for k in 0..full.len() {
        let x = full.state(k);
        let dx = &x - lifted.column(k);
        state_err.push(metric.norm(&dx));
        state_ref += metric.norm(&x);
        let y = full.output(k);
        out_err.push((&y - red.outputs.column(k)).norm());
        out_ref += y.norm();
    }
    let sq = |v: &[f64]| v.iter().map(|e| e * e).collect::<Vec<_>>();
    Ok(ErrorMetrics {
        avg_rel_output_error: ratio(out_err.iter().sum(), out_ref),
        avg_rel_state_error: ratio(state_err.iter().sum(), state_ref),
        l2_output_err: trapezoid(&full.times, &sq(&out_err)),
        l2_state_err_q: trapezoid(&full.times, &sq(&state_err)),
        output_error_series: out_err,
        state_error_series: state_err,
    })
}
