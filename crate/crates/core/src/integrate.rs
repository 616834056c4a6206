//! Fixed-step time integration: implicit midpoint (default) and classical RK4.
//!
//! The implicit midpoint step solves `y = x + dt·f((x + y)/2, u(t + dt/2))` by a
//! modified Newton iteration. The iteration matrix `I − (dt/2)·∂f/∂x` is factored
//! once and reused across steps until convergence slows, which keeps large
//! full-order runs affordable.

use nalgebra::{DMatrix, DVector, LU};
use serde::{Deserialize, Serialize};

use crate::error::{PhError, Result};
use crate::linalg::all_finite;
use crate::phcore::{InputSignal, NlphSystem, Trajectory};

/// Input-affine dynamics `ẋ = f(x, u)` with an output map.
pub trait PortDynamics {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>>;
    fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>>;
    /// `∂f/∂x`; independent of `u` for input-affine systems.
    fn rhs_jacobian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
}

impl PortDynamics for NlphSystem {
    fn state_dim(&self) -> usize {
        self.n()
    }
    fn input_dim(&self) -> usize {
        self.m_in()
    }
    fn rhs(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval_dynamics(x, u)
    }
    fn output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.eval_output(x)
    }
    fn rhs_jacobian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let hess = self.hamiltonian_model().hessian(x)?;
        Some(self.apply_structure_mat(&hess))
    }
}

/// Autonomous ODE `ẋ = f(x)` without ports.
pub struct Ode<F> {
    dim: usize,
    f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> Ode<F> {
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> PortDynamics for Ode<F> {
    fn state_dim(&self) -> usize {
        self.dim
    }
    fn input_dim(&self) -> usize {
        0
    }
    fn rhs(&self, x: &DVector<f64>, _u: &DVector<f64>) -> Result<DVector<f64>> {
        Ok((self.f)(x))
    }
    fn output(&self, _x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    ImplicitMidpoint,
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub dt: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl IntegratorConfig {
    pub fn new(scheme: Scheme, dt: f64) -> Self {
        Self {
            scheme,
            dt,
            newton_tol: 1e-10,
            newton_max_iter: 25,
        }
    }

    pub fn midpoint(dt: f64) -> Self {
        Self::new(Scheme::ImplicitMidpoint, dt)
    }

    pub fn rk4(dt: f64) -> Self {
        Self::new(Scheme::Rk4, dt)
    }
}

/// Uniform grid `t0, t0 + dt, …, t1`; `t1 − t0` must be a whole number of steps.
pub fn time_grid(t_span: (f64, f64), dt: f64) -> Result<Vec<f64>> {
    let (t0, t1) = t_span;
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(PhError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    if !(t1 > t0) {
        return Err(PhError::InvalidArgument(format!("empty time span [{t0}, {t1}]")));
    }
    let steps_f = (t1 - t0) / dt;
    let steps = steps_f.round();
    if (steps_f - steps).abs() > 1e-8 * steps.max(1.0) {
        return Err(PhError::InvalidArgument(format!(
            "span {} is not a multiple of dt = {dt}",
            t1 - t0
        )));
    }
    Ok((0..=steps as usize).map(|k| t0 + k as f64 * dt).collect())
}

fn finite_difference_jacobian(
    sys: &dyn PortDynamics,
    x: &DVector<f64>,
    u: &DVector<f64>,
    f0: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = x.len();
    let mut jac = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    for j in 0..n {
        let h = f64::EPSILON.sqrt() * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = sys.rhs(&xp, u)?;
        jac.set_column(j, &((fp - f0) / h));
        xp[j] = x[j];
    }
    Ok(jac)
}

struct MidpointSolver<'a> {
    sys: &'a dyn PortDynamics,
    cfg: IntegratorConfig,
    lu: Option<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    refreshes: usize,
}

impl<'a> MidpointSolver<'a> {
    fn refresh(&mut self, mid: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let n = mid.len();
        let jac = match self.sys.rhs_jacobian(mid) {
            Some(j) => j,
            None => {
                let f0 = self.sys.rhs(mid, u)?;
                finite_difference_jacobian(self.sys, mid, u, &f0)?
            }
        };
        let iter_matrix = DMatrix::identity(n, n) - jac * (0.5 * self.cfg.dt);
        self.lu = Some(iter_matrix.lu());
        self.refreshes += 1;
        Ok(())
    }

    /// One Newton sweep from `y`; returns the converged value or `None` when
    /// the iteration stalls.
    fn sweep(
        &self,
        x: &DVector<f64>,
        mut y: DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(Option<DVector<f64>>, f64)> {
        let dt = self.cfg.dt;
        let lu = self.lu.as_ref().expect("factorization present");
        let mut prev = f64::INFINITY;
        let mut last = f64::INFINITY;
        for it in 0..self.cfg.newton_max_iter {
            let mid = (x + &y) * 0.5;
            let g = &y - x - self.sys.rhs(&mid, u)? * dt;
            let delta = match lu.solve(&g) {
                Some(d) => d,
                None => return Ok((None, last)),
            };
            y -= &delta;
            last = delta.amax();
            if !last.is_finite() {
                return Ok((None, last));
            }
            if last <= self.cfg.newton_tol * (1.0 + y.amax()) {
                return Ok((Some(y), last));
            }
            // Contraction too slow for a stale factorization.
            if it >= 2 && last > 0.5 * prev {
                return Ok((None, last));
            }
            prev = last;
        }
        Ok((None, last))
    }

    fn step(
        &mut self,
        t: f64,
        x: &DVector<f64>,
        guess: DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        if self.lu.is_none() {
            self.refresh(x, u)?;
        }
        let (y, _) = self.sweep(x, guess.clone(), u)?;
        if let Some(y) = y {
            return Ok(y);
        }
        let mid = (x + &guess) * 0.5;
        self.refresh(&mid, u)?;
        match self.sweep(x, guess, u)? {
            (Some(y), _) => Ok(y),
            (None, last) => Err(PhError::NewtonFailure {
                t,
                iterations: 2 * self.cfg.newton_max_iter,
                last_update: last,
            }),
        }
    }
}

fn rk4_step(
    sys: &dyn PortDynamics,
    input: &InputSignal,
    t: f64,
    x: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>> {
    let um = input.eval(t + 0.5 * dt);
    let k1 = sys.rhs(x, &input.eval(t))?;
    let k2 = sys.rhs(&(x + &k1 * (0.5 * dt)), &um)?;
    let k3 = sys.rhs(&(x + &k2 * (0.5 * dt)), &um)?;
    let k4 = sys.rhs(&(x + &k3 * dt), &input.eval(t + dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Integrate `sys` from `x0` over `t_span` on the uniform grid of step `cfg.dt`.
pub fn integrate(
    sys: &dyn PortDynamics,
    input: &InputSignal,
    x0: &DVector<f64>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    let times = time_grid(t_span, cfg.dt)?;
    let n = sys.state_dim();
    if x0.len() != n || input.dim() != sys.input_dim() {
        return Err(PhError::InvalidArgument(format!(
            "state/input dimensions {}/{} do not match system {}/{}",
            x0.len(),
            input.dim(),
            n,
            sys.input_dim()
        )));
    }
    if !all_finite(x0.as_slice()) {
        return Err(PhError::Divergence { t: times[0] });
    }
    let steps = times.len();
    let mut states = DMatrix::zeros(n, steps);
    states.set_column(0, x0);
    let mut solver = MidpointSolver {
        sys,
        cfg: *cfg,
        lu: None,
        refreshes: 0,
    };
    let mut x = x0.clone();
    let mut prev = x0.clone();
    for k in 1..steps {
        let t = times[k - 1];
        let next = match cfg.scheme {
            Scheme::Rk4 => rk4_step(sys, input, t, &x, cfg.dt)?,
            Scheme::ImplicitMidpoint => {
                let guess = if k == 1 { x.clone() } else { &x * 2.0 - &prev };
                let u = input.eval(t + 0.5 * cfg.dt);
                solver.step(t, &x, guess, &u)?
            }
        };
        if !all_finite(next.as_slice()) {
            return Err(PhError::Divergence { t: times[k] });
        }
        states.set_column(k, &next);
        prev = std::mem::replace(&mut x, next);
    }
    if cfg.scheme == Scheme::ImplicitMidpoint {
        log::debug!("implicit midpoint: {} Jacobian factorizations over {} steps", solver.refreshes, steps - 1);
    }
    let m = input.dim();
    let p = sys.output(x0)?.len();
    let mut outputs = DMatrix::zeros(p, steps);
    let mut inputs = DMatrix::zeros(m, steps);
    for (k, &t) in times.iter().enumerate() {
        outputs.set_column(k, &sys.output(&states.column(k).into_owned())?);
        inputs.set_column(k, &input.eval(t));
    }
    Ok(Trajectory {
        times,
        states,
        outputs,
        inputs,
    })
}

/// Full-order run from the equilibrium `x = 0`.
pub fn simulate(
    sys: &NlphSystem,
    input: &InputSignal,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    simulate_from(sys, input, &DVector::zeros(sys.n()), t_span, cfg)
}

pub fn simulate_from(
    sys: &NlphSystem,
    input: &InputSignal,
    x0: &DVector<f64>,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
) -> Result<Trajectory> {
    integrate(sys, input, x0, t_span, cfg)
}
