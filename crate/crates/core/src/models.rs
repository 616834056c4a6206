//! Benchmark systems: a nonlinear RLC ladder network and a damped Toda lattice,
//! plus the input signals used to excite them.
//!
//! Ladder units are scaled so that time is in μs, charge in μC, flux in V·μs and
//! energy in μJ. Capacitances and inductances then enter in μF and μH, while
//! resistances, conductances and voltages keep their SI values.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{PhError, Result};
use crate::phcore::{Hamiltonian, InputSignal, NativeSplit, NlphSystem};

/// Ladder parameters in SI units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderParams {
    pub stages: usize,
    pub l0: f64,
    pub c0: f64,
    pub v0: f64,
    pub r0: f64,
    pub g0: f64,
}

impl Default for LadderParams {
    fn default() -> Self {
        Self {
            stages: 50,
            l0: 2e-6,
            c0: 1e-6,
            v0: 1.0,
            r0: 1.0,
            g0: 1e-5,
        }
    }
}

impl LadderParams {
    pub fn with_stages(stages: usize) -> Self {
        Self {
            stages,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let vals = [self.l0, self.c0, self.v0, self.r0, self.g0];
        if self.stages == 0 || vals.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(PhError::InvalidArgument(format!("invalid ladder parameters {self:?}")));
        }
        Ok(())
    }
}

/// Seconds per model time unit for the ladder.
pub const LADDER_TIME_UNIT: f64 = 1e-6;

/// Stage energy `C V0² (e^{Q/(C V0)} − 1) − Q V0 + φ²/(2L)` in scaled units.
#[derive(Debug, Clone)]
pub struct LadderHamiltonian {
    stages: usize,
    c: f64,
    l: f64,
    v0: f64,
}

impl LadderHamiltonian {
    fn z(&self, charge: f64) -> f64 {
        charge / (self.c * self.v0)
    }
}

impl Hamiltonian for LadderHamiltonian {
    fn dim(&self) -> usize {
        2 * self.stages
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let n = self.stages;
        let e = self.c * self.v0 * self.v0;
        let mut h = 0.0;
        for k in 0..n {
            let z = self.z(x[k]);
            h += e * (z.exp_m1() - z) + x[n + k] * x[n + k] / (2.0 * self.l);
        }
        h
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.stages;
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.v0 * self.z(x[i]).exp_m1()
            } else {
                x[i] / self.l
            }
        })
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.stages;
        let d = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.z(x[i]).exp() / self.c
            } else {
                1.0 / self.l
            }
        });
        Some(DMatrix::from_diagonal(&d))
    }

    fn native_split(&self) -> Option<&dyn NativeSplit> {
        Some(self)
    }
}

impl NativeSplit for LadderHamiltonian {
    fn quadratic(&self) -> DMatrix<f64> {
        let n = self.stages;
        DMatrix::from_diagonal(&DVector::from_fn(2 * n, |i, _| {
            if i < n {
                1.0 / self.c
            } else {
                1.0 / self.l
            }
        }))
    }

    fn remainder(&self, x: &DVector<f64>) -> f64 {
        let e = self.c * self.v0 * self.v0;
        (0..self.stages).map(|k| e * exp_remainder3(self.z(x[k]))).sum()
    }

    fn remainder_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.stages;
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.v0 * exp_remainder2(self.z(x[i]))
            } else {
                0.0
            }
        })
    }

    fn stencil(&self, i: usize) -> Vec<usize> {
        if i < self.stages {
            vec![i]
        } else {
            Vec::new()
        }
    }

    fn remainder_gradient_entry(&self, i: usize, x: &dyn Fn(usize) -> f64) -> f64 {
        if i < self.stages {
            self.v0 * exp_remainder2(self.z(x(i)))
        } else {
            0.0
        }
    }
}

/// `N`-stage ladder: state `[Q₁…Q_N, φ₁…φ_N]`, voltage input at the left end,
/// current injection at the right end.
pub fn ladder_network(p: &LadderParams) -> Result<NlphSystem> {
    p.validate()?;
    let n = p.stages;
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        j[(k, n + k)] = 1.0;
        j[(n + k, k)] = -1.0;
        if k + 1 < n {
            j[(k, n + k + 1)] = -1.0;
            j[(n + k + 1, k)] = 1.0;
        }
    }
    let mut r = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        r[(k, k)] = p.g0;
        r[(n + k, n + k)] = p.r0;
    }
    let mut b = DMatrix::zeros(2 * n, 2);
    b[(n, 0)] = 1.0;
    b[(n - 1, 1)] = 1.0;
    let ham = LadderHamiltonian {
        stages: n,
        c: p.c0 / LADDER_TIME_UNIT,
        l: p.l0 / LADDER_TIME_UNIT,
        v0: p.v0,
    };
    NlphSystem::new(j, r, b, Arc::new(ham))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TodaParams {
    pub particles: usize,
    /// One damping coefficient per particle, or a single value broadcast to all.
    pub damping: Vec<f64>,
}

impl Default for TodaParams {
    fn default() -> Self {
        Self {
            particles: 1000,
            damping: vec![0.1],
        }
    }
}

impl TodaParams {
    pub fn with_particles(particles: usize) -> Self {
        Self {
            particles,
            ..Self::default()
        }
    }

    fn damping_vector(&self) -> Result<Vec<f64>> {
        let n = self.particles;
        let gamma = match self.damping.len() {
            1 => vec![self.damping[0]; n],
            len if len == n => self.damping.clone(),
            len => {
                return Err(PhError::InvalidArgument(format!(
                    "damping has {len} entries, expected 1 or {n}"
                )))
            }
        };
        if n < 2 || gamma.iter().any(|g| !(*g >= 0.0) || !g.is_finite()) {
            return Err(PhError::InvalidArgument(format!("invalid Toda parameters {self:?}")));
        }
        Ok(gamma)
    }
}

/// `z³φ(z) = eᶻ − 1 − z − z²/2`, with a series branch near zero.
pub fn exp_remainder3(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        let z2 = z * z;
        z2 * z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z * (1.0 / 720.0 + z / 5040.0))))
    } else {
        z.exp_m1() - z - 0.5 * z * z
    }
}

/// Derivative of [`exp_remainder3`]: `eᶻ − 1 − z`.
pub fn exp_remainder2(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        z * z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z / 720.0))))
    } else {
        z.exp_m1() - z
    }
}

/// `φ(z) = (eᶻ − 1 − z − z²/2)/z³`, `φ(0) = 1/6`.
pub fn toda_phi(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        1.0 / 6.0 + z * (1.0 / 24.0 + z * (1.0 / 120.0 + z * (1.0 / 720.0 + z / 5040.0)))
    } else {
        exp_remainder3(z) / (z * z * z)
    }
}

/// `Σ½p² + Σ_{k<N} e^{q_k − q_{k+1}} + e^{q_N} − q₁ − N`.
#[derive(Debug, Clone)]
pub struct TodaHamiltonian {
    particles: usize,
}

impl TodaHamiltonian {
    /// Displacement entering the `k`-th exponential: `q_k − q_{k+1}`, or `q_N` for the tether.
    fn stretch(&self, k: usize, q: impl Fn(usize) -> f64) -> f64 {
        if k + 1 < self.particles {
            q(k) - q(k + 1)
        } else {
            q(k)
        }
    }

    /// `Σ_k d(stretch_k)` differentiated with respect to `q_i`, given `d = derivative`.
    fn q_derivative(&self, i: usize, q: impl Fn(usize) -> f64, d: impl Fn(f64) -> f64) -> f64 {
        let mut g = d(self.stretch(i, &q));
        if i > 0 {
            g -= d(self.stretch(i - 1, &q));
        }
        g
    }
}

impl Hamiltonian for TodaHamiltonian {
    fn dim(&self) -> usize {
        2 * self.particles
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let n = self.particles;
        let kinetic: f64 = (0..n).map(|k| 0.5 * x[n + k] * x[n + k]).sum();
        let potential: f64 = (0..n).map(|k| self.stretch(k, |i| x[i]).exp()).sum();
        kinetic + potential - x[0] - n as f64
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.particles;
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                let g = self.q_derivative(i, |k| x[k], f64::exp);
                if i == 0 {
                    g - 1.0
                } else {
                    g
                }
            } else {
                x[i]
            }
        })
    }

    fn hessian(&self, x: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.particles;
        let mut h = DMatrix::zeros(2 * n, 2 * n);
        for k in 0..n {
            let e = self.stretch(k, |i| x[i]).exp();
            h[(k, k)] += e;
            if k + 1 < n {
                h[(k + 1, k + 1)] += e;
                h[(k, k + 1)] -= e;
                h[(k + 1, k)] -= e;
            }
            h[(n + k, n + k)] = 1.0;
        }
        Some(h)
    }

    fn native_split(&self) -> Option<&dyn NativeSplit> {
        Some(self)
    }
}

impl NativeSplit for TodaHamiltonian {
    fn quadratic(&self) -> DMatrix<f64> {
        self.hessian(&DVector::zeros(2 * self.particles)).expect("analytic Hessian")
    }

    fn remainder(&self, x: &DVector<f64>) -> f64 {
        (0..self.particles)
            .map(|k| exp_remainder3(self.stretch(k, |i| x[i])))
            .sum()
    }

    fn remainder_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let n = self.particles;
        DVector::from_fn(2 * n, |i, _| {
            if i < n {
                self.q_derivative(i, |k| x[k], exp_remainder2)
            } else {
                0.0
            }
        })
    }

    fn stencil(&self, i: usize) -> Vec<usize> {
        let n = self.particles;
        if i >= n {
            return Vec::new();
        }
        (i.saturating_sub(1)..=(i + 1).min(n - 1)).collect()
    }

    fn remainder_gradient_entry(&self, i: usize, x: &dyn Fn(usize) -> f64) -> f64 {
        if i < self.particles {
            self.q_derivative(i, x, exp_remainder2)
        } else {
            0.0
        }
    }
}

/// Damped Toda lattice, state `[q; p]`, force input on the first particle.
pub fn toda_lattice(p: &TodaParams) -> Result<NlphSystem> {
    let gamma = p.damping_vector()?;
    let n = p.particles;
    let mut j = DMatrix::zeros(2 * n, 2 * n);
    let mut r = DMatrix::zeros(2 * n, 2 * n);
    for k in 0..n {
        j[(k, n + k)] = 1.0;
        j[(n + k, k)] = -1.0;
        r[(n + k, n + k)] = gamma[k];
    }
    let mut b = DMatrix::zeros(2 * n, 1);
    b[(n, 0)] = 1.0;
    NlphSystem::new(j, r, b, Arc::new(TodaHamiltonian { particles: n }))
}

/// Windowed Gaussian voltage on the first ladder port; zero current on the second.
pub fn gaussian_pulse(magnitude: f64, sigma: f64, center: f64, window: f64) -> Result<InputSignal> {
    if !(window > 0.0) || !(sigma > 0.0) {
        return Err(PhError::InvalidArgument("pulse window and width must be positive".into()));
    }
    Ok(InputSignal::first_port("gaussian", 2, move |t| {
        if (0.0..=window).contains(&t) {
            magnitude * (-(t - center).powi(2) / (2.0 * sigma * sigma)).exp()
        } else {
            0.0
        }
    }))
}

/// Training pulse: 3 V, width 0.5 μs, centered in a 3 μs window.
pub fn default_gaussian_pulse() -> InputSignal {
    gaussian_pulse(3.0, 0.5, 1.5, 3.0).expect("valid defaults")
}

/// `amplitude·sin(ω t)` on the first ladder port.
pub fn sinusoid_ladder(amplitude: f64, omega: f64) -> InputSignal {
    InputSignal::first_port("sinusoid", 2, move |t| amplitude * (omega * t).sin())
}

pub fn const_0p1() -> InputSignal {
    InputSignal::first_port("const_0p1", 1, |_| 0.1)
}

pub fn sin_0p1() -> InputSignal {
    InputSignal::first_port("sin_0p1", 1, |t| 0.1 * t.sin())
}

/// Named signals used in the benchmark experiments.
pub fn standard_inputs(sinusoid_amplitude: f64, sinusoid_omega: f64) -> Vec<InputSignal> {
    vec![
        const_0p1(),
        sin_0p1(),
        default_gaussian_pulse(),
        sinusoid_ladder(sinusoid_amplitude, sinusoid_omega),
    ]
}

/// Period of the default ladder sinusoid in model time units.
pub fn sinusoid_period(omega: f64) -> f64 {
    2.0 * PI / omega
}
