//! Full-order nonlinear port-Hamiltonian systems, structural validation and
//! Q-weighted norms.
//!
//! A system is `ẋ = (J − R)∇H(x) + Bu`, `y = Bᵀ∇H(x)` with constant `J = −Jᵀ`
//! and `R = Rᵀ ⪰ 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use nalgebra_sparse::{convert::serial::convert_dense_csr, CsrMatrix};
use serde::Serialize;

use crate::error::{PhError, Result};
use crate::linalg::{all_finite, cumulative_trapezoid, spectral_norm, sym_eig_range};

/// Relative tolerance for `J + Jᵀ = 0` and `R = Rᵀ`.
pub const STRUCTURE_TOL: f64 = 1e-12;
/// Relative floor for the smallest eigenvalue of `R`.
pub const PSD_TOL: f64 = 1e-10;

/// Energy function of a full-order model.
pub trait Hamiltonian: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        None
    }
    /// Model-supplied quadratic/remainder split with componentwise remainder gradients.
    fn native_split(&self) -> Option<&dyn NativeSplit> {
        None
    }
}

/// `H(x) = ½xᵀQx + h(x)` for a fixed `Q`, with sparse access to `∇h`.
pub trait NativeSplit: Send + Sync {
    fn quadratic(&self) -> DMatrix<f64>;
    fn remainder(&self, x: &DVector<f64>) -> f64;
    fn remainder_gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    /// State entries read by component `i` of `∇h`.
    fn stencil(&self, i: usize) -> Vec<usize>;
    /// Component `i` of `∇h`; `x` is queried only on `stencil(i)`.
    fn remainder_gradient_entry(&self, i: usize, x: &dyn Fn(usize) -> f64) -> f64;
}

/// `H(x) = ½xᵀQx`.
#[derive(Debug, Clone)]
pub struct QuadraticHamiltonian {
    q: DMatrix<f64>,
}

impl QuadraticHamiltonian {
    pub fn new(q: DMatrix<f64>) -> Self {
        Self { q }
    }
}

impl Hamiltonian for QuadraticHamiltonian {
    fn dim(&self) -> usize {
        self.q.nrows()
    }
    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x))
    }
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x
    }
    fn hessian(&self, _x: &DVector<f64>) -> Option<DMatrix<f64>> {
        Some(self.q.clone())
    }
}

/// Time-dependent input `t ↦ u(t)`.
#[derive(Clone)]
pub struct InputSignal {
    name: String,
    dim: usize,
    f: Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>,
}

impl InputSignal {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        f: impl Fn(f64) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            dim,
            f: Arc::new(f),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new("zero", dim, move |_| DVector::zeros(dim))
    }

    /// Drive the first port with `g(t)` and hold the others at zero.
    pub fn first_port(
        name: impl Into<String>,
        dim: usize,
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(name, dim, move |t| {
            let mut u = DVector::zeros(dim);
            if dim > 0 {
                u[0] = g(t);
            }
            u
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn eval(&self, t: f64) -> DVector<f64> {
        (self.f)(t)
    }
}

impl fmt::Debug for InputSignal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("InputSignal")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .finish()
    }
}

/// Full-order nonlinear port-Hamiltonian system.
#[derive(Clone)]
pub struct NlphSystem {
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    b: DMatrix<f64>,
    a_sparse: CsrMatrix<f64>,
    ham: Arc<dyn Hamiltonian>,
}

impl fmt::Debug for NlphSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlphSystem")
            .field("n", &self.n())
            .field("m_in", &self.m_in())
            .finish()
    }
}

fn check_dims(j: &DMatrix<f64>, r: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<()> {
    let n = j.nrows();
    let bad = |matrix: &str, detail: String| {
        Err(PhError::Structural {
            matrix: matrix.into(),
            detail,
        })
    };
    if n == 0 || j.ncols() != n {
        return bad("J", format!("expected square nonempty, got {}x{}", n, j.ncols()));
    }
    if r.shape() != (n, n) {
        return bad("R", format!("expected {n}x{n}, got {}x{}", r.nrows(), r.ncols()));
    }
    if b.nrows() != n || b.ncols() == 0 {
        return bad("B", format!("expected {n}xm with m >= 1, got {}x{}", b.nrows(), b.ncols()));
    }
    Ok(())
}

impl NlphSystem {
    pub fn new(
        j: DMatrix<f64>,
        r: DMatrix<f64>,
        b: DMatrix<f64>,
        ham: Arc<dyn Hamiltonian>,
    ) -> Result<Self> {
        check_dims(&j, &r, &b)?;
        if ham.dim() != j.nrows() {
            return Err(PhError::Structural {
                matrix: "H".into(),
                detail: format!("Hamiltonian dimension {} differs from n = {}", ham.dim(), j.nrows()),
            });
        }
        let a_sparse = convert_dense_csr(&(&j - &r));
        Ok(Self {
            j,
            r,
            b,
            a_sparse,
            ham,
        })
    }

    pub fn n(&self) -> usize {
        self.j.nrows()
    }
    pub fn m_in(&self) -> usize {
        self.b.ncols()
    }
    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn hamiltonian_model(&self) -> &Arc<dyn Hamiltonian> {
        &self.ham
    }

    pub fn hamiltonian(&self, x: &DVector<f64>) -> f64 {
        self.ham.value(x)
    }

    pub fn gradient(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.ham.gradient(x);
        if !all_finite(g.as_slice()) {
            return Err(PhError::Evaluation {
                detail: "gradient of H is not finite".into(),
                state_norm: x.norm(),
                state: x.as_slice().to_vec(),
            });
        }
        Ok(g)
    }

    /// `(J − R)v` through the sparse copy of `J − R`.
    pub fn apply_structure(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n());
        for (i, row) in self.a_sparse.row_iter().enumerate() {
            let mut acc = 0.0;
            for (&c, &val) in row.col_indices().iter().zip(row.values()) {
                acc += val * v[c];
            }
            out[i] = acc;
        }
        out
    }

    /// `(J − R)M` for a dense `M`, exploiting sparsity of `J − R`.
    pub fn apply_structure_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), m.ncols());
        for (i, row) in self.a_sparse.row_iter().enumerate() {
            for (&c, &val) in row.col_indices().iter().zip(row.values()) {
                for k in 0..m.ncols() {
                    out[(i, k)] += val * m[(c, k)];
                }
            }
        }
        out
    }

    pub fn eval_dynamics(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.gradient(x)?;
        Ok(self.apply_structure(&g) + &self.b * u)
    }

    pub fn eval_output(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.b.tr_mul(&self.gradient(x)?))
    }

    pub fn validate_structure(&self) -> StructureReport {
        validate_structure(&self.j, &self.r, &self.b).expect("dimensions checked at construction")
    }
}

/// Outcome of a structural audit of `(J, R, B)`.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct StructureReport {
    pub n: usize,
    pub m_in: usize,
    /// `‖(J + Jᵀ)/2‖_F / ‖J‖_F` (absolute when `J = 0`).
    pub skew_defect: f64,
    /// `‖(R − Rᵀ)/2‖_F / ‖R‖_F` (absolute when `R = 0`).
    pub r_symmetry_defect: f64,
    pub r_min_eigenvalue: f64,
    pub r_norm: f64,
    pub skew_tol: f64,
    pub psd_tol: f64,
    pub pass: bool,
}

pub fn validate_structure(
    j: &DMatrix<f64>,
    r: &DMatrix<f64>,
    b: &DMatrix<f64>,
) -> Result<StructureReport> {
    check_dims(j, r, b)?;
    let rel = |defect: f64, scale: f64| if scale > 0.0 { defect / scale } else { defect };
    let skew_defect = rel(0.5 * (j + j.transpose()).norm(), j.norm());
    let r_symmetry_defect = rel(0.5 * (r - r.transpose()).norm(), r.norm());
    let (r_min_eigenvalue, _) = sym_eig_range(r);
    let r_norm = spectral_norm(r);
    let pass = skew_defect <= STRUCTURE_TOL
        && r_symmetry_defect <= STRUCTURE_TOL
        && r_min_eigenvalue >= -PSD_TOL * r_norm;
    Ok(StructureReport {
        n: j.nrows(),
        m_in: b.ncols(),
        skew_defect,
        r_symmetry_defect,
        r_min_eigenvalue,
        r_norm,
        skew_tol: STRUCTURE_TOL,
        psd_tol: PSD_TOL,
        pass,
    })
}

#[derive(Debug, Clone)]
enum MetricStorage {
    Diagonal { d: DVector<f64>, sqrt_d: DVector<f64> },
    Dense { q: DMatrix<f64>, l: DMatrix<f64> },
}

/// SPD weight `Q = LLᵀ` with `‖x‖_Q = √(xᵀQx)` and `‖M‖_Q = σ_max(LᵀML⁻ᵀ)`.
#[derive(Debug, Clone)]
pub struct WeightedMetric {
    storage: MetricStorage,
}

impl WeightedMetric {
    /// Uses diagonal storage whenever `q` has no off-diagonal entries.
    pub fn new(q: DMatrix<f64>) -> Result<Self> {
        let n = q.nrows();
        if q.ncols() != n || n == 0 {
            return Err(PhError::Structural {
                matrix: "Q".into(),
                detail: "metric must be square and nonempty".into(),
            });
        }
        let scale = q.amax().max(f64::MIN_POSITIVE);
        if (&q - q.transpose()).amax() > STRUCTURE_TOL * scale {
            return Err(PhError::NotPositiveDefinite {
                what: "metric Q (not symmetric)".into(),
            });
        }
        let is_diag = (0..n).all(|i| (0..n).all(|j| i == j || q[(i, j)] == 0.0));
        if is_diag {
            return Self::diagonal(q.diagonal());
        }
        let l = q
            .clone()
            .cholesky()
            .ok_or_else(|| PhError::NotPositiveDefinite { what: "metric Q".into() })?
            .unpack();
        Ok(Self {
            storage: MetricStorage::Dense { q, l },
        })
    }

    pub fn diagonal(d: DVector<f64>) -> Result<Self> {
        if d.is_empty() || d.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(PhError::NotPositiveDefinite {
                what: "diagonal metric Q".into(),
            });
        }
        let sqrt_d = d.map(f64::sqrt);
        Ok(Self {
            storage: MetricStorage::Diagonal { d, sqrt_d },
        })
    }

    pub fn identity(n: usize) -> Self {
        Self::diagonal(DVector::from_element(n, 1.0)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        match &self.storage {
            MetricStorage::Diagonal { d, .. } => d.len(),
            MetricStorage::Dense { q, .. } => q.nrows(),
        }
    }

    pub fn is_diagonal(&self) -> bool {
        matches!(self.storage, MetricStorage::Diagonal { .. })
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { d, .. } => DMatrix::from_diagonal(d),
            MetricStorage::Dense { q, .. } => q.clone(),
        }
    }

    /// Lower Cholesky factor `L`.
    pub fn factor(&self) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { sqrt_d, .. } => DMatrix::from_diagonal(sqrt_d),
            MetricStorage::Dense { l, .. } => l.clone(),
        }
    }

    /// `Q·M`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { d, .. } => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                out
            }
            MetricStorage::Dense { q, .. } => q * m,
        }
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.storage {
            MetricStorage::Diagonal { d, .. } => x.component_mul(d),
            MetricStorage::Dense { q, .. } => q * x,
        }
    }

    /// `Q⁻¹·M`.
    pub fn solve(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { d, .. } => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= d[i];
                }
                out
            }
            MetricStorage::Dense { l, .. } => {
                let y = l.solve_lower_triangular(m).expect("Cholesky factor is nonsingular");
                l.tr_solve_lower_triangular(&y).expect("Cholesky factor is nonsingular")
            }
        }
    }

    /// `Lᵀ·M`.
    pub fn factor_tr_mul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { sqrt_d, .. } => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row *= sqrt_d[i];
                }
                out
            }
            MetricStorage::Dense { l, .. } => l.tr_mul(m),
        }
    }

    /// `L⁻¹·M`.
    pub fn factor_solve(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.storage {
            MetricStorage::Diagonal { sqrt_d, .. } => {
                let mut out = m.clone();
                for (i, mut row) in out.row_iter_mut().enumerate() {
                    row /= sqrt_d[i];
                }
                out
            }
            MetricStorage::Dense { l, .. } => {
                l.solve_lower_triangular(m).expect("Cholesky factor is nonsingular")
            }
        }
    }

    pub fn inner(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        x.dot(&self.apply_vec(y))
    }

    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        self.inner(x, x).max(0.0).sqrt()
    }

    /// `LᵀML⁻ᵀ`, the matrix of `M` in Q-orthonormal coordinates.
    pub fn congruence(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        // M L⁻ᵀ = (L⁻¹ Mᵀ)ᵀ
        let ml = self.factor_solve(&m.transpose()).transpose();
        self.factor_tr_mul(&ml)
    }

    pub fn op_norm(&self, m: &DMatrix<f64>) -> f64 {
        spectral_norm(&self.congruence(m))
    }
}

pub fn q_norm(metric: &WeightedMetric, x: &DVector<f64>) -> f64 {
    metric.norm(x)
}

pub fn q_op_norm(metric: &WeightedMetric, m: &DMatrix<f64>) -> f64 {
    metric.op_norm(m)
}

/// Sampled solution on a fixed grid. Column `k` of each matrix belongs to `times[k]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: DMatrix<f64>,
    pub outputs: DMatrix<f64>,
    pub inputs: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
    pub fn state(&self, k: usize) -> DVector<f64> {
        self.states.column(k).into_owned()
    }
    pub fn final_state(&self) -> DVector<f64> {
        self.state(self.len() - 1)
    }
    pub fn output(&self, k: usize) -> DVector<f64> {
        self.outputs.column(k).into_owned()
    }

    pub fn is_valid(&self) -> bool {
        self.times.windows(2).all(|w| w[1] > w[0])
            && all_finite(self.states.as_slice())
            && all_finite(self.outputs.as_slice())
            && all_finite(self.inputs.as_slice())
    }
}

/// `min_{t₁} [∫₀^{t₁} yᵀu dt − (H(x(t₁)) − H(x(0)))]` by trapezoid quadrature.
///
/// Includes `t₁ = t₀`, so the margin is never positive; passivity shows up as a
/// margin that is zero up to integration error.
pub fn dissipation_margin_with(traj: &Trajectory, energy: impl Fn(&DVector<f64>) -> f64) -> f64 {
    let supply: Vec<f64> = (0..traj.len())
        .map(|k| traj.outputs.column(k).dot(&traj.inputs.column(k)))
        .collect();
    let work = cumulative_trapezoid(&traj.times, &supply);
    let h0 = energy(&traj.state(0));
    (0..traj.len())
        .map(|k| work[k] - (energy(&traj.state(k)) - h0))
        .fold(f64::INFINITY, f64::min)
}

pub fn dissipation_margin(traj: &Trajectory, sys: &NlphSystem) -> f64 {
    dissipation_margin_with(traj, |x| sys.hamiltonian(x))
}
