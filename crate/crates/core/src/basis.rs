//! Projection bases: POD of state and force snapshots, tangential interpolation
//! of the linearization with an iterative shift update, and hybrid
//! concatenations of both.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{PhError, Result};
use crate::integrate::{simulate, IntegratorConfig};
use crate::linalg::{orthonormal_range, skew_part, sorted_svd, sym_part, to_complex};
use crate::phcore::{InputSignal, NlphSystem, Trajectory, WeightedMetric};

/// Bound on `‖WᵀV − I‖_F` for every basis pair.
pub const BIORTHO_TOL: f64 = 1e-10;
/// Largest accepted condition number of `W₀ᵀV₀`.
pub const MAX_ORIENTATION_COND: f64 = 1e12;
/// Relative singular-value cutoff for snapshot rank.
pub const POD_RANK_TOL: f64 = 1e-12;
/// Relative singular-value cutoff when concatenating bases.
pub const HYBRID_RANK_TOL: f64 = 1e-10;

/// Sampled states `X`, forces `F = ∇H(X)` and, when a split is configured,
/// remainder forces `G = F − QX`. Column `k` belongs to `times[k]`.
#[derive(Debug, Clone)]
pub struct SnapshotSet {
    pub times: Vec<f64>,
    pub x: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub g: Option<DMatrix<f64>>,
    sv_x: OnceLock<DVector<f64>>,
    sv_f: OnceLock<DVector<f64>>,
    sv_g: OnceLock<DVector<f64>>,
}

impl SnapshotSet {
    pub fn new(times: Vec<f64>, x: DMatrix<f64>, f: DMatrix<f64>, g: Option<DMatrix<f64>>) -> Result<Self> {
        let k = times.len();
        let bad = x.ncols() != k || f.ncols() != k || g.as_ref().is_some_and(|g| g.ncols() != k);
        if bad || x.nrows() != f.nrows() {
            return Err(PhError::InvalidArgument("snapshot matrices have inconsistent shapes".into()));
        }
        Ok(Self {
            times,
            x,
            f,
            g,
            sv_x: OnceLock::new(),
            sv_f: OnceLock::new(),
            sv_g: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn singular_values_x(&self) -> &DVector<f64> {
        self.sv_x.get_or_init(|| sorted_svd(&self.x).1)
    }
    pub fn singular_values_f(&self) -> &DVector<f64> {
        self.sv_f.get_or_init(|| sorted_svd(&self.f).1)
    }
    pub fn singular_values_g(&self) -> Option<&DVector<f64>> {
        let g = self.g.as_ref()?;
        Some(self.sv_g.get_or_init(|| sorted_svd(g).1))
    }
}

/// Subsample every `stride`-th column of an existing trajectory.
pub fn snapshots_from_trajectory(
    sys: &NlphSystem,
    traj: &Trajectory,
    stride: usize,
    split_metric: Option<&WeightedMetric>,
) -> Result<SnapshotSet> {
    if stride == 0 {
        return Err(PhError::InvalidArgument("snapshot stride must be positive".into()));
    }
    let cols: Vec<usize> = (0..traj.len()).step_by(stride).collect();
    let n = sys.n();
    let mut x = DMatrix::zeros(n, cols.len());
    let mut f = DMatrix::zeros(n, cols.len());
    for (j, &k) in cols.iter().enumerate() {
        let xk = traj.state(k);
        f.set_column(j, &sys.gradient(&xk)?);
        x.set_column(j, &xk);
    }
    let g = split_metric.map(|q| &f - q.apply(&x));
    let times = cols.iter().map(|&k| traj.times[k]).collect();
    SnapshotSet::new(times, x, f, g)
}

pub fn collect_snapshots(
    sys: &NlphSystem,
    input: &InputSignal,
    t_span: (f64, f64),
    cfg: &IntegratorConfig,
    stride: usize,
    split_metric: Option<&WeightedMetric>,
) -> Result<SnapshotSet> {
    let traj = simulate(sys, input, t_span, cfg)?;
    snapshots_from_trajectory(sys, &traj, stride, split_metric)
}

/// Leading `r` left singular vectors of `s` and all singular values.
pub fn pod_basis(s: &DMatrix<f64>, r: usize) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let (u, sv) = sorted_svd(s);
    let rank = if sv.is_empty() || sv[0] == 0.0 {
        0
    } else {
        sv.iter().take_while(|&&v| v >= POD_RANK_TOL * sv[0]).count()
    };
    if r == 0 || r > rank {
        return Err(PhError::Rank {
            what: "POD snapshot matrix".into(),
            requested: r,
            available: rank,
        });
    }
    Ok((u.columns(0, r).into_owned(), sv))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Pod,
    H2eps,
    Hybrid,
    Identity,
    Custom,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Pod => "pod",
            Provenance::H2eps => "h2eps",
            Provenance::Hybrid => "hybrid",
            Provenance::Identity => "identity",
            Provenance::Custom => "custom",
        }
    }
}

/// Trial/test pair with `WᵀV = I`.
#[derive(Debug, Clone)]
pub struct ReductionBasis {
    pub v: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub provenance: Provenance,
    /// `σ_min(W₀ᵀV₀)` before the biorthogonal correction.
    pub sigma_min_before: f64,
    pub warnings: Vec<String>,
}

impl ReductionBasis {
    /// Accepts `(V, W)` only when `‖WᵀV − I‖_F ≤ BIORTHO_TOL`.
    pub fn from_pair(v: DMatrix<f64>, w: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if v.shape() != w.shape() || v.ncols() == 0 || v.ncols() > v.nrows() {
            return Err(PhError::InvalidArgument(format!(
                "basis shapes {:?} and {:?} are incompatible",
                v.shape(),
                w.shape()
            )));
        }
        let defect = biorthogonality_defect(&v, &w);
        if !(defect <= BIORTHO_TOL) {
            return Err(PhError::GenericOrientation {
                sigma_min: crate::linalg::spectral_norm(&w.tr_mul(&v)),
                cond: defect,
            });
        }
        Ok(Self {
            v,
            w,
            provenance,
            sigma_min_before: 1.0,
            warnings: Vec::new(),
        })
    }

    pub fn identity(n: usize) -> Self {
        let i = DMatrix::identity(n, n);
        Self::from_pair(i.clone(), i, Provenance::Identity).expect("identity is biorthonormal")
    }

    pub fn r(&self) -> usize {
        self.v.ncols()
    }
    pub fn n(&self) -> usize {
        self.v.nrows()
    }

    pub fn biorthogonality_defect(&self) -> f64 {
        biorthogonality_defect(&self.v, &self.w)
    }

    /// Same spans, rescaled so that `VᵀQV = I` while keeping `WᵀV = I`.
    pub fn q_normalized(&self, metric: &WeightedMetric) -> Result<Self> {
        let gram = self.v.tr_mul(&metric.apply(&self.v));
        let chol = sym_part(&gram).cholesky().ok_or_else(|| PhError::NotPositiveDefinite {
            what: "VᵀQV".into(),
        })?;
        // V Rinv with R = Lᵀ upper, and W R^T keeps biorthogonality.
        let l = chol.unpack();
        let r_upper = l.transpose();
        let v = l
            .solve_lower_triangular(&self.v.transpose())
            .expect("Cholesky factor nonsingular")
            .transpose();
        let w = &self.w * r_upper.transpose();
        let mut out = Self::from_pair(v, w, self.provenance)?;
        out.sigma_min_before = self.sigma_min_before;
        out.warnings = self.warnings.clone();
        Ok(out)
    }
}

pub fn biorthogonality_defect(v: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    (w.tr_mul(v) - DMatrix::identity(v.ncols(), v.ncols())).norm()
}

/// `W = W₀(W₀ᵀV₀)⁻ᵀ`, keeping `V = V₀`.
pub fn biorthonormalize(v0: DMatrix<f64>, w0: DMatrix<f64>, provenance: Provenance) -> Result<ReductionBasis> {
    if v0.shape() != w0.shape() {
        return Err(PhError::InvalidArgument("V0 and W0 must have equal shapes".into()));
    }
    let m = w0.tr_mul(&v0);
    let sv = m.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond <= MAX_ORIENTATION_COND) {
        return Err(PhError::GenericOrientation { sigma_min: smin, cond });
    }
    let m_inv_t = m
        .try_inverse()
        .ok_or(PhError::GenericOrientation { sigma_min: smin, cond })?
        .transpose();
    let w = &w0 * m_inv_t;
    let mut basis = ReductionBasis::from_pair(v0, w, provenance)?;
    basis.sigma_min_before = smin;
    Ok(basis)
}

/// `V = V₀R⁻¹` with `V₀ᵀQV₀ = RᵀR`, so that `VᵀQV = I`.
///
/// Computed as a Euclidean QR followed by two Cholesky-QR passes in the
/// Q-inner product; every stage is an upper-triangular right factor, so the
/// composite is the Cholesky factor of `V₀ᵀQV₀` without squaring its
/// condition number.
pub fn q_orthonormalize(v0: &DMatrix<f64>, metric: &WeightedMetric) -> Result<DMatrix<f64>> {
    let rank_error = || PhError::Rank {
        what: "Q-orthonormalization (V0ᵀQV0 not positive definite)".into(),
        requested: v0.ncols(),
        available: orthonormal_range(v0, 1e-12).1,
    };
    let qr = v0.clone().qr();
    let (mut q, r) = (qr.q(), qr.r());
    for k in 0..r.nrows() {
        if r[(k, k)] == 0.0 || !r[(k, k)].is_finite() {
            return Err(rank_error());
        }
        if r[(k, k)] < 0.0 {
            q.column_mut(k).neg_mut();
        }
    }
    for _ in 0..2 {
        let gram = sym_part(&q.tr_mul(&metric.apply(&q)));
        let l = gram.cholesky().ok_or_else(rank_error)?.unpack();
        q = l
            .solve_lower_triangular(&q.transpose())
            .ok_or_else(rank_error)?
            .transpose();
    }
    Ok(q)
}

/// POD of states for `V`, POD of forces for `W`, then biorthonormalize.
pub fn pod_ph_bases(snapshots: &SnapshotSet, r: usize) -> Result<ReductionBasis> {
    let (v0, _) = pod_basis(&snapshots.x, r)?;
    let (w0, _) = pod_basis(&snapshots.f, r)?;
    biorthonormalize(v0, w0, Provenance::Pod)
}

/// Linear port-Hamiltonian model `ẋ = (J − R)Qx + Bu`, `y = BᵀQx`.
#[derive(Debug, Clone)]
pub struct LinearPhModel {
    pub j: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub metric: WeightedMetric,
}

impl LinearPhModel {
    pub fn new(j: DMatrix<f64>, r: DMatrix<f64>, b: DMatrix<f64>, q: DMatrix<f64>) -> Result<Self> {
        let q = sym_part(&q);
        let metric = WeightedMetric::new(q.clone())
            .map_err(|_| PhError::Linearization("Q is not positive definite".into()))?;
        Ok(Self { j, r, b, q, metric })
    }

    pub fn n(&self) -> usize {
        self.j.nrows()
    }
    pub fn m_in(&self) -> usize {
        self.b.ncols()
    }

    /// `(J − R)Q`.
    pub fn system_matrix(&self) -> DMatrix<f64> {
        (&self.j - &self.r) * &self.q
    }

    /// Petrov–Galerkin projection; the reduced energy matrix is `VᵀQV`.
    pub fn project(&self, basis: &ReductionBasis) -> Result<Self> {
        let (v, w) = (&basis.v, &basis.w);
        Self::new(
            skew_part(&w.tr_mul(&(&self.j * w))),
            sym_part(&w.tr_mul(&(&self.r * w))),
            w.tr_mul(&self.b),
            v.tr_mul(&(&self.q * v)),
        )
    }
}

/// `Q = ∇²H(0)`, analytic when available, else by central differences of `∇H`.
pub fn linearize(sys: &NlphSystem) -> Result<LinearPhModel> {
    let n = sys.n();
    let zero = DVector::zeros(n);
    let q = match sys.hamiltonian_model().hessian(&zero) {
        Some(h) => h,
        None => {
            let h = 1e-6;
            let mut q = DMatrix::zeros(n, n);
            let mut x = zero.clone();
            for j in 0..n {
                x[j] = h;
                let gp = sys.gradient(&x)?;
                x[j] = -h;
                let gm = sys.gradient(&x)?;
                x[j] = 0.0;
                q.set_column(j, &((gp - gm) / (2.0 * h)));
            }
            q
        }
    };
    LinearPhModel::new(sys.j().clone(), sys.r().clone(), sys.b().clone(), q)
        .map_err(|_| PhError::Linearization("∇²H(0) is not positive definite; x = 0 is not a strict minimum".into()))
}

/// Relative pivot size below which a shifted matrix counts as singular.
const SINGULAR_PIVOT_TOL: f64 = 1e-14;

fn shifted_lu(a: &DMatrix<f64>, s: Complex64) -> Option<nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>> {
    let n = a.nrows();
    let m = DMatrix::<Complex64>::identity(n, n) * s - to_complex(a);
    let scale = m.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let lu = m.lu();
    let min_pivot = lu.u().diagonal().iter().map(|z| z.norm()).fold(f64::INFINITY, f64::min);
    (min_pivot > SINGULAR_PIVOT_TOL * scale).then_some(lu)
}

/// `G(s) = BᵀQ(sI − (J − R)Q)⁻¹B`.
pub fn transfer_eval(lin: &LinearPhModel, s: Complex64) -> Result<DMatrix<Complex64>> {
    let a = lin.system_matrix();
    let lu = shifted_lu(&a, s).ok_or(PhError::Pole { re: s.re, im: s.im })?;
    let x = lu.solve(&to_complex(&lin.b)).ok_or(PhError::Pole { re: s.re, im: s.im })?;
    Ok(to_complex(&lin.b.tr_mul(&lin.q)) * x)
}

fn is_real(z: Complex64) -> bool {
    z.im.abs() <= 1e-12 * z.norm().max(1e-300)
}

/// Real basis spanning `{(σᵢI − (J − R)Q)⁻¹Bbᵢ}`; conjugate pairs contribute
/// their real and imaginary parts.
pub fn interpolatory_basis(
    lin: &LinearPhModel,
    shifts: &[Complex64],
    directions: &[DVector<Complex64>],
) -> Result<DMatrix<f64>> {
    if shifts.len() != directions.len() || shifts.is_empty() {
        return Err(PhError::InvalidArgument("need one direction per shift".into()));
    }
    if directions.iter().any(|d| d.len() != lin.m_in()) {
        return Err(PhError::InvalidArgument("direction length differs from the input dimension".into()));
    }
    let a = lin.system_matrix();
    let bc = to_complex(&lin.b);
    let solve = |i: usize| -> Result<DVector<Complex64>> {
        let lu = shifted_lu(&a, shifts[i]).ok_or(PhError::ShiftCollision { index: i })?;
        lu.solve(&(&bc * &directions[i])).ok_or(PhError::ShiftCollision { index: i })
    };
    let mut used = vec![false; shifts.len()];
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(shifts.len());
    for i in 0..shifts.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let s = shifts[i];
        if is_real(s) {
            let d = &directions[i];
            if d.iter().any(|z| z.im.abs() > 1e-12 * d.norm()) {
                return Err(PhError::DegenerateDirections(format!("real shift {i} has a complex direction")));
            }
            cols.push(solve(i)?.map(|z| z.re));
            continue;
        }
        let partner = (i + 1..shifts.len()).find(|&j| {
            !used[j]
                && (shifts[j] - s.conj()).norm() <= 1e-8 * s.norm()
                && (&directions[j] - directions[i].map(|z| z.conj())).norm() <= 1e-8 * directions[i].norm().max(1e-300)
        });
        let j = partner.ok_or_else(|| {
            PhError::InvalidArgument(format!("shift {i} has no conjugate partner with conjugate direction"))
        })?;
        used[j] = true;
        let v = solve(i)?;
        cols.push(v.map(|z| z.re));
        cols.push(v.map(|z| z.im));
    }
    let basis = DMatrix::from_columns(&cols);
    let sv = basis.singular_values();
    if !(sv.min() > 1e-12 * sv.max()) {
        return Err(PhError::DegenerateDirections(format!(
            "realified basis is rank deficient (σ_min/σ_max = {:e})",
            sv.min() / sv.max()
        )));
    }
    Ok(basis)
}

/// Shift selection for the first iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ShiftInit {
    /// Log-spaced real shifts between spectral-radius estimates of `(J − R)Q`.
    LogSpaced,
    /// Explicit shifts `re + i·im`; directions cycle the unit vectors.
    Explicit { re: Vec<f64>, im: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Options {
    pub max_iter: usize,
    pub shift_tol: f64,
    pub init: ShiftInit,
}

impl Default for H2Options {
    fn default() -> Self {
        Self {
            max_iter: 100,
            shift_tol: 1e-6,
            init: ShiftInit::LogSpaced,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationLog {
    pub iterations: usize,
    pub converged: bool,
    /// Relative change of the sorted shift vector per iteration.
    pub changes: Vec<f64>,
    /// Shifts used in each iteration as `(re, im)` pairs.
    pub shift_history: Vec<Vec<(f64, f64)>>,
    pub final_shifts: Vec<(f64, f64)>,
    pub warning: Option<String>,
}

/// `(|λ|_min, |λ|_max)` of `A` from power and inverse power iteration.
pub fn spectral_extent(a: &DMatrix<f64>) -> (f64, f64) {
    let n = a.nrows();
    let start = DVector::from_fn(n, |i, _| 1.0 + (i as f64 * 0.618_033_988_7).fract());
    let estimate = |apply: &dyn Fn(&DVector<f64>) -> Option<DVector<f64>>| -> Option<f64> {
        let (total, window) = (80, 20);
        let mut x = start.normalize();
        let mut log_growth = 0.0;
        for k in 0..total {
            let y = apply(&x)?;
            let norm = y.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return None;
            }
            if k >= total - window {
                log_growth += norm.ln();
            }
            x = y / norm;
        }
        Some((log_growth / window as f64).exp())
    };
    let hi = estimate(&|x| Some(a * x)).unwrap_or(1.0);
    let lu = a.clone().lu();
    let inv = estimate(&|x| lu.solve(x));
    let lo = inv.map(|g| 1.0 / g).filter(|v| *v > 0.0 && *v <= hi).unwrap_or(1e-3 * hi);
    (lo, hi)
}

fn initial_shifts(lin: &LinearPhModel, r: usize, init: &ShiftInit) -> Result<(Vec<Complex64>, Vec<DVector<Complex64>>)> {
    let m = lin.m_in();
    let unit = |i: usize| DVector::from_fn(m, |k, _| Complex64::new(if k == i % m { 1.0 } else { 0.0 }, 0.0));
    let shifts: Vec<Complex64> = match init {
        ShiftInit::LogSpaced => {
            let (lo, hi) = spectral_extent(&lin.system_matrix());
            (0..r)
                .map(|i| {
                    let t = if r == 1 { 0.5 } else { i as f64 / (r - 1) as f64 };
                    Complex64::new((lo.ln() + t * (hi.ln() - lo.ln())).exp(), 0.0)
                })
                .collect()
        }
        ShiftInit::Explicit { re, im } => {
            if re.len() != r || im.len() != r {
                return Err(PhError::InvalidArgument(format!("expected {r} explicit shifts")));
            }
            re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect()
        }
    };
    // Conjugate partners share the direction of their pair.
    let mut dirs = Vec::with_capacity(r);
    let mut slot = 0;
    for (i, s) in shifts.iter().enumerate() {
        let d = if i > 0 && !is_real(*s) && (shifts[i - 1] - s.conj()).norm() <= 1e-12 * s.norm() {
            dirs.last().cloned().unwrap()
        } else {
            slot += 1;
            unit(slot - 1)
        };
        dirs.push(d);
    }
    Ok((shifts, dirs))
}

/// Eigenvalues of a small real matrix with eigenvectors by inverse iteration.
/// Conjugate pairs are returned adjacent as `(λ, λ̄)` with conjugate vectors.
pub fn eigen_pairs(a: &DMatrix<f64>) -> Result<Vec<(Complex64, DVector<Complex64>)>> {
    let n = a.nrows();
    let evals = a.clone().complex_eigenvalues();
    let scale = a.norm().max(1e-300);
    let ac = to_complex(a);
    let mut out = Vec::with_capacity(n);
    let mut pending: Vec<Complex64> = evals.iter().copied().collect();
    pending.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.abs().total_cmp(&y.im.abs())).then(y.im.total_cmp(&x.im)));
    let mut i = 0;
    while i < pending.len() {
        let mut lam = pending[i];
        let pair = !is_real(lam) && lam.im.abs() > 1e-10 * scale;
        if !pair {
            lam.im = 0.0;
        } else if lam.im < 0.0 {
            lam = lam.conj();
        }
        let perturb = 1e-10 * scale * (1.0 + i as f64 * 0.37);
        let m = DMatrix::<Complex64>::identity(n, n) * (lam + perturb) - &ac;
        let lu = m.lu();
        let mut z = DVector::from_fn(n, |k, _| Complex64::new(1.0 + 0.1 * k as f64, 0.0));
        for _ in 0..4 {
            let y = lu.solve(&z).ok_or_else(|| PhError::Estimation("eigenvector inverse iteration failed".into()))?;
            let norm = y.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                break;
            }
            z = y / Complex64::new(norm, 0.0);
        }
        if !pair {
            // A real eigenvalue has a real eigenvector; fix the phase of the largest entry.
            let k = (0..n).max_by(|&p, &q| z[p].norm().total_cmp(&z[q].norm())).unwrap_or(0);
            let phase = z[k] / z[k].norm();
            z = z.map(|c| Complex64::new((c / phase).re, 0.0));
            z /= Complex64::new(z.norm(), 0.0);
            out.push((lam, z));
            i += 1;
        } else {
            out.push((lam, z.clone()));
            out.push((lam.conj(), z.map(|c| c.conj())));
            i += 2;
        }
    }
    if out.len() != n {
        return Err(PhError::Estimation("unpaired complex eigenvalue".into()));
    }
    Ok(out)
}

fn sorted_shift_vector(shifts: &[Complex64]) -> Vec<Complex64> {
    let mut s = shifts.to_vec();
    s.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    s
}

fn relative_change(old: &[Complex64], new: &[Complex64]) -> f64 {
    let (a, b) = (sorted_shift_vector(old), sorted_shift_vector(new));
    let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>().sqrt();
    let base: f64 = a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
    diff / base.max(f64::MIN_POSITIVE)
}

/// Basis satisfying `VᵀQV = I`, `W = QV` for fixed shifts and directions.
pub fn interpolatory_ph_basis(
    lin: &LinearPhModel,
    shifts: &[Complex64],
    directions: &[DVector<Complex64>],
) -> Result<ReductionBasis> {
    let v_tilde = interpolatory_basis(lin, shifts, directions)?;
    let v = q_orthonormalize(&v_tilde, &lin.metric)?;
    let w = lin.metric.apply(&v);
    ReductionBasis::from_pair(v, w, Provenance::H2eps)
}

/// Fixed-point iteration on interpolation shifts: reduced poles are mirrored
/// into the right half-plane and their left eigenvectors give new directions.
pub fn h2eps_ph_bases(lin: &LinearPhModel, r: usize, opts: &H2Options) -> Result<(ReductionBasis, IterationLog)> {
    if r == 0 || r > lin.n() {
        return Err(PhError::InvalidArgument(format!("reduced order {r} outside 1..={}", lin.n())));
    }
    let (mut shifts, mut dirs) = initial_shifts(lin, r, &opts.init)?;
    let mut log = IterationLog {
        iterations: 0,
        converged: false,
        changes: Vec::new(),
        shift_history: Vec::new(),
        final_shifts: Vec::new(),
        warning: None,
    };
    let mut best: Option<(f64, Vec<Complex64>, Vec<DVector<Complex64>>)> = None;
    for _ in 0..opts.max_iter {
        let basis = interpolatory_ph_basis(lin, &shifts, &dirs)?;
        let red = lin.project(&basis)?;
        let a_r = &red.j - &red.r;
        let pairs = eigen_pairs(&a_r.transpose())?;
        let new_shifts: Vec<Complex64> = pairs.iter().map(|(l, _)| Complex64::new(l.re.abs(), -l.im)).collect();
        let b_rt = to_complex(&red.b.transpose());
        let new_dirs: Vec<DVector<Complex64>> = pairs.iter().map(|(_, z)| &b_rt * z).collect();
        // Mirroring conjugates each pair; restore the (σ, σ̄) adjacency expected downstream.
        let (new_shifts, new_dirs) = conjugate_order(new_shifts, new_dirs);
        let change = relative_change(&shifts, &new_shifts);
        log.iterations += 1;
        log.changes.push(change);
        log.shift_history.push(shifts.iter().map(|s| (s.re, s.im)).collect());
        if best.as_ref().is_none_or(|(c, _, _)| change < *c) {
            best = Some((change, new_shifts.clone(), new_dirs.clone()));
        }
        shifts = new_shifts;
        dirs = new_dirs;
        if change < opts.shift_tol {
            log.converged = true;
            break;
        }
    }
    if !log.converged {
        let (c, s, d) = best.expect("at least one iteration");
        log.warning = Some(format!(
            "shift iteration did not converge in {} iterations; using best iterate (change {c:e})",
            opts.max_iter
        ));
        log::warn!("{}", log.warning.as_ref().unwrap());
        shifts = s;
        dirs = d;
    }
    log.final_shifts = shifts.iter().map(|s| (s.re, s.im)).collect();
    let mut basis = interpolatory_ph_basis(lin, &shifts, &dirs)?;
    if let Some(w) = &log.warning {
        basis.warnings.push(w.clone());
    }
    Ok((basis, log))
}

fn conjugate_order(
    shifts: Vec<Complex64>,
    dirs: Vec<DVector<Complex64>>,
) -> (Vec<Complex64>, Vec<DVector<Complex64>>) {
    let mut s_out = Vec::with_capacity(shifts.len());
    let mut d_out = Vec::with_capacity(dirs.len());
    let mut i = 0;
    while i < shifts.len() {
        if !is_real(shifts[i]) && i + 1 < shifts.len() && shifts[i].im < 0.0 {
            s_out.push(shifts[i + 1]);
            d_out.push(dirs[i + 1].clone());
            s_out.push(shifts[i]);
            d_out.push(dirs[i].clone());
            i += 2;
        } else {
            s_out.push(shifts[i]);
            d_out.push(dirs[i].clone());
            i += 1;
        }
    }
    (s_out, d_out)
}

/// Orthonormal bases of `[V̂ V̄]` and `[Ŵ W̄]`, truncated to their common
/// numerical rank, then biorthonormalized.
pub fn hybrid_bases(pod: &ReductionBasis, h2: &ReductionBasis) -> Result<ReductionBasis> {
    if pod.n() != h2.n() {
        return Err(PhError::InvalidArgument("bases act on different state dimensions".into()));
    }
    let requested = pod.r() + h2.r();
    if requested > pod.n() {
        return Err(PhError::InvalidArgument(format!("r = {requested} exceeds n = {}", pod.n())));
    }
    let (v, rv) = orthonormal_range(&concat(&pod.v, &h2.v), HYBRID_RANK_TOL);
    let (w, rw) = orthonormal_range(&concat(&pod.w, &h2.w), HYBRID_RANK_TOL);
    let rank = rv.min(rw);
    if rank == 0 {
        return Err(PhError::Rank {
            what: "hybrid concatenation".into(),
            requested,
            available: 0,
        });
    }
    let mut warnings = Vec::new();
    if rank < requested {
        let msg = format!("hybrid basis truncated from r = {requested} to numerical rank {rank}");
        log::warn!("{msg}");
        warnings.push(msg);
    }
    let mut basis = biorthonormalize(
        v.columns(0, rank).into_owned(),
        w.columns(0, rank).into_owned(),
        Provenance::Hybrid,
    )?;
    basis.warnings = warnings;
    Ok(basis)
}

fn concat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    m.columns_mut(0, a.ncols()).copy_from(a);
    m.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Random stable linear PH model with SPD `Q`.
    pub(crate) fn random_linear(n: usize, m: usize, seed: u64) -> LinearPhModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(n, n, &mut rng);
        let j = &a - a.transpose();
        let c = random(n, n, &mut rng);
        let r = &c * c.transpose() * 0.2 + DMatrix::identity(n, n) * 0.1;
        let d = random(n, n, &mut rng);
        let q = &d * d.transpose() + DMatrix::identity(n, n);
        LinearPhModel::new(j, r, random(n, m, &mut rng), q).unwrap()
    }

    fn principal_angle_sin(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let (qa, _) = orthonormal_range(a, 1e-12);
        let (qb, _) = orthonormal_range(b, 1e-12);
        let proj = &qb * qb.tr_mul(&qa);
        crate::linalg::spectral_norm(&(qa - proj))
    }

    #[test]
    fn pod_of_rank_one_spans_vector() {
        let a = DVector::from_vec(vec![1.0, -2.0, 2.0]);
        let s = &a * DVector::from_vec(vec![0.5, 1.0, -1.0, 2.0]).transpose();
        let (u, sv) = pod_basis(&s, 1).unwrap();
        assert!(principal_angle_sin(&u, &DMatrix::from_column_slice(3, 1, a.as_slice())) < 1e-12);
        assert!(sv[1] < 1e-12 * sv[0]);
        assert!(matches!(pod_basis(&s, 2), Err(PhError::Rank { available: 1, .. })));
    }

    #[test]
    fn pod_picks_dominant_orthogonal_columns() {
        let s = dmatrix![3.0, 0.0, 0.0; 0.0, 2.0, 0.0; 0.0, 0.0, 1.0; 0.0, 0.0, 0.0];
        let (u, _) = pod_basis(&s, 2).unwrap();
        assert!((u[(0, 0)].abs() - 1.0).abs() < 1e-14);
        assert!((u[(1, 1)].abs() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn biorthonormalize_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, _) = orthonormal_range(&random(6, 3, &mut rng), 1e-12);
        let b = biorthonormalize(q.clone(), q.clone(), Provenance::Custom).unwrap();
        assert!((&b.w - &q).amax() < 1e-14);

        let e1 = dmatrix![1.0; 0.0];
        let b = biorthonormalize(e1.clone(), e1.clone() * 2.0, Provenance::Custom).unwrap();
        assert!((b.w.tr_mul(&b.v)[(0, 0)] - 1.0).abs() < 1e-15);
        assert!((b.w[(0, 0)] - 1.0).abs() < 1e-15);

        let b = biorthonormalize(random(8, 3, &mut rng), random(8, 3, &mut rng), Provenance::Custom).unwrap();
        assert!(b.biorthogonality_defect() <= 1e-12);

        let err = biorthonormalize(dmatrix![1.0; 0.0], dmatrix![0.0; 1.0], Provenance::Custom).unwrap_err();
        assert!(matches!(err, PhError::GenericOrientation { .. }));
    }

    #[test]
    fn q_orthonormalize_cases() {
        let q4 = WeightedMetric::new(dmatrix![4.0]).unwrap();
        assert!((q_orthonormalize(&dmatrix![1.0], &q4).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, _) = orthonormal_range(&random(5, 2, &mut rng), 1e-12);
        let v = q_orthonormalize(&q, &WeightedMetric::identity(5)).unwrap();
        assert!((v.tr_mul(&q) - DMatrix::identity(2, 2)).amax() < 1e-12);
        let lin = random_linear(7, 1, 3);
        let v = q_orthonormalize(&random(7, 3, &mut rng), &lin.metric).unwrap();
        assert!((v.tr_mul(&(&lin.q * &v)) - DMatrix::identity(3, 3)).amax() < 1e-12);
        let dup = dmatrix![1.0, 1.0; 0.0, 0.0];
        assert!(matches!(q_orthonormalize(&dup, &WeightedMetric::identity(2)), Err(PhError::Rank { .. })));
    }

    #[test]
    fn scalar_transfer_function() {
        let lin = LinearPhModel::new(dmatrix![0.0], dmatrix![1.0], dmatrix![1.0], dmatrix![2.0]).unwrap();
        let g = transfer_eval(&lin, Complex64::new(0.0, 0.0)).unwrap();
        assert!((g[(0, 0)] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        let far = transfer_eval(&lin, Complex64::new(1e8, 0.0)).unwrap();
        assert!(far[(0, 0)].norm() < 1e-7);
        assert!(matches!(transfer_eval(&lin, Complex64::new(-2.0, 0.0)), Err(PhError::Pole { .. })));
    }

    #[test]
    fn single_real_shift_column_solves_shifted_system() {
        let lin = random_linear(6, 1, 4);
        let sigma = Complex64::new(0.7, 0.0);
        let dir = vec![DVector::from_element(1, Complex64::new(1.0, 0.0))];
        let v = interpolatory_basis(&lin, &[sigma], &dir).unwrap();
        let res = (DMatrix::identity(6, 6) * 0.7 - lin.system_matrix()) * &v - &lin.b;
        assert!(res.norm() <= 1e-10 * lin.b.norm());
    }

    #[test]
    fn conjugate_pair_realification_spans_complex_pair() {
        let lin = random_linear(6, 2, 5);
        let s = Complex64::new(0.4, 1.3);
        let d = DVector::from_vec(vec![Complex64::new(1.0, 0.5), Complex64::new(-0.3, 2.0)]);
        let v = interpolatory_basis(&lin, &[s, s.conj()], &[d.clone(), d.map(|z| z.conj())]).unwrap();
        // The complex solution and its conjugate, written as a real 2-D span.
        let lu = shifted_lu(&lin.system_matrix(), s).unwrap();
        let z = lu.solve(&(to_complex(&lin.b) * d)).unwrap();
        let reference = DMatrix::from_columns(&[z.map(|c| c.re + c.im), z.map(|c| c.re - c.im)]);
        assert!(principal_angle_sin(&v, &reference) < 1e-10);
    }

    #[test]
    fn unpaired_complex_shift_rejected() {
        let lin = random_linear(4, 1, 6);
        let d = vec![DVector::from_element(1, Complex64::new(1.0, 0.0))];
        assert!(interpolatory_basis(&lin, &[Complex64::new(1.0, 1.0)], &d).is_err());
    }

    #[test]
    fn full_order_interpolation_is_invertible() {
        let lin = random_linear(5, 1, 7);
        let shifts: Vec<Complex64> = (0..5).map(|k| Complex64::new(0.3 + 0.5 * k as f64, 0.0)).collect();
        let dirs = vec![DVector::from_element(1, Complex64::new(1.0, 0.0)); 5];
        let v = interpolatory_basis(&lin, &shifts, &dirs).unwrap();
        assert!(v.determinant().abs() > 1e-12);
    }

    fn assert_interpolates(lin: &LinearPhModel, basis: &ReductionBasis, shifts: &[Complex64], dirs: &[DVector<Complex64>], tol: f64) {
        let red = lin.project(basis).unwrap();
        for (s, b) in shifts.iter().zip(dirs) {
            let g = transfer_eval(lin, *s).unwrap() * b;
            let gr = transfer_eval(&red, *s).unwrap() * b;
            assert!((&g - &gr).norm() <= tol * g.norm(), "shift {s}: {:e}", (&g - &gr).norm() / g.norm());
        }
    }

    #[test]
    fn tangential_interpolation_holds() {
        let lin = random_linear(10, 2, 8);
        let shifts = vec![
            Complex64::new(0.5, 0.0),
            Complex64::new(1.0, 2.0),
            Complex64::new(1.0, -2.0),
            Complex64::new(3.0, 0.0),
        ];
        let d = DVector::from_vec(vec![Complex64::new(0.2, 1.0), Complex64::new(1.0, 0.0)]);
        let dirs = vec![
            DVector::from_vec(vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]),
            d.clone(),
            d.map(|z| z.conj()),
            DVector::from_vec(vec![Complex64::new(-1.0, 0.0), Complex64::new(2.0, 0.0)]),
        ];
        let basis = interpolatory_ph_basis(&lin, &shifts, &dirs).unwrap();
        assert!((basis.v.tr_mul(&(&lin.q * &basis.v)) - DMatrix::identity(4, 4)).amax() < 1e-10);
        assert_interpolates(&lin, &basis, &shifts, &dirs, 1e-8);
    }

    #[test]
    fn eigen_pairs_are_left_eigenvectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random(6, 6, &mut rng);
        for (lam, z) in eigen_pairs(&a.transpose()).unwrap() {
            let res = to_complex(&a.transpose()) * &z - &z * lam;
            assert!(res.norm() < 1e-8 * a.norm(), "residual {:e}", res.norm());
        }
    }

    #[test]
    fn h2eps_full_order_recovers_transfer_function() {
        let lin = random_linear(6, 1, 11);
        let (basis, _) = h2eps_ph_bases(&lin, 6, &H2Options::default()).unwrap();
        let red = lin.project(&basis).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let s = Complex64::new(rng.gen_range(0.0..3.0), rng.gen_range(-5.0..5.0));
            let g = transfer_eval(&lin, s).unwrap();
            let gr = transfer_eval(&red, s).unwrap();
            assert!((&g - &gr).norm() <= 1e-8 * g.norm());
        }
    }

    #[test]
    fn h2eps_converged_shifts_satisfy_mirror_interpolation() {
        let lin = random_linear(12, 1, 13);
        let (basis, log) = h2eps_ph_bases(&lin, 4, &H2Options::default()).unwrap();
        assert!(log.converged, "changes {:?}", log.changes);
        let red = lin.project(&basis).unwrap();
        let pairs = eigen_pairs(&(&red.j - &red.r).transpose()).unwrap();
        let b_rt = to_complex(&red.b.transpose());
        for (lam, z) in pairs {
            let s = Complex64::new(lam.re.abs(), -lam.im);
            let b = &b_rt * z;
            let g = transfer_eval(&lin, s).unwrap() * &b;
            let gr = transfer_eval(&red, s).unwrap() * &b;
            assert!((&g - &gr).norm() <= 1e-6 * g.norm());
        }
    }

    #[test]
    fn hybrid_of_orthogonal_bases_keeps_span() {
        let i6 = DMatrix::<f64>::identity(6, 6);
        let a = ReductionBasis::from_pair(i6.columns(0, 2).into_owned(), i6.columns(0, 2).into_owned(), Provenance::Pod).unwrap();
        let b = ReductionBasis::from_pair(i6.columns(2, 2).into_owned(), i6.columns(2, 2).into_owned(), Provenance::H2eps).unwrap();
        let h = hybrid_bases(&a, &b).unwrap();
        assert_eq!(h.r(), 4);
        assert!(h.warnings.is_empty());
        assert!(principal_angle_sin(&h.v, &i6.columns(0, 4).into_owned()) < 1e-12);
    }

    #[test]
    fn hybrid_of_duplicates_truncates_with_warning() {
        let i6 = DMatrix::<f64>::identity(6, 6);
        let a = ReductionBasis::from_pair(i6.columns(0, 3).into_owned(), i6.columns(0, 3).into_owned(), Provenance::Pod).unwrap();
        let h = hybrid_bases(&a, &a).unwrap();
        assert_eq!(h.r(), 3);
        assert_eq!(h.warnings.len(), 1);
    }

    #[test]
    fn q_normalized_keeps_spans_and_biorthogonality() {
        let lin = random_linear(8, 1, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let b = biorthonormalize(random(8, 3, &mut rng), random(8, 3, &mut rng), Provenance::Pod).unwrap();
        let nb = b.q_normalized(&lin.metric).unwrap();
        assert!((nb.v.tr_mul(&(&lin.q * &nb.v)) - DMatrix::identity(3, 3)).amax() < 1e-10);
        assert!(nb.biorthogonality_defect() < 1e-10);
        assert!(principal_angle_sin(&nb.v, &b.v) < 1e-10);
        assert!(principal_angle_sin(&nb.w, &b.w) < 1e-10);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn eckart_young_residual(seed in 0u64..10_000, r in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = random(7, 5, &mut rng);
                let (u, sv) = pod_basis(&s, r).unwrap();
                let resid = (&s - &u * u.tr_mul(&s)).norm_squared();
                let tail: f64 = sv.iter().skip(r).map(|v| v * v).sum();
                prop_assert!((resid - tail).abs() <= 1e-10 * s.norm_squared());
            }

            #[test]
            fn biorthonormalized_pairs_meet_tolerance(seed in 0u64..10_000) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v0 = random(9, 3, &mut rng);
                let w0 = random(9, 3, &mut rng);
                prop_assume!(crate::linalg::condition_number(&w0.tr_mul(&v0)) < 1e8);
                let b = biorthonormalize(v0, w0, Provenance::Custom).unwrap();
                prop_assert!(b.biorthogonality_defect() <= BIORTHO_TOL);
            }
        }
    }
}
