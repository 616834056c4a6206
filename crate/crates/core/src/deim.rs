//! Discrete empirical interpolation of the nonlinear part of `∇H`, applied
//! symmetrically so the reduced model stays port-Hamiltonian.
//!
//! With `H(x) = ½xᵀQx + h(x)` and the interpolatory projector
//! `ℙ = U(EᵀU)⁻¹Eᵀ`, the surrogate energy is `Ĥ(x) = ½xᵀQx + h(ℙᵀx)`. Its
//! reduced gradient `VᵀQVx_r + Vᵀℙ∇h(ℙᵀVx_r)` only needs the `m` components of
//! `∇h` at the interpolation indices, and `ℙᵀVx_r` is supported on those same
//! indices.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::{pod_basis, pod_ph_bases, q_orthonormalize, ReductionBasis, SnapshotSet};
use crate::error::{PhError, Result};
use crate::linalg::{all_finite, condition_number, sym_part};
use crate::phcore::{Hamiltonian, NlphSystem, WeightedMetric};
use crate::reduce::{ReducedEnergy, ReducedSystem};

/// Largest accepted condition number of `EᵀU`.
pub const MAX_DEIM_COND: f64 = 1e12;

fn argmax_abs(v: impl Iterator<Item = f64>) -> (usize, f64) {
    let mut best = (0, -1.0);
    for (i, x) in v.enumerate() {
        // Strict comparison keeps the smallest index on ties.
        if x.abs() > best.1 {
            best = (i, x.abs());
        }
    }
    best
}

fn select_rows(u: &DMatrix<f64>, rows: &[usize], cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols, |i, j| u[(rows[i], j)])
}

/// Greedy interpolation indices (0-based); ties go to the smallest index.
pub fn deim_indices(u: &DMatrix<f64>) -> Result<Vec<usize>> {
    let (n, m) = u.shape();
    if m == 0 || m > n {
        return Err(PhError::DeimSelection {
            step: 0,
            detail: format!("need 1 <= m <= n, got m = {m}, n = {n}"),
        });
    }
    let (first, peak) = argmax_abs(u.column(0).iter().copied());
    if peak == 0.0 {
        return Err(PhError::DeimSelection {
            step: 1,
            detail: "first basis vector is zero".into(),
        });
    }
    let mut idx = vec![first];
    for l in 1..m {
        let et_u = select_rows(u, &idx, l);
        let rhs = DVector::from_iterator(l, idx.iter().map(|&i| u[(i, l)]));
        let singular = || PhError::DeimSelection {
            step: l + 1,
            detail: "interpolation matrix is singular".into(),
        };
        if !(condition_number(&et_u) < 1e14) {
            return Err(singular());
        }
        let c = et_u.lu().solve(&rhs).ok_or_else(singular)?;
        let resid = u.column(l) - u.columns(0, l) * c;
        let (next, peak) = argmax_abs(resid.iter().copied());
        if !(peak > 1e-14 * u.column(l).amax()) {
            return Err(PhError::DeimSelection {
                step: l + 1,
                detail: "basis vector lies in the span of the previous ones".into(),
            });
        }
        idx.push(next);
    }
    Ok(idx)
}

/// Basis `U`, indices `℘` and the factored interpolation matrix `EᵀU`.
#[derive(Debug, Clone)]
pub struct DeimModel {
    pub u: DMatrix<f64>,
    pub indices: Vec<usize>,
    et_u_inv: DMatrix<f64>,
    /// `‖(EᵀU)⁻¹‖₂`.
    pub growth: f64,
    pub cond: f64,
}

impl DeimModel {
    /// Select indices for `u` and factor `EᵀU`.
    pub fn new(u: DMatrix<f64>) -> Result<Self> {
        let indices = deim_indices(&u)?;
        Self::with_indices(u, indices)
    }

    pub fn with_indices(u: DMatrix<f64>, indices: Vec<usize>) -> Result<Self> {
        let m = u.ncols();
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if indices.len() != m || seen.len() != m || seen.last().is_some_and(|&i| i >= u.nrows()) {
            return Err(PhError::InvalidArgument("DEIM indices must be distinct and in range".into()));
        }
        let et_u = select_rows(&u, &indices, m);
        let cond = condition_number(&et_u);
        if !(cond <= MAX_DEIM_COND) {
            return Err(PhError::DeimConditioning { cond });
        }
        let et_u_inv = et_u.lu().try_inverse().ok_or(PhError::DeimConditioning { cond })?;
        let growth = crate::linalg::spectral_norm(&et_u_inv);
        Ok(Self {
            u,
            indices,
            et_u_inv,
            growth,
            cond,
        })
    }

    pub fn m(&self) -> usize {
        self.u.ncols()
    }
    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    /// `(EᵀU)⁻¹`.
    pub fn interpolation_inverse(&self) -> &DMatrix<f64> {
        &self.et_u_inv
    }

    /// `U(EᵀU)⁻¹f_℘`, the interpolant of a vector known only at the indices.
    pub fn project_samples(&self, f_at_indices: &DVector<f64>) -> DVector<f64> {
        &self.u * (&self.et_u_inv * f_at_indices)
    }

    /// `ℙf`.
    pub fn project(&self, f: &DVector<f64>) -> DVector<f64> {
        self.project_samples(&DVector::from_iterator(self.m(), self.indices.iter().map(|&i| f[i])))
    }

    /// `ℙᵀx = E(EᵀU)⁻ᵀUᵀx`, returned as its values on the indices.
    pub fn project_transpose_samples(&self, x: &DVector<f64>) -> DVector<f64> {
        self.et_u_inv.tr_mul(&self.u.tr_mul(x))
    }

    pub fn project_transpose(&self, x: &DVector<f64>) -> DVector<f64> {
        let vals = self.project_transpose_samples(x);
        let mut out = DVector::zeros(self.n());
        for (j, &i) in self.indices.iter().enumerate() {
            out[i] = vals[j];
        }
        out
    }

    /// Dense `ℙ`, for diagnostics on small problems.
    pub fn projector(&self) -> DMatrix<f64> {
        let mut e = DMatrix::zeros(self.n(), self.m());
        for (j, &i) in self.indices.iter().enumerate() {
            e[(i, j)] = 1.0;
        }
        &self.u * &self.et_u_inv * e.transpose()
    }

    /// `‖ℙ‖_Q` from `m×m` quantities: `λ_max(KᵀUᵀQUK · EᵀQ⁻¹E)` with `K = (EᵀU)⁻¹`.
    pub fn projector_q_norm(&self, metric: &WeightedMetric) -> f64 {
        let uk = &self.u * &self.et_u_inv;
        let c1 = sym_part(&uk.tr_mul(&metric.apply(&uk)));
        let mut e = DMatrix::zeros(self.n(), self.m());
        for (j, &i) in self.indices.iter().enumerate() {
            e[(i, j)] = 1.0;
        }
        let qinv_e = metric.solve(&e);
        let c2 = sym_part(&select_rows(&qinv_e, &self.indices, self.m()));
        match c1.clone().cholesky() {
            Some(ch) => {
                let r = ch.unpack().transpose();
                let s = sym_part(&(&r * c2 * r.transpose()));
                s.symmetric_eigenvalues().max().max(0.0).sqrt()
            }
            None => metric.op_norm(&self.projector()),
        }
    }
}

/// POD basis of the remainder snapshots, made Q-orthonormal, then indexed.
pub fn deim_basis_from_snapshots(g: &DMatrix<f64>, m: usize, metric: &WeightedMetric) -> Result<DeimModel> {
    let (u0, _) = pod_basis(g, m).map_err(|e| match e {
        PhError::Rank { requested, available, .. } => PhError::Rank {
            what: "DEIM snapshot matrix (nothing to interpolate beyond its rank)".into(),
            requested,
            available,
        },
        other => other,
    })?;
    let u = q_orthonormalize(&u0, metric)?;
    DeimModel::new(u)
}

/// `H(x) = ½xᵀQx + h(x)` with access to components of `∇h`.
#[derive(Clone)]
pub struct HamiltonianSplit {
    pub metric: WeightedMetric,
    ham: Arc<dyn Hamiltonian>,
    native: bool,
}

impl std::fmt::Debug for HamiltonianSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HamiltonianSplit").field("native", &self.native).finish()
    }
}

/// Uses the model's own remainder when its quadratic part equals `Q`.
pub fn build_split(sys: &NlphSystem, metric: WeightedMetric) -> Result<HamiltonianSplit> {
    if metric.dim() != sys.n() {
        return Err(PhError::InvalidArgument("split metric dimension differs from n".into()));
    }
    let ham = sys.hamiltonian_model().clone();
    let native = ham.native_split().is_some_and(|s| {
        let q = s.quadratic();
        let qm = metric.matrix();
        (&q - &qm).amax() <= 1e-12 * q.amax().max(1.0)
    });
    if !native {
        log::warn!("no native remainder for this Q; DEIM evaluations fall back to dense O(n) gradients");
    }
    Ok(HamiltonianSplit { metric, ham, native })
}

impl HamiltonianSplit {
    pub fn is_native(&self) -> bool {
        self.native
    }

    pub fn hamiltonian_model(&self) -> &Arc<dyn Hamiltonian> {
        &self.ham
    }

    pub fn quadratic_energy(&self, x: &DVector<f64>) -> f64 {
        0.5 * self.metric.inner(x, x)
    }

    pub fn h(&self, x: &DVector<f64>) -> f64 {
        match self.native_split() {
            Some(s) => s.remainder(x),
            None => self.ham.value(x) - self.quadratic_energy(x),
        }
    }

    pub fn grad_h_full(&self, x: &DVector<f64>) -> DVector<f64> {
        match self.native_split() {
            Some(s) => s.remainder_gradient(x),
            None => self.ham.gradient(x) - self.metric.apply_vec(x),
        }
    }

    fn native_split(&self) -> Option<&dyn crate::phcore::NativeSplit> {
        if self.native {
            self.ham.native_split()
        } else {
            None
        }
    }

    /// Entries of `∇h` at `out` for the sparse state with `x[support[k]] = values[k]`.
    pub fn grad_h_components(&self, support: &[usize], values: &[f64], out: &[usize]) -> Vec<f64> {
        match self.native_split() {
            Some(s) => {
                let lookup = |k: usize| support.iter().position(|&i| i == k).map_or(0.0, |p| values[p]);
                out.iter().map(|&i| s.remainder_gradient_entry(i, &lookup)).collect()
            }
            None => {
                let mut x = DVector::zeros(self.metric.dim());
                for (&i, &v) in support.iter().zip(values) {
                    x[i] = v;
                }
                let g = self.grad_h_full(&x);
                out.iter().map(|&i| g[i]).collect()
            }
        }
    }
}

/// `Ĥ(x) = ½xᵀQx + h(ℙᵀx)`.
pub fn deim_hamiltonian(split: &HamiltonianSplit, model: &DeimModel, x: &DVector<f64>) -> f64 {
    split.quadratic_energy(x) + split.h(&model.project_transpose(x))
}

/// Reduced DEIM energy with instrumented component evaluations.
pub struct DeimEnergy {
    split: HamiltonianSplit,
    model: DeimModel,
    v: DMatrix<f64>,
    q_r: DMatrix<f64>,
    /// `VᵀU(EᵀU)⁻¹`, r×m.
    gather: DMatrix<f64>,
    /// `(EᵀU)⁻ᵀUᵀV`, m×r: values of `ℙᵀVx_r` on the indices.
    scatter: DMatrix<f64>,
    /// Per index: stencil entries paired with their position among the indices.
    stencils: Vec<Vec<(usize, Option<usize>)>>,
    evaluations: AtomicUsize,
}

impl DeimEnergy {
    pub fn new(split: HamiltonianSplit, model: DeimModel, v: &DMatrix<f64>) -> Result<Self> {
        if v.nrows() != model.n() {
            return Err(PhError::InvalidArgument("basis and DEIM model dimensions differ".into()));
        }
        let q_r = sym_part(&v.tr_mul(&split.metric.apply(v)));
        let gather = v.tr_mul(&model.u) * model.interpolation_inverse();
        let scatter = model.interpolation_inverse().tr_mul(&model.u.tr_mul(v));
        let stencils = match split.native_split() {
            Some(s) => model
                .indices
                .iter()
                .map(|&i| {
                    s.stencil(i)
                        .into_iter()
                        .map(|k| (k, model.indices.iter().position(|&p| p == k)))
                        .collect()
                })
                .collect(),
            None => Vec::new(),
        };
        Ok(Self {
            split,
            model,
            v: v.clone(),
            q_r,
            gather,
            scatter,
            stencils,
            evaluations: AtomicUsize::new(0),
        })
    }

    /// Total number of `∇h` components evaluated so far.
    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }

    pub fn model(&self) -> &DeimModel {
        &self.model
    }

    pub fn split(&self) -> &HamiltonianSplit {
        &self.split
    }

    /// `∇h` components at the indices for the state `ℙᵀVx_r`.
    pub fn sampled_remainder_gradient(&self, x_r: &DVector<f64>) -> DVector<f64> {
        let vals = &self.scatter * x_r;
        let m = self.model.m();
        self.evaluations.fetch_add(m, Ordering::Relaxed);
        match self.split.native_split() {
            Some(s) => DVector::from_fn(m, |j, _| {
                let table = &self.stencils[j];
                let lookup = |k: usize| {
                    table
                        .iter()
                        .find(|(g, _)| *g == k)
                        .and_then(|(_, l)| *l)
                        .map_or(0.0, |l| vals[l])
                };
                s.remainder_gradient_entry(self.model.indices[j], &lookup)
            }),
            None => {
                let g = self
                    .split
                    .grad_h_components(&self.model.indices, vals.as_slice(), &self.model.indices);
                DVector::from_vec(g)
            }
        }
    }
}

impl ReducedEnergy for DeimEnergy {
    fn value(&self, x_r: &DVector<f64>) -> f64 {
        let x = &self.v * x_r;
        deim_hamiltonian(&self.split, &self.model, &x)
    }

    fn gradient(&self, x_r: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.sampled_remainder_gradient(x_r);
        if !all_finite(g.as_slice()) {
            return Err(PhError::Evaluation {
                detail: "sampled remainder gradient is not finite".into(),
                state_norm: x_r.norm(),
                state: x_r.as_slice().to_vec(),
            });
        }
        Ok(&self.q_r * x_r + &self.gather * g)
    }

    fn kind(&self) -> &'static str {
        "deim"
    }
}

/// Reduced system with the DEIM energy. The basis is rescaled to `VᵀQV = I`
/// (spans unchanged) before projection.
pub fn deim_reduce(
    sys: &NlphSystem,
    basis: &ReductionBasis,
    split: &HamiltonianSplit,
    model: DeimModel,
) -> Result<(ReducedSystem, Arc<DeimEnergy>)> {
    let basis = basis.q_normalized(&split.metric)?;
    let energy = Arc::new(DeimEnergy::new(split.clone(), model, &basis.v)?);
    let red = ReducedSystem::assemble(sys, &basis, energy.clone());
    Ok((red, energy))
}

/// Remainder snapshots `G = F − QX` for the split metric.
pub fn remainder_snapshots(snapshots: &SnapshotSet, split: &HamiltonianSplit) -> DMatrix<f64> {
    match &snapshots.g {
        Some(g) => g.clone(),
        None => &snapshots.f - split.metric.apply(&snapshots.x),
    }
}

/// POD bases of order `r` with a DEIM layer of order `m`.
pub fn pod_deim_ph(
    sys: &NlphSystem,
    snapshots: &SnapshotSet,
    r: usize,
    m: usize,
    split: &HamiltonianSplit,
) -> Result<(ReducedSystem, Arc<DeimEnergy>)> {
    let basis = pod_ph_bases(snapshots, r)?;
    let model = deim_basis_from_snapshots(&remainder_snapshots(snapshots, split), m, &split.metric)?;
    deim_reduce(sys, &basis, split, model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ladder_network, toda_lattice, LadderParams, TodaParams};
    use crate::phcore::QuadraticHamiltonian;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn selection_examples() {
        let e3 = dmatrix![0.0; 0.0; 1.0];
        assert_eq!(deim_indices(&e3).unwrap(), vec![2]);
        let u = dmatrix![0.1; -0.9; 0.5];
        assert_eq!(deim_indices(&u).unwrap()[0], 1);
        let u = dmatrix![1.0, 1.0; 0.0, 1.0; 0.0, 0.0];
        assert_eq!(deim_indices(&u).unwrap(), vec![0, 1]);
        let tie = dmatrix![1.0; -1.0; 1.0];
        assert_eq!(deim_indices(&tie).unwrap(), vec![0]);
    }

    #[test]
    fn dependent_columns_rejected() {
        let u = dmatrix![1.0, 2.0; 1.0, 2.0; 0.0, 0.0];
        assert!(matches!(deim_indices(&u), Err(PhError::DeimSelection { step: 2, .. })));
    }

    #[test]
    fn projector_is_interpolatory_and_exact_on_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = DeimModel::new(random(12, 4, &mut rng)).unwrap();
        let col = model.u.column(2).into_owned();
        assert!((model.project(&col) - &col).amax() < 1e-12);
        let f = DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let pf = model.project(&f);
        for &i in &model.indices {
            assert!((pf[i] - f[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_order_projector_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = DeimModel::new(random(5, 5, &mut rng)).unwrap();
        assert!((model.projector() - DMatrix::identity(5, 5)).amax() < 1e-10);
    }

    #[test]
    fn error_bounded_by_growth_times_best_error_for_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (u, _) = crate::linalg::orthonormal_range(&random(20, 5, &mut rng), 1e-12);
        let model = DeimModel::new(u.clone()).unwrap();
        for _ in 0..50 {
            let f = DVector::from_fn(20, |_, _| rng.gen_range(-1.0..1.0));
            let best = (&f - &u * u.tr_mul(&f)).norm();
            let err = (&f - model.project(&f)).norm();
            assert!(err <= model.growth * best * (1.0 + 1e-12));
        }
    }

    #[test]
    fn growth_equals_projector_norm_for_identity_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (u, _) = crate::linalg::orthonormal_range(&random(15, 4, &mut rng), 1e-12);
        let model = DeimModel::new(u).unwrap();
        let id = WeightedMetric::identity(15);
        assert!((model.growth - id.op_norm(&model.projector())).abs() < 1e-10 * model.growth);
        assert!((model.projector_q_norm(&id) - model.growth).abs() < 1e-10 * model.growth);
    }

    #[test]
    fn low_rank_projector_norm_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(10, 10, &mut rng);
        let metric = WeightedMetric::new(&a * a.transpose() + DMatrix::identity(10, 10)).unwrap();
        let u = q_orthonormalize(&random(10, 3, &mut rng), &metric).unwrap();
        let model = DeimModel::new(u).unwrap();
        let dense = metric.op_norm(&model.projector());
        assert!((model.projector_q_norm(&metric) - dense).abs() < 1e-9 * dense);
    }

    #[test]
    fn zero_snapshots_have_nothing_to_interpolate() {
        let g = DMatrix::zeros(6, 4);
        assert!(matches!(
            deim_basis_from_snapshots(&g, 1, &WeightedMetric::identity(6)),
            Err(PhError::Rank { available: 0, .. })
        ));
    }

    #[test]
    fn orthonormal_snapshots_span_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (g, _) = crate::linalg::orthonormal_range(&random(8, 3, &mut rng), 1e-12);
        let model = deim_basis_from_snapshots(&g, 3, &WeightedMetric::identity(8)).unwrap();
        let resid = &g - &model.u * model.u.tr_mul(&g);
        assert!(resid.amax() < 1e-12);
        assert!((model.u.tr_mul(&model.u) - DMatrix::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn quadratic_hamiltonian_has_zero_remainder() {
        let q = dmatrix![2.0, 0.5; 0.5, 1.0];
        let sys = NlphSystem::new(
            dmatrix![0.0, 1.0; -1.0, 0.0],
            DMatrix::zeros(2, 2),
            dmatrix![1.0; 0.0],
            Arc::new(QuadraticHamiltonian::new(q.clone())),
        )
        .unwrap();
        let split = build_split(&sys, WeightedMetric::new(q).unwrap()).unwrap();
        let x = DVector::from_vec(vec![0.3, -1.2]);
        assert!(split.h(&x).abs() < 1e-15);
        assert!(split.grad_h_full(&x).amax() < 1e-15);
    }

    #[test]
    fn native_components_match_dense_remainder() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for sys in [
            toda_lattice(&TodaParams::with_particles(9)).unwrap(),
            ladder_network(&LadderParams::with_stages(9)).unwrap(),
        ] {
            let q = sys.hamiltonian_model().native_split().unwrap().quadratic();
            let split = build_split(&sys, WeightedMetric::new(q).unwrap()).unwrap();
            assert!(split.is_native());
            for _ in 0..20 {
                let support: Vec<usize> = (0..18).filter(|_| rng.gen_bool(0.4)).collect();
                let values: Vec<f64> = support.iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut x = DVector::zeros(18);
                for (&i, &v) in support.iter().zip(&values) {
                    x[i] = v;
                }
                let full = sys.gradient(&x).unwrap() - split.metric.apply_vec(&x);
                let dense = split.grad_h_full(&x);
                assert!((&full - &dense).amax() < 1e-12);
                let out: Vec<usize> = (0..18).collect();
                let comps = split.grad_h_components(&support, &values, &out);
                for i in 0..18 {
                    assert!((comps[i] - dense[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn ladder_remainder_is_higher_order() {
        let sys = ladder_network(&LadderParams::with_stages(10)).unwrap();
        let q = sys.hamiltonian_model().hessian(&DVector::zeros(20)).unwrap();
        let split = build_split(&sys, WeightedMetric::new(q).unwrap()).unwrap();
        assert_eq!(split.grad_h_full(&DVector::zeros(20)).amax(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = DVector::from_fn(20, |_, _| 1e-4 * rng.gen_range(-1.0..1.0));
        // ∇h is O(z²) while Qx is O(z), with z ~ 1e-4.
        assert!(split.grad_h_full(&x).norm() <= 1e-3 * split.metric.apply_vec(&x).norm());
    }

    #[test]
    fn full_order_deim_hamiltonian_equals_hamiltonian() {
        let sys = toda_lattice(&TodaParams::with_particles(5)).unwrap();
        let q = sys.hamiltonian_model().native_split().unwrap().quadratic();
        let metric = WeightedMetric::new(q).unwrap();
        let split = build_split(&sys, metric.clone()).unwrap();
        let u = q_orthonormalize(&DMatrix::identity(10, 10), &metric).unwrap();
        let model = DeimModel::new(u).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = DVector::from_fn(10, |_, _| rng.gen_range(-1.0..1.0));
            let h = sys.hamiltonian(&x);
            assert!((deim_hamiltonian(&split, &model, &x) - h).abs() < 1e-10 * h.abs().max(1.0));
        }
    }

    #[test]
    fn reduced_gradient_counts_exactly_m_components() {
        let sys = toda_lattice(&TodaParams::with_particles(30)).unwrap();
        let q = sys.hamiltonian_model().native_split().unwrap().quadratic();
        let metric = WeightedMetric::new(q).unwrap();
        let split = build_split(&sys, metric.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = DMatrix::from_fn(60, 12, |i, _| if i < 30 { rng.gen_range(-1.0..1.0) } else { 0.0 });
        let model = deim_basis_from_snapshots(&g, 7, &metric).unwrap();
        let v0 = random(60, 4, &mut rng);
        let basis = crate::basis::biorthonormalize(v0.clone(), v0, crate::basis::Provenance::Custom).unwrap();
        let (red, energy) = deim_reduce(&sys, &basis, &split, model).unwrap();
        let x_r = DVector::from_fn(4, |_, _| rng.gen_range(-0.2..0.2));
        let before = energy.evaluations();
        let grad = red.energy.gradient(&x_r).unwrap();
        assert_eq!(energy.evaluations() - before, 7);
        // Matches the dense formula VᵀQVx_r + Vᵀℙ∇h(ℙᵀVx_r).
        let v = &red.lift;
        let x = v * &x_r;
        let dense = v.tr_mul(&metric.apply_vec(&x))
            + v.tr_mul(&energy.model().project(&split.grad_h_full(&energy.model().project_transpose(&x))));
        assert!((grad - dense).amax() < 1e-12);
        assert!(red.validate_structure().pass);
    }
}
