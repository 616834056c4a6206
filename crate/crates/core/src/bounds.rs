//! Computable error bounds for projection and DEIM reduction.
//!
//! Lipschitz-type constants are suprema over the whole state space. Only
//! sampled estimates are computable, so every report records how each constant
//! was obtained. Sampled values are lower bounds of the true suprema.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::basis::{q_orthonormalize, ReductionBasis};
use crate::deim::{DeimModel, HamiltonianSplit};
use crate::error::{PhError, Result};
use crate::linalg::{spectral_norm, sym_eig_range, sym_part, trapezoid};
use crate::phcore::{Hamiltonian, NlphSystem, Trajectory, WeightedMetric};
use crate::reduce::same_grid;

/// Below this `|α|` the closed forms are replaced by their `α → 0` limits.
pub const ALPHA_LIMIT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LipschitzMethod {
    SampledPairs,
    HessianSup,
    ExactLinear,
}

impl LipschitzMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::SampledPairs => "sampled-pairs",
            Self::HessianSup => "hessian-sup",
            Self::ExactLinear => "exact-linear",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub method: LipschitzMethod,
    /// Pairs or points inspected; zero for the exact method.
    pub samples: usize,
    /// Sampled suprema underestimate the true constant.
    pub lower_bound_only: bool,
}

impl LipschitzEstimate {
    fn new(value: f64, method: LipschitzMethod, samples: usize) -> Result<Self> {
        if !value.is_finite() {
            return Err(PhError::Estimation(format!("{} estimate is not finite", method.as_str())));
        }
        Ok(Self {
            value,
            method,
            samples,
            lower_bound_only: method == LipschitzMethod::SampledPairs,
        })
    }
}

/// How a map `F: ℝⁿ → ℝⁿ` is sampled.
pub enum MapSamples<'a> {
    /// Quotients over explicit pairs `(u, v)`.
    Pairs {
        f: &'a dyn Fn(&DVector<f64>) -> Result<DVector<f64>>,
        pairs: &'a [(DVector<f64>, DVector<f64>)],
    },
    /// Jacobian norms at sample points; valid on their convex hull.
    Jacobians {
        jac: &'a dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
        points: &'a [DVector<f64>],
    },
    /// `F(x) = Ax`.
    Linear(&'a DMatrix<f64>),
}

/// Running maxima of `‖ΔF‖_Q/‖Δx‖_Q` and `⟨Δx, ΔF⟩_Q/‖Δx‖²_Q`.
#[derive(Debug, Clone, Copy)]
struct QuotientMax {
    lip: f64,
    log_lip: f64,
    count: usize,
}

impl QuotientMax {
    fn new() -> Self {
        Self {
            lip: f64::NEG_INFINITY,
            log_lip: f64::NEG_INFINITY,
            count: 0,
        }
    }

    fn push(&mut self, metric: &WeightedMetric, dx: &DVector<f64>, df: &DVector<f64>) {
        let nx2 = metric.inner(dx, dx);
        if !(nx2 > 0.0) {
            return;
        }
        let qdf = metric.apply_vec(df);
        self.lip = self.lip.max((df.dot(&qdf) / nx2).max(0.0).sqrt());
        self.log_lip = self.log_lip.max(dx.dot(&qdf) / nx2);
        self.count += 1;
    }

    fn push_jacobian(&mut self, metric: &WeightedMetric, jac: &DMatrix<f64>) {
        let c = metric.congruence(jac);
        self.lip = self.lip.max(spectral_norm(&c));
        self.log_lip = self.log_lip.max(sym_eig_range(&sym_part(&c)).1);
        self.count += 1;
    }

    fn finish(self, method: LipschitzMethod) -> Result<(LipschitzEstimate, LipschitzEstimate)> {
        if self.count == 0 {
            return Err(PhError::Estimation("no distinct samples".into()));
        }
        Ok((
            LipschitzEstimate::new(self.lip, method, self.count)?,
            LipschitzEstimate::new(self.log_lip, method, self.count)?,
        ))
    }
}

fn estimate_both(map: &MapSamples<'_>, metric: &WeightedMetric) -> Result<(LipschitzEstimate, LipschitzEstimate)> {
    match map {
        MapSamples::Pairs { f, pairs } => {
            let mut acc = QuotientMax::new();
            for (u, v) in pairs.iter() {
                acc.push(metric, &(u - v), &(f(u)? - f(v)?));
            }
            acc.finish(LipschitzMethod::SampledPairs)
        }
        MapSamples::Jacobians { jac, points } => {
            let mut acc = QuotientMax::new();
            for p in points.iter() {
                acc.push_jacobian(metric, &jac(p)?);
            }
            acc.finish(LipschitzMethod::HessianSup)
        }
        MapSamples::Linear(a) => {
            let mut acc = QuotientMax::new();
            acc.push_jacobian(metric, a);
            let (mut l, mut g) = acc.finish(LipschitzMethod::ExactLinear)?;
            l.samples = 0;
            g.samples = 0;
            Ok((l, g))
        }
    }
}

/// `L_Q[F] = sup ‖F(u) − F(v)‖_Q / ‖u − v‖_Q`.
pub fn lipschitz(map: &MapSamples<'_>, metric: &WeightedMetric) -> Result<LipschitzEstimate> {
    Ok(estimate_both(map, metric)?.0)
}

/// `𝓛_Q[F] = sup ⟨u − v, F(u) − F(v)⟩_Q / ‖u − v‖²_Q`; may be negative.
pub fn log_lipschitz(map: &MapSamples<'_>, metric: &WeightedMetric) -> Result<LipschitzEstimate> {
    Ok(estimate_both(map, metric)?.1)
}

/// Base states plus `copies` Gaussian perturbations of each, with standard
/// deviation `rel` times the largest entry magnitude over all base states.
pub fn sampling_population(base: &[DVector<f64>], copies: usize, rel: f64, seed: u64) -> Vec<DVector<f64>> {
    let amp = base.iter().map(|x| x.amax()).fold(0.0, f64::max);
    let mut out = base.to_vec();
    if amp == 0.0 || copies == 0 || !(rel > 0.0) {
        return out;
    }
    let normal = Normal::new(0.0, rel * amp).expect("positive standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for x in base {
        for _ in 0..copies {
            out.push(x.map(|v| v + normal.sample(&mut rng)));
        }
    }
    out
}

/// Index pairs into a population built by [`sampling_population`]: every
/// base/jitter pair plus `extra` random pairs.
pub fn population_pairs(n_base: usize, copies: usize, extra: usize, seed: u64) -> Vec<(usize, usize)> {
    let total = n_base * (copies + 1);
    let mut pairs = Vec::with_capacity(n_base * copies + extra);
    for k in 0..n_base {
        for c in 0..copies {
            pairs.push((k, n_base + k * copies + c));
        }
    }
    if total >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for _ in 0..extra {
            let a = rng.gen_range(0..total);
            let mut b = rng.gen_range(0..total - 1);
            if b >= a {
                b += 1;
            }
            pairs.push((a, b));
        }
    }
    pairs
}

/// `∫₀ᵀ e^{2ατ} dτ`.
pub fn c_alpha(alpha: f64, t: f64) -> f64 {
    if alpha.abs() < ALPHA_LIMIT_TOL {
        return t;
    }
    let z = 2.0 * alpha * t;
    if z.abs() < 0.5 {
        // Σ_{k≥1} (2α)^{k−1} t^k / k!
        series(z, 1) * t
    } else {
        z.exp_m1() / (2.0 * alpha)
    }
}

/// `∫₀ᵀ c_α(τ) dτ`.
pub fn big_c_alpha(alpha: f64, t: f64) -> f64 {
    if alpha.abs() < ALPHA_LIMIT_TOL {
        return 0.5 * t * t;
    }
    let z = 2.0 * alpha * t;
    if z.abs() < 0.5 {
        // Σ_{k≥1} (2α)^{k−1} t^{k+1} / (k+1)!
        series(z, 2) * t * t
    } else {
        (c_alpha(alpha, t) - t) / (2.0 * alpha)
    }
}

/// `Σ_{k≥0} z^k / (k + s)!` for small `|z|`.
fn series(z: f64, s: u32) -> f64 {
    let mut term = 1.0 / (1..=s).map(f64::from).product::<f64>();
    let mut sum = term;
    for k in 1..60 {
        term *= z / f64::from(k + s);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// `(e^{αt} − 1)/α`, equal to `t` in the limit.
fn growth_integral(alpha: f64, t: f64) -> f64 {
    if alpha.abs() < ALPHA_LIMIT_TOL {
        t
    } else {
        (alpha * t).exp_m1() / alpha
    }
}

/// `c·e` with `0·∞ = 0`, so exact reductions give a zero bound even when a
/// constant overflowed.
fn term(c: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else {
        c * e
    }
}

/// Sampling controls shared by the bound reports.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct BoundOptions {
    pub method: LipschitzMethod,
    pub jitter_copies: usize,
    pub jitter_rel: f64,
    pub extra_pairs: usize,
    pub seed: u64,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            method: LipschitzMethod::SampledPairs,
            jitter_copies: 10,
            jitter_rel: 0.01,
            extra_pairs: 2000,
            seed: 0,
        }
    }
}

/// State and output bounds for a projection-reduced model.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub horizon: f64,
    pub eps_x_sq: f64,
    pub eps_f_sq: f64,
    pub initial_defect_sq: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lipschitz_f: f64,
    pub alpha_estimate: LipschitzEstimate,
    pub lipschitz_f_estimate: LipschitzEstimate,
    pub c_alpha: f64,
    pub big_c_alpha: f64,
    pub c_x: f64,
    pub c_f: f64,
    pub c_0: f64,
    pub hat_c_x: f64,
    pub hat_c_f: f64,
    pub hat_c_0: f64,
    /// Bound on `∫‖x − Vx_r‖²_Q`.
    pub state_bound: f64,
    /// Bound on `∫‖y − y_r‖²`.
    pub output_bound: f64,
    pub measured_state: f64,
    pub measured_output: f64,
}

impl BoundReport {
    pub fn state_holds(&self, rel_slack: f64) -> bool {
        self.measured_state <= self.state_bound * (1.0 + rel_slack)
    }
    pub fn output_holds(&self, rel_slack: f64) -> bool {
        self.measured_output <= self.output_bound * (1.0 + rel_slack)
    }
}

fn hessian_or_fd(ham: &dyn Hamiltonian, x: &DVector<f64>) -> DMatrix<f64> {
    if let Some(h) = ham.hessian(x) {
        return h;
    }
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    for j in 0..n {
        let h = 1e-6 * x[j].abs().max(1.0);
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        out.set_column(j, &((ham.gradient(&xp) - ham.gradient(&xm)) / (2.0 * h)));
    }
    sym_part(&out)
}

fn columns(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.column_iter().map(|c| c.into_owned()).collect()
}

/// Constant Hessian of a quadratic energy, verified along the given states.
fn linear_gradient_map(ham: &dyn Hamiltonian, states: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let n = ham.dim();
    let h0 = hessian_or_fd(ham, &DVector::zeros(n));
    let g0 = ham.gradient(&DVector::zeros(n));
    for x in states {
        let g = ham.gradient(x);
        let pred = &h0 * x + &g0;
        if (&g - &pred).norm() > 1e-8 * g.norm().max(1e-300) + 1e-12 {
            return Err(PhError::Estimation("exact-linear method needs an affine gradient".into()));
        }
    }
    Ok(h0)
}

/// State/output bounds for the reduced model simulated with `basis`.
///
/// `red` holds reduced states in the coordinates of `basis`; constants are
/// computed after rescaling to `VᵀQV = I`, which leaves `VWᵀ` unchanged.
pub fn projection_bound_report(
    sys: &NlphSystem,
    basis: &ReductionBasis,
    metric: &WeightedMetric,
    full: &Trajectory,
    red: &Trajectory,
    opts: &BoundOptions,
) -> Result<BoundReport> {
    if !same_grid(&full.times, &red.times) {
        return Err(PhError::GridMismatch("full and reduced trajectories use different grids".into()));
    }
    if full.is_empty() {
        return Err(PhError::Estimation("empty trajectory".into()));
    }
    let horizon = full.times[full.len() - 1] - full.times[0];
    let nb = basis.q_normalized(metric)?;
    let v = &nb.v;
    let w = &nb.w;
    let w_tilde = q_orthonormalize(w, metric)?;
    let ham = sys.hamiltonian_model().as_ref();

    let states = columns(&full.states);
    let grads: Vec<DVector<f64>> = states.iter().map(|x| ham.gradient(x)).collect();
    let q_residual = |basis: &DMatrix<f64>, z: &DVector<f64>| {
        let qz = metric.apply_vec(z);
        let e = z - basis * basis.tr_mul(&qz);
        metric.inner(&e, &e)
    };
    let eps_x: Vec<f64> = states.iter().map(|x| q_residual(v, x)).collect();
    let eps_f: Vec<f64> = grads.iter().map(|g| q_residual(&w_tilde, g)).collect();
    let eps_x_sq = trapezoid(&full.times, &eps_x);
    let eps_f_sq = trapezoid(&full.times, &eps_f);

    let lifted: Vec<DVector<f64>> = red.states.column_iter().map(|c| &basis.v * c).collect();
    let initial_defect_sq = w.tr_mul(&(&states[0] - &lifted[0])).norm_squared();
    let measured_state = trapezoid(
        &full.times,
        &states
            .iter()
            .zip(&lifted)
            .map(|(x, xl)| {
                let e = x - xl;
                metric.inner(&e, &e)
            })
            .collect::<Vec<_>>(),
    );
    let measured_output = trapezoid(
        &full.times,
        &(0..full.len())
            .map(|k| (full.outputs.column(k) - red.outputs.column(k)).norm_squared())
            .collect::<Vec<_>>(),
    );

    let p = v * w.transpose();
    let a = sys.j() - sys.r();
    let pa = &p * &a;
    let papt = &pa * p.transpose();
    let p_norm = metric.op_norm(&p);
    let pt_norm = metric.op_norm(&p.transpose());
    let beta = metric.op_norm(&pa) * pt_norm;
    let btqb = sys.b().tr_mul(&metric.solve(sys.b()));
    let delta = 2.0 * spectral_norm(&btqb) * pt_norm * pt_norm;

    let (lip_f, alpha_est) = match opts.method {
        LipschitzMethod::ExactLinear => {
            let h = linear_gradient_map(ham, &states)?;
            let lf = lipschitz(&MapSamples::Linear(&h), metric)?;
            let g = &papt * &h;
            (lf, log_lipschitz(&MapSamples::Linear(&g), metric)?)
        }
        LipschitzMethod::HessianSup => {
            let pop = sampling_population(&states, opts.jitter_copies, opts.jitter_rel, opts.seed);
            let mut acc_f = QuotientMax::new();
            let mut acc_g = QuotientMax::new();
            for x in &pop {
                let h = hessian_or_fd(ham, x);
                acc_f.push_jacobian(metric, &h);
                acc_g.push_jacobian(metric, &(&papt * &h));
            }
            (
                acc_f.finish(LipschitzMethod::HessianSup)?.0,
                acc_g.finish(LipschitzMethod::HessianSup)?.1,
            )
        }
        LipschitzMethod::SampledPairs => {
            let pop = sampling_population(&states, opts.jitter_copies, opts.jitter_rel, opts.seed);
            let f_vals: Vec<DVector<f64>> = pop.iter().map(|x| ham.gradient(x)).collect();
            let g_vals: Vec<DVector<f64>> = f_vals.iter().map(|f| &papt * f).collect();
            let mut acc_f = QuotientMax::new();
            let mut acc_g = QuotientMax::new();
            for (i, j) in population_pairs(states.len(), opts.jitter_copies, opts.extra_pairs, opts.seed) {
                let dx = &pop[i] - &pop[j];
                acc_f.push(metric, &dx, &(&f_vals[i] - &f_vals[j]));
                acc_g.push(metric, &dx, &(&g_vals[i] - &g_vals[j]));
            }
            (
                acc_f.finish(LipschitzMethod::SampledPairs)?.0,
                acc_g.finish(LipschitzMethod::SampledPairs)?.1,
            )
        }
    };
    let alpha = alpha_est.value;
    let l = lip_f.value;
    let gamma = l * p_norm;
    let ca = c_alpha(alpha, horizon);
    let cca = big_c_alpha(alpha, horizon);
    let c_x = (2.0 * beta * gamma).powi(2) * cca + 2.0 * p_norm * p_norm;
    let c_f = (2.0 * beta).powi(2) * cca;
    let c_0 = 2.0 * ca;
    let hat_c_x = delta * l * l * c_x;
    let hat_c_f = delta * (1.0 + l * l * c_f);
    let hat_c_0 = delta * l * l * c_0;
    let state_bound = term(c_x, eps_x_sq) + term(c_f, eps_f_sq) + term(c_0, initial_defect_sq);
    let output_bound = term(hat_c_x, eps_x_sq) + term(hat_c_f, eps_f_sq) + term(hat_c_0, initial_defect_sq);
    let sanitize = |b: f64| if b.is_nan() { f64::INFINITY } else { b };

    Ok(BoundReport {
        horizon,
        eps_x_sq,
        eps_f_sq,
        initial_defect_sq,
        alpha,
        beta,
        gamma,
        delta,
        lipschitz_f: l,
        alpha_estimate: alpha_est,
        lipschitz_f_estimate: lip_f,
        c_alpha: ca,
        big_c_alpha: cca,
        c_x,
        c_f,
        c_0,
        hat_c_x,
        hat_c_f,
        hat_c_0,
        state_bound: sanitize(state_bound),
        output_bound: sanitize(output_bound),
        measured_state,
        measured_output,
    })
}

/// Per-sample interpolation error against `‖ℙ‖_Q` times the best Q-error.
#[derive(Debug, Clone, Serialize)]
pub struct LemmaBoundSeries {
    pub projector_norm: f64,
    pub bound: Vec<f64>,
    pub measured: Vec<f64>,
}

impl LemmaBoundSeries {
    /// Indices where `measured > bound` beyond rounding.
    pub fn violations(&self) -> Vec<usize> {
        self.measured
            .iter()
            .zip(&self.bound)
            .enumerate()
            .filter(|(_, (m, b))| **m > **b * (1.0 + 1e-10) + 1e-14)
            .map(|(k, _)| k)
            .collect()
    }
}

/// `‖f − ℙf‖_Q` against `‖ℙ‖_Q‖(I − UUᵀQ)f‖_Q` for each column of `f_samples`.
pub fn deim_lemma_bound(model: &DeimModel, metric: &WeightedMetric, f_samples: &DMatrix<f64>) -> Result<LemmaBoundSeries> {
    let u = &model.u;
    let gram = u.tr_mul(&metric.apply(u));
    if (&gram - DMatrix::identity(u.ncols(), u.ncols())).amax() > 1e-8 {
        return Err(PhError::InvalidArgument("DEIM basis must satisfy UᵀQU = I".into()));
    }
    let projector_norm = model.projector_q_norm(metric);
    let mut bound = Vec::with_capacity(f_samples.ncols());
    let mut measured = Vec::with_capacity(f_samples.ncols());
    for col in f_samples.column_iter() {
        let f = col.into_owned();
        let best = &f - u * u.tr_mul(&metric.apply_vec(&f));
        bound.push(projector_norm * metric.norm(&best));
        measured.push(metric.norm(&(&f - model.project(&f))));
    }
    Ok(LemmaBoundSeries {
        projector_norm,
        bound,
        measured,
    })
}

/// Pointwise gap between the exact-gradient and DEIM reduced models.
#[derive(Debug, Clone, Serialize)]
pub struct DeimBoundReport {
    pub eps_h: f64,
    pub rho_min: f64,
    pub log_lipschitz_g: LipschitzEstimate,
    pub lipschitz_interp: LipschitzEstimate,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub times: Vec<f64>,
    pub state_bound: Vec<f64>,
    pub output_bound: Vec<f64>,
    pub measured_state: Vec<f64>,
    pub measured_output: Vec<f64>,
}

impl DeimBoundReport {
    /// Grid indices where the measured state gap exceeds its bound.
    pub fn state_violations(&self, rel_slack: f64) -> Vec<usize> {
        violations(&self.measured_state, &self.state_bound, rel_slack)
    }
    pub fn output_violations(&self, rel_slack: f64) -> Vec<usize> {
        violations(&self.measured_output, &self.output_bound, rel_slack)
    }
}

fn violations(measured: &[f64], bound: &[f64], rel_slack: f64) -> Vec<usize> {
    measured
        .iter()
        .zip(bound)
        .enumerate()
        .filter(|(_, (m, b))| **m > **b * (1.0 + rel_slack) + 1e-14)
        .map(|(k, _)| k)
        .collect()
}

/// Bound on `‖x_r − x̂_r‖` and `‖y_r − ŷ_r‖` over the grid.
///
/// Both trajectories must use the coordinates of `basis.q_normalized(metric)`,
/// which is what [`crate::deim::deim_reduce`] simulates in.
pub fn deim_reduction_bound(
    sys: &NlphSystem,
    basis: &ReductionBasis,
    split: &HamiltonianSplit,
    model: &DeimModel,
    exact: &Trajectory,
    deim: &Trajectory,
    opts: &BoundOptions,
) -> Result<DeimBoundReport> {
    if !same_grid(&exact.times, &deim.times) {
        return Err(PhError::GridMismatch("exact and DEIM reduced trajectories use different grids".into()));
    }
    if exact.is_empty() {
        return Err(PhError::Estimation("empty trajectory".into()));
    }
    let metric = &split.metric;
    let nb = basis.q_normalized(metric)?;
    let (v, w) = (&nb.v, &nb.w);
    if exact.states.nrows() != v.ncols() || deim.states.nrows() != v.ncols() {
        return Err(PhError::InvalidArgument("trajectory dimension differs from basis order".into()));
    }

    let interp = |xi: &DVector<f64>| model.project(&split.grad_h_full(&model.project_transpose(xi)));
    let lifted: Vec<DVector<f64>> = exact.states.column_iter().map(|c| v * c).collect();
    let mut eps_h: f64 = 0.0;
    for xi in &lifted {
        let e = split.grad_h_full(xi) - interp(xi);
        eps_h = eps_h.max(metric.norm(&e));
    }

    let r_r = sym_part(&w.tr_mul(&(sys.r() * w)));
    let rho_min = sym_eig_range(&r_r).0;
    let p = v * w.transpose();
    let papt = &p * (sys.j() - sys.r()) * p.transpose();
    let beta = metric.op_norm(&papt);
    let delta = spectral_norm(sys.b()) * spectral_norm(&p);

    // Ω lies in span(V): perturb in reduced coordinates, then lift.
    let base_r = columns(&exact.states);
    let pop_r = sampling_population(&base_r, opts.jitter_copies, opts.jitter_rel, opts.seed);
    let pop: Vec<DVector<f64>> = pop_r.iter().map(|x| v * x).collect();
    let (lip_interp, log_g) = match opts.method {
        LipschitzMethod::ExactLinear => {
            return Err(PhError::Estimation("exact-linear method does not apply to the DEIM remainder".into()))
        }
        LipschitzMethod::HessianSup => {
            // Directional derivatives along span(V) = span of Q-orthonormal V.
            let pt_v = DMatrix::from_columns(
                &v.column_iter().map(|c| model.project_transpose(&c.into_owned())).collect::<Vec<_>>(),
            );
            let q = metric.matrix();
            let ham = split.hamiltonian_model().as_ref();
            let mut lip: f64 = f64::NEG_INFINITY;
            let mut log: f64 = f64::NEG_INFINITY;
            for xi in &pop {
                let hh = hessian_or_fd(ham, &model.project_transpose(xi)) - &q;
                let hk = &hh * &pt_v;
                let dj = DMatrix::from_columns(
                    &hk.column_iter().map(|c| model.project(&c.into_owned())).collect::<Vec<_>>(),
                );
                // ‖D w‖_Q for ‖Vw‖_Q = ‖w‖.
                lip = lip.max(spectral_norm(&metric.factor_tr_mul(&dj)));
                let gj = &papt * &dj;
                let restricted = v.tr_mul(&metric.apply(&gj));
                log = log.max(sym_eig_range(&sym_part(&restricted)).1);
            }
            (
                LipschitzEstimate::new(lip, LipschitzMethod::HessianSup, pop.len())?,
                LipschitzEstimate::new(log, LipschitzMethod::HessianSup, pop.len())?,
            )
        }
        LipschitzMethod::SampledPairs => {
            let f_vals: Vec<DVector<f64>> = pop.iter().map(&interp).collect();
            let g_vals: Vec<DVector<f64>> = f_vals.iter().map(|f| &papt * f).collect();
            let mut acc_f = QuotientMax::new();
            let mut acc_g = QuotientMax::new();
            for (i, j) in population_pairs(base_r.len(), opts.jitter_copies, opts.extra_pairs, opts.seed) {
                let dx = &pop[i] - &pop[j];
                acc_f.push(metric, &dx, &(&f_vals[i] - &f_vals[j]));
                acc_g.push(metric, &dx, &(&g_vals[i] - &g_vals[j]));
            }
            (
                acc_f.finish(LipschitzMethod::SampledPairs)?.0,
                acc_g.finish(LipschitzMethod::SampledPairs)?.1,
            )
        }
    };
    let alpha = log_g.value - rho_min;
    let gamma = 1.0 + lip_interp.value;
    let t0 = exact.times[0];
    let mut state_bound = Vec::with_capacity(exact.len());
    let mut output_bound = Vec::with_capacity(exact.len());
    for &t in &exact.times {
        let g = growth_integral(alpha, t - t0);
        let sb = term(beta * g, eps_h);
        let ob = term(delta * (1.0 + beta * gamma * g), eps_h);
        state_bound.push(if sb.is_nan() { f64::INFINITY } else { sb });
        output_bound.push(if ob.is_nan() { f64::INFINITY } else { ob });
    }
    let measured_state = (0..exact.len())
        .map(|k| (exact.states.column(k) - deim.states.column(k)).norm())
        .collect();
    let measured_output = (0..exact.len())
        .map(|k| (exact.outputs.column(k) - deim.outputs.column(k)).norm())
        .collect();

    Ok(DeimBoundReport {
        eps_h,
        rho_min,
        log_lipschitz_g: log_g,
        lipschitz_interp: lip_interp,
        alpha,
        beta,
        gamma,
        delta,
        times: exact.times.clone(),
        state_bound,
        output_bound,
        measured_state,
        measured_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{biorthonormalize, Provenance};
    use crate::deim::{build_split, deim_reduce};
    use crate::integrate::{simulate, IntegratorConfig};
    use crate::models::{toda_lattice, TodaParams};
    use crate::phcore::{InputSignal, QuadraticHamiltonian};
    use crate::reduce::{project_ph, simulate_reduced};
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};
    use std::sync::Arc;

    fn random(n: usize, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    fn random_pairs(n: usize, count: usize, seed: u64) -> Vec<(DVector<f64>, DVector<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| (random(n, 1, &mut rng).column(0).into_owned(), random(n, 1, &mut rng).column(0).into_owned()))
            .collect()
    }

    fn linear_ph(n: usize, seed: u64) -> (NlphSystem, DMatrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(n, n, &mut rng);
        let c = random(n, n, &mut rng);
        let d = random(n, n, &mut rng);
        let q = &d * d.transpose() * 0.5 + DMatrix::identity(n, n);
        let sys = NlphSystem::new(
            &a - a.transpose(),
            &c * c.transpose() * 0.1 + DMatrix::identity(n, n) * 0.05,
            random(n, 1, &mut rng),
            Arc::new(QuadraticHamiltonian::new(q.clone())),
        )
        .unwrap();
        (sys, q)
    }

    #[test]
    fn alpha_integrals_are_continuous_at_zero() {
        for t in [0.5, 5.0, 30.0] {
            assert_eq!(c_alpha(0.0, t), t);
            assert_eq!(big_c_alpha(0.0, t), 0.5 * t * t);
            for a in [1e-10, -1e-10] {
                assert!((c_alpha(a, t) - t).abs() <= 1e-8 * t);
                assert!((big_c_alpha(a, t) - 0.5 * t * t).abs() <= 1e-8 * 0.5 * t * t);
            }
        }
    }

    #[test]
    fn alpha_integrals_match_closed_forms() {
        for (a, t) in [(0.3f64, 2.0f64), (-0.7, 5.0), (0.01, 3.0), (-0.02, 1.0)] {
            let c = ((2.0 * a * t).exp() - 1.0) / (2.0 * a);
            let cc = (c - t) / (2.0 * a);
            assert!((c_alpha(a, t) - c).abs() <= 1e-10 * c.abs());
            assert!((big_c_alpha(a, t) - cc).abs() <= 1e-7 * cc.abs());
        }
    }

    #[test]
    fn identity_map_has_unit_constants() {
        let id = DMatrix::<f64>::identity(3, 3);
        let metric = WeightedMetric::identity(3);
        let f = |x: &DVector<f64>| Ok(x.clone());
        let jac = |_: &DVector<f64>| Ok(DMatrix::identity(3, 3));
        let pairs = random_pairs(3, 10, 1);
        let points: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
        for map in [
            MapSamples::Pairs { f: &f, pairs: &pairs },
            MapSamples::Jacobians { jac: &jac, points: &points },
            MapSamples::Linear(&id),
        ] {
            assert!((lipschitz(&map, &metric).unwrap().value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn negative_identity_has_negative_log_constant() {
        let a = -DMatrix::<f64>::identity(4, 4);
        let est = log_lipschitz(&MapSamples::Linear(&a), &WeightedMetric::identity(4)).unwrap();
        assert!((est.value + 1.0).abs() < 1e-12);
        assert_eq!(est.method, LipschitzMethod::ExactLinear);
    }

    #[test]
    fn q_skew_map_has_zero_log_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random(5, 5, &mut rng);
        let q = &d * d.transpose() + DMatrix::identity(5, 5);
        let s = random(5, 5, &mut rng);
        let s = &s - s.transpose();
        let metric = WeightedMetric::new(q.clone()).unwrap();
        let a = q.clone().lu().solve(&s).unwrap();
        let est = log_lipschitz(&MapSamples::Linear(&a), &metric).unwrap();
        assert!(est.value.abs() < 1e-10);
    }

    #[test]
    fn quadratic_gradient_constant_is_weighted_norm_of_q() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random(4, 4, &mut rng);
        let q = &d * d.transpose() + DMatrix::identity(4, 4);
        let metric = WeightedMetric::new(q.clone()).unwrap();
        let est = lipschitz(&MapSamples::Linear(&q), &metric).unwrap();
        assert!((est.value - metric.op_norm(&q)).abs() < 1e-12 * est.value);
    }

    #[test]
    fn sampled_estimates_approach_exact_from_below() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(3, 3, &mut rng);
        let metric = WeightedMetric::identity(3);
        let f = |x: &DVector<f64>| Ok(&a * x);
        let pairs = random_pairs(3, 1000, 5);
        let map = MapSamples::Pairs { f: &f, pairs: &pairs };
        let exact_l = lipschitz(&MapSamples::Linear(&a), &metric).unwrap().value;
        let exact_g = log_lipschitz(&MapSamples::Linear(&a), &metric).unwrap().value;
        assert!((exact_l - crate::linalg::spectral_norm(&a)).abs() < 1e-12);
        let l = lipschitz(&map, &metric).unwrap();
        let g = log_lipschitz(&map, &metric).unwrap();
        assert!(l.lower_bound_only && l.samples == 1000);
        assert!(l.value <= exact_l * (1.0 + 1e-12) && l.value >= 0.95 * exact_l);
        assert!(g.value <= exact_g + 1e-12 && g.value >= exact_g - 0.05 * exact_g.abs());
    }

    #[test]
    fn empty_samples_are_rejected() {
        let f = |x: &DVector<f64>| Ok(x.clone());
        let map = MapSamples::Pairs { f: &f, pairs: &[] };
        assert!(matches!(lipschitz(&map, &WeightedMetric::identity(2)), Err(PhError::Estimation(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn log_constant_is_between_minus_and_plus_lipschitz(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(4, 4, &mut rng);
            let d = random(4, 4, &mut rng);
            let metric = WeightedMetric::new(&d * d.transpose() + DMatrix::identity(4, 4)).unwrap();
            let f = |x: &DVector<f64>| Ok(&a * x + x.map(f64::sin));
            let pairs = random_pairs(4, 20, seed + 1);
            let map = MapSamples::Pairs { f: &f, pairs: &pairs };
            let l = lipschitz(&map, &metric).unwrap().value;
            let g = log_lipschitz(&map, &metric).unwrap().value;
            prop_assert!(-l <= g + 1e-12 && g <= l + 1e-12);
            let exact = lipschitz(&MapSamples::Linear(&a), &metric).unwrap().value;
            let f_lin = |x: &DVector<f64>| Ok(&a * x);
            let lin = lipschitz(&MapSamples::Pairs { f: &f_lin, pairs: &pairs }, &metric).unwrap().value;
            prop_assert!(lin <= exact * (1.0 + 1e-12));
        }
    }

    #[test]
    fn population_has_jittered_copies() {
        let base = vec![DVector::from_vec(vec![1.0, -2.0]), DVector::from_vec(vec![0.5, 0.0])];
        let pop = sampling_population(&base, 10, 0.01, 7);
        assert_eq!(pop.len(), 22);
        assert_eq!(pop[..2], base[..]);
        for k in 0..2 {
            for c in 0..10 {
                let d = (&pop[2 + k * 10 + c] - &base[k]).amax();
                assert!(d > 0.0 && d < 0.2);
            }
        }
        assert_eq!(pop, sampling_population(&base, 10, 0.01, 7));
        let pairs = population_pairs(2, 10, 5, 7);
        assert_eq!(pairs.len(), 25);
        assert!(pairs.iter().all(|&(a, b)| a != b && a < 22 && b < 22));
    }

    fn sin_input() -> InputSignal {
        InputSignal::new("sin", 1, |t| DVector::from_element(1, t.sin()))
    }

    #[test]
    fn full_order_reduction_has_zero_bound() {
        let (sys, q) = linear_ph(6, 11);
        let metric = WeightedMetric::new(q).unwrap();
        let cfg = IntegratorConfig::midpoint(0.01);
        let full = simulate(&sys, &sin_input(), (0.0, 2.0), &cfg).unwrap();
        let basis = ReductionBasis::identity(6);
        let red_sys = project_ph(&sys, &basis).unwrap();
        let red = simulate_reduced(&red_sys, &sin_input(), (0.0, 2.0), &cfg, &DVector::zeros(6)).unwrap();
        let opts = BoundOptions {
            method: LipschitzMethod::ExactLinear,
            ..Default::default()
        };
        let rep = projection_bound_report(&sys, &basis, &metric, &full, &red, &opts).unwrap();
        assert!(rep.eps_x_sq < 1e-24 && rep.eps_f_sq < 1e-20);
        assert_eq!(rep.initial_defect_sq, 0.0);
        assert!(rep.measured_state < 1e-20);
        assert!(rep.state_bound < 1e-18 && rep.output_bound < 1e-16);
    }

    #[test]
    fn linear_instance_bounds_dominate_measured_errors() {
        let (sys, q) = linear_ph(8, 12);
        let metric = WeightedMetric::new(q).unwrap();
        let cfg = IntegratorConfig::midpoint(0.005);
        let full = simulate(&sys, &sin_input(), (0.0, 5.0), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let basis = biorthonormalize(random(8, 3, &mut rng), random(8, 3, &mut rng), Provenance::Custom).unwrap();
        let red_sys = project_ph(&sys, &basis).unwrap();
        let red = simulate_reduced(&red_sys, &sin_input(), (0.0, 5.0), &cfg, &DVector::zeros(3)).unwrap();
        let opts = BoundOptions {
            method: LipschitzMethod::ExactLinear,
            ..Default::default()
        };
        let rep = projection_bound_report(&sys, &basis, &metric, &full, &red, &opts).unwrap();
        assert!(rep.measured_state > 0.0);
        assert!(rep.state_holds(0.01), "{rep:?}");
        assert!(rep.output_holds(0.01), "{rep:?}");
        // Rescaling the basis leaves the bound unchanged.
        let scaled = ReductionBasis::from_pair(&basis.v * 3.0, &basis.w / 3.0, Provenance::Custom).unwrap();
        let red_sys2 = project_ph(&sys, &scaled).unwrap();
        let red2 = simulate_reduced(&red_sys2, &sin_input(), (0.0, 5.0), &cfg, &DVector::zeros(3)).unwrap();
        let rep2 = projection_bound_report(&sys, &scaled, &metric, &full, &red2, &opts).unwrap();
        assert!((rep2.state_bound - rep.state_bound).abs() < 1e-8 * rep.state_bound);
    }

    #[test]
    fn sampled_methods_run_on_linear_instance() {
        let (sys, q) = linear_ph(5, 14);
        let metric = WeightedMetric::new(q).unwrap();
        let cfg = IntegratorConfig::midpoint(0.01);
        let full = simulate(&sys, &sin_input(), (0.0, 1.0), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let basis = biorthonormalize(random(5, 2, &mut rng), random(5, 2, &mut rng), Provenance::Custom).unwrap();
        let red_sys = project_ph(&sys, &basis).unwrap();
        let red = simulate_reduced(&red_sys, &sin_input(), (0.0, 1.0), &cfg, &DVector::zeros(2)).unwrap();
        let exact = projection_bound_report(
            &sys,
            &basis,
            &metric,
            &full,
            &red,
            &BoundOptions {
                method: LipschitzMethod::ExactLinear,
                ..Default::default()
            },
        )
        .unwrap();
        for method in [LipschitzMethod::HessianSup, LipschitzMethod::SampledPairs] {
            let opts = BoundOptions {
                method,
                ..Default::default()
            };
            let rep = projection_bound_report(&sys, &basis, &metric, &full, &red, &opts).unwrap();
            assert_eq!(rep.alpha_estimate.method, method);
            assert!(rep.lipschitz_f <= exact.lipschitz_f * (1.0 + 1e-9));
            assert!(rep.alpha <= exact.alpha + 1e-9);
        }
    }

    #[test]
    fn lemma_bound_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let d = random(6, 6, &mut rng);
        let metric = WeightedMetric::new(&d * d.transpose() + DMatrix::identity(6, 6)).unwrap();
        let u = q_orthonormalize(&random(6, 2, &mut rng), &metric).unwrap();
        let model = DeimModel::new(u.clone()).unwrap();
        let in_span = &u * random(2, 3, &mut rng);
        let s = deim_lemma_bound(&model, &metric, &in_span).unwrap();
        assert!(s.measured.iter().all(|&m| m < 1e-12));
        assert!(s.bound.iter().all(|&b| b >= 0.0));
        let s = deim_lemma_bound(&model, &metric, &random(6, 50, &mut rng)).unwrap();
        assert!(s.violations().is_empty());
        let full = DeimModel::new(q_orthonormalize(&DMatrix::identity(6, 6), &metric).unwrap()).unwrap();
        let s = deim_lemma_bound(&full, &metric, &random(6, 5, &mut rng)).unwrap();
        assert!(s.measured.iter().chain(&s.bound).all(|&v| v < 1e-10));
        let not_q_orthonormal = DeimModel::new(random(6, 2, &mut rng)).unwrap();
        assert!(deim_lemma_bound(&not_q_orthonormal, &metric, &random(6, 1, &mut rng)).is_err());
    }

    #[test]
    fn deim_bound_vanishes_for_full_interpolation() {
        let sys = toda_lattice(&TodaParams::with_particles(4)).unwrap();
        let q = sys.hamiltonian_model().native_split().unwrap().quadratic();
        let metric = WeightedMetric::new(q).unwrap();
        let split = build_split(&sys, metric.clone()).unwrap();
        let model = DeimModel::new(q_orthonormalize(&DMatrix::identity(8, 8), &metric).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let basis = biorthonormalize(random(8, 3, &mut rng), random(8, 3, &mut rng), Provenance::Custom)
            .unwrap()
            .q_normalized(&metric)
            .unwrap();
        let (deim_sys, _) = deim_reduce(&sys, &basis, &split, model.clone()).unwrap();
        let exact_sys = project_ph(&sys, &basis).unwrap();
        let cfg = IntegratorConfig::midpoint(0.01);
        let u = crate::models::sin_0p1();
        let ex = simulate_reduced(&exact_sys, &u, (0.0, 2.0), &cfg, &DVector::zeros(3)).unwrap();
        let de = simulate_reduced(&deim_sys, &u, (0.0, 2.0), &cfg, &DVector::zeros(3)).unwrap();
        let opts = BoundOptions::default();
        let rep = deim_reduction_bound(&sys, &basis, &split, &model, &ex, &de, &opts).unwrap();
        assert!(rep.eps_h < 1e-12, "{}", rep.eps_h);
        assert!(rep.state_bound.iter().all(|&b| b < 1e-10));
        assert!(rep.measured_state.iter().all(|&m| m < 1e-10));
    }

    #[test]
    fn zero_alpha_growth_is_linear() {
        for t in [0.0, 1.0, 2.5] {
            assert_eq!(growth_integral(0.0, t), t);
            assert!((growth_integral(1e-13, t) - t).abs() < 1e-12);
        }
    }
}
