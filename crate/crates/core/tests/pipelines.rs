//! End-to-end reduction pipelines on the bundled models.

use nalgebra::{DMatrix, DVector};
use phred::basis::{h2eps_ph_bases, hybrid_bases, linearize, pod_ph_bases, snapshots_from_trajectory, H2Options};
use phred::deim::{build_split, pod_deim_ph};
use phred::integrate::{simulate, IntegratorConfig};
use phred::models::{const_0p1, default_gaussian_pulse, ladder_network, sin_0p1, toda_lattice, LadderParams, TodaParams};
use phred::phcore::{dissipation_margin, NlphSystem, WeightedMetric};
use phred::reduce::{error_metrics, project_ph, simulate_reduced};
use proptest::prelude::*;

fn metric_at_origin(sys: &NlphSystem) -> WeightedMetric {
    WeightedMetric::new(linearize(sys).unwrap().q).unwrap()
}

#[test]
fn ladder_pod_error_shrinks_with_order() {
    let sys = ladder_network(&LadderParams::with_stages(20)).unwrap();
    let metric = metric_at_origin(&sys);
    let cfg = IntegratorConfig::midpoint(0.05);
    let u = default_gaussian_pulse();
    let full = simulate(&sys, &u, (0.0, 30.0), &cfg).unwrap();
    assert!(dissipation_margin(&full, &sys) > -1e-6 * full.states.amax());
    let snaps = snapshots_from_trajectory(&sys, &full, 2, Some(&metric)).unwrap();
    let errs: Vec<f64> = [2, 4, 8]
        .iter()
        .map(|&r| {
            let basis = pod_ph_bases(&snaps, r).unwrap();
            let red = project_ph(&sys, &basis).unwrap();
            let traj = simulate_reduced(&red, &u, (0.0, 30.0), &cfg, &DVector::zeros(r)).unwrap();
            assert!(red.dissipation_margin(&traj) > -1e-6);
            error_metrics(&full, &traj, &red.lift, &metric).unwrap().avg_rel_state_error
        })
        .collect();
    assert!(errs[1] < errs[0] && errs[2] < errs[1], "{errs:?}");
    assert!(errs[2] < 0.25 * errs[0], "{errs:?}");
}

#[test]
fn ladder_hybrid_contains_both_subspaces() {
    let sys = ladder_network(&LadderParams::with_stages(15)).unwrap();
    let cfg = IntegratorConfig::midpoint(0.05);
    let full = simulate(&sys, &default_gaussian_pulse(), (0.0, 20.0), &cfg).unwrap();
    let snaps = snapshots_from_trajectory(&sys, &full, 2, None).unwrap();
    let pod = pod_ph_bases(&snaps, 4).unwrap();
    let (h2, log) = h2eps_ph_bases(&linearize(&sys).unwrap(), 4, &H2Options::default()).unwrap();
    assert!(log.iterations >= 1);
    let hyb = hybrid_bases(&pod, &h2).unwrap();
    assert_eq!(hyb.r(), 8);
    assert!(hyb.biorthogonality_defect() < 1e-10);
    // Span(V_hybrid) contains both V_pod and V_h2.
    let (q, _) = hyb.v.clone().qr().unpack();
    for v in [&pod.v, &h2.v] {
        let resid = v - &q * q.tr_mul(v);
        assert!(resid.amax() < 1e-8 * v.amax(), "{}", resid.amax());
    }
}

#[test]
fn toda_pod_deim_converges_in_m_and_samples_m_components() {
    let sys = toda_lattice(&TodaParams::with_particles(100)).unwrap();
    let metric = metric_at_origin(&sys);
    let cfg = IntegratorConfig::midpoint(0.1);
    let span = (0.0, 50.0);
    let u = const_0p1();
    let full = simulate(&sys, &u, span, &cfg).unwrap();
    let snaps = snapshots_from_trajectory(&sys, &full, 1, Some(&metric)).unwrap();
    let split = build_split(&sys, metric.clone()).unwrap();
    assert!(split.is_native());

    let pod = project_ph(&sys, &pod_ph_bases(&snaps, 8).unwrap()).unwrap();
    let pod_traj = simulate_reduced(&pod, &u, span, &cfg, &DVector::zeros(8)).unwrap();
    let pod_err = error_metrics(&full, &pod_traj, &pod.lift, &metric).unwrap().avg_rel_state_error;

    // h is evaluated at ℙᵀx, so accuracy improves with m toward the exact-lifted model.
    let errs: Vec<f64> = [8, 16, 24, 32]
        .iter()
        .map(|&m| {
            let (deim, energy) = pod_deim_ph(&sys, &snaps, 8, m, &split).unwrap();
            let traj = simulate_reduced(&deim, &u, span, &cfg, &DVector::zeros(8)).unwrap();
            let evals = energy.evaluations();
            assert!(evals > 0 && evals % m == 0, "{evals} evaluations for m = {m}");
            error_metrics(&full, &traj, &deim.lift, &metric).unwrap().avg_rel_state_error
        })
        .collect();
    assert!(errs.windows(2).all(|w| w[1] < w[0]), "{errs:?}");
    assert!(errs[3] <= 3.0 * pod_err, "pod {pod_err}, deim {errs:?}");
    let (deim, _) = pod_deim_ph(&sys, &snaps, 8, 16, &split).unwrap();

    // Off-training input still runs and stays bounded.
    let test = simulate_reduced(&deim, &sin_0p1(), span, &cfg, &DVector::zeros(8)).unwrap();
    assert!(test.is_valid());
}

fn fd_gradient_error(sys: &NlphSystem, x: &DVector<f64>) -> f64 {
    let ham = sys.hamiltonian_model();
    let g = ham.gradient(x);
    let fd = DVector::from_fn(x.len(), |i, _| {
        let h = 1e-5 * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        (ham.value(&xp) - ham.value(&xm)) / (2.0 * h)
    });
    (fd - &g).norm() / g.norm().max(1e-300)
}

fn fd_hessian_error(sys: &NlphSystem, x: &DVector<f64>) -> f64 {
    let ham = sys.hamiltonian_model();
    let hess = ham.hessian(x).unwrap();
    let mut fd = DMatrix::zeros(x.len(), x.len());
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let (mut xp, mut xm) = (x.clone(), x.clone());
        xp[i] += h;
        xm[i] -= h;
        fd.set_column(i, &((ham.gradient(&xp) - ham.gradient(&xm)) / (2.0 * h)));
    }
    (fd - &hess).norm() / hess.norm()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn ladder_derivatives_match_differences(x in prop::collection::vec(-1.0f64..1.0, 16)) {
        let sys = ladder_network(&LadderParams::with_stages(8)).unwrap();
        let x = DVector::from_vec(x);
        prop_assert!(fd_gradient_error(&sys, &x) < 1e-5);
        prop_assert!(fd_hessian_error(&sys, &x) < 1e-5);
    }

    #[test]
    fn toda_derivatives_match_differences(x in prop::collection::vec(-0.5f64..0.5, 20)) {
        let sys = toda_lattice(&TodaParams::with_particles(10)).unwrap();
        let x = DVector::from_vec(x);
        prop_assert!(fd_gradient_error(&sys, &x) < 1e-5);
        prop_assert!(fd_hessian_error(&sys, &x) < 1e-5);
    }

    #[test]
    fn toda_split_recombines_to_hamiltonian(x in prop::collection::vec(-1.0f64..1.0, 24)) {
        let sys = toda_lattice(&TodaParams::with_particles(12)).unwrap();
        let split = build_split(&sys, metric_at_origin(&sys)).unwrap();
        let x = DVector::from_vec(x);
        let h = sys.hamiltonian(&x);
        prop_assert!((split.quadratic_energy(&x) + split.h(&x) - h).abs() <= 1e-10 * h.abs().max(1.0));
        let g = split.metric.apply_vec(&x) + split.grad_h_full(&x);
        prop_assert!((g - sys.gradient(&x).unwrap()).amax() <= 1e-10);
    }
}
