use mfhinf::brl::{brl_cdre_solve, hinf_norm, BrlOptions};
use mfhinf::closedloop::{synthesize, ClosedLoopOptions};
use mfhinf::mcsim::{completion_identity, simulate, Estimate, Policy};
use mfhinf::model::{fixtures, AffineFeedback};
use mfhinf::openloop::{openloop_solve, Certificate};
use mfhinf::oracle::discrete_dp_lq;
use mfhinf::{MatrixTrajectory, TimeGrid};

#[test]
fn worst_case_disturbance_is_worst() {
    let sys = fixtures::system("sysA", 1000);
    let law = fixtures::law("sysA");
    let sol = brl_cdre_solve(&sys, sys.gamma, &BrlOptions::default()).unwrap();
    let zero_u = Policy::zero(sys.n_u);
    let best = simulate(&sys, &zero_u, &Policy::feedback(sol.disturbance_law()), &law, 4000, 9).unwrap();
    let best = Estimate::from_samples(&best.j1);
    let v = sol.disturbance_law();
    let shifted = AffineFeedback::new(v.gain.clone(), v.gain_bar.clone(), v.offset.map(|_, o| o.add_scalar(0.3)).unwrap())
        .unwrap();
    let other = simulate(&sys, &zero_u, &Policy::feedback(shifted), &law, 4000, 9).unwrap();
    assert!(Estimate::from_samples(&other.j1).value > best.value);
}

#[test]
fn certificate_tracks_the_norm() {
    let sys = fixtures::system("sysA", 1000);
    let g = hinf_norm(&sys, 1e-3, &BrlOptions::default()).unwrap();
    let sol = openloop_solve(&sys, 2.0 * g).unwrap();
    assert_eq!(sol.certificate(&sys, 1e-3).unwrap(), Certificate::Strict);
}

#[test]
fn closed_loop_control_is_dp_optimal() {
    let sys = fixtures::system("sysB", 2000);
    let law = fixtures::law("sysB");
    let sol = synthesize(&sys, sys.gamma, &law, &ClosedLoopOptions::default()).unwrap();
    let dp = discrete_dp_lq(&sys, &sol.disturbance_law(), 4096).unwrap();
    assert!((dp.cost(&law) - sol.j2star).abs() <= 0.01 * sol.j2star.abs());
    // DP feedback at t0 against the synthesized gain
    let u0 = sol.riccati.u.initial();
    assert!((&dp.gain[0] - u0).amax() <= 1e-2 * u0.amax().max(1.0));
}

#[test]
fn completion_identity_for_other_disturbances() {
    let sys = fixtures::system("sysA", 500);
    let law = fixtures::law("sysA");
    let sol = synthesize(&sys, sys.gamma, &law, &ClosedLoopOptions::default()).unwrap();
    let grid: TimeGrid = sys.grid;
    let v = AffineFeedback::new(
        MatrixTrajectory::from_fn(grid, |_, s| mfhinf::Mat::from_element(1, 1, -0.2 * s)).unwrap(),
        MatrixTrajectory::zeros(grid, 1, 1),
        MatrixTrajectory::constant(grid, mfhinf::Mat::from_element(1, 1, 0.1)),
    )
    .unwrap();
    let id = completion_identity(&sys, &sol, &Policy::feedback(v), &law, 5000, 2).unwrap();
    assert!(id.passed(), "{:?} vs {}", id.lhs, id.constant);
}
