use twolane::kernels::{
    observer_kernel_residual, solve_control_kernels, solve_observer_kernels, KernelSettings, TriMesh,
};
use twolane::model::{compute_steady_state, linearize, LinearCoeffs, ModelParams, PER_KM};

fn coeffs() -> LinearCoeffs {
    let p = ModelParams::table1();
    linearize(&p, &compute_steady_state(&p, 180.0 * PER_KM).unwrap()).unwrap()
}

#[test]
fn observer_residual_shrinks_under_refinement() {
    let lc = coeffs();
    let s = KernelSettings::default();
    let coarse = solve_observer_kernels(&lc, TriMesh::new(33, lc.length).unwrap(), &s).unwrap();
    let fine = solve_observer_kernels(&lc, TriMesh::new(65, lc.length).unwrap(), &s).unwrap();
    let (rc, rf) = (coarse.residual.unwrap(), fine.residual.clone().unwrap());
    assert!(rf.max < rc.max, "{} -> {}", rc.max, rf.max);
    assert!(rf.boundary_violation < 1e-12);
    // The stored report matches a fresh evaluation.
    assert_eq!(observer_kernel_residual(&fine, &lc), rf);
}

#[test]
fn control_residual_shrinks_under_refinement() {
    let lc = coeffs();
    let s = KernelSettings::default();
    let coarse = solve_control_kernels(&lc, TriMesh::new(33, lc.length).unwrap(), &s).unwrap();
    let fine = solve_control_kernels(&lc, TriMesh::new(65, lc.length).unwrap(), &s).unwrap();
    let ratio = coarse.residual.unwrap().max / fine.residual.as_ref().unwrap().max;
    assert!(ratio > 1.6, "ratio {ratio}");
    assert!(fine.residual.unwrap().boundary_violation < 1e-12);
}

#[test]
fn observer_gains_are_finite_and_nonzero() {
    let lc = coeffs();
    let oks = solve_observer_kernels(&lc, TriMesh::new(33, lc.length).unwrap(), &KernelSettings::default()).unwrap();
    assert_eq!(oks.p_gain.len(), 33);
    assert!(oks.p_gain.iter().chain(&oks.q_gain).flatten().flatten().all(|v| v.is_finite()));
    assert!(oks.p_gain.iter().flatten().flatten().any(|&v| v != 0.0));
}

#[test]
fn too_few_sweeps_is_reported() {
    let lc = coeffs();
    let s = KernelSettings {
        max_iter: 1,
        ..KernelSettings::default()
    };
    let err = solve_control_kernels(&lc, TriMesh::new(33, lc.length).unwrap(), &s).unwrap_err();
    assert_eq!(err.kind(), "no_convergence", "{err}");
}
