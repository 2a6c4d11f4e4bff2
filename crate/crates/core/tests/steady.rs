use macrohydro::steady::*;
use macrohydro::thermo::Domain;
use macrohydro::{Error, ThermoModel};
use nalgebra::{DMatrix, DVector};
use std::time::Instant;

fn quadratic_mobility() -> ThermoModel {
    // s = -q²/2, K̃ = 1 + q²; Kirchhoff potential q + q³/3 is linear in x
    ThermoModel::builder("quadratic-mobility", 1)
        .entropy(|q| -0.5 * q[0] * q[0])
        .entropy_grad(|q| DVector::from_element(1, -q[0]))
        .entropy_hess(|_| DMatrix::from_element(1, 1, -1.0))
        .mobility(|q| DMatrix::from_element(1, 1, 1.0 + q[0] * q[0]))
        .mobility_grad(|q| vec![DMatrix::from_element(1, 1, 2.0 * q[0])])
        .build()
        .unwrap()
}

fn kirchhoff_exact(x: f64, left: f64, right: f64) -> f64 {
    let phi = |q: f64| q + q * q * q / 3.0;
    let target = phi(left) + (phi(right) - phi(left)) * x;
    let mut q = left + (right - left) * x;
    for _ in 0..60 {
        q -= (phi(q) - target) / (1.0 + q * q);
    }
    q
}

#[test]
fn sep_profile_is_linear_to_round_off() {
    let start = Instant::now();
    let mesh = Mesh1D::new(128).unwrap();
    let p = solve_steady(&ThermoModel::sep(), &mesh, &BoundaryData::densities(vec![0.3], vec![0.7])).unwrap();
    let err = mesh
        .centers()
        .iter()
        .enumerate()
        .map(|(i, x)| (p.q[(i, 0)] - (0.3 + 0.4 * x)).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-10, "max error {err:e}");
    assert!(start.elapsed().as_secs_f64() < 1.0);
    assert!(!p.fallback_used);
}

#[test]
fn sep_theta_and_current() {
    let mesh = Mesh1D::new(64).unwrap();
    let p = solve_steady(&ThermoModel::sep(), &mesh, &BoundaryData::densities(vec![0.3], vec![0.7])).unwrap();
    for i in 0..64 {
        let q = p.q[(i, 0)];
        assert!((p.theta[(i, 0)] - ((1.0 - q) / q).ln()).abs() < 1e-13);
    }
    let j = p.currents_at_centers();
    assert!(j.iter().all(|v| (v + 0.4).abs() < 1e-10));
}

#[test]
fn second_order_grid_convergence() {
    let model = quadratic_mobility();
    let errs: Vec<f64> = [32, 64, 128]
        .iter()
        .map(|&n| {
            let mesh = Mesh1D::new(n).unwrap();
            let p = solve_steady(&model, &mesh, &BoundaryData::densities(vec![0.0], vec![2.0])).unwrap();
            mesh.centers()
                .iter()
                .enumerate()
                .map(|(i, x)| (p.q[(i, 0)] - kirchhoff_exact(*x, 0.0, 2.0)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!((order - 2.0).abs() < 0.2, "errors {errs:?}");
    }
}

#[test]
fn linear_mobility_is_exact_by_kirchhoff() {
    // K̃ = q: the arithmetic face mean makes the discrete flux exactly
    // the difference of q²/2, so the discrete profile samples sqrt(...)
    let mesh = Mesh1D::new(40).unwrap();
    let p = solve_steady(&ThermoModel::linear_mobility(), &mesh, &BoundaryData::densities(vec![1.0], vec![3.0])).unwrap();
    for (i, x) in mesh.centers().iter().enumerate() {
        let exact = (1.0 + 8.0 * x).sqrt();
        assert!((p.q[(i, 0)] - exact).abs() < 1e-12);
    }
}

#[test]
fn equilibrium_profiles_are_constant() {
    for model in [ThermoModel::sep(), ThermoModel::gaussian(), ThermoModel::twocomp()] {
        let q0 = model.reference_point();
        let mesh = Mesh1D::new(16).unwrap();
        let p = solve_steady(&model, &mesh, &BoundaryData::densities(q0.clone(), q0.clone())).unwrap();
        for i in 0..16 {
            for k in 0..model.m() {
                assert_eq!(p.q[(i, k)], q0[k]);
            }
        }
        assert_eq!(p.j_faces.amax(), 0.0);
    }
}

#[test]
fn twocomp_profile_is_linear() {
    let model = ThermoModel::twocomp();
    let mesh = Mesh1D::new(32).unwrap();
    let p = solve_steady(&model, &mesh, &BoundaryData::densities(vec![0.0, 0.0], vec![1.0, 0.5])).unwrap();
    for (i, x) in mesh.centers().iter().enumerate() {
        assert!((p.q[(i, 0)] - x).abs() < 1e-12);
        assert!((p.q[(i, 1)] - 0.5 * x).abs() < 1e-12);
    }
}

#[test]
fn theta_form_agrees_to_second_order() {
    let bc = BoundaryData::densities(vec![0.3], vec![0.7]);
    let model = ThermoModel::sep();
    let diffs: Vec<f64> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let mesh = Mesh1D::new(n).unwrap();
            let a = solve_steady(&model, &mesh, &bc).unwrap();
            let b = solve_steady_theta_form(&model, &mesh, &bc).unwrap();
            (&a.q - b).amax()
        })
        .collect();
    assert!(diffs[2] < 1e-4, "{diffs:?}");
    for w in diffs.windows(2) {
        assert!((w[0] / w[1]).log2() > 1.8, "{diffs:?}");
    }
    // linear theories: both forms coincide
    let mesh = Mesh1D::new(24).unwrap();
    let bc = BoundaryData::densities(vec![-1.0], vec![2.0]);
    let a = solve_steady(&ThermoModel::gaussian(), &mesh, &bc).unwrap();
    let b = solve_steady_theta_form(&ThermoModel::gaussian(), &mesh, &bc).unwrap();
    assert!((&a.q - b).amax() < 1e-9);
}

#[test]
fn conjugate_boundary_data() {
    let mesh = Mesh1D::new(32).unwrap();
    let theta = |q: f64| ((1.0 - q) / q).ln();
    let bc = BoundaryData::conjugates(vec![theta(0.2)], vec![theta(0.9)]);
    let p = solve_steady(&ThermoModel::sep(), &mesh, &bc).unwrap();
    assert!((p.q_left[0] - 0.2).abs() < 1e-12 && (p.q_right[0] - 0.9).abs() < 1e-12);
}

#[test]
fn invalid_boundary_data() {
    let mesh = Mesh1D::new(8).unwrap();
    let wrong_len = BoundaryData::densities(vec![0.1, 0.2], vec![0.3, 0.4]);
    assert!(matches!(solve_steady(&ThermoModel::sep(), &mesh, &wrong_len), Err(Error::InvalidInput(_))));
    let outside = BoundaryData::densities(vec![1.2], vec![0.4]);
    assert!(matches!(solve_steady(&ThermoModel::sep(), &mesh, &outside), Err(Error::Domain { .. })));
}

#[test]
fn relaxation_reaches_steady_state() {
    let model = quadratic_mobility();
    let mesh = Mesh1D::new(16).unwrap();
    let bc = BoundaryData::densities(vec![0.0], vec![1.0]);
    let target = solve_steady(&model, &mesh, &bc).unwrap();
    let q0 = DMatrix::from_element(16, 1, 0.5);
    let traj = evolve(&model, &mesh, &bc, &q0, 0.01, 400, TimeScheme::Implicit).unwrap();
    assert_eq!(traj.len(), 401);
    assert!((traj.last().unwrap() - &target.q).amax() < 1e-8);
}

#[test]
fn explicit_step_beyond_bound_is_rejected() {
    let model = ThermoModel::linear_mobility();
    assert!(matches!(model.domain(), Domain::OpenBox { .. }));
    let mesh = Mesh1D::new(8).unwrap();
    let bc = BoundaryData::densities(vec![1.0], vec![1.0]);
    let q0 = DMatrix::from_element(8, 1, 1.0);
    let err = evolve(&model, &mesh, &bc, &q0, 1.0, 1, TimeScheme::Explicit).unwrap_err();
    assert!(matches!(err, Error::StabilityViolation { .. }));
}
