use macrohydro::covariance::{lyapunov_solve, noise_covariance, NoiseCovariance};
use macrohydro::linop::{assemble, semigroup_apply, LinearizedSystem};
use macrohydro::par::{with_threads, Execution};
use macrohydro::spde::*;
use macrohydro::steady::*;
use macrohydro::{rng, Error, ThermoModel};
use nalgebra::{DMatrix, DVector};

struct Setup {
    model: ThermoModel,
    sys: LinearizedSystem,
    noise: NoiseCovariance,
}

fn sep(n: usize) -> Setup {
    let model = ThermoModel::sep();
    let mesh = Mesh1D::new(n).unwrap();
    let p = solve_steady(&model, &mesh, &BoundaryData::densities(vec![0.3], vec![0.7])).unwrap();
    let sys = assemble(&model, &p).unwrap();
    let noise = noise_covariance(&model, &p).unwrap();
    Setup { model, sys, noise }
}

#[test]
fn zero_noise_zero_state_stays_zero() {
    let s = sep(16);
    let quiet = NoiseCovariance::zero(&s.sys.profile.mesh, 1);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    for scheme in [Scheme::EulerMaruyama, Scheme::CrankNicolson] {
        let mut cfg = SimConfig::new(dt, 100, 0, 3, 1, 10);
        cfg.scheme = scheme;
        let ens = simulate(&s.sys, &quiet, &s.model, &cfg).unwrap();
        assert!(ens.states.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn deterministic_dynamics_match_power_and_semigroup() {
    let s = sep(32);
    let quiet = NoiseCovariance::zero(&s.sys.profile.mesh, 1);
    let v: Vec<f64> = (0..32).map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / 32.0).sin()).collect();
    let bound = stability_bound(&s.model, &s.sys).unwrap();
    let mut errors = Vec::new();
    for dt in [bound, bound / 2.0] {
        let k = (0.05 / dt).round() as usize;
        let dt = 0.05 / k as f64;
        let mut cfg = SimConfig::new(dt, k, 0, 1, 0, k);
        cfg.initial = Some(v.clone());
        let ens = simulate(&s.sys, &quiet, &s.model, &cfg).unwrap();
        let last = DVector::from_column_slice(ens.state(0, 1));
        let step = DMatrix::identity(32, 32) + &s.sys.l * dt;
        let mut power = DVector::from_column_slice(&v);
        for _ in 0..k {
            power = &step * power;
        }
        assert!((&last - power).amax() < 1e-12);
        let exact = semigroup_apply(&s.sys, 0.05, &DVector::from_column_slice(&v)).unwrap();
        errors.push((&last - exact).amax());
    }
    // first order in dt
    let ratio = errors[0] / errors[1];
    assert!((ratio - 2.0).abs() < 0.3, "{errors:?}");
}

#[test]
fn forcing_covariance_is_gamma() {
    let s = sep(16);
    let dt = 1e-4;
    let f = forcing_covariance(&s.noise, dt);
    assert!((f - &s.noise.gamma * dt).amax() < 1e-14 * s.noise.gamma.amax() * dt);
}

#[test]
fn weak_order_of_euler_maruyama() {
    let s = sep(32);
    let c = lyapunov_solve(&s.sys, &s.noise).unwrap();
    let bound = stability_bound(&s.model, &s.sys).unwrap();
    let err = |dt: f64, scheme| (scheme_covariance(&s.sys, &s.noise, dt, scheme).unwrap() - &c).norm() / c.norm();
    let e: Vec<f64> = (2..5).map(|k| err(bound / f64::powi(2.0, k), Scheme::EulerMaruyama)).collect();
    for w in e.windows(2) {
        assert!(((w[0] / w[1]).log2() - 1.0).abs() < 0.15, "{e:?}");
    }
    assert!(err(bound, Scheme::CrankNicolson) < 1e-12);
}

#[test]
fn closed_walls_conserve_total() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    for scheme in [Scheme::EulerMaruyama, Scheme::CrankNicolson] {
        let mut cfg = SimConfig::new(dt, 500, 0, 2, 9, 1);
        cfg.scheme = scheme;
        cfg.walls = Walls::Closed;
        cfg.initial = Some((0..16).map(|i| i as f64 * 0.1).collect());
        let ens = simulate(&s.sys, &s.noise, &s.model, &cfg).unwrap();
        for p in 0..2 {
            let totals: Vec<f64> = (0..ens.n_records).map(|r| ens.state(p, r).iter().sum()).collect();
            for w in totals.windows(2) {
                assert!((w[1] - w[0]).abs() < 1e-12, "{:?}", scheme);
            }
            assert!(ens.state(p, 10).iter().any(|v| *v != ens.state(0, 0)[0]));
        }
    }
}

#[test]
fn open_walls_exchange_with_reservoirs() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let cfg = SimConfig::new(dt, 200, 0, 1, 9, 1);
    let ens = simulate(&s.sys, &s.noise, &s.model, &cfg).unwrap();
    let totals: Vec<f64> = (0..ens.n_records).map(|r| ens.state(0, r).iter().sum()).collect();
    assert!(totals.windows(2).any(|w| (w[1] - w[0]).abs() > 1e-6));
}

fn small_config(dt: f64, paths: usize, execution: Execution) -> SimConfig {
    let mut cfg = SimConfig::new(dt, 400, 100, paths, 42, 20);
    cfg.scheme = Scheme::CrankNicolson;
    cfg.record_increments = true;
    cfg.execution = execution;
    cfg
}

#[test]
fn ensembles_are_reproducible_across_worker_counts() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let seq = simulate(&s.sys, &s.noise, &s.model, &small_config(dt, 24, Execution::Sequential)).unwrap();
    let par = with_threads(3, || simulate(&s.sys, &s.noise, &s.model, &small_config(dt, 24, Execution::Parallel)).unwrap());
    let again = with_threads(1, || simulate(&s.sys, &s.noise, &s.model, &small_config(dt, 24, Execution::Parallel)).unwrap());
    assert_eq!(seq.states, par.states);
    assert_eq!(seq.states, again.states);
    assert_eq!(seq.increments, par.increments);
    let a = stationary_covariance(&seq).unwrap();
    let b = stationary_covariance(&par).unwrap();
    assert_eq!(a.cov, b.cov);
    assert_eq!(seq.rng_trace[5], rng::path_key(42, 5));
}

#[test]
fn standard_errors_scale_with_paths() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let se = |paths| {
        let ens = simulate(&s.sys, &s.noise, &s.model, &small_config(dt, paths, Execution::Parallel)).unwrap();
        let est = stationary_covariance(&ens).unwrap();
        est.se.mean()
    };
    let ratio = se(200) / se(400);
    assert!((ratio - 2f64.sqrt()).abs() < 0.15, "ratio {ratio}");
}

#[test]
fn small_ensemble_reproduces_lyapunov_covariance() {
    let s = sep(16);
    let c = lyapunov_solve(&s.sys, &s.noise).unwrap();
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let relax = s.sys.relaxation_time();
    let stride = (relax / 10.0 / dt).round() as usize;
    let mut cfg = SimConfig::new(dt, 100 * stride, (5.0 * relax / dt) as usize, 300, 3, stride);
    cfg.scheme = Scheme::CrankNicolson;
    let ens = simulate(&s.sys, &s.noise, &s.model, &cfg).unwrap();
    let est = stationary_covariance(&ens).unwrap();
    let cmp = compare_covariance(&est, &c, 4.0);
    assert!(cmp.rel_frobenius < 0.1, "{cmp:?}");
    assert!(cmp.fraction_within > 0.97, "{cmp:?}");
}

#[test]
fn long_runs_stay_finite() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let cfg = SimConfig::new(dt, 1_000_000, 0, 1, 5, 100_000);
    let ens = simulate(&s.sys, &s.noise, &s.model, &cfg).unwrap();
    assert!(ens.states.iter().all(|v| v.is_finite()));
}

#[test]
fn step_above_bound_is_rejected() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let cfg = SimConfig::new(dt * 1.01, 10, 0, 1, 0, 1);
    assert!(matches!(simulate(&s.sys, &s.noise, &s.model, &cfg), Err(Error::StabilityViolation { .. })));
}

#[test]
fn misuse_is_reported() {
    let s = sep(16);
    let dt = stability_bound(&s.model, &s.sys).unwrap();
    let cfg = SimConfig::new(dt, 40, 0, 4, 0, 2);
    let ens = simulate(&s.sys, &s.noise, &s.model, &cfg).unwrap();
    let f = DVector::from_element(16, 1.0);
    assert!(increment_tests(&ens, &s.noise, &f, &f).is_err());
    let c = DMatrix::identity(16, 16);
    assert!(autocorrelation(&ens, &s.sys, &c, &[1.5 * ens.record_interval()]).is_err());
    assert!(matches!(lagged_covariance(&ens, 100), Err(Error::InsufficientSamples { .. })));
}
