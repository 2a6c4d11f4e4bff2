//! The acceptance battery behind `macrohydro verify`.

use std::time::{Duration, Instant};

use macrohydro::covariance::{self, NoiseCovariance};
use macrohydro::linop::{self, LinearizedSystem};
use macrohydro::par::{self, Execution};
use macrohydro::spde::{self, Ensemble, NoiseColour, Scheme};
use macrohydro::steady::{self, BoundaryData, SteadyProfile};
use macrohydro::{Mesh1D, ThermoModel};
use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::CliError;
use crate::output::matrix_csv;
use crate::pipeline::{noise_for, McPlan, Mutation, Status, DEFAULT_RECORDS, KURTOSIS_FUNCTIONALS, MARKOV_LAG};

pub const SEED: u64 = 42;
/// Paths of the covariance, regression and Gaussian-Markov runs.
pub const NOMINAL_PATHS: usize = 2000;
/// Paths of the increment run.
pub const INCREMENT_PATHS: usize = 4000;
/// Records of the increment run.
pub const INCREMENT_RECORDS: usize = 61;
/// Paths of the non-Markov surrogate run.
pub const SURROGATE_PATHS: usize = 500;
/// Correlation time of the surrogate noise, in relaxation times.
pub const SURROGATE_CORRELATION: f64 = 0.2;
pub const MC_CELLS: usize = 32;
pub const FINE_CELLS: usize = 128;
pub const SEP_LEFT: f64 = 0.3;
pub const SEP_RIGHT: f64 = 0.7;

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub title: &'static str,
    pub status: Status,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{:>7}] criterion {:>2}: {} ({}; {:.1} s)",
            self.status.label(),
            self.id,
            self.title,
            self.detail,
            self.seconds
        )
    }
}

#[derive(Clone, Debug)]
pub struct BatteryOptions {
    /// Paths of the criterion-7 run; the other ensembles scale with it.
    pub paths: usize,
    pub mutation: Option<Mutation>,
    /// Criteria to run; all when absent.
    pub only: Option<Vec<u8>>,
}

impl Default for BatteryOptions {
    fn default() -> Self {
        BatteryOptions {
            paths: NOMINAL_PATHS,
            mutation: None,
            only: None,
        }
    }
}

pub const TITLES: [&str; 11] = [
    "SEP steady profile is linear",
    "SEP long-range covariance matches -b^2 x(1-y)",
    "long-range criterion",
    "fluctuation-dissipation consistency",
    "equilibrium exactness",
    "Onsager reciprocity",
    "Monte-Carlo covariance",
    "regression hypothesis",
    "Wiener structure of the increments",
    "Gaussian-Markov battery",
    "determinism across worker counts",
];

struct Scenario {
    model: ThermoModel,
    sys: LinearizedSystem,
    noise: NoiseCovariance,
}

fn scenario(model: ThermoModel, n: usize, left: Vec<f64>, right: Vec<f64>, mutation: Option<Mutation>) -> Result<Scenario, CliError> {
    let profile = solve(&model, n, left, right)?;
    let sys = linop::assemble(&model, &profile).map_err(CliError::numeric("linop"))?;
    let noise = noise_for(&model, &profile, mutation)?;
    Ok(Scenario { model, sys, noise })
}

fn solve(model: &ThermoModel, n: usize, left: Vec<f64>, right: Vec<f64>) -> Result<SteadyProfile, CliError> {
    let mesh = Mesh1D::new(n).map_err(CliError::numeric("steady"))?;
    steady::solve_steady(model, &mesh, &BoundaryData::densities(left, right)).map_err(CliError::numeric("steady"))
}

fn sep(n: usize, mutation: Option<Mutation>) -> Result<Scenario, CliError> {
    scenario(ThermoModel::sep(), n, vec![SEP_LEFT], vec![SEP_RIGHT], mutation)
}

fn within(limit: Duration, started: Instant) -> bool {
    started.elapsed() <= limit
}

type Outcome = Result<(Status, String), CliError>;

fn criterion1() -> Outcome {
    let started = Instant::now();
    let p = solve(&ThermoModel::sep(), FINE_CELLS, vec![SEP_LEFT], vec![SEP_RIGHT])?;
    let slope = SEP_RIGHT - SEP_LEFT;
    let err = p
        .mesh
        .centers()
        .iter()
        .enumerate()
        .map(|(i, x)| (p.q[(i, 0)] - SEP_LEFT - slope * x).abs())
        .fold(0.0, f64::max);
    let fast = within(Duration::from_secs(1), started);
    Ok((
        Status::exact(err < 1e-10 && fast),
        format!("n={FINE_CELLS}, max error {err:.2e} < 1e-10"),
    ))
}

/// `max|B - B_exact| / max|B_exact|` over cells at least `min_dist` from
/// the walls and the diagonal.
fn sep_zone_error(n: usize, min_dist: f64, mutation: Option<Mutation>) -> Result<(f64, f64), CliError> {
    let s = sep(n, mutation)?;
    let c = covariance::lyapunov_solve(&s.sys, &s.noise).map_err(CliError::numeric("covariance"))?;
    let (_, b) = covariance::split_local_longrange(&c, &s.model, &s.sys.profile).map_err(CliError::numeric("covariance"))?;
    let xs = s.sys.profile.mesh.centers();
    let slope = SEP_RIGHT - SEP_LEFT;
    let d = min_dist - 1e-12;
    let (mut err, mut scale) = (0.0_f64, 0.0_f64);
    for (i, &x) in xs.iter().enumerate() {
        for (j, &y) in xs.iter().enumerate() {
            if x.min(1.0 - x) < d || y.min(1.0 - y) < d || (x - y).abs() < d {
                continue;
            }
            let exact = covariance::sep_longrange_oracle(x, y, slope);
            err = err.max((b[(i, j)] - exact).abs());
            scale = scale.max(exact.abs());
        }
    }
    let mid = n / 2;
    let b_mid = 0.5 * (b[(mid - 1, mid)] + b[(mid, mid - 1)]);
    Ok((err / scale, b_mid))
}

fn criterion2(mutation: Option<Mutation>) -> Outcome {
    let started = Instant::now();
    let h = 1.0 / FINE_CELLS as f64;
    let (zone, b_mid) = sep_zone_error(FINE_CELLS, 4.0 * h, mutation)?;
    // the wall-corner layer does not shrink with h, so the order is
    // measured away from it
    let (coarse, _) = sep_zone_error(FINE_CELLS / 2, 0.125, mutation)?;
    let (fine, _) = sep_zone_error(FINE_CELLS, 0.125, mutation)?;
    let order = (coarse / fine).log2();
    let ok = zone < 0.02 && (order - 2.0).abs() <= 0.3 && within(Duration::from_secs(30), started);
    Ok((
        Status::exact(ok),
        format!("rel sup error {zone:.2e} < 2e-2, order {order:.2} on n={}/{FINE_CELLS}, B(1/2,1/2) = {b_mid:.4}", FINE_CELLS / 2),
    ))
}

fn criterion3(mutation: Option<Mutation>) -> Outcome {
    let started = Instant::now();
    let s = sep(FINE_CELLS, mutation)?;
    let crit = covariance::longrange_criterion(&s.model, &s.sys.profile).map_err(CliError::numeric("covariance"))?;
    let h = s.sys.profile.mesh.h();
    let slope = SEP_RIGHT - SEP_LEFT;
    let target = -2.0 * slope * slope;
    let phi_err = crit.phi[1..FINE_CELLS - 1]
        .iter()
        .map(|p| (p[(0, 0)] - target).abs())
        .fold(0.0, f64::max);
    let eq = scenario(ThermoModel::sep(), 64, vec![0.5], vec![0.5], mutation)?;
    let eq_crit = covariance::longrange_criterion(&eq.model, &eq.sys.profile).map_err(CliError::numeric("covariance"))?;
    let c = covariance::lyapunov_solve(&eq.sys, &eq.noise).map_err(CliError::numeric("covariance"))?;
    let (local, b) = covariance::split_local_longrange(&c, &eq.model, &eq.sys.profile).map_err(CliError::numeric("covariance"))?;
    let ok = phi_err <= h * h
        && crit.long_range
        && eq_crit.max_phi < 1e-8
        && !eq_crit.long_range
        && b.amax() < 1e-8 * local.amax()
        && within(Duration::from_secs(5), started);
    Ok((
        Status::exact(ok),
        format!(
            "SEP |phi+{:.2}| {phi_err:.1e}, long_range={}; equilibrium max|phi| {:.1e}, |B|/|C_loc| {:.1e}, long_range={}",
            -target,
            crit.long_range,
            eq_crit.max_phi,
            b.amax() / local.amax(),
            eq_crit.long_range
        ),
    ))
}

fn criterion4(mutation: Option<Mutation>) -> Outcome {
    let started = Instant::now();
    let mut worst_res = 0.0_f64;
    let mut worst_int = 0.0_f64;
    for s in [
        sep(MC_CELLS, mutation)?,
        scenario(ThermoModel::gaussian(), MC_CELLS, vec![0.0], vec![1.0], mutation)?,
        scenario(ThermoModel::twocomp(), MC_CELLS, vec![0.0, 0.0], vec![1.0, 0.5], mutation)?,
    ] {
        let c = covariance::lyapunov_solve(&s.sys, &s.noise).map_err(CliError::numeric("covariance"))?;
        let gmax = s.noise.gamma.amax();
        worst_res = worst_res.max(covariance::lyapunov_residual(&s.sys.l, &c, &s.noise.gamma) / gmax);
        let t_max = 20.0 * s.sys.relaxation_time();
        let y = covariance::integral_covariance(&s.sys, &s.noise, t_max, 1e-8).map_err(CliError::numeric("covariance"))?;
        worst_int = worst_int.max((&c - y).amax() / c.amax());
    }
    let ok = worst_res < 1e-10 && worst_int < 1e-6 && within(Duration::from_secs(60), started);
    Ok((
        Status::exact(ok),
        format!("SEP/GAUSSIAN/TWOCOMP n={MC_CELLS}: residual {worst_res:.1e}, integral vs Lyapunov {worst_int:.1e}"),
    ))
}

fn criterion5(mutation: Option<Mutation>) -> Outcome {
    let started = Instant::now();
    let mut worst = 0.0_f64;
    for model in [ThermoModel::sep(), ThermoModel::gaussian(), ThermoModel::twocomp()] {
        for n in [16, 64] {
            let q0 = model.reference_point();
            let s = scenario(model.clone(), n, q0.clone(), q0, mutation)?;
            let c = covariance::lyapunov_solve(&s.sys, &s.noise).map_err(CliError::numeric("covariance"))?;
            let zero = DMatrix::zeros(c.nrows(), c.ncols());
            let (local, _) = covariance::split_local_longrange(&zero, &s.model, &s.sys.profile).map_err(CliError::numeric("covariance"))?;
            worst = worst.max((&c - &local).amax() / local.amax());
        }
    }
    let ok = worst < 1e-12 && within(Duration::from_secs(5), started);
    Ok((Status::exact(ok), format!("max|C - J/h| / max|J/h| = {worst:.1e} < 1e-12")))
}

fn criterion6() -> Outcome {
    let started = Instant::now();
    let bc = (vec![0.0, 0.0], vec![1.0, 0.5]);
    let model = ThermoModel::twocomp();
    let p = solve(&model, MC_CELLS, bc.0.clone(), bc.1.clone())?;
    let defect = covariance::onsager_check(&model, &p).map_err(CliError::numeric("covariance"))?;
    let injected = model.with_antisymmetric_onsager(1e-3).map_err(CliError::numeric("thermo"))?;
    let pi = solve(&injected, MC_CELLS, bc.0, bc.1)?;
    let recovered = covariance::onsager_check(&injected, &pi).map_err(CliError::numeric("covariance"))?;
    let ok = defect < 1e-12 && (recovered - 1e-3).abs() < 1e-10 && within(Duration::from_secs(5), started);
    Ok((
        Status::exact(ok),
        format!("defect {defect:.1e}, injected 1e-3 recovered as {recovered:.12e}"),
    ))
}

/// The criterion-7 ensemble and everything derived from it.
struct McRun {
    scenario: Scenario,
    c: DMatrix<f64>,
    plan: McPlan,
    ensemble: Ensemble,
    seconds: f64,
}

fn mc_run(opts: &BatteryOptions, execution: Execution) -> Result<McRun, CliError> {
    let s = sep(MC_CELLS, opts.mutation)?;
    let c = covariance::lyapunov_solve(&s.sys, &s.noise).map_err(CliError::numeric("covariance"))?;
    let plan = McPlan::derive(&s.model, &s.sys, DEFAULT_RECORDS)?;
    let mut cfg = plan.config(opts.paths, SEED, Scheme::CrankNicolson);
    cfg.execution = execution;
    let started = Instant::now();
    let ensemble = spde::simulate(&s.sys, &s.noise, &s.model, &cfg).map_err(CliError::numeric("simulate"))?;
    Ok(McRun {
        seconds: started.elapsed().as_secs_f64(),
        scenario: s,
        c,
        plan,
        ensemble,
    })
}

fn scaled_paths(opts: &BatteryOptions, nominal: usize) -> usize {
    (nominal * opts.paths / NOMINAL_PATHS).max(4)
}

fn criterion7(run: &McRun, opts: &BatteryOptions) -> Outcome {
    let est = spde::stationary_covariance(&run.ensemble).map_err(CliError::numeric("simulate"))?;
    let cmp = spde::compare_covariance(&est, &run.c, macrohydro::stats::Z_THRESHOLD);
    let ok = cmp.rel_frobenius < crate::pipeline::COV_FROBENIUS_RTOL
        && cmp.fraction_within >= crate::pipeline::COV_FRACTION_WITHIN;
    let fast = run.seconds <= 300.0;
    let status = if !fast { Status::Fail } else { Status::statistical(ok, opts.paths, NOMINAL_PATHS) };
    Ok((
        status,
        format!(
            "{} paths, {} records, dt {:.3e}: rel Frobenius {:.2}%, {:.1}% of entries within 4 SE",
            run.ensemble.n_paths,
            run.ensemble.n_records,
            run.plan.dt,
            100.0 * cmp.rel_frobenius,
            100.0 * cmp.fraction_within
        ),
    ))
}

fn criterion8(run: &McRun, opts: &BatteryOptions) -> Outcome {
    let k = run.plan.half_relaxation_lag();
    let tau = k as f64 * run.ensemble.record_interval();
    let lag = spde::autocorrelation(&run.ensemble, &run.scenario.sys, &run.c, &[tau]).map_err(CliError::numeric("simulate"))?;
    let rel = lag[0].comparison.rel_frobenius;
    Ok((
        Status::statistical(rel < crate::pipeline::LAG_FROBENIUS_RTOL, opts.paths, NOMINAL_PATHS),
        format!("tau = {tau:.4} ({k} records, relaxation {:.4}): rel Frobenius {:.2}%", run.plan.relaxation_time, 100.0 * rel),
    ))
}

fn criterion9(opts: &BatteryOptions) -> Outcome {
    let started = Instant::now();
    let s = sep(MC_CELLS, opts.mutation)?;
    let plan = McPlan::derive(&s.model, &s.sys, INCREMENT_RECORDS)?;
    let paths = scaled_paths(opts, INCREMENT_PATHS);
    let cfg = plan.config(paths, SEED + 1, Scheme::CrankNicolson);
    let ens = spde::simulate(&s.sys, &s.noise, &s.model, &cfg).map_err(CliError::numeric("simulate"))?;
    let (f, g) = crate::pipeline::increment_functionals(&s.sys.profile.mesh, 1);
    let inc = spde::increment_tests(&ens, &s.noise, &f, &g).map_err(CliError::numeric("simulate"))?;
    let worst_z = inc
        .orthogonality
        .iter()
        .chain(std::iter::once(&inc.disjoint))
        .map(|t| t.estimate.z())
        .fold(0.0, f64::max);
    let fast = within(Duration::from_secs(120), started);
    let status = if !fast { Status::Fail } else { Status::statistical(inc.passed(), paths, INCREMENT_PATHS) };
    Ok((
        status,
        format!(
            "{paths} paths: slope ratio {:.4}, intercept z {:.2}, worst orthogonality/disjoint z {worst_z:.2}",
            inc.slope.ratio,
            inc.slope.intercept.estimate.z()
        ),
    ))
}

fn criterion10(run: &McRun, opts: &BatteryOptions) -> Outcome {
    let s = &run.scenario;
    let mesh = &s.sys.profile.mesh;
    let (_, u) = linop::slowest_left_mode(&s.sys).map_err(CliError::numeric("linop"))?;
    let sines = spde::sine_functionals(mesh, 1, KURTOSIS_FUNCTIONALS);
    let (f, g) = crate::pipeline::increment_functionals(mesh, 1);
    let report = spde::gaussian_markov_tests(&run.ensemble, &sines, &u, MARKOV_LAG, Some((&s.noise, &f, &g)))
        .map_err(CliError::numeric("simulate"))?;
    let worst_kurt = report.kurtosis.iter().map(|t| t.estimate.z()).fold(0.0, f64::max);

    let paths = scaled_paths(opts, SURROGATE_PATHS);
    let mut cfg = run.plan.config(paths, SEED + 2, Scheme::CrankNicolson);
    cfg.record_increments = false;
    cfg.noise = NoiseColour::Correlated {
        correlation_time: SURROGATE_CORRELATION * run.plan.relaxation_time,
    };
    let surrogate = spde::simulate(&s.sys, &s.noise, &s.model, &cfg).map_err(CliError::numeric("simulate"))?;
    let sur = spde::gaussian_markov_tests(&surrogate, &sines[..1], &u, MARKOV_LAG, None).map_err(CliError::numeric("simulate"))?;
    let detected = !sur.markov.past.passed;
    let ok = report.passed() && detected;
    let past = report.markov.past.estimate;
    Ok((
        Status::statistical(ok, opts.paths, NOMINAL_PATHS),
        format!(
            "worst kurtosis z {worst_kurt:.2}, Markov past coefficient {:.4} +- {:.4}; surrogate {:.4} +- {:.4} ({})",
            past.value,
            past.se,
            sur.markov.past.estimate.value,
            sur.markov.past.estimate.se,
            if detected { "rejected" } else { "not rejected" }
        ),
    ))
}

fn criterion11(run: &McRun, opts: &BatteryOptions) -> Outcome {
    let first = spde::stationary_covariance(&run.ensemble).map_err(CliError::numeric("simulate"))?;
    let first = matrix_csv(&first.cov);
    let sequential = mc_run(opts, Execution::Sequential)?;
    let second = spde::stationary_covariance(&sequential.ensemble).map_err(CliError::numeric("simulate"))?;
    let second = matrix_csv(&second.cov);
    let pooled = par::with_threads(4, || mc_run(opts, Execution::Parallel))?;
    let third = spde::stationary_covariance(&pooled.ensemble).map_err(CliError::numeric("simulate"))?;
    let third = matrix_csv(&third.cov);
    let same = first == second && second == third;
    Ok((
        Status::exact(same),
        format!(
            "ensemble_cov.csv from a {}-thread pool, a sequential run and a 4-thread pool: {}",
            par::current_threads(),
            if same { "byte-identical" } else { "differ" }
        ),
    ))
}

fn selected(opts: &BatteryOptions, id: u8) -> bool {
    opts.only.as_ref().is_none_or(|ids| ids.contains(&id))
}

/// Runs the battery, reporting each result as soon as it is known.
pub fn run_battery(opts: &BatteryOptions, mut report: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut results = Vec::new();
    let mut record = |id: u8, started: Instant, outcome: Outcome| {
        let (status, detail) = match outcome {
            Ok(v) => v,
            Err(e) => (Status::Fail, format!("error: {e}")),
        };
        let r = CriterionResult {
            id,
            title: TITLES[id as usize - 1],
            status,
            detail,
            seconds: started.elapsed().as_secs_f64(),
        };
        report(&r);
        results.push(r);
    };
    let exact: [(u8, &dyn Fn() -> Outcome); 6] = [
        (1, &criterion1),
        (2, &|| criterion2(opts.mutation)),
        (3, &|| criterion3(opts.mutation)),
        (4, &|| criterion4(opts.mutation)),
        (5, &|| criterion5(opts.mutation)),
        (6, &criterion6),
    ];
    for (id, run) in exact {
        if selected(opts, id) {
            record(id, Instant::now(), run());
        }
    }
    let needs_mc = [7, 8, 10, 11].iter().any(|&id| selected(opts, id));
    let started = Instant::now();
    let mc = if needs_mc { Some(mc_run(opts, Execution::Parallel)) } else { None };
    let with_mc = |f: &dyn Fn(&McRun) -> Outcome| match &mc {
        Some(Ok(run)) => f(run),
        Some(Err(e)) => Err(CliError::Failed(format!("criterion-7 ensemble unavailable: {e}"))),
        None => unreachable!(),
    };
    if selected(opts, 7) {
        record(7, started, with_mc(&|run| criterion7(run, opts)));
    }
    if selected(opts, 8) {
        record(8, Instant::now(), with_mc(&|run| criterion8(run, opts)));
    }
    if selected(opts, 9) {
        record(9, Instant::now(), criterion9(opts));
    }
    if selected(opts, 10) {
        record(10, Instant::now(), with_mc(&|run| criterion10(run, opts)));
    }
    if selected(opts, 11) {
        record(11, Instant::now(), with_mc(&|run| criterion11(run, opts)));
    }
    results
}

pub fn summary_table(results: &[CriterionResult]) -> String {
    let mut s = String::from("criterion  status   seconds  title\n");
    for r in results {
        s.push_str(&format!("{:>9}  {:<7}  {:>7.1}  {}\n", r.id, r.status.label(), r.seconds, r.title));
    }
    let count = |st: Status| results.iter().filter(|r| r.status == st).count();
    s.push_str(&format!(
        "{} passed, {} failed, {} widened",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::Widened)
    ));
    s
}

/// 0 when nothing failed, 2 otherwise.
pub fn exit_code(results: &[CriterionResult]) -> i32 {
    if results.iter().any(|r| r.status == Status::Fail) {
        crate::error::EXIT_VERIFICATION
    } else {
        crate::error::EXIT_OK
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reduced_paths_widen_statistical_failures() {
        assert_eq!(Status::statistical(false, 20, NOMINAL_PATHS), Status::Widened);
        assert_eq!(Status::statistical(false, NOMINAL_PATHS, NOMINAL_PATHS), Status::Fail);
        assert_eq!(Status::statistical(true, 20, NOMINAL_PATHS), Status::Pass);
    }

    #[test]
    fn widened_results_exit_zero() {
        let r = |status| CriterionResult {
            id: 7,
            title: TITLES[6],
            status,
            detail: String::new(),
            seconds: 0.0,
        };
        assert_eq!(exit_code(&[r(Status::Pass), r(Status::Widened)]), 0);
        assert_eq!(exit_code(&[r(Status::Pass), r(Status::Fail)]), 2);
    }

    #[test]
    fn fast_criteria_pass() {
        let opts = BatteryOptions {
            only: Some(vec![1, 5, 6]),
            ..BatteryOptions::default()
        };
        let results = run_battery(&opts, |_| {});
        assert_eq!(results.len(), 3);
        for r in &results {
            assert_eq!(r.status, Status::Pass, "{}", r.line());
        }
    }
}
