//! Task execution for one scenario configuration.

use std::path::PathBuf;
use std::time::Instant;

use macrohydro::covariance::{self, CovarianceReport, NoiseCovariance};
use macrohydro::linop::{self, LinearizedSystem};
use macrohydro::spde::{self, CovarianceComparison, Ensemble, Scheme, SimConfig};
use macrohydro::stats::{self, Estimate, Z_THRESHOLD};
use macrohydro::steady::{self, SteadyProfile};
use macrohydro::{Mesh1D, ThermoModel};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{build_model, ScenarioConfig, SchemeName, SimSection, Task};
use crate::error::CliError;
use crate::output::{json_string, matrix_csv, sha256_hex, table_csv, unix_now, Manifest, OutputDir};

/// Tolerances shared by the simulate task and the acceptance battery.
pub const COV_FROBENIUS_RTOL: f64 = 0.10;
pub const COV_FRACTION_WITHIN: f64 = 0.99;
pub const LAG_FROBENIUS_RTOL: f64 = 0.10;
/// Default number of records per path after burn-in.
pub const DEFAULT_RECORDS: usize = 201;
/// Markov regression lag, in records.
pub const MARKOV_LAG: usize = 2;
/// Number of sine functionals in the kurtosis test.
pub const KURTOSIS_FUNCTIONALS: usize = 10;
/// Longest lag written to `autocorr.csv`, in records.
pub const AUTOCORR_MAX_LAG: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    /// Flip the sign of the noise covariance Γ.
    GammaSign,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pass,
    Fail,
    /// Failed with fewer paths than nominal; inconclusive.
    Widened,
}

impl Status {
    pub fn statistical(passed: bool, paths: usize, nominal: usize) -> Status {
        match (passed, paths < nominal) {
            (true, _) => Status::Pass,
            (false, true) => Status::Widened,
            (false, false) => Status::Fail,
        }
    }

    pub fn exact(passed: bool) -> Status {
        if passed {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Widened => "WIDENED",
        }
    }
}

/// Noise covariance, optionally with an injected defect.
pub fn noise_for(model: &ThermoModel, profile: &SteadyProfile, mutation: Option<Mutation>) -> Result<NoiseCovariance, CliError> {
    let mut noise = covariance::noise_covariance(model, profile).map_err(CliError::numeric("covariance"))?;
    if mutation == Some(Mutation::GammaSign) {
        noise.gamma = -noise.gamma;
    }
    Ok(noise)
}

/// Time step and step counts of an ensemble run.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct McPlan {
    pub dt: f64,
    pub record_stride: usize,
    pub burn_in: usize,
    pub steps: usize,
    pub relaxation_time: f64,
}

impl McPlan {
    /// `dt` at the stability bound, burn-in of ten relaxation times, one
    /// record per tenth of a relaxation time.
    pub fn derive(model: &ThermoModel, sys: &LinearizedSystem, records: usize) -> Result<Self, CliError> {
        let dt = spde::stability_bound(model, sys).map_err(CliError::numeric("simulate"))?;
        let relax = sys.relaxation_time();
        let stride = ((0.1 * relax / dt).round() as usize).max(1);
        Ok(McPlan {
            dt,
            record_stride: stride,
            burn_in: (10.0 * relax / dt).ceil() as usize,
            steps: records.saturating_sub(1).max(1) * stride,
            relaxation_time: relax,
        })
    }

    pub fn config(&self, n_paths: usize, seed: u64, scheme: Scheme) -> SimConfig {
        let mut cfg = SimConfig::new(self.dt, self.steps, self.burn_in, n_paths, seed, self.record_stride);
        cfg.scheme = scheme;
        cfg.record_increments = true;
        cfg
    }

    /// Half a relaxation time rounded to the record grid.
    pub fn half_relaxation_lag(&self) -> usize {
        ((0.5 * self.relaxation_time / (self.dt * self.record_stride as f64)).round() as usize).max(1)
    }
}

/// One entry of `tests.json`.
#[derive(Clone, Debug, Serialize)]
pub struct TestRecord {
    pub name: String,
    pub status: Status,
    pub value: f64,
    pub se: Option<f64>,
    pub criterion: String,
}

impl TestRecord {
    fn zero(test: &spde::ZeroTest, paths: usize, nominal: usize) -> Self {
        TestRecord {
            name: test.label.clone(),
            status: Status::statistical(test.passed, paths, nominal),
            value: test.estimate.value,
            se: Some(test.estimate.se),
            criterion: format!("|value| <= {Z_THRESHOLD} se"),
        }
    }
}

/// Statistical checks of an ensemble against the linear theory.
#[derive(Clone, Debug, Serialize)]
pub struct EnsembleChecks {
    pub covariance: ComparisonSummary,
    pub lag_records: usize,
    pub lag: ComparisonSummary,
    pub tests: Vec<TestRecord>,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ComparisonSummary {
    pub rel_frobenius: f64,
    pub fraction_within: f64,
    pub max_z: f64,
}

impl From<CovarianceComparison> for ComparisonSummary {
    fn from(c: CovarianceComparison) -> Self {
        ComparisonSummary {
            rel_frobenius: c.rel_frobenius,
            fraction_within: c.fraction_within,
            max_z: c.max_z,
        }
    }
}

/// Hat functionals used by the increment tests.
pub fn increment_functionals(mesh: &Mesh1D, m: usize) -> (DVector<f64>, DVector<f64>) {
    (
        spde::hat_functional(mesh, m, 0, 0.5, 0.25),
        spde::hat_functional(mesh, m, 0, 0.3, 0.2),
    )
}

pub fn check_ensemble(
    ens: &Ensemble,
    sys: &LinearizedSystem,
    noise: &NoiseCovariance,
    c: &DMatrix<f64>,
    plan: &McPlan,
    nominal_paths: usize,
) -> Result<EnsembleChecks, CliError> {
    let num = CliError::numeric("simulate");
    let paths = ens.n_paths;
    let status = |ok: bool| Status::statistical(ok, paths, nominal_paths);
    let mut tests = Vec::new();

    let est = spde::stationary_covariance(ens).map_err(num)?;
    let cmp = spde::compare_covariance(&est, c, Z_THRESHOLD);
    tests.push(TestRecord {
        name: "covariance relative Frobenius error".into(),
        status: status(cmp.rel_frobenius < COV_FROBENIUS_RTOL),
        value: cmp.rel_frobenius,
        se: None,
        criterion: format!("< {COV_FROBENIUS_RTOL}"),
    });
    tests.push(TestRecord {
        name: "covariance entries within 4 se".into(),
        status: status(cmp.fraction_within >= COV_FRACTION_WITHIN),
        value: cmp.fraction_within,
        se: None,
        criterion: format!(">= {COV_FRACTION_WITHIN}"),
    });

    let lag_records = plan.half_relaxation_lag().min(ens.n_records.saturating_sub(1));
    let lagged = spde::autocorrelation(ens, sys, c, &[lag_records as f64 * ens.record_interval()]).map_err(CliError::numeric("simulate"))?;
    let lag_cmp = lagged[0].comparison;
    tests.push(TestRecord {
        name: format!("autocovariance at lag {lag_records} records vs e^(L tau) C"),
        status: status(lag_cmp.rel_frobenius < LAG_FROBENIUS_RTOL),
        value: lag_cmp.rel_frobenius,
        se: None,
        criterion: format!("< {LAG_FROBENIUS_RTOL}"),
    });

    tests.push(TestRecord {
        name: format!("autocovariance entries at lag {lag_records} records within 4 se"),
        status: status(lag_cmp.fraction_within >= COV_FRACTION_WITHIN),
        value: lag_cmp.fraction_within,
        se: None,
        criterion: format!(">= {COV_FRACTION_WITHIN}"),
    });

    let mesh = &sys.profile.mesh;
    let (f, g) = increment_functionals(mesh, sys.m());
    if ens.n_records >= 6 {
        let inc = spde::increment_tests(ens, noise, &f, &g).map_err(CliError::numeric("simulate"))?;
        tests.push(TestRecord {
            name: "increment variance slope / f'Gf".into(),
            status: status(inc.slope.passed),
            value: inc.slope.ratio,
            se: Some(inc.slope.slope.se / inc.slope.expected),
            criterion: format!("within {} of 1, intercept within {Z_THRESHOLD} se", spde::SLOPE_RTOL),
        });
        for t in inc.orthogonality.iter().chain(std::iter::once(&inc.disjoint)) {
            tests.push(TestRecord::zero(t, paths, nominal_paths));
        }
    }
    if ens.n_records > 2 * MARKOV_LAG {
        let (_, u) = linop::slowest_left_mode(sys).map_err(CliError::numeric("simulate"))?;
        let sines = spde::sine_functionals(mesh, sys.m(), KURTOSIS_FUNCTIONALS);
        let gm = spde::gaussian_markov_tests(ens, &sines, &u, MARKOV_LAG, None).map_err(CliError::numeric("simulate"))?;
        for t in gm.kurtosis.iter().chain(std::iter::once(&gm.markov.past)) {
            tests.push(TestRecord::zero(t, paths, nominal_paths));
        }
    }
    Ok(EnsembleChecks {
        covariance: cmp.into(),
        lag_records,
        lag: lag_cmp.into(),
        tests,
    })
}

/// `cov(y_{t+k}, y_t)` for `y = uᵀξ`, `k = 0..=max_lag` records.
pub fn functional_autocovariance(ens: &Ensemble, u: &DVector<f64>, max_lag: usize) -> Result<Vec<Estimate>, CliError> {
    let max_lag = max_lag.min(ens.n_records.saturating_sub(1));
    let parts: Vec<Vec<f64>> = (0..ens.n_paths)
        .map(|p| {
            let ys: Vec<f64> = (0..ens.n_records)
                .map(|r| u.iter().zip(ens.state(p, r)).map(|(a, b)| a * b).sum())
                .collect();
            let mut acc = vec![0.0; max_lag + 2];
            acc[0] = ys.iter().sum::<f64>() / ys.len() as f64;
            for k in 0..=max_lag {
                let count = ys.len() - k;
                acc[k + 1] = (0..count).map(|r| ys[r + k] * ys[r]).sum::<f64>() / count as f64;
            }
            acc
        })
        .collect();
    let (mean, se) = stats::batch_means(&parts).map_err(CliError::numeric("simulate"))?;
    Ok((0..=max_lag)
        .map(|k| Estimate {
            value: mean[k + 1] - mean[0] * mean[0],
            se: se[k + 1],
        })
        .collect())
}

/// Run-time overrides from the command line.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub mutation: Option<Mutation>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    /// Some statistical or verification check reported FAIL.
    pub failed: bool,
    pub long_range: Option<bool>,
}

#[derive(Serialize)]
struct ProfileSummary<'a> {
    model: &'a str,
    n: usize,
    h: f64,
    q_left: &'a [f64],
    q_right: &'a [f64],
    residual_norm: f64,
    iterations: usize,
    fallback_used: bool,
    mean_current: Vec<f64>,
}

#[derive(Serialize)]
struct SpectrumSummary {
    dim: usize,
    spectral_abscissa: f64,
    relaxation_time: f64,
    dissipative: bool,
    /// `[re, im]`, sorted by decreasing real part.
    eigenvalues: Vec<[f64; 2]>,
}

#[derive(Serialize)]
struct CovarianceSummary<'a> {
    long_range: bool,
    max_phi: f64,
    max_psi_asym: f64,
    criterion_scale: f64,
    b_max: f64,
    c_local_max: f64,
    onsager_defect: f64,
    lyapunov_residual: f64,
    mutation: Option<Mutation>,
    model: &'a str,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    seed: u64,
    n_paths: usize,
    nominal_paths: usize,
    scheme: &'a str,
    plan: McPlan,
    n_records: usize,
    checks: &'a EnsembleChecks,
}

fn profile_csv(p: &SteadyProfile) -> String {
    let m = p.m();
    let mut header = vec!["x".to_string()];
    for prefix in ["q", "theta", "j"] {
        header.extend((0..m).map(|k| format!("{prefix}_{k}")));
    }
    let j = p.currents_at_centers();
    let rows: Vec<Vec<f64>> = (0..p.n())
        .map(|i| {
            let mut row = vec![p.mesh.centers()[i]];
            row.extend(p.q.row(i).iter());
            row.extend(p.theta.row(i).iter());
            row.extend(j.row(i).iter());
            row
        })
        .collect();
    table_csv(&header, &rows)
}

fn phi_csv(report: &CovarianceReport, mesh: &Mesh1D) -> String {
    let m = report.criterion.phi.first().map_or(1, |p| p.nrows());
    let mut header = vec!["x".to_string()];
    for a in 0..m {
        for b in 0..m {
            header.push(format!("phi_{a}{b}"));
        }
    }
    let rows: Vec<Vec<f64>> = report
        .criterion
        .phi
        .iter()
        .enumerate()
        .map(|(i, phi)| {
            let mut row = vec![mesh.centers()[i]];
            row.extend(phi.transpose().iter());
            row
        })
        .collect();
    table_csv(&header, &rows)
}

fn scheme_of(section: &SimSection) -> Scheme {
    match section.scheme {
        Some(SchemeName::EulerMaruyama) => Scheme::EulerMaruyama,
        _ => Scheme::CrankNicolson,
    }
}

/// Executes every stage up to the last requested task and writes its
/// outputs plus `manifest.json`.
pub fn run_config(
    cfg: &ScenarioConfig,
    config_bytes: &[u8],
    tasks: &[Task],
    opts: &RunOptions,
    command: &str,
) -> Result<RunOutcome, CliError> {
    let started = unix_now();
    let clock = Instant::now();
    let last = tasks.iter().copied().max().unwrap_or(Task::Covariance);
    let out_dir = opts
        .out_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("macrohydro-out"));
    let mut out = OutputDir::create(&out_dir)?;
    let mut outcome = RunOutcome {
        out_dir: out_dir.clone(),
        ..RunOutcome::default()
    };
    let mut seeds = Vec::new();
    let mut n_paths = None;

    let model = build_model(&cfg.model)?;
    let mesh = Mesh1D::new(cfg.mesh.n).map_err(|e| CliError::Config(format!("mesh.n: {e}")))?;
    let bc = cfg.boundary();
    for (side, values) in [("bc.left", &cfg.bc.left), ("bc.right", &cfg.bc.right)] {
        if values.len() != model.m() {
            return Err(CliError::Config(format!(
                "{side} has {} entries, model `{}` has {} components",
                values.len(),
                model.name(),
                model.m()
            )));
        }
    }
    let profile = steady::solve_steady(&model, &mesh, &bc).map_err(CliError::numeric("steady"))?;
    out.write("profile.csv", &profile_csv(&profile))?;
    let mean_current = (0..profile.m())
        .map(|k| profile.j_faces.column(k).mean())
        .collect();
    out.write(
        "profile.json",
        &json_string(&ProfileSummary {
            model: model.name(),
            n: profile.n(),
            h: mesh.h(),
            q_left: &profile.q_left,
            q_right: &profile.q_right,
            residual_norm: profile.residual_norm,
            iterations: profile.iterations,
            fallback_used: profile.fallback_used,
            mean_current,
        }),
    )?;

    if last >= Task::Linop {
        let sys = linop::assemble(&model, &profile).map_err(CliError::numeric("linop"))?;
        let mut eig: Vec<[f64; 2]> = linop::eigenvalues(&sys.l)
            .map_err(CliError::numeric("linop"))?
            .iter()
            .map(|z| [z.re, z.im])
            .collect();
        eig.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
        out.write("L.csv", &matrix_csv(&sys.l))?;
        out.write(
            "spectrum.json",
            &json_string(&SpectrumSummary {
                dim: sys.dim(),
                spectral_abscissa: sys.spectral_abscissa,
                relaxation_time: sys.relaxation_time(),
                dissipative: sys.spectral_abscissa < 0.0,
                eigenvalues: eig,
            }),
        )?;

        if last >= Task::Covariance {
            let noise = noise_for(&model, &profile, opts.mutation)?;
            let report = covariance::covariance_report(&model, &sys, &noise).map_err(CliError::numeric("covariance"))?;
            out.write("C.csv", &matrix_csv(&report.c))?;
            out.write("B.csv", &matrix_csv(&report.b))?;
            out.write("phi.csv", &phi_csv(&report, &mesh))?;
            out.write(
                "report.json",
                &json_string(&CovarianceSummary {
                    long_range: report.long_range,
                    max_phi: report.criterion.max_phi,
                    max_psi_asym: report.criterion.max_psi_asym,
                    criterion_scale: report.criterion.scale,
                    b_max: report.b.amax(),
                    c_local_max: report.c_local.amax(),
                    onsager_defect: report.onsager_defect,
                    lyapunov_residual: report.lyapunov_residual,
                    mutation: opts.mutation,
                    model: model.name(),
                }),
            )?;
            outcome.long_range = Some(report.long_range);

            if tasks.contains(&Task::Simulate) {
                let section = cfg
                    .sim
                    .as_ref()
                    .ok_or_else(|| CliError::Config("task `simulate` needs a `sim` section".into()))?;
                let mut plan = McPlan::derive(&model, &sys, DEFAULT_RECORDS)?;
                if let Some(dt) = section.dt {
                    plan.dt = dt;
                }
                if let Some(s) = section.record_stride {
                    plan.record_stride = s.max(1);
                }
                if let Some(b) = section.burn_in {
                    plan.burn_in = b;
                }
                plan.steps = section.steps.unwrap_or((DEFAULT_RECORDS - 1) * plan.record_stride);
                let seed = opts.seed.unwrap_or(section.seed);
                let paths = opts.paths.unwrap_or(section.n_paths);
                let scheme = scheme_of(section);
                let sim_cfg = plan.config(paths, seed, scheme);
                let ens = spde::simulate(&sys, &noise, &model, &sim_cfg).map_err(CliError::numeric("simulate"))?;
                let checks = check_ensemble(&ens, &sys, &noise, &report.c, &plan, section.n_paths)?;
                let est = spde::stationary_covariance(&ens).map_err(CliError::numeric("simulate"))?;
                out.write("ensemble_cov.csv", &matrix_csv(&est.cov))?;
                let (_, u) = linop::slowest_left_mode(&sys).map_err(CliError::numeric("simulate"))?;
                let auto = functional_autocovariance(&ens, &u, AUTOCORR_MAX_LAG)?;
                let rows = auto
                    .iter()
                    .enumerate()
                    .map(|(k, e)| {
                        let tau = k as f64 * ens.record_interval();
                        let predicted = covariance::lagged_covariance(&sys, &report.c, tau)
                            .map(|ct| (u.transpose() * ct * &u)[(0, 0)])
                            .map_err(CliError::numeric("simulate"))?;
                        Ok(vec![tau, e.value, e.se, predicted])
                    })
                    .collect::<Result<Vec<_>, CliError>>()?;
                let header = ["lag", "estimate", "se", "predicted"].map(String::from);
                out.write("autocorr.csv", &table_csv(&header, &rows))?;
                outcome.failed |= checks.tests.iter().any(|t| t.status == Status::Fail);
                out.write(
                    "tests.json",
                    &json_string(&SimulateSummary {
                        seed,
                        n_paths: paths,
                        nominal_paths: section.n_paths,
                        scheme: match scheme {
                            Scheme::EulerMaruyama => "euler_maruyama",
                            Scheme::CrankNicolson => "crank_nicolson",
                        },
                        plan,
                        n_records: ens.n_records,
                        checks: &checks,
                    }),
                )?;
                seeds.push(seed);
                n_paths = Some(paths);
            }
        }
    }

    if tasks.contains(&Task::Verify) {
        let results = crate::battery::run_battery(
            &crate::battery::BatteryOptions {
                paths: opts.paths.unwrap_or(crate::battery::NOMINAL_PATHS),
                mutation: opts.mutation,
                only: None,
            },
            |r| println!("{}", r.line()),
        );
        println!("{}", crate::battery::summary_table(&results));
        outcome.failed |= results.iter().any(|r| r.status == Status::Fail);
        out.write("verify.json", &json_string(&results))?;
        seeds.push(crate::battery::SEED);
    }

    let manifest = Manifest {
        tool: "macrohydro",
        version: env!("CARGO_PKG_VERSION"),
        command: command.to_string(),
        config_sha256: Some(sha256_hex(config_bytes)),
        seeds,
        n_paths,
        threads: macrohydro::par::current_threads(),
        started_unix: started,
        finished_unix: unix_now(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        outputs: out.entries().to_vec(),
    };
    std::fs::write(out.root().join("manifest.json"), json_string(&manifest)).map_err(|source| CliError::Io {
        path: out.root().join("manifest.json"),
        source,
    })?;
    Ok(outcome)
}
