//! Linear Langevin dynamics `dξ = Lξ dt + dw` around a steady profile and
//! the statistical checks run on the resulting ensembles.
//!
//! Noise lives on faces: each step draws an independent Gaussian current
//! increment per face with covariance `2 K_θ dt / (h ω_f)` and feeds its
//! discrete divergence into the cells, so the cell forcing has covariance
//! exactly `dt Γ` and the update is conservative.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::covariance::{self, NoiseCovariance};
use crate::error::{Error, Result};
use crate::fvm;
use crate::linalg::{BandedLu, CsrMatrix};
use crate::linop::LinearizedSystem;
use crate::mesh::Mesh1D;
use crate::par::{self, Execution};
use crate::rng;
use crate::stats::{self, Estimate, JACKKNIFE_GROUPS, Z_THRESHOLD};
use crate::steady;
use crate::thermo::ThermoModel;

/// Relative tolerance on the increment-variance slope.
pub const SLOPE_RTOL: f64 = 0.05;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scheme {
    /// `ξ ← ξ + dt Lξ + Δw`.
    #[default]
    EulerMaruyama,
    /// `(I - dt L/2) ξ' = (I + dt L/2) ξ + Δw`; its stationary covariance
    /// solves the continuous Lyapunov equation exactly.
    CrankNicolson,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Walls {
    /// Reservoir exchange through the wall faces.
    #[default]
    Open,
    /// Wall faces carry neither deterministic nor random current.
    Closed,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum NoiseColour {
    #[default]
    White,
    /// Face noise following an AR(1) recursion with the given correlation
    /// time, rescaled to keep the long-time increment variance. Breaks the
    /// Markov property; diagnostic only.
    Correlated { correlation_time: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    /// Steps after burn-in.
    pub steps: usize,
    pub burn_in: usize,
    pub n_paths: usize,
    pub seed: u64,
    pub record_stride: usize,
    pub scheme: Scheme,
    pub record_increments: bool,
    pub walls: Walls,
    pub noise: NoiseColour,
    /// Initial state for every path; zero when absent.
    pub initial: Option<Vec<f64>>,
    pub execution: Execution,
}

impl SimConfig {
    pub fn new(dt: f64, steps: usize, burn_in: usize, n_paths: usize, seed: u64, record_stride: usize) -> Self {
        SimConfig {
            dt,
            steps,
            burn_in,
            n_paths,
            seed,
            record_stride,
            scheme: Scheme::default(),
            record_increments: false,
            walls: Walls::default(),
            noise: NoiseColour::default(),
            initial: None,
            execution: Execution::default(),
        }
    }

    /// Snapshots per path, including the one taken right after burn-in.
    pub fn n_records(&self) -> usize {
        self.steps / self.record_stride.max(1) + 1
    }
}

/// Recorded snapshots of all paths.
#[derive(Clone, Debug)]
pub struct Ensemble {
    pub n_paths: usize,
    pub n_records: usize,
    pub dim: usize,
    pub dt: f64,
    pub record_stride: usize,
    /// `[path][record][dof]`, flattened.
    pub states: Vec<f64>,
    /// Accumulated cell forcing since burn-in, same layout as `states`.
    pub increments: Option<Vec<f64>>,
    /// Generator key of every path.
    pub rng_trace: Vec<[u64; 4]>,
    pub seed: u64,
}

impl Ensemble {
    /// Time between consecutive records.
    pub fn record_interval(&self) -> f64 {
        self.dt * self.record_stride as f64
    }

    pub fn state(&self, path: usize, record: usize) -> &[f64] {
        let start = (path * self.n_records + record) * self.dim;
        &self.states[start..start + self.dim]
    }

    pub fn increment(&self, path: usize, record: usize) -> Option<&[f64]> {
        let start = (path * self.n_records + record) * self.dim;
        self.increments.as_ref().map(|w| &w[start..start + self.dim])
    }

    fn require_increments(&self) -> Result<()> {
        if self.increments.is_none() {
            return Err(Error::InvalidInput(
                "ensemble was recorded without increments".into(),
            ));
        }
        Ok(())
    }
}

/// Largest admissible time step for `sys`: the explicit diffusion limit,
/// also kept below `2/|abscissa|`.
pub fn stability_bound(model: &ThermoModel, sys: &LinearizedSystem) -> Result<f64> {
    let p = &sys.profile;
    let explicit = steady::explicit_stability_bound(model, &p.mesh, p.field())?;
    Ok(explicit.min(2.0 / sys.spectral_abscissa.abs()))
}

/// `V diag(√λ⁺)`, a factor `S` with `S Sᵀ = A` for symmetric PSD `A`.
fn psd_factor(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = a.clone().symmetric_eigen();
    let mut s = eig.eigenvectors.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let root = lambda.max(0.0).sqrt();
        s.column_mut(j).scale_mut(root);
    }
    s
}

/// Generator with the wall faces' current removed.
fn closed_generator(mesh: &Mesh1D, m: usize, kmap: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mesh.n();
    let mut k = kmap.clone();
    for f in [0, n] {
        for a in 0..m {
            k.row_mut(f * m + a).fill(0.0);
        }
    }
    -(fvm::divergence_matrix(mesh, m) * k)
}

enum Propagator {
    Explicit(CsrMatrix),
    Implicit { forward: CsrMatrix, backward: BandedLu },
}

struct Stepper {
    n: usize,
    m: usize,
    inv_h: f64,
    dt: f64,
    propagator: Propagator,
    /// Per-face factor of the current-increment covariance; `None` when
    /// the face is closed.
    face_factors: Vec<Option<DMatrix<f64>>>,
    ar: Option<(f64, f64, f64)>,
}

impl Stepper {
    fn new(sys: &LinearizedSystem, noise: &NoiseCovariance, cfg: &SimConfig) -> Result<Self> {
        let mesh = &sys.profile.mesh;
        let (n, m) = (mesh.n(), sys.m());
        let dim = n * m;
        let l = match cfg.walls {
            Walls::Open => sys.l.clone(),
            Walls::Closed => closed_generator(mesh, m, &sys.kmap),
        };
        let propagator = match cfg.scheme {
            Scheme::EulerMaruyama => Propagator::Explicit(CsrMatrix::from_dense(&l)),
            Scheme::CrankNicolson => {
                let eye = DMatrix::<f64>::identity(dim, dim);
                let forward = CsrMatrix::from_dense(&(&eye + &l * (0.5 * cfg.dt)));
                let backward = BandedLu::factor(&(&eye - &l * (0.5 * cfg.dt)))?;
                Propagator::Implicit { forward, backward }
            }
        };
        let face_factors = (0..=n)
            .map(|f| {
                let wall = f == 0 || f == n;
                if wall && cfg.walls == Walls::Closed {
                    return None;
                }
                let scale = 2.0 * cfg.dt / (mesh.h() * fvm::face_weight(mesh, f));
                Some(psd_factor(&(&noise.face_onsager[f] * scale)))
            })
            .collect();
        let ar = match cfg.noise {
            NoiseColour::White => None,
            NoiseColour::Correlated { correlation_time } => {
                if !(correlation_time > 0.0) {
                    return Err(Error::InvalidInput("correlation time must be positive".into()));
                }
                let rho = (-cfg.dt / correlation_time).exp();
                Some((rho, (1.0 - rho * rho).sqrt(), ((1.0 - rho) / (1.0 + rho)).sqrt()))
            }
        };
        Ok(Stepper {
            n,
            m,
            inv_h: 1.0 / mesh.h(),
            dt: cfg.dt,
            propagator,
            face_factors,
            ar,
        })
    }

    /// Draws the face increments and writes their divergence into `forcing`.
    fn forcing<R: Rng>(&self, rng: &mut R, memory: &mut [f64], z: &mut [f64], dw: &mut [f64], forcing: &mut [f64]) {
        let m = self.m;
        for (f, factor) in self.face_factors.iter().enumerate() {
            let block = &mut dw[f * m..(f + 1) * m];
            let Some(factor) = factor else {
                block.fill(0.0);
                continue;
            };
            for zk in z.iter_mut() {
                *zk = rng.sample(StandardNormal);
            }
            if let Some((rho, innov, norm)) = self.ar {
                let mem = &mut memory[f * m..(f + 1) * m];
                for (mk, zk) in mem.iter_mut().zip(z.iter_mut()) {
                    *mk = rho * *mk + innov * *zk;
                    *zk = norm * *mk;
                }
            }
            for a in 0..m {
                let mut acc = 0.0;
                for b in 0..m {
                    acc += factor[(a, b)] * z[b];
                }
                block[a] = acc;
            }
        }
        for i in 0..self.n {
            for a in 0..m {
                forcing[i * m + a] = (dw[(i + 1) * m + a] - dw[i * m + a]) * self.inv_h;
            }
        }
    }

    fn advance(&self, xi: &mut [f64], forcing: &[f64], scratch: &mut [f64]) {
        match &self.propagator {
            Propagator::Explicit(l) => {
                scratch.copy_from_slice(xi);
                l.gemv(self.dt, scratch, 1.0, xi);
                for (x, w) in xi.iter_mut().zip(forcing) {
                    *x += w;
                }
            }
            Propagator::Implicit { forward, backward } => {
                forward.gemv(1.0, xi, 0.0, scratch);
                for (s, w) in scratch.iter_mut().zip(forcing) {
                    *s += w;
                }
                backward.solve_in_place(scratch);
                xi.copy_from_slice(scratch);
            }
        }
    }
}

struct PathRecord {
    states: Vec<f64>,
    increments: Option<Vec<f64>>,
}

fn run_path(stepper: &Stepper, cfg: &SimConfig, dim: usize, path: usize) -> Result<PathRecord> {
    let mut rng = rng::path_rng(cfg.seed, path as u64);
    let m = stepper.m;
    let faces = stepper.n + 1;
    let mut memory = vec![0.0; faces * m];
    if stepper.ar.is_some() {
        // start the coloured noise in its stationary law
        for v in memory.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
    }
    let mut z = vec![0.0; m];
    let mut dw = vec![0.0; faces * m];
    let mut forcing = vec![0.0; dim];
    let mut scratch = vec![0.0; dim];
    let mut xi = cfg.initial.clone().unwrap_or_else(|| vec![0.0; dim]);
    let mut w = vec![0.0; dim];
    let records = cfg.n_records();
    let mut states = Vec::with_capacity(records * dim);
    let mut increments = cfg.record_increments.then(|| Vec::with_capacity(records * dim));
    let total = cfg.burn_in + (records - 1) * cfg.record_stride;
    for step in 0..=total {
        if step >= cfg.burn_in && (step - cfg.burn_in) % cfg.record_stride == 0 {
            states.extend_from_slice(&xi);
            if let Some(inc) = increments.as_mut() {
                inc.extend_from_slice(&w);
            }
        }
        if step == total {
            break;
        }
        stepper.forcing(&mut rng, &mut memory, &mut z, &mut dw, &mut forcing);
        stepper.advance(&mut xi, &forcing, &mut scratch);
        if step >= cfg.burn_in {
            for (wk, fk) in w.iter_mut().zip(&forcing) {
                *wk += fk;
            }
        }
        if !xi.iter().sum::<f64>().is_finite() {
            return Err(Error::NonFiniteState { path, step: step + 1 });
        }
    }
    Ok(PathRecord { states, increments })
}

/// Integrates `cfg.n_paths` independent paths. Paths are distributed over
/// workers according to `cfg.execution`; the output does not depend on
/// the worker count.
pub fn simulate(
    sys: &LinearizedSystem,
    noise: &NoiseCovariance,
    model: &ThermoModel,
    cfg: &SimConfig,
) -> Result<Ensemble> {
    let bound = stability_bound(model, sys)?;
    if !(cfg.dt > 0.0) || cfg.dt > bound * (1.0 + 1e-12) {
        return Err(Error::StabilityViolation {
            context: "simulate",
            dt: cfg.dt,
            bound,
        });
    }
    if cfg.record_stride == 0 || cfg.n_paths == 0 {
        return Err(Error::InvalidInput(
            "simulate: n_paths and record_stride must be positive".into(),
        ));
    }
    let dim = sys.dim();
    if let Some(init) = &cfg.initial {
        if init.len() != dim {
            return Err(Error::InvalidInput(format!("simulate: initial state must have {dim} entries")));
        }
    }
    if noise.face_onsager.len() != sys.profile.n() + 1 || noise.m() != sys.m() {
        return Err(Error::InvalidInput("simulate: noise does not match the system".into()));
    }
    let stepper = Stepper::new(sys, noise, cfg)?;
    let paths = par::map_indexed(cfg.n_paths, cfg.execution, |p| run_path(&stepper, cfg, dim, p));
    let n_records = cfg.n_records();
    let mut states = Vec::with_capacity(cfg.n_paths * n_records * dim);
    let mut increments = cfg.record_increments.then(|| Vec::with_capacity(states.capacity()));
    for path in paths {
        let path = path?;
        states.extend_from_slice(&path.states);
        if let (Some(all), Some(inc)) = (increments.as_mut(), path.increments) {
            all.extend_from_slice(&inc);
        }
    }
    Ok(Ensemble {
        n_paths: cfg.n_paths,
        n_records,
        dim,
        dt: cfg.dt,
        record_stride: cfg.record_stride,
        states,
        increments,
        rng_trace: (0..cfg.n_paths).map(|p| rng::path_key(cfg.seed, p as u64)).collect(),
        seed: cfg.seed,
    })
}

/// Exact stationary covariance of the discrete scheme (no sampling error).
pub fn scheme_covariance(sys: &LinearizedSystem, noise: &NoiseCovariance, dt: f64, scheme: Scheme) -> Result<DMatrix<f64>> {
    let dim = sys.dim();
    let eye = DMatrix::<f64>::identity(dim, dim);
    let q = &noise.gamma * dt;
    match scheme {
        Scheme::EulerMaruyama => covariance::discrete_stein(&(&eye + &sys.l * dt), &q),
        Scheme::CrankNicolson => {
            let inv = (&eye - &sys.l * (0.5 * dt))
                .try_inverse()
                .ok_or(Error::InvalidInput("singular Crank-Nicolson matrix".into()))?;
            let a = &inv * (&eye + &sys.l * (0.5 * dt));
            covariance::discrete_stein(&a, &(&inv * q * inv.transpose()))
        }
    }
}

/// Covariance of the face-noise forcing over one step, `Div diag(·) Divᵀ`,
/// for comparison with `dt Γ`.
pub fn forcing_covariance(noise: &NoiseCovariance, dt: f64) -> DMatrix<f64> {
    let mesh = noise.mesh();
    let m = noise.m();
    let n = mesh.n();
    let div = fvm::divergence_matrix(mesh, m);
    let mut faces = DMatrix::zeros((n + 1) * m, (n + 1) * m);
    for f in 0..=n {
        let scale = 2.0 * dt / (mesh.h() * fvm::face_weight(mesh, f));
        for a in 0..m {
            for b in 0..m {
                faces[(f * m + a, f * m + b)] = scale * noise.face_onsager[f][(a, b)];
            }
        }
    }
    &div * faces * div.transpose()
}

/// Sample moments with entrywise standard errors.
#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    pub mean: DVector<f64>,
    pub mean_se: DVector<f64>,
    /// `cov(ξ_{t+τ}, ξ_t)`, row index on the later time.
    pub cov: DMatrix<f64>,
    pub se: DMatrix<f64>,
    pub lag_records: usize,
    pub samples_per_path: usize,
}

/// Sample covariance over all paths and records.
pub fn stationary_covariance(ens: &Ensemble) -> Result<CovarianceEstimate> {
    lagged_covariance(ens, 0)
}

/// `cov(ξ_{t+k}, ξ_t)` with `k` counted in records.
pub fn lagged_covariance(ens: &Ensemble, lag: usize) -> Result<CovarianceEstimate> {
    let d = ens.dim;
    if ens.n_paths < 2 || ens.n_records <= lag {
        return Err(Error::InsufficientSamples {
            context: "lagged_covariance",
            have: ens.n_paths.min(ens.n_records.saturating_sub(lag)),
            need: 2,
        });
    }
    let count = ens.n_records - lag;
    let parts: Vec<Vec<f64>> = (0..ens.n_paths)
        .map(|p| {
            let mut acc = vec![0.0; d + d * d];
            for r in 0..count {
                let early = ens.state(p, r);
                let late = ens.state(p, r + lag);
                for (a, v) in acc[..d].iter_mut().zip(early) {
                    *a += v;
                }
                for (i, li) in late.iter().enumerate() {
                    let row = &mut acc[d + i * d..d + (i + 1) * d];
                    for (c, e) in row.iter_mut().zip(early) {
                        *c += li * e;
                    }
                }
            }
            for a in &mut acc {
                *a /= count as f64;
            }
            acc
        })
        .collect();
    let (mean, se) = stats::batch_means(&parts)?;
    let mu = DVector::from_column_slice(&mean[..d]);
    let cov = DMatrix::from_row_slice(d, d, &mean[d..]) - &mu * mu.transpose();
    Ok(CovarianceEstimate {
        mean: mu,
        mean_se: DVector::from_column_slice(&se[..d]),
        cov,
        se: DMatrix::from_row_slice(d, d, &se[d..]),
        lag_records: lag,
        samples_per_path: count,
    })
}

/// Agreement between an estimate and a reference covariance.
#[derive(Clone, Copy, Debug)]
pub struct CovarianceComparison {
    /// `‖Ĉ - C‖_F / ‖C‖_F`.
    pub rel_frobenius: f64,
    /// Fraction of entries with `|Ĉ - C| <= k·SE`.
    pub fraction_within: f64,
    pub max_z: f64,
}

pub fn compare_covariance(est: &CovarianceEstimate, reference: &DMatrix<f64>, k: f64) -> CovarianceComparison {
    let diff = &est.cov - reference;
    let rel_frobenius = diff.norm() / reference.norm();
    let mut within = 0usize;
    let mut max_z = 0.0_f64;
    for (dv, se) in diff.iter().zip(est.se.iter()) {
        let z = Estimate { value: *dv, se: *se }.z();
        max_z = max_z.max(z);
        if z <= k {
            within += 1;
        }
    }
    CovarianceComparison {
        rel_frobenius,
        fraction_within: within as f64 / diff.len() as f64,
        max_z,
    }
}

/// Autocovariance estimate at one lag with its semigroup prediction.
#[derive(Clone, Debug)]
pub struct LagEstimate {
    pub lag: f64,
    pub estimate: CovarianceEstimate,
    /// `e^{Lτ} C_ref`.
    pub predicted: DMatrix<f64>,
    pub comparison: CovarianceComparison,
}

/// Autocovariances at the requested time lags, compared with
/// `e^{Lτ} c_ref`. Lags must be multiples of the record interval.
pub fn autocorrelation(ens: &Ensemble, sys: &LinearizedSystem, c_ref: &DMatrix<f64>, lags: &[f64]) -> Result<Vec<LagEstimate>> {
    let interval = ens.record_interval();
    lags.iter()
        .map(|&lag| {
            let k = (lag / interval).round();
            if (k * interval - lag).abs() > 1e-9 * interval.max(lag) || k < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "lag {lag} is not a multiple of the record interval {interval}"
                )));
            }
            let estimate = lagged_covariance(ens, k as usize)?;
            let predicted = covariance::lagged_covariance(sys, c_ref, lag)?;
            let comparison = compare_covariance(&estimate, &predicted, Z_THRESHOLD);
            Ok(LagEstimate {
                lag,
                estimate,
                predicted,
                comparison,
            })
        })
        .collect()
}

/// Scalar zero test at [`Z_THRESHOLD`] standard errors.
#[derive(Clone, Debug)]
pub struct ZeroTest {
    pub label: String,
    pub estimate: Estimate,
    pub passed: bool,
}

impl ZeroTest {
    fn new(label: String, estimate: Estimate) -> Self {
        ZeroTest {
            passed: estimate.is_zero_within(Z_THRESHOLD),
            label,
            estimate,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SlopeTest {
    /// Window lengths in time units.
    pub windows: Vec<f64>,
    /// Sample variance of the projected increment per window length.
    pub variances: Vec<f64>,
    pub slope: Estimate,
    pub intercept: ZeroTest,
    /// `fᵀ Γ f`.
    pub expected: f64,
    pub ratio: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct IncrementReport {
    pub slope: SlopeTest,
    pub orthogonality: Vec<ZeroTest>,
    pub disjoint: ZeroTest,
}

impl IncrementReport {
    pub fn passed(&self) -> bool {
        self.slope.passed && self.disjoint.passed && self.orthogonality.iter().all(|t| t.passed)
    }
}

/// `(u, s, t)` record offsets for the orthogonality test, `u <= s < t`.
pub const ORTHOGONALITY_TRIPLES: [(usize, usize, usize); 5] = [(0, 0, 1), (0, 1, 2), (1, 2, 4), (0, 3, 5), (2, 2, 3)];
/// Longest window, in records, used by the slope fit.
pub const SLOPE_WINDOWS: usize = 5;

fn dot(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Correlation `E[ab] / √(E[a²] E[b²])` of zero-mean quantities; `m` is
/// the path-averaged `[ab, a², b²]`.
fn correlation(m: &[f64]) -> f64 {
    m[0] / (m[1] * m[2]).sqrt()
}

/// Wiener-increment checks on projected accumulated forcing `fᵀ w`.
///
/// Each path is cut into disjoint blocks of records; per block the slope
/// fit uses windows of `1..=SLOPE_WINDOWS` records, the orthogonality test
/// correlates `fᵀ(w_t - w_s)` with `gᵀ ξ_u`, and the disjoint test
/// correlates the increments over records `[0,1]` and `[2,3]`.
pub fn increment_tests(ens: &Ensemble, noise: &NoiseCovariance, f: &DVector<f64>, g: &DVector<f64>) -> Result<IncrementReport> {
    ens.require_increments()?;
    let block = 6usize;
    let blocks = ens.n_records / block;
    if blocks == 0 || ens.n_paths < 2 {
        return Err(Error::InsufficientSamples {
            context: "increment_tests",
            have: ens.n_records,
            need: block,
        });
    }
    let proj = |p: usize, r: usize| dot(f, ens.increment(p, r).unwrap());
    let triples = ORTHOGONALITY_TRIPLES.len();
    let width = SLOPE_WINDOWS + 3 * triples + 3;
    let parts: Vec<Vec<f64>> = (0..ens.n_paths)
        .map(|p| {
            let mut acc = vec![0.0; width];
            for b in 0..blocks {
                let r0 = b * block;
                let w0 = proj(p, r0);
                for k in 1..=SLOPE_WINDOWS {
                    acc[k - 1] += (proj(p, r0 + k) - w0).powi(2);
                }
                for (j, &(u, s, t)) in ORTHOGONALITY_TRIPLES.iter().enumerate() {
                    let a = proj(p, r0 + t) - proj(p, r0 + s);
                    let c = dot(g, ens.state(p, r0 + u));
                    let base = SLOPE_WINDOWS + 3 * j;
                    acc[base] += a * c;
                    acc[base + 1] += a * a;
                    acc[base + 2] += c * c;
                }
                let a = proj(p, r0 + 1) - w0;
                let c = proj(p, r0 + 3) - proj(p, r0 + 2);
                let base = SLOPE_WINDOWS + 3 * triples;
                acc[base] += a * c;
                acc[base + 1] += a * a;
                acc[base + 2] += c * c;
            }
            for v in &mut acc {
                *v /= blocks as f64;
            }
            acc
        })
        .collect();
    let interval = ens.record_interval();
    let windows: Vec<f64> = (1..=SLOPE_WINDOWS).map(|k| k as f64 * interval).collect();
    let fit = |m: &[f64]| stats::linear_fit(&windows, &m[..SLOPE_WINDOWS]);
    let slope = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| fit(m).1)?;
    let intercept = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| fit(m).0)?;
    let (means, _) = stats::batch_means(&parts)?;
    let expected = (f.transpose() * &noise.gamma * f)[(0, 0)];
    let ratio = slope.value / expected;
    let intercept = ZeroTest::new("increment variance intercept".into(), intercept);
    let slope_test = SlopeTest {
        windows,
        variances: means[..SLOPE_WINDOWS].to_vec(),
        passed: (ratio - 1.0).abs() <= SLOPE_RTOL && intercept.passed,
        slope,
        intercept,
        expected,
        ratio,
    };
    let orthogonality = ORTHOGONALITY_TRIPLES
        .iter()
        .enumerate()
        .map(|(j, &(u, s, t))| {
            let base = SLOPE_WINDOWS + 3 * j;
            let est = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| correlation(&m[base..base + 3]))?;
            Ok(ZeroTest::new(format!("corr(w[{s},{t}], xi[{u}])"), est))
        })
        .collect::<Result<Vec<_>>>()?;
    let base = SLOPE_WINDOWS + 3 * triples;
    let disjoint = ZeroTest::new(
        "corr(w[0,1], w[2,3])".into(),
        stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| correlation(&m[base..base + 3]))?,
    );
    Ok(IncrementReport {
        slope: slope_test,
        orthogonality,
        disjoint,
    })
}

#[derive(Clone, Debug)]
pub struct MarkovTest {
    pub lag_records: usize,
    /// Coefficient on `y_t` in the regression of `y_{t+τ}`.
    pub lead: f64,
    /// Coefficient on `y_{t-τ}`; zero for a Markov process.
    pub past: ZeroTest,
}

#[derive(Clone, Debug)]
pub struct GaussianMarkovReport {
    pub kurtosis: Vec<ZeroTest>,
    pub markov: MarkovTest,
    /// Present when the ensemble carries increments.
    pub independence: Option<Vec<ZeroTest>>,
}

impl GaussianMarkovReport {
    pub fn passed(&self) -> bool {
        self.kurtosis.iter().all(|t| t.passed)
            && self.markov.past.passed
            && self.independence.as_ref().is_none_or(|v| v.iter().all(|t| t.passed))
    }
}

fn excess_kurtosis(m: &[f64]) -> f64 {
    let (m1, m2, m3, m4) = (m[0], m[1], m[2], m[3]);
    let var = m2 - m1 * m1;
    let c4 = m4 - 4.0 * m1 * m3 + 6.0 * m1 * m1 * m2 - 3.0 * m1.powi(4);
    c4 / (var * var) - 3.0
}

/// Past coefficient of `z ~ a x + c y` from the moments
/// `[xx, xy, yy, xz, yz]`; returns `(a, c)`.
fn two_regressor_fit(m: &[f64]) -> (f64, f64) {
    let (xx, xy, yy, xz, yz) = (m[0], m[1], m[2], m[3], m[4]);
    let det = xx * yy - xy * xy;
    ((yy * xz - xy * yz) / det, (xx * yz - xy * xz) / det)
}

/// Gaussianity of linear functionals and the Markov regression
/// `y_{t+τ} = a y_t + c y_{t-τ}` for `y = uᵀξ`, `τ = lag` records.
pub fn gaussian_markov_tests(
    ens: &Ensemble,
    functionals: &[DVector<f64>],
    markov_functional: &DVector<f64>,
    lag: usize,
    increments: Option<(&NoiseCovariance, &DVector<f64>, &DVector<f64>)>,
) -> Result<GaussianMarkovReport> {
    if ens.n_records <= 2 * lag || lag == 0 {
        return Err(Error::InsufficientSamples {
            context: "gaussian_markov_tests",
            have: ens.n_records,
            need: 2 * lag + 1,
        });
    }
    let nf = functionals.len();
    let records = ens.n_records;
    let parts: Vec<Vec<f64>> = (0..ens.n_paths)
        .map(|p| {
            let mut acc = vec![0.0; 4 * nf + 5];
            for r in 0..records {
                let state = ens.state(p, r);
                for (j, fun) in functionals.iter().enumerate() {
                    let y = dot(fun, state);
                    let y2 = y * y;
                    acc[4 * j] += y / records as f64;
                    acc[4 * j + 1] += y2 / records as f64;
                    acc[4 * j + 2] += y2 * y / records as f64;
                    acc[4 * j + 3] += y2 * y2 / records as f64;
                }
            }
            let ys: Vec<f64> = (0..records).map(|r| dot(markov_functional, ens.state(p, r))).collect();
            let count = (records - 2 * lag) as f64;
            let reg = &mut acc[4 * nf..];
            for r in lag..records - lag {
                let (x, y, z) = (ys[r], ys[r - lag], ys[r + lag]);
                reg[0] += x * x / count;
                reg[1] += x * y / count;
                reg[2] += y * y / count;
                reg[3] += x * z / count;
                reg[4] += y * z / count;
            }
            acc
        })
        .collect();
    let kurtosis = (0..nf)
        .map(|j| {
            let est = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| excess_kurtosis(&m[4 * j..4 * j + 4]))?;
            Ok(ZeroTest::new(format!("excess kurtosis of functional {j}"), est))
        })
        .collect::<Result<Vec<_>>>()?;
    let past = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| two_regressor_fit(&m[4 * nf..]).1)?;
    let lead = stats::grouped_jackknife(&parts, JACKKNIFE_GROUPS, |m| two_regressor_fit(&m[4 * nf..]).0)?.value;
    let independence = match increments {
        Some((noise, f, g)) => Some(increment_tests(ens, noise, f, g)?.orthogonality),
        None => None,
    };
    Ok(GaussianMarkovReport {
        kurtosis,
        markov: MarkovTest {
            lag_records: lag,
            lead,
            past: ZeroTest::new(format!("Markov past coefficient at lag {lag}"), past),
        },
        independence,
    })
}

/// `sin(kπx)` on the first component, `k = 1..=count`, cycling through
/// components for systems with `m > 1`.
pub fn sine_functionals(mesh: &Mesh1D, m: usize, count: usize) -> Vec<DVector<f64>> {
    (1..=count)
        .map(|k| {
            let comp = (k - 1) % m;
            DVector::from_fn(mesh.n() * m, |idx, _| {
                if idx % m == comp {
                    (k as f64 * std::f64::consts::PI * mesh.centers()[idx / m]).sin()
                } else {
                    0.0
                }
            })
        })
        .collect()
}

/// Hat function of half-width `width` centred at `center` on component
/// `comp`.
pub fn hat_functional(mesh: &Mesh1D, m: usize, comp: usize, center: f64, width: f64) -> DVector<f64> {
    DVector::from_fn(mesh.n() * m, |idx, _| {
        if idx % m == comp {
            (1.0 - (mesh.centers()[idx / m] - center).abs() / width).max(0.0)
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psd_factor_reproduces_matrix() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_factor(&a);
        assert!((&s * s.transpose() - a).amax() < 1e-14);
        let zero = psd_factor(&DMatrix::zeros(2, 2));
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn kurtosis_of_gaussian_moments() {
        assert!(excess_kurtosis(&[0.0, 2.0, 0.0, 12.0]).abs() < 1e-14);
    }

    #[test]
    fn regression_recovers_coefficients() {
        // z = 0.5 x, x and y uncorrelated with unit variance
        let (a, c) = two_regressor_fit(&[1.0, 0.0, 1.0, 0.5, 0.0]);
        assert!((a - 0.5).abs() < 1e-15 && c.abs() < 1e-15);
    }
}
