//! Thermodynamic and transport inputs of a diffusive system: the entropy
//! density `s(q)`, the mobility `K̃(q)` and the time-reversal parities of
//! the conserved densities.
//!
//! Conventions used throughout the crate:
//!
//! * `theta = s'(q)` is the thermodynamic conjugate of `q`,
//! * `J(q) = -s''(q)^{-1}` is the equilibrium susceptibility,
//! * `K(q) = K̃(q) J(q)` is the Onsager matrix that multiplies `∇θ`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

type ScalarMap = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorMap = Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>;
type MatrixMap = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
type TensorMap = Arc<dyn Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync>;
type PointPredicate = Arc<dyn Fn(&[f64]) -> bool + Send + Sync>;

/// Newton tolerance for [`ThermoModel::q_of_theta`].
pub const NEWTON_TOL: f64 = 1e-12;
/// Iteration cap for [`ThermoModel::q_of_theta`].
pub const NEWTON_MAX_ITER: usize = 50;
/// Largest admissible condition number of `s''(q)`.
pub const DEFAULT_MAX_CONDITION: f64 = 1e12;

/// Single-phase validity region of a model.
#[derive(Clone)]
pub enum Domain {
    Whole,
    /// Open box `lower < q < upper`, componentwise.
    OpenBox { lower: Vec<f64>, upper: Vec<f64> },
    Predicate(PointPredicate),
}

impl Domain {
    pub fn contains(&self, q: &[f64]) -> bool {
        if q.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match self {
            Domain::Whole => true,
            Domain::OpenBox { lower, upper } => q
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(v, (lo, hi))| v > lo && v < hi),
            Domain::Predicate(p) => p(q),
        }
    }
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::Whole => write!(f, "Whole"),
            Domain::OpenBox { lower, upper } => write!(f, "OpenBox({lower:?}, {upper:?})"),
            Domain::Predicate(_) => write!(f, "Predicate"),
        }
    }
}

/// Entropy density, mobility and parities of a system with `m` conserved
/// densities. Immutable once built; cheap to clone.
#[derive(Clone)]
pub struct ThermoModel {
    name: String,
    m: usize,
    entropy: ScalarMap,
    entropy_grad: VectorMap,
    entropy_hess: MatrixMap,
    mobility: MatrixMap,
    mobility_grad: TensorMap,
    parities: Vec<i8>,
    domain: Domain,
    max_condition: f64,
}

impl fmt::Debug for ThermoModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ThermoModel")
            .field("name", &self.name)
            .field("m", &self.m)
            .field("parities", &self.parities)
            .field("domain", &self.domain)
            .finish()
    }
}

/// Builder for custom models. Every derivative is user supplied and
/// checked against central finite differences when [`build`] runs.
///
/// [`build`]: ThermoModelBuilder::build
pub struct ThermoModelBuilder {
    name: String,
    m: usize,
    entropy: Option<ScalarMap>,
    entropy_grad: Option<VectorMap>,
    entropy_hess: Option<MatrixMap>,
    mobility: Option<MatrixMap>,
    mobility_grad: Option<TensorMap>,
    parities: Option<Vec<i8>>,
    domain: Domain,
    check_points: Vec<Vec<f64>>,
    max_condition: f64,
}

impl ThermoModelBuilder {
    pub fn entropy(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.entropy = Some(Arc::new(f));
        self
    }

    pub fn entropy_grad(
        mut self,
        f: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
    ) -> Self {
        self.entropy_grad = Some(Arc::new(f));
        self
    }

    pub fn entropy_hess(
        mut self,
        f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        self.entropy_hess = Some(Arc::new(f));
        self
    }

    pub fn mobility(mut self, f: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.mobility = Some(Arc::new(f));
        self
    }

    /// `f(q)[r]` is `∂K̃/∂q_r` at `q`.
    pub fn mobility_grad(
        mut self,
        f: impl Fn(&[f64]) -> Vec<DMatrix<f64>> + Send + Sync + 'static,
    ) -> Self {
        self.mobility_grad = Some(Arc::new(f));
        self
    }

    pub fn parities(mut self, parities: Vec<i8>) -> Self {
        self.parities = Some(parities);
        self
    }

    pub fn domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    /// Points used by the derivative self-check. Required for predicate
    /// domains; defaults are generated for boxes and the whole space.
    pub fn check_points(mut self, points: Vec<Vec<f64>>) -> Self {
        self.check_points = points;
        self
    }

    pub fn max_condition(mut self, bound: f64) -> Self {
        self.max_condition = bound;
        self
    }

    pub fn build(self) -> Result<ThermoModel> {
        let missing = |what: &str| Error::InconsistentModel {
            model: self.name.clone(),
            detail: format!("{what} not supplied"),
        };
        let model = ThermoModel {
            entropy: self.entropy.clone().ok_or_else(|| missing("entropy"))?,
            entropy_grad: self
                .entropy_grad
                .clone()
                .ok_or_else(|| missing("entropy gradient"))?,
            entropy_hess: self
                .entropy_hess
                .clone()
                .ok_or_else(|| missing("entropy Hessian"))?,
            mobility: self.mobility.clone().ok_or_else(|| missing("mobility"))?,
            mobility_grad: self
                .mobility_grad
                .clone()
                .ok_or_else(|| missing("mobility gradient"))?,
            parities: self.parities.clone().unwrap_or_else(|| vec![1; self.m]),
            name: self.name.clone(),
            m: self.m,
            domain: self.domain.clone(),
            max_condition: self.max_condition,
        };
        if model.m == 0 {
            return Err(model.inconsistent("m must be positive"));
        }
        if model.parities.len() != model.m || model.parities.iter().any(|p| p.abs() != 1) {
            return Err(model.inconsistent("parities must be m values of +1 or -1"));
        }
        let points = if self.check_points.is_empty() {
            default_check_points(&model.domain, model.m).ok_or_else(|| {
                model.inconsistent("predicate domains need explicit check points")
            })?
        } else {
            self.check_points
        };
        for q in &points {
            model.self_check(q)?;
        }
        Ok(model)
    }
}

fn default_check_points(domain: &Domain, m: usize) -> Option<Vec<Vec<f64>>> {
    let fractions = [0.23, 0.5, 0.71];
    match domain {
        Domain::Whole => Some(
            [-0.8, 0.1, 0.9]
                .iter()
                .map(|&c| (0..m).map(|k| c + 0.13 * k as f64).collect())
                .collect(),
        ),
        Domain::OpenBox { lower, upper } => Some(
            fractions
                .iter()
                .map(|&f| {
                    lower
                        .iter()
                        .zip(upper)
                        .enumerate()
                        .map(|(k, (lo, hi))| {
                            let lo = if lo.is_finite() { *lo } else { hi.min(1.0) - 2.0 };
                            let hi = if hi.is_finite() { *hi } else { lo + 2.0 };
                            let g = (f + 0.11 * k as f64).fract();
                            lo + (hi - lo) * g.clamp(0.1, 0.9)
                        })
                        .collect()
                })
                .collect(),
        ),
        Domain::Predicate(_) => None,
    }
}

fn shifted(q: &[f64], k: usize, delta: f64) -> Vec<f64> {
    let mut p = q.to_vec();
    p[k] += delta;
    p
}

fn close(a: f64, b: f64, rtol: f64) -> bool {
    (a - b).abs() <= rtol * a.abs().max(b.abs()).max(1.0)
}

impl ThermoModel {
    pub fn builder(name: impl Into<String>, m: usize) -> ThermoModelBuilder {
        ThermoModelBuilder {
            name: name.into(),
            m,
            entropy: None,
            entropy_grad: None,
            entropy_hess: None,
            mobility: None,
            mobility_grad: None,
            parities: None,
            domain: Domain::Whole,
            check_points: Vec::new(),
            max_condition: DEFAULT_MAX_CONDITION,
        }
    }

    /// Symmetric exclusion process: lattice-gas entropy, unit mobility.
    pub fn sep() -> Self {
        Self::sep_with_mobility(1.0).expect("built-in SEP model is consistent")
    }

    pub fn sep_with_mobility(mobility: f64) -> Result<Self> {
        if !(mobility > 0.0) {
            return Err(Error::InvalidInput("sep: mobility must be positive".into()));
        }
        ThermoModel::builder("sep", 1)
            .entropy(|q| {
                let q = q[0];
                -q * q.ln() - (1.0 - q) * (1.0 - q).ln()
            })
            .entropy_grad(|q| DVector::from_element(1, ((1.0 - q[0]) / q[0]).ln()))
            .entropy_hess(|q| DMatrix::from_element(1, 1, -1.0 / (q[0] * (1.0 - q[0]))))
            .mobility(move |_| DMatrix::from_element(1, 1, mobility))
            .mobility_grad(|_| vec![DMatrix::zeros(1, 1)])
            .domain(Domain::OpenBox {
                lower: vec![0.0],
                upper: vec![1.0],
            })
            .build()
    }

    /// Quadratic entropy, constant mobility: the linear reference theory.
    pub fn gaussian() -> Self {
        Self::gaussian_with(1.0, 1.0).expect("built-in Gaussian model is consistent")
    }

    /// `s(q) = -q²/(2χ)`, `K̃ = mobility`.
    pub fn gaussian_with(susceptibility: f64, mobility: f64) -> Result<Self> {
        if !(susceptibility > 0.0 && mobility > 0.0) {
            return Err(Error::InvalidInput(
                "gaussian: susceptibility and mobility must be positive".into(),
            ));
        }
        let chi = susceptibility;
        ThermoModel::builder("gaussian", 1)
            .entropy(move |q| -q[0] * q[0] / (2.0 * chi))
            .entropy_grad(move |q| DVector::from_element(1, -q[0] / chi))
            .entropy_hess(move |_| DMatrix::from_element(1, 1, -1.0 / chi))
            .mobility(move |_| DMatrix::from_element(1, 1, mobility))
            .mobility_grad(|_| vec![DMatrix::zeros(1, 1)])
            .build()
    }

    pub const TWOCOMP_HESSIAN: [[f64; 2]; 2] = [[2.0, 0.5], [0.5, 1.0]];
    pub const TWOCOMP_ONSAGER: [[f64; 2]; 2] = [[1.0, 0.3], [0.3, 0.8]];

    /// Two coupled densities with `s = -½ qᵀHq` and `K̃ = A H`, so that the
    /// Onsager matrix `K̃J = A` is symmetric by construction.
    pub fn twocomp() -> Self {
        let h = DMatrix::from_fn(2, 2, |i, j| Self::TWOCOMP_HESSIAN[i][j]);
        let a = DMatrix::from_fn(2, 2, |i, j| Self::TWOCOMP_ONSAGER[i][j]);
        Self::twocomp_with(h, a).expect("built-in two-component model is consistent")
    }

    pub fn twocomp_with(hessian: DMatrix<f64>, onsager: DMatrix<f64>) -> Result<Self> {
        let m = hessian.nrows();
        if hessian.shape() != (m, m) || onsager.shape() != (m, m) {
            return Err(Error::InvalidInput("twocomp: H and A must be square and equal size".into()));
        }
        if hessian.clone().cholesky().is_none() || onsager.clone().cholesky().is_none() {
            return Err(Error::InvalidInput(
                "twocomp: H and A must be symmetric positive definite".into(),
            ));
        }
        let mobility = &onsager * &hessian;
        let (h1, h2) = (hessian.clone(), hessian.clone());
        ThermoModel::builder("twocomp", m)
            .entropy(move |q| {
                let q = DVector::from_column_slice(q);
                -0.5 * q.dot(&(&h1 * &q))
            })
            .entropy_grad(move |q| -(&h2 * DVector::from_column_slice(q)))
            .entropy_hess(move |_| -hessian.clone())
            .mobility(move |_| mobility.clone())
            .mobility_grad(move |_| vec![DMatrix::zeros(m, m); m])
            .build()
    }

    /// Quadratic entropy with mobility `K̃(q) = q` on `q > 0`; its steady
    /// profiles are not linear, which exercises the `K̃'` terms.
    pub fn linear_mobility() -> Self {
        ThermoModel::builder("linear-mobility", 1)
            .entropy(|q| -0.5 * q[0] * q[0])
            .entropy_grad(|q| DVector::from_element(1, -q[0]))
            .entropy_hess(|_| DMatrix::from_element(1, 1, -1.0))
            .mobility(|q| DMatrix::from_element(1, 1, q[0]))
            .mobility_grad(|_| vec![DMatrix::from_element(1, 1, 1.0)])
            .domain(Domain::OpenBox {
                lower: vec![0.0],
                upper: vec![f64::INFINITY],
            })
            .check_points(vec![vec![0.5], vec![1.3], vec![2.0]])
            .build()
            .expect("built-in linear-mobility model is consistent")
    }

    /// Same model with replaced time-reversal parities.
    pub fn with_parities(&self, parities: Vec<i8>) -> Result<Self> {
        if parities.len() != self.m || parities.iter().any(|p| p.abs() != 1) {
            return Err(self.inconsistent("parities must be m values of +1 or -1"));
        }
        let mut out = self.clone();
        out.parities = parities;
        Ok(out)
    }

    /// Diagnostic model whose Onsager matrix carries an injected
    /// antisymmetric part `E` with `max|E - Eᵀ| = magnitude` in the (0,1)
    /// entry pair: `K̃ ← K̃ + E J⁻¹`, hence `K ← K + E`.
    pub fn with_antisymmetric_onsager(&self, magnitude: f64) -> Result<Self> {
        if self.m < 2 {
            return Err(self.inconsistent("antisymmetric injection needs m >= 2"));
        }
        let m = self.m;
        let mut e = DMatrix::zeros(m, m);
        e[(0, 1)] = 0.5 * magnitude;
        e[(1, 0)] = -0.5 * magnitude;
        let hess = self.entropy_hess.clone();
        let base = self.mobility.clone();
        let base_grad = self.mobility_grad.clone();
        let e1 = e.clone();
        let hess1 = hess.clone();
        let mut out = self.clone();
        out.name = format!("{}+antisym({magnitude:e})", self.name);
        // J⁻¹ = -s''
        out.mobility = Arc::new(move |q| base(q) - &e1 * hess1(q));
        out.mobility_grad = Arc::new(move |q| {
            let mut grads = base_grad(q);
            for (r, g) in grads.iter_mut().enumerate() {
                let eps = 1e-6 * q[r].abs().max(1.0);
                let dh = (hess(&shifted(q, r, eps)) - hess(&shifted(q, r, -eps))) / (2.0 * eps);
                *g -= &e * dh;
            }
            grads
        });
        Ok(out)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn parities(&self) -> &[i8] {
        &self.parities
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// A fixed interior point of the domain, used as a Newton start.
    pub fn reference_point(&self) -> Vec<f64> {
        match &self.domain {
            Domain::Whole | Domain::Predicate(_) => vec![0.0; self.m],
            Domain::OpenBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
                    (true, true) => 0.5 * (lo + hi),
                    (true, false) => lo + 1.0,
                    (false, true) => hi - 1.0,
                    (false, false) => 0.0,
                })
                .collect(),
        }
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.len() == self.m && self.domain.contains(q)
    }

    fn inconsistent(&self, detail: impl Into<String>) -> Error {
        Error::InconsistentModel {
            model: self.name.clone(),
            detail: detail.into(),
        }
    }

    pub fn check_domain(&self, q: &[f64]) -> Result<()> {
        if self.contains(q) {
            Ok(())
        } else {
            Err(Error::Domain {
                model: self.name.clone(),
                point: q.to_vec(),
            })
        }
    }

    pub fn entropy(&self, q: &[f64]) -> Result<f64> {
        self.check_domain(q)?;
        Ok((self.entropy)(q))
    }

    /// `θ = s'(q)`.
    pub fn theta_of_q(&self, q: &[f64]) -> Result<DVector<f64>> {
        self.check_domain(q)?;
        Ok((self.entropy_grad)(q))
    }

    pub fn entropy_hessian(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_domain(q)?;
        Ok((self.entropy_hess)(q))
    }

    pub fn mobility(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_domain(q)?;
        Ok((self.mobility)(q))
    }

    /// `[∂K̃/∂q_r]` for `r = 0..m`.
    pub fn mobility_grad(&self, q: &[f64]) -> Result<Vec<DMatrix<f64>>> {
        self.check_domain(q)?;
        Ok((self.mobility_grad)(q))
    }

    /// `J(q) = -s''(q)^{-1}`, symmetric positive definite.
    pub fn susceptibility(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let neg_hess = -self.entropy_hessian(q)?;
        let sym = 0.5 * (&neg_hess + neg_hess.transpose());
        let eig = sym.clone().symmetric_eigen();
        let (lo, hi) = eig
            .eigenvalues
            .iter()
            .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= self.max_condition) {
            return Err(Error::SingularHessian {
                model: self.name.clone(),
                point: q.to_vec(),
                condition,
            });
        }
        let inv = sym
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::SingularHessian {
                model: self.name.clone(),
                point: q.to_vec(),
                condition,
            })?;
        Ok(0.5 * (&inv + inv.transpose()))
    }

    /// Onsager matrix in θ-variables, `K = K̃(q) J(q)`.
    pub fn onsager_matrix(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        let j = self.susceptibility(q)?;
        Ok(self.mobility(q)? * j)
    }

    /// Inverse of [`theta_of_q`](Self::theta_of_q) by damped Newton.
    pub fn q_of_theta(&self, theta: &[f64], q_guess: &[f64]) -> Result<DVector<f64>> {
        const CONTEXT: &str = "q_of_theta";
        if theta.len() != self.m {
            return Err(Error::InvalidInput(format!(
                "q_of_theta: theta has length {}, expected {}",
                theta.len(),
                self.m
            )));
        }
        self.check_domain(q_guess)?;
        let target = DVector::from_column_slice(theta);
        let mut q = DVector::from_column_slice(q_guess);
        let mut g = (self.entropy_grad)(q.as_slice()) - &target;
        let tol = NEWTON_TOL * target.amax().max(1.0);
        for _ in 0..NEWTON_MAX_ITER {
            if g.amax() < tol {
                return Ok(q);
            }
            let hess = (self.entropy_hess)(q.as_slice());
            let step = hess
                .lu()
                .solve(&(-&g))
                .ok_or_else(|| Error::SingularHessian {
                    model: self.name.clone(),
                    point: q.as_slice().to_vec(),
                    condition: f64::INFINITY,
                })?;
            let mut lambda = 1.0;
            let mut accepted = None;
            let mut inside_seen = false;
            for _ in 0..60 {
                let trial = &q + lambda * &step;
                if self.domain.contains(trial.as_slice()) {
                    inside_seen = true;
                    let g_trial = (self.entropy_grad)(trial.as_slice()) - &target;
                    if g_trial.amax() < g.amax() {
                        accepted = Some((trial, g_trial));
                        break;
                    }
                }
                lambda *= 0.5;
            }
            match accepted {
                Some((trial, g_trial)) => {
                    q = trial;
                    g = g_trial;
                }
                None if !inside_seen => return Err(Error::DomainEscape { context: CONTEXT }),
                None => break,
            }
        }
        if g.amax() < tol {
            Ok(q)
        } else {
            Err(Error::NoConvergence {
                context: CONTEXT,
                iterations: NEWTON_MAX_ITER,
                residual: g.amax(),
            })
        }
    }

    /// `max_kl |K_kl(θ) - R_k R_l K_lk(Rθ)|` with `θ = s'(q)`.
    pub fn casimir_defect(&self, q: &[f64]) -> Result<f64> {
        let theta = self.theta_of_q(q)?;
        let reversed: Vec<f64> = theta
            .iter()
            .zip(&self.parities)
            .map(|(t, &r)| f64::from(r) * t)
            .collect();
        let q_rev = self.q_of_theta(&reversed, q)?;
        let k = self.onsager_matrix(q)?;
        let k_rev = self.onsager_matrix(q_rev.as_slice())?;
        let mut defect = 0.0_f64;
        for a in 0..self.m {
            for b in 0..self.m {
                let sign = f64::from(self.parities[a] * self.parities[b]);
                defect = defect.max((k[(a, b)] - sign * k_rev[(b, a)]).abs());
            }
        }
        Ok(defect)
    }

    /// Compares user derivatives against central differences at `q`.
    fn self_check(&self, q: &[f64]) -> Result<()> {
        const RTOL: f64 = 1e-6;
        self.check_domain(q)?;
        let m = self.m;
        let grad = (self.entropy_grad)(q);
        let hess = (self.entropy_hess)(q);
        let mob = (self.mobility)(q);
        let mob_grad = (self.mobility_grad)(q);
        if grad.len() != m || hess.shape() != (m, m) || mob.shape() != (m, m) {
            return Err(self.inconsistent("derivative shapes do not match m"));
        }
        if mob_grad.len() != m || mob_grad.iter().any(|g| g.shape() != (m, m)) {
            return Err(self.inconsistent("mobility gradient must hold m matrices of size m x m"));
        }
        for k in 0..m {
            let eps = 1e-5 * q[k].abs().max(1e-2);
            let (qp, qm) = (shifted(q, k, eps), shifted(q, k, -eps));
            if !(self.domain.contains(&qp) && self.domain.contains(&qm)) {
                return Err(self.inconsistent(format!("check point {q:?} too close to the boundary")));
            }
            let fd = ((self.entropy)(&qp) - (self.entropy)(&qm)) / (2.0 * eps);
            if !close(fd, grad[k], RTOL) {
                return Err(self.inconsistent(format!(
                    "entropy gradient component {k} = {} disagrees with finite difference {fd} at {q:?}",
                    grad[k]
                )));
            }
            let dgrad = ((self.entropy_grad)(&qp) - (self.entropy_grad)(&qm)) / (2.0 * eps);
            let dmob = ((self.mobility)(&qp) - (self.mobility)(&qm)) / (2.0 * eps);
            for i in 0..m {
                if !close(dgrad[i], hess[(i, k)], RTOL) {
                    return Err(self.inconsistent(format!(
                        "entropy Hessian entry ({i},{k}) disagrees with finite difference at {q:?}"
                    )));
                }
                for j in 0..m {
                    if !close(dmob[(i, j)], mob_grad[k][(i, j)], RTOL) {
                        return Err(self.inconsistent(format!(
                            "mobility gradient d/dq{k} entry ({i},{j}) disagrees with finite difference at {q:?}"
                        )));
                    }
                }
            }
        }
        if (&hess - hess.transpose()).amax() > 1e-12 * hess.amax().max(1.0) {
            return Err(self.inconsistent(format!("entropy Hessian not symmetric at {q:?}")));
        }
        if (-hess).cholesky().is_none() {
            return Err(self.inconsistent(format!("entropy not strictly concave at {q:?}")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: DVector<f64>) -> f64 {
        v[0]
    }

    #[test]
    fn sep_theta_examples() {
        let sep = ThermoModel::sep();
        assert!(scalar(sep.theta_of_q(&[0.5]).unwrap()).abs() < 1e-15);
        let t = scalar(sep.theta_of_q(&[0.3]).unwrap());
        assert!((t - (7.0f64 / 3.0).ln()).abs() < 1e-14);
        assert!((t - 0.8473).abs() < 1e-4);
    }

    #[test]
    fn gaussian_theta_and_inverse() {
        let g = ThermoModel::gaussian();
        assert_eq!(scalar(g.theta_of_q(&[0.7]).unwrap()), -0.7);
        let q = g.q_of_theta(&[-0.7], &[0.0]).unwrap();
        assert!((q[0] - 0.7).abs() < 1e-14);
        assert_eq!(g.susceptibility(&[3.2]).unwrap()[(0, 0)], 1.0);
        assert_eq!(g.onsager_matrix(&[-1.0]).unwrap()[(0, 0)], 1.0);
    }

    #[test]
    fn sep_susceptibility_and_onsager() {
        let sep = ThermoModel::sep();
        assert!((sep.susceptibility(&[0.5]).unwrap()[(0, 0)] - 0.25).abs() < 1e-15);
        assert!((sep.susceptibility(&[0.3]).unwrap()[(0, 0)] - 0.21).abs() < 1e-15);
        assert!((sep.onsager_matrix(&[0.5]).unwrap()[(0, 0)] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn sep_inverse_examples() {
        let sep = ThermoModel::sep();
        let q = sep.q_of_theta(&[0.0], &[0.2]).unwrap();
        assert!((q[0] - 0.5).abs() < 1e-12);
        let q = sep.q_of_theta(&[(7.0f64 / 3.0).ln()], &[0.5]).unwrap();
        assert!((q[0] - 0.3).abs() < 1e-12);
        // far in the tail: the damped step must keep iterates inside (0,1)
        let q = sep.q_of_theta(&[12.0], &[0.5]).unwrap();
        assert!((q[0] - 1.0 / (1.0 + 12f64.exp())).abs() < 1e-15);
    }

    #[test]
    fn domain_is_enforced() {
        let sep = ThermoModel::sep();
        for bad in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(sep.theta_of_q(&[bad]), Err(Error::Domain { .. })));
        }
        assert!(sep.theta_of_q(&[0.3, 0.2]).is_err());
    }

    #[test]
    fn twocomp_onsager_is_the_chosen_matrix() {
        let tc = ThermoModel::twocomp();
        let k = tc.onsager_matrix(&[0.4, -1.2]).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((k[(i, j)] - ThermoModel::TWOCOMP_ONSAGER[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn casimir_defects() {
        let sep = ThermoModel::sep();
        assert!(sep.casimir_defect(&[0.3]).unwrap() < 1e-12);
        let tc = ThermoModel::twocomp();
        assert!(tc.casimir_defect(&[0.2, 0.1]).unwrap() < 1e-14);
        let odd = tc.with_parities(vec![1, -1]).unwrap();
        // K constant: the odd pair flips the sign of the off-diagonal entries
        let d = odd.casimir_defect(&[0.2, 0.1]).unwrap();
        assert!((d - 0.6).abs() < 1e-12, "defect {d}");
    }

    #[test]
    fn antisymmetric_injection_shifts_onsager_matrix() {
        let tc = ThermoModel::twocomp().with_antisymmetric_onsager(1e-3).unwrap();
        let k = tc.onsager_matrix(&[0.0, 0.0]).unwrap();
        assert!(((&k - k.transpose()).amax() - 1e-3).abs() < 1e-14);
    }

    #[test]
    fn inconsistent_derivative_is_caught() {
        let err = ThermoModel::builder("bad", 1)
            .entropy(|q| -q[0] * q[0])
            .entropy_grad(|q| DVector::from_element(1, -q[0]))
            .entropy_hess(|_| DMatrix::from_element(1, 1, -2.0))
            .mobility(|_| DMatrix::from_element(1, 1, 1.0))
            .mobility_grad(|_| vec![DMatrix::zeros(1, 1)])
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InconsistentModel { .. }));
    }

    #[test]
    fn convex_entropy_is_rejected() {
        let err = ThermoModel::builder("convex", 1)
            .entropy(|q| q[0] * q[0])
            .entropy_grad(|q| DVector::from_element(1, 2.0 * q[0]))
            .entropy_hess(|_| DMatrix::from_element(1, 1, 2.0))
            .mobility(|_| DMatrix::from_element(1, 1, 1.0))
            .mobility_grad(|_| vec![DMatrix::zeros(1, 1)])
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::InconsistentModel { .. }));
    }

    #[test]
    fn singular_hessian_reported() {
        let flat = ThermoModel::gaussian_with(1e14, 1.0).unwrap();
        // J = 1e14, condition fine for m = 1; build a 2x2 ill-conditioned case
        assert!(flat.susceptibility(&[0.0]).is_ok());
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-14]);
        let tc = ThermoModel::twocomp_with(h, DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            tc.susceptibility(&[0.0, 0.0]),
            Err(Error::SingularHessian { .. })
        ));
    }

    fn sample(model: &ThermoModel, u: &[f64]) -> Vec<f64> {
        match model.domain() {
            Domain::OpenBox { lower, upper } => lower
                .iter()
                .zip(upper)
                .zip(u)
                .map(|((lo, hi), u)| {
                    let hi = if hi.is_finite() { *hi } else { lo + 4.0 };
                    lo + (hi - lo) * (0.02 + 0.96 * u)
                })
                .collect(),
            _ => u.iter().map(|u| 6.0 * u - 3.0).collect(),
        }
    }

    fn builtins() -> Vec<ThermoModel> {
        vec![
            ThermoModel::sep(),
            ThermoModel::gaussian(),
            ThermoModel::twocomp(),
            ThermoModel::linear_mobility(),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn susceptibility_is_spd(u in proptest::collection::vec(0.0f64..1.0, 2)) {
            for model in builtins() {
                let q = sample(&model, &u[..model.m()]);
                let j = model.susceptibility(&q).unwrap();
                prop_assert!((&j - j.transpose()).amax() < 1e-12);
                let min_eig = j.symmetric_eigen().eigenvalues.min();
                prop_assert!(min_eig > 0.0);
            }
        }

        #[test]
        fn theta_round_trip(u in proptest::collection::vec(0.0f64..1.0, 2)) {
            for model in builtins() {
                let q = sample(&model, &u[..model.m()]);
                let theta = model.theta_of_q(&q).unwrap();
                let guess = sample(&model, &vec![0.5; model.m()]);
                let back = model.q_of_theta(theta.as_slice(), &guess).unwrap();
                for (a, b) in back.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-10, "{a} vs {b} for {}", model.name());
                }
            }
        }

        #[test]
        fn derivatives_match_finite_differences(u in proptest::collection::vec(0.05f64..0.95, 2)) {
            for model in builtins() {
                let q = sample(&model, &u[..model.m()]);
                let grad = model.theta_of_q(&q).unwrap();
                let hess = model.entropy_hessian(&q).unwrap();
                for k in 0..model.m() {
                    let eps = 1e-5 * q[k].abs().max(1e-2);
                    let mut qp = q.clone();
                    qp[k] += eps;
                    let mut qm = q.clone();
                    qm[k] -= eps;
                    let fd = (model.entropy(&qp).unwrap() - model.entropy(&qm).unwrap()) / (2.0 * eps);
                    prop_assert!((fd - grad[k]).abs() <= 1e-6 * grad[k].abs().max(1.0));
                    let dg = (model.theta_of_q(&qp).unwrap() - model.theta_of_q(&qm).unwrap()) / (2.0 * eps);
                    for i in 0..model.m() {
                        prop_assert!((dg[i] - hess[(i, k)]).abs() <= 1e-6 * hess[(i, k)].abs().max(1.0));
                    }
                }
            }
        }

        #[test]
        fn sep_closed_forms(q in 0.01f64..0.99) {
            let sep = ThermoModel::sep();
            let theta = sep.theta_of_q(&[q]).unwrap()[0];
            prop_assert!((theta - ((1.0 - q) / q).ln()).abs() < 1e-12);
            prop_assert!((sep.susceptibility(&[q]).unwrap()[(0, 0)] - q * (1.0 - q)).abs() < 1e-12);
            prop_assert!((sep.onsager_matrix(&[q]).unwrap()[(0, 0)] - q * (1.0 - q)).abs() < 1e-12);
        }
    }
}
