//! Reservoir-driven steady states of `∂q/∂t = ∇·(K̃(q)∇q)` on the unit
//! interval, and a time stepper for relaxation runs.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fvm::{self, Field};
use crate::linalg::BandedLu;
pub use crate::mesh::Mesh1D;
use crate::thermo::ThermoModel;

/// Flux-imbalance tolerance for the steady solver.
pub const STEADY_TOL: f64 = 1e-11;
pub const STEADY_MAX_ITER: usize = 100;
/// Safety factor applied to the explicit diffusion limit `h²/(2 max|K̃|)`.
pub const EXPLICIT_SAFETY: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundaryKind {
    /// Reservoir values given as conjugate variables `θ_J`.
    Theta,
    /// Reservoir values given as densities.
    Q,
}

/// Reservoir values at `x = 0` and `x = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryData {
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub kind: BoundaryKind,
}

impl BoundaryData {
    pub fn densities(left: Vec<f64>, right: Vec<f64>) -> Self {
        BoundaryData {
            left,
            right,
            kind: BoundaryKind::Q,
        }
    }

    pub fn conjugates(left: Vec<f64>, right: Vec<f64>) -> Self {
        BoundaryData {
            left,
            right,
            kind: BoundaryKind::Theta,
        }
    }

    /// Wall densities; conjugate data is inverted through the model.
    pub fn wall_densities(&self, model: &ThermoModel) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = model.m();
        if self.left.len() != m || self.right.len() != m {
            return Err(Error::InvalidInput(format!(
                "boundary values must have {m} components"
            )));
        }
        match self.kind {
            BoundaryKind::Q => {
                model.check_domain(&self.left)?;
                model.check_domain(&self.right)?;
                Ok((self.left.clone(), self.right.clone()))
            }
            BoundaryKind::Theta => {
                let guess = model.reference_point();
                let l = model.q_of_theta(&self.left, &guess)?;
                let r = model.q_of_theta(&self.right, &guess)?;
                Ok((l.as_slice().to_vec(), r.as_slice().to_vec()))
            }
        }
    }
}

/// Discrete steady state together with its conjugate field and currents.
#[derive(Clone, Debug)]
pub struct SteadyProfile {
    pub mesh: Mesh1D,
    /// `n x m`, row `i` is `q(x_i)`.
    pub q: DMatrix<f64>,
    /// `n x m`, row `i` is `θ(x_i) = s'(q(x_i))`.
    pub theta: DMatrix<f64>,
    /// `(n+1) x m` face currents.
    pub j_faces: DMatrix<f64>,
    /// `max_i |j_{i+1} - j_i|`.
    pub residual_norm: f64,
    pub iterations: usize,
    pub fallback_used: bool,
    pub q_left: Vec<f64>,
    pub q_right: Vec<f64>,
}

impl SteadyProfile {
    pub fn m(&self) -> usize {
        self.q.ncols()
    }

    pub fn n(&self) -> usize {
        self.q.nrows()
    }

    pub fn field(&self) -> Field<'_> {
        Field {
            q: &self.q,
            left: &self.q_left,
            right: &self.q_right,
        }
    }

    /// Face currents averaged onto cell centres.
    pub fn currents_at_centers(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n(), self.m(), |i, k| {
            0.5 * (self.j_faces[(i, k)] + self.j_faces[(i + 1, k)])
        })
    }

    /// Wraps a converged cell field, recomputing θ, currents and residual.
    pub fn from_cells(
        model: &ThermoModel,
        mesh: &Mesh1D,
        q_left: Vec<f64>,
        q_right: Vec<f64>,
        q: DMatrix<f64>,
    ) -> Result<Self> {
        let field = Field {
            q: &q,
            left: &q_left,
            right: &q_right,
        };
        let j_faces = fvm::face_fluxes(model, mesh, field)?;
        let residual_norm = imbalance(&j_faces);
        let mut theta = DMatrix::zeros(q.nrows(), q.ncols());
        for i in 0..q.nrows() {
            let row: Vec<f64> = q.row(i).iter().copied().collect();
            theta.set_row(i, &model.theta_of_q(&row)?.transpose());
        }
        Ok(SteadyProfile {
            mesh: mesh.clone(),
            q,
            theta,
            j_faces,
            residual_norm,
            iterations: 0,
            fallback_used: false,
            q_left,
            q_right,
        })
    }
}

fn imbalance(j_faces: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for f in 0..j_faces.nrows() - 1 {
        for k in 0..j_faces.ncols() {
            worst = worst.max((j_faces[(f + 1, k)] - j_faces[(f, k)]).abs());
        }
    }
    worst
}

#[derive(Clone, Copy, Debug)]
pub struct SteadyOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SteadyOptions {
    fn default() -> Self {
        SteadyOptions {
            tol: STEADY_TOL,
            max_iter: STEADY_MAX_ITER,
        }
    }
}

fn in_domain(model: &ThermoModel, q: &DMatrix<f64>) -> bool {
    (0..q.nrows()).all(|i| {
        let row: Vec<f64> = q.row(i).iter().copied().collect();
        model.contains(&row)
    })
}

fn flatten(q: &DMatrix<f64>) -> DVector<f64> {
    // cell-major: (i, k) -> i*m + k, i.e. the transpose in column-major storage
    DVector::from_iterator(q.len(), q.transpose().iter().copied())
}

fn unflatten(v: &DVector<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, m, |i, k| v[i * m + k])
}

struct Walls<'a> {
    model: &'a ThermoModel,
    mesh: &'a Mesh1D,
    left: &'a [f64],
    right: &'a [f64],
}

impl Walls<'_> {
    fn field<'b>(&'b self, q: &'b DMatrix<f64>) -> Field<'b> {
        Field {
            q,
            left: self.left,
            right: self.right,
        }
    }

    /// Flux imbalance `h F_h(q)` and its max norm.
    fn residual(&self, q: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
        let f = fvm::rhs(self.model, self.mesh, self.field(q))? * self.mesh.h();
        let norm = f.amax();
        Ok((f, norm))
    }

    /// `L(q)` as a banded LU-ready dense matrix, scaled by `h`.
    fn jacobian(&self, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let jac = fvm::face_jacobians(self.model, self.mesh, self.field(q))?;
        Ok(fvm::generator(self.mesh, self.model.m(), &jac) * self.mesh.h())
    }

    fn newton(
        &self,
        mut q: DMatrix<f64>,
        opts: &SteadyOptions,
    ) -> std::result::Result<(DMatrix<f64>, usize), (DMatrix<f64>, Error)> {
        const CONTEXT: &str = "solve_steady";
        let (n, m) = (q.nrows(), q.ncols());
        let (mut res, mut norm) = match self.residual(&q) {
            Ok(r) => r,
            Err(e) => return Err((q, e)),
        };
        for it in 0..opts.max_iter {
            if norm < opts.tol {
                return Ok((q, it));
            }
            let jac = match self.jacobian(&q) {
                Ok(j) => j,
                Err(e) => return Err((q, e)),
            };
            let lu = match BandedLu::factor(&jac) {
                Ok(lu) => lu,
                Err(e) => return Err((q, e)),
            };
            let step = unflatten(&lu.solve(&(-flatten(&res))), n, m);
            let mut lambda = 1.0;
            let mut accepted = None;
            let mut inside_seen = false;
            for _ in 0..40 {
                let trial = &q + lambda * &step;
                if in_domain(self.model, &trial) {
                    inside_seen = true;
                    if let Ok((r, nr)) = self.residual(&trial) {
                        if nr < norm {
                            accepted = Some((trial, r, nr));
                            break;
                        }
                    }
                }
                lambda *= 0.5;
            }
            match accepted {
                Some((trial, r, nr)) => {
                    q = trial;
                    res = r;
                    norm = nr;
                }
                None if !inside_seen => {
                    return Err((q, Error::DomainEscape { context: CONTEXT }))
                }
                None => {
                    // Residual at round-off level cannot decrease further.
                    if norm < opts.tol * 10.0 {
                        return Ok((q, it));
                    }
                    let err = Error::NoConvergence {
                        context: CONTEXT,
                        iterations: it,
                        residual: norm,
                    };
                    return Err((q, err));
                }
            }
        }
        if norm < opts.tol {
            Ok((q, opts.max_iter))
        } else {
            Err((
                q,
                Error::NoConvergence {
                    context: CONTEXT,
                    iterations: opts.max_iter,
                    residual: norm,
                },
            ))
        }
    }

    /// One backward-Euler step `y - q - dt F(y) = 0` solved by Newton.
    fn implicit_step(&self, q: &DMatrix<f64>, dt: f64) -> Result<DMatrix<f64>> {
        const CONTEXT: &str = "evolve (implicit)";
        let (n, m) = (q.nrows(), q.ncols());
        let h = self.mesh.h();
        let scale = q.amax().max(1.0);
        let tol = 1e-13 * scale;
        let mut y = q.clone();
        let g = |y: &DMatrix<f64>| -> Result<DMatrix<f64>> {
            let f = fvm::rhs(self.model, self.mesh, self.field(y))?;
            Ok(y - q - dt * f)
        };
        let mut gy = g(&y)?;
        for _ in 0..50 {
            if gy.amax() < tol {
                return Ok(y);
            }
            let jac = self.jacobian(&y)? * (-dt / h) + DMatrix::identity(n * m, n * m);
            let lu = BandedLu::factor(&jac)?;
            let step = unflatten(&lu.solve(&(-flatten(&gy))), n, m);
            let mut lambda = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let trial = &y + lambda * &step;
                if in_domain(self.model, &trial) {
                    let gt = g(&trial)?;
                    if gt.amax() < gy.amax() {
                        y = trial;
                        gy = gt;
                        moved = true;
                        break;
                    }
                }
                lambda *= 0.5;
            }
            if !moved {
                if gy.amax() < 100.0 * tol {
                    return Ok(y);
                }
                if !in_domain(self.model, &(&y + 1e-12 * &step)) {
                    return Err(Error::DomainEscape { context: CONTEXT });
                }
                break;
            }
        }
        if gy.amax() < 100.0 * tol {
            Ok(y)
        } else {
            Err(Error::NoConvergence {
                context: CONTEXT,
                iterations: 50,
                residual: gy.amax(),
            })
        }
    }
}

/// Linear interpolation of the wall densities onto the cell centres.
pub fn linear_guess(mesh: &Mesh1D, left: &[f64], right: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(mesh.n(), left.len(), |i, k| {
        let x = mesh.centers()[i];
        left[k] * (1.0 - x) + right[k] * x
    })
}

pub fn solve_steady(model: &ThermoModel, mesh: &Mesh1D, bc: &BoundaryData) -> Result<SteadyProfile> {
    solve_steady_with(model, mesh, bc, &SteadyOptions::default())
}

/// Newton on the flux-imbalance residual, starting from the linear
/// interpolation of the wall values. Falls back to implicit pseudo-time
/// marching when Newton stalls.
pub fn solve_steady_with(
    model: &ThermoModel,
    mesh: &Mesh1D,
    bc: &BoundaryData,
    opts: &SteadyOptions,
) -> Result<SteadyProfile> {
    let (left, right) = bc.wall_densities(model)?;
    let walls = Walls {
        model,
        mesh,
        left: &left,
        right: &right,
    };
    let guess = linear_guess(mesh, &left, &right);
    let (q, iterations, fallback_used) = match walls.newton(guess, opts) {
        Ok((q, it)) => (q, it, false),
        Err((last, first_err)) => {
            let marched = pseudo_time_march(&walls, last).map_err(|_| first_err.clone())?;
            match walls.newton(marched, opts) {
                Ok((q, it)) => (q, it, true),
                Err((_, e)) => return Err(e),
            }
        }
    };
    let mut profile = SteadyProfile::from_cells(model, mesh, left, right, q)?;
    profile.iterations = iterations;
    profile.fallback_used = fallback_used;
    Ok(profile)
}

fn pseudo_time_march(walls: &Walls<'_>, mut q: DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !in_domain(walls.model, &q) {
        q = linear_guess(walls.mesh, walls.left, walls.right);
    }
    let h = walls.mesh.h();
    let mut dt = h * h;
    for _ in 0..400 {
        match walls.implicit_step(&q, dt) {
            Ok(next) => {
                q = next;
                dt = (dt * 2.0).min(1e3);
            }
            Err(_) => {
                dt *= 0.25;
                if dt < 1e-14 {
                    break;
                }
                continue;
            }
        }
        if walls.residual(&q)?.1 < 1e-6 {
            return Ok(q);
        }
    }
    Err(Error::NoConvergence {
        context: "pseudo-time marching",
        iterations: 400,
        residual: walls.residual(&q)?.1,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TimeScheme {
    #[default]
    Explicit,
    Implicit,
}

/// Largest explicit step, `safety * h² / (2 max|K̃|)` with `max|K̃|` the
/// largest row-sum norm of the face mobilities.
pub fn explicit_stability_bound(model: &ThermoModel, mesh: &Mesh1D, field: Field<'_>) -> Result<f64> {
    let mut worst = 0.0_f64;
    for f in 0..=mesh.n() {
        let k = model.mobility(&field.face_mean(f))?;
        let norm = k
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        worst = worst.max(norm);
    }
    Ok(EXPLICIT_SAFETY * mesh.h() * mesh.h() / (2.0 * worst))
}

/// Integrates `steps` steps from `q0`; returns `steps + 1` states
/// including the initial one.
pub fn evolve(
    model: &ThermoModel,
    mesh: &Mesh1D,
    bc: &BoundaryData,
    q0: &DMatrix<f64>,
    dt: f64,
    steps: usize,
    scheme: TimeScheme,
) -> Result<Vec<DMatrix<f64>>> {
    if q0.nrows() != mesh.n() || q0.ncols() != model.m() {
        return Err(Error::InvalidInput("evolve: q0 must be n x m".into()));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput("evolve: dt must be positive".into()));
    }
    let (left, right) = bc.wall_densities(model)?;
    let walls = Walls {
        model,
        mesh,
        left: &left,
        right: &right,
    };
    if !in_domain(model, q0) {
        return Err(Error::DomainEscape { context: "evolve" });
    }
    let mut out = Vec::with_capacity(steps + 1);
    out.push(q0.clone());
    let mut q = q0.clone();
    for _ in 0..steps {
        q = match scheme {
            TimeScheme::Explicit => {
                let bound = explicit_stability_bound(model, mesh, walls.field(&q))?;
                if dt > bound * (1.0 + 1e-12) {
                    return Err(Error::StabilityViolation {
                        context: "evolve (explicit)",
                        dt,
                        bound,
                    });
                }
                let f = fvm::rhs(model, mesh, walls.field(&q))?;
                &q + dt * f
            }
            TimeScheme::Implicit => walls.implicit_step(&q, dt)?,
        };
        if !in_domain(model, &q) {
            return Err(Error::DomainEscape { context: "evolve" });
        }
        out.push(q.clone());
    }
    Ok(out)
}

/// Face currents of a steady profile, `(n+1) x m`.
pub fn steady_current(model: &ThermoModel, profile: &SteadyProfile) -> Result<DMatrix<f64>> {
    fvm::face_fluxes(model, &profile.mesh, profile.field())
}

/// Steady state from the conjugate-variable form `∇·(K(θ)∇θ) = 0`,
/// discretised with face-mean `θ` for `K`. Returns cell densities.
///
/// This is a different second-order discretisation from
/// [`solve_steady`]; the two agree to `O(h²)`.
pub fn solve_steady_theta_form(
    model: &ThermoModel,
    mesh: &Mesh1D,
    bc: &BoundaryData,
) -> Result<DMatrix<f64>> {
    const CONTEXT: &str = "solve_steady_theta_form";
    let (ql, qr) = bc.wall_densities(model)?;
    let tl = model.theta_of_q(&ql)?;
    let tr = model.theta_of_q(&qr)?;
    let (n, m) = (mesh.n(), model.m());
    let guess_q = model.reference_point();
    let residual = |theta: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let field = Field {
            q: theta,
            left: tl.as_slice(),
            right: tr.as_slice(),
        };
        let mut j = DMatrix::zeros(n + 1, m);
        for f in 0..=n {
            let (a, b) = field.face_pair(f);
            let q_face = model.q_of_theta(&field.face_mean(f), &guess_q)?;
            let k = model.onsager_matrix(q_face.as_slice())?;
            let d = fvm::face_distance(mesh, f);
            let grad = DVector::from_iterator(m, a.iter().zip(&b).map(|(x, y)| (y - x) / d));
            j.set_row(f, &(k * grad).transpose());
        }
        Ok(fvm::divergence(mesh, &j) * mesh.h())
    };
    let mut theta = DMatrix::from_fn(n, m, |i, k| {
        let x = mesh.centers()[i];
        tl[k] * (1.0 - x) + tr[k] * x
    });
    let mut res = residual(&theta)?;
    for _ in 0..STEADY_MAX_ITER {
        if res.amax() < STEADY_TOL {
            break;
        }
        // block-tridiagonal Jacobian by coloured finite differences
        let mut jac = DMatrix::zeros(n * m, n * m);
        for color in 0..3 {
            for k in 0..m {
                let mut pert = theta.clone();
                let eps = 1e-7;
                for i in (color..n).step_by(3) {
                    pert[(i, k)] += eps;
                }
                let dr = (residual(&pert)? - &res) / eps;
                for i in (color..n).step_by(3) {
                    for row in i.saturating_sub(1)..=(i + 1).min(n - 1) {
                        for l in 0..m {
                            jac[(row * m + l, i * m + k)] = dr[(row, l)];
                        }
                    }
                }
            }
        }
        let lu = BandedLu::factor(&jac)?;
        let step = unflatten(&lu.solve(&(-flatten(&res))), n, m);
        let mut lambda = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial = &theta + lambda * &step;
            if let Ok(r) = residual(&trial) {
                if r.amax() < res.amax() {
                    theta = trial;
                    res = r;
                    moved = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !moved {
            break;
        }
    }
    // finite-difference Jacobian limits the attainable residual
    if res.amax() > 1e3 * STEADY_TOL {
        return Err(Error::NoConvergence {
            context: CONTEXT,
            iterations: STEADY_MAX_ITER,
            residual: res.amax(),
        });
    }
    let mut q = DMatrix::zeros(n, m);
    for i in 0..n {
        let row: Vec<f64> = theta.row(i).iter().copied().collect();
        q.set_row(i, &model.q_of_theta(&row, &guess_q)?.transpose());
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sep_profile(n: usize, left: f64, right: f64) -> SteadyProfile {
        let mesh = Mesh1D::new(n).unwrap();
        solve_steady(
            &ThermoModel::sep(),
            &mesh,
            &BoundaryData::densities(vec![left], vec![right]),
        )
        .unwrap()
    }

    #[test]
    fn sep_profile_is_linear() {
        let p = sep_profile(64, 0.3, 0.7);
        for (i, x) in p.mesh.centers().iter().enumerate() {
            assert!((p.q[(i, 0)] - (0.3 + 0.4 * x)).abs() < 1e-10);
        }
        assert!(p.residual_norm < STEADY_TOL);
    }

    #[test]
    fn equilibrium_profile_is_constant() {
        let p = sep_profile(16, 0.5, 0.5);
        assert!(p.q.iter().all(|v| (v - 0.5).abs() < 1e-15));
        assert!(p.j_faces.amax() < 1e-15);
        assert!(p.theta.amax() < 1e-15);
    }

    #[test]
    fn sep_current_is_uniform() {
        let p = sep_profile(64, 0.3, 0.7);
        let j = steady_current(&ThermoModel::sep(), &p).unwrap();
        assert!(j.iter().all(|v| (v + 0.4).abs() < 1e-10));
    }

    #[test]
    fn theta_boundary_data_is_converted() {
        let mesh = Mesh1D::new(32).unwrap();
        let bc = BoundaryData::conjugates(vec![(7.0f64 / 3.0).ln()], vec![(3.0f64 / 7.0).ln()]);
        let p = solve_steady(&ThermoModel::sep(), &mesh, &bc).unwrap();
        assert!((p.q_left[0] - 0.3).abs() < 1e-12);
        assert!((p.q_right[0] - 0.7).abs() < 1e-12);
        for (i, x) in mesh.centers().iter().enumerate() {
            assert!((p.q[(i, 0)] - (0.3 + 0.4 * x)).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_outside_domain_is_rejected() {
        let mesh = Mesh1D::new(8).unwrap();
        let bc = BoundaryData::densities(vec![0.0], vec![0.5]);
        assert!(matches!(
            solve_steady(&ThermoModel::sep(), &mesh, &bc),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn explicit_step_above_bound_is_rejected() {
        let model = ThermoModel::gaussian();
        let mesh = Mesh1D::new(16).unwrap();
        let bc = BoundaryData::densities(vec![0.0], vec![0.0]);
        let q0 = DMatrix::zeros(16, 1);
        let bound = EXPLICIT_SAFETY * mesh.h().powi(2) / 2.0;
        let err = evolve(&model, &mesh, &bc, &q0, 1.01 * bound, 3, TimeScheme::Explicit).unwrap_err();
        assert!(matches!(err, Error::StabilityViolation { .. }));
        assert!(evolve(&model, &mesh, &bc, &q0, 10.0 * bound, 3, TimeScheme::Implicit).is_ok());
    }

    #[test]
    fn steady_state_is_a_fixed_point() {
        let model = ThermoModel::linear_mobility();
        let mesh = Mesh1D::new(32).unwrap();
        let bc = BoundaryData::densities(vec![1.0], vec![2.0]);
        let p = solve_steady(&model, &mesh, &bc).unwrap();
        let dt = explicit_stability_bound(&model, &mesh, p.field()).unwrap();
        for scheme in [TimeScheme::Explicit, TimeScheme::Implicit] {
            let traj = evolve(&model, &mesh, &bc, &p.q, dt, 20, scheme).unwrap();
            for w in traj.windows(2) {
                assert!((&w[1] - &w[0]).amax() < 1e-12);
            }
        }
    }
}
