//! Noise covariance, static covariance (Lyapunov and time-integral
//! routes), the local / long-range split and the long-range criterion.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fvm::{self, Field};
use crate::linalg::gauss_legendre;
use crate::linop::{self, LinearizedSystem};
use crate::mesh::Mesh1D;
use crate::steady::SteadyProfile;
use crate::thermo::ThermoModel;

/// Relative Lyapunov residual accepted by [`lyapunov_solve`].
pub const LYAPUNOV_RTOL: f64 = 1e-10;
/// Largest `n·m` handled by the Kronecker solver.
pub const KRONECKER_LIMIT: usize = 64;
/// Relative threshold separating a vanishing from a nonzero `Φ`.
pub const PHI_TOL: f64 = 1e-6;

/// Covariance density `Γ` of the discrete Wiener forcing, per unit time.
#[derive(Clone, Debug)]
pub struct NoiseCovariance {
    pub gamma: DMatrix<f64>,
    /// Symmetrised `K_θ` at each face, `m x m`.
    pub face_onsager: Vec<DMatrix<f64>>,
    mesh: Mesh1D,
}

impl NoiseCovariance {
    pub fn mesh(&self) -> &Mesh1D {
        &self.mesh
    }

    pub fn m(&self) -> usize {
        self.face_onsager.first().map_or(0, |k| k.nrows())
    }

    /// `Γ = (2/h) G_fᵀ diag(ω_f K_f) G_f` from explicit face coefficients.
    pub fn from_face_onsager(mesh: &Mesh1D, face_onsager: Vec<DMatrix<f64>>) -> Self {
        let n = mesh.n();
        let m = face_onsager[0].nrows();
        let grad = fvm::gradient_matrix(mesh, m);
        let mut weighted = DMatrix::zeros((n + 1) * m, (n + 1) * m);
        for (f, k) in face_onsager.iter().enumerate() {
            let w = fvm::face_weight(mesh, f);
            for a in 0..m {
                for b in 0..m {
                    weighted[(f * m + a, f * m + b)] = w * k[(a, b)];
                }
            }
        }
        let mut gamma = grad.transpose() * weighted * &grad * (2.0 / mesh.h());
        symmetrize(&mut gamma);
        NoiseCovariance {
            gamma,
            face_onsager,
            mesh: mesh.clone(),
        }
    }

    /// Noise switched off; same shape as a real covariance.
    pub fn zero(mesh: &Mesh1D, m: usize) -> Self {
        Self::from_face_onsager(mesh, vec![DMatrix::zeros(m, m); mesh.n() + 1])
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let t = a.transpose();
    *a += t;
    *a *= 0.5;
}

/// Onsager matrices `K(θ)` at the face positions; reservoir values on the
/// walls, arithmetic means of the neighbouring cells inside.
pub fn face_onsager(model: &ThermoModel, profile: &SteadyProfile) -> Result<Vec<DMatrix<f64>>> {
    let field = profile.field();
    (0..=profile.n())
        .map(|f| model.onsager_matrix(&field.face_value(f)))
        .collect()
}

pub fn noise_covariance(model: &ThermoModel, profile: &SteadyProfile) -> Result<NoiseCovariance> {
    let faces = face_onsager(model, profile)?
        .into_iter()
        .map(|k| (&k + k.transpose()) * 0.5)
        .collect();
    Ok(NoiseCovariance::from_face_onsager(&profile.mesh, faces))
}

/// `max |A C + C Aᵀ + Γ|`.
pub fn lyapunov_residual(a: &DMatrix<f64>, c: &DMatrix<f64>, gamma: &DMatrix<f64>) -> f64 {
    let ac = a * c;
    (&ac + ac.transpose() + gamma).amax()
}

/// Solves `L C + C Lᵀ = -Γ` for the stationary covariance.
pub fn lyapunov_solve(sys: &LinearizedSystem, noise: &NoiseCovariance) -> Result<DMatrix<f64>> {
    if sys.spectral_abscissa >= 0.0 {
        return Err(Error::UnstableGenerator(sys.spectral_abscissa));
    }
    let c = bartels_stewart(&sys.l, &noise.gamma)?;
    check_residual(&sys.l, &c, &noise.gamma)?;
    Ok(c)
}

fn check_residual(a: &DMatrix<f64>, c: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<()> {
    let residual = lyapunov_residual(a, c, gamma);
    let bound = LYAPUNOV_RTOL * gamma.amax();
    if residual > bound {
        return Err(Error::ResidualTooLarge { residual, bound });
    }
    Ok(())
}

/// Diagonal block boundaries of a quasi-triangular Schur factor.
fn schur_blocks(t: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let n = t.nrows();
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && t[(i + 1, i)] != 0.0 {
            blocks.push((i, 2));
            i += 2;
        } else {
            blocks.push((i, 1));
            i += 1;
        }
    }
    blocks
}

/// Dense Lyapunov solve `A X + X Aᵀ = -Γ` by real Schur reduction and
/// block back-substitution. Returns the symmetrised solution without a
/// residual check.
pub fn bartels_stewart(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 100 * n.max(10))
        .ok_or(Error::EigSolverFailure(n))?;
    let (u, t) = schur.unpack();
    // T Y + Y Tᵀ = F with F = -Uᵀ Γ U and X = U Y Uᵀ
    let f = -(u.transpose() * gamma * &u);
    let blocks = schur_blocks(&t);
    let mut y = DMatrix::<f64>::zeros(n, n);
    for &(i0, p) in blocks.iter().rev() {
        for &(j0, q) in blocks.iter().rev() {
            let mut rhs = f.view((i0, j0), (p, q)).clone_owned();
            // Σ_{k > I} T_IK Y_KJ
            if i0 + p < n {
                rhs -= t.view((i0, i0 + p), (p, n - i0 - p)) * y.view((i0 + p, j0), (n - i0 - p, q));
            }
            // Σ_{k > J} Y_IK T_JKᵀ
            if j0 + q < n {
                rhs -= y.view((i0, j0 + q), (p, n - j0 - q))
                    * t.view((j0, j0 + q), (q, n - j0 - q)).transpose();
            }
            let tii = t.view((i0, i0), (p, p));
            let tjj = t.view((j0, j0), (q, q));
            // (I_q ⊗ T_II + T_JJ ⊗ I_p) vec(Y) = vec(R), column-major vec
            let size = p * q;
            let mut sys = DMatrix::<f64>::zeros(size, size);
            for c in 0..q {
                for r in 0..p {
                    let row = c * p + r;
                    for r2 in 0..p {
                        sys[(row, c * p + r2)] += tii[(r, r2)];
                    }
                    for c2 in 0..q {
                        sys[(row, c2 * p + r)] += tjj[(c, c2)];
                    }
                }
            }
            let vec = DVector::from_iterator(size, rhs.iter().copied());
            let sol = sys
                .lu()
                .solve(&vec)
                .ok_or(Error::UnstableGenerator(0.0))?;
            for c in 0..q {
                for r in 0..p {
                    y[(i0 + r, j0 + c)] = sol[c * p + r];
                }
            }
        }
    }
    let mut x = &u * y * u.transpose();
    symmetrize(&mut x);
    Ok(x)
}

/// Lyapunov solve by a direct linear system in the `n(n+1)/2`
/// independent entries of the symmetric solution. Independent oracle for
/// [`bartels_stewart`]; only for `n <= KRONECKER_LIMIT`.
pub fn lyapunov_kronecker(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if n > KRONECKER_LIMIT {
        return Err(Error::InvalidInput(format!(
            "Kronecker Lyapunov solver limited to dimension {KRONECKER_LIMIT}, got {n}"
        )));
    }
    let index = |i: usize, j: usize| {
        let (lo, hi) = if i <= j { (i, j) } else { (j, i) };
        lo * n - lo * (lo + 1) / 2 + hi
    };
    let size = n * (n + 1) / 2;
    let mut sys = DMatrix::<f64>::zeros(size, size);
    let mut rhs = DVector::<f64>::zeros(size);
    for i in 0..n {
        for j in i..n {
            let row = index(i, j);
            rhs[row] = -gamma[(i, j)];
            for k in 0..n {
                // (A X)_ij + (X Aᵀ)_ij = Σ_k A_ik X_kj + X_ik A_jk
                sys[(row, index(k, j))] += a[(i, k)];
                sys[(row, index(i, k))] += a[(j, k)];
            }
        }
    }
    let sol = sys
        .lu()
        .solve(&rhs)
        .ok_or(Error::UnstableGenerator(0.0))?;
    Ok(DMatrix::from_fn(n, n, |i, j| sol[index(i, j)]))
}

/// `∫₀^{t_max} e^{Lt} Γ e^{Lᵀt} dt` by adaptive Gauss-Legendre quadrature
/// on geometrically growing panels.
///
/// The neglected tail equals `e^{L t_max} C e^{Lᵀ t_max}`; it is estimated
/// with the computed integral and must stay below `rtol` relative to it.
pub fn integral_covariance(
    sys: &LinearizedSystem,
    noise: &NoiseCovariance,
    t_max: f64,
    rtol: f64,
) -> Result<DMatrix<f64>> {
    if sys.spectral_abscissa >= 0.0 {
        return Err(Error::UnstableGenerator(sys.spectral_abscissa));
    }
    if !(t_max > 0.0) {
        return Err(Error::InvalidInput("integral_covariance: t_max must be positive".into()));
    }
    let l = &sys.l;
    let gamma = &noise.gamma;
    let n = l.nrows();
    let l_diag = (0..n).map(|i| l[(i, i)].abs()).fold(0.0, f64::max);
    let magnitude = gamma.amax() / (2.0 * l_diag.max(sys.spectral_abscissa.abs()));
    let t0 = (1.0 / l_diag.max(1e-300)).min(t_max);
    let mut edges = vec![0.0, t0];
    while *edges.last().unwrap() < t_max {
        let next = (edges.last().unwrap() * 2.0).min(t_max);
        edges.push(next);
    }
    let panel_tol = 0.01 * rtol * magnitude / edges.len() as f64;
    let rules = [gauss_legendre(10), gauss_legendre(20)];
    let integrand = |t: f64| {
        let e = (l * t).exp();
        &e * gamma * e.transpose()
    };
    let rule = |a: f64, b: f64, idx: usize| {
        let (x, w) = &rules[idx];
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut acc = DMatrix::zeros(n, n);
        for (xi, wi) in x.iter().zip(w) {
            acc += integrand(mid + half * xi) * (wi * half);
        }
        acc
    };
    let mut total = DMatrix::zeros(n, n);
    let mut stack: Vec<(f64, f64, u32)> = edges.windows(2).rev().map(|w| (w[0], w[1], 0)).collect();
    while let Some((a, b, depth)) = stack.pop() {
        let coarse = rule(a, b, 0);
        let fine = rule(a, b, 1);
        if (&fine - &coarse).amax() <= panel_tol || depth >= 40 {
            total += fine;
        } else {
            let mid = 0.5 * (a + b);
            stack.push((mid, b, depth + 1));
            stack.push((a, mid, depth + 1));
        }
    }
    symmetrize(&mut total);
    let e = (l * t_max).exp();
    let tail = (&e * &total * e.transpose()).amax() / total.amax().max(1e-300);
    if tail > rtol {
        return Err(Error::TailNotConverged { tail, rtol, t_max });
    }
    Ok(total)
}

/// Local-equilibrium part `J(q(x_i))/h` on the diagonal blocks and the
/// remainder `B = C - C_local`.
pub fn split_local_longrange(
    c: &DMatrix<f64>,
    model: &ThermoModel,
    profile: &SteadyProfile,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let m = model.m();
    let n = profile.n();
    let h = profile.mesh.h();
    let mut local = DMatrix::zeros(n * m, n * m);
    for i in 0..n {
        let q: Vec<f64> = profile.q.row(i).iter().copied().collect();
        let j = model.susceptibility(&q)?;
        for a in 0..m {
            for b in 0..m {
                local[(i * m + a, i * m + b)] = j[(a, b)] / h;
            }
        }
    }
    let b = c - &local;
    Ok((local, b))
}

/// `max_i |K(θ(x_i)) - K(θ(x_i))ᵀ|`.
pub fn onsager_check(model: &ThermoModel, profile: &SteadyProfile) -> Result<f64> {
    let mut worst = 0.0_f64;
    for i in 0..profile.n() {
        let q: Vec<f64> = profile.q.row(i).iter().copied().collect();
        let k = model.onsager_matrix(&q)?;
        worst = worst.max((&k - k.transpose()).amax());
    }
    Ok(worst)
}

/// Outcome of the long-range criterion evaluated on the cell centres.
#[derive(Clone, Debug)]
pub struct LongRangeCriterion {
    /// `Φ_q(x_i)`, one `m x m` matrix per cell.
    pub phi: Vec<DMatrix<f64>>,
    pub psi: Vec<DMatrix<f64>>,
    pub psi_asym: Vec<DMatrix<f64>>,
    pub laplacian_onsager: Vec<DMatrix<f64>>,
    /// `max|Φ|` over the cells not adjacent to a wall.
    pub max_phi: f64,
    pub max_psi_asym: f64,
    pub scale: f64,
    pub long_range: bool,
}

/// Three-point second derivative on a nonuniform stencil.
fn second_difference(xs: [f64; 3], ys: [&DMatrix<f64>; 3]) -> DMatrix<f64> {
    let (h0, h1) = (xs[1] - xs[0], xs[2] - xs[1]);
    (ys[0] * (2.0 / (h0 * (h0 + h1)))) - ys[1] * (2.0 / (h0 * h1)) + ys[2] * (2.0 / (h1 * (h0 + h1)))
}

/// Centred first derivative on a nonuniform stencil (second order).
fn first_difference(xs: [f64; 3], ys: [&DMatrix<f64>; 3]) -> DMatrix<f64> {
    let (h0, h1) = (xs[1] - xs[0], xs[2] - xs[1]);
    ys[2] * (h0 / (h1 * (h0 + h1))) + ys[1] * ((h1 - h0) / (h0 * h1)) - ys[0] * (h1 / (h0 * (h0 + h1)))
}

/// Evaluates `Φ_q = Δ K_θ + ∇·Ψ_q` and the antisymmetric part of `Ψ_q`.
///
/// Nodes are the two walls (reservoir values) and the cell centres.
/// Wall-adjacent cells use the same nonuniform stencils but are excluded
/// from the verdict. The verdict is long range when `Φ` does not vanish
/// or `Ψ` is not symmetric.
pub fn longrange_criterion(model: &ThermoModel, profile: &SteadyProfile) -> Result<LongRangeCriterion> {
    let n = profile.n();
    let m = model.m();
    let mesh = &profile.mesh;
    let field: Field<'_> = profile.field();
    // node states: wall, centres..., wall
    let mut xs = Vec::with_capacity(n + 2);
    let mut qs: Vec<Vec<f64>> = Vec::with_capacity(n + 2);
    xs.push(0.0);
    qs.push(field.left.to_vec());
    for i in 0..n {
        xs.push(mesh.centers()[i]);
        qs.push(profile.q.row(i).iter().copied().collect());
    }
    xs.push(1.0);
    qs.push(field.right.to_vec());
    let onsager: Vec<DMatrix<f64>> = qs
        .iter()
        .map(|q| model.onsager_matrix(q))
        .collect::<Result<_>>()?;
    let as_col = |q: &Vec<f64>| DMatrix::from_column_slice(m, 1, q);
    let q_cols: Vec<DMatrix<f64>> = qs.iter().map(as_col).collect();

    let mut laplacian_onsager = Vec::with_capacity(n);
    let mut psi = Vec::with_capacity(n);
    for node in 1..=n {
        let stencil = [xs[node - 1], xs[node], xs[node + 1]];
        laplacian_onsager.push(second_difference(
            stencil,
            [&onsager[node - 1], &onsager[node], &onsager[node + 1]],
        ));
        let grad_q = first_difference(stencil, [&q_cols[node - 1], &q_cols[node], &q_cols[node + 1]]);
        let q = &qs[node];
        let dk = model.mobility_grad(q)?;
        let j = model.susceptibility(q)?;
        // Ψ_kl = Σ_{k',l'} ∂_{l'} K̃_{kk'} [J_{l'l} ∇q_{k'} - J_{k'l} ∇q_{l'}]
        let p = DMatrix::from_fn(m, m, |k, l| {
            let mut acc = 0.0;
            for kp in 0..m {
                for lp in 0..m {
                    acc += dk[lp][(k, kp)] * (j[(lp, l)] * grad_q[kp] - j[(kp, l)] * grad_q[lp]);
                }
            }
            acc
        });
        psi.push(p);
    }
    let mut phi = Vec::with_capacity(n);
    let mut div_psi_max = 0.0_f64;
    for i in 0..n {
        let div = if i == 0 {
            (&psi[1] - &psi[0]) / mesh.h()
        } else if i == n - 1 {
            (&psi[n - 1] - &psi[n - 2]) / mesh.h()
        } else {
            (&psi[i + 1] - &psi[i - 1]) / (2.0 * mesh.h())
        };
        if i > 0 && i < n - 1 {
            div_psi_max = div_psi_max.max(div.amax());
        }
        phi.push(&laplacian_onsager[i] + div);
    }
    let psi_asym: Vec<DMatrix<f64>> = psi.iter().map(|p| p - p.transpose()).collect();
    let interior = 1..n.saturating_sub(1);
    let max_phi = interior.clone().map(|i| phi[i].amax()).fold(0.0, f64::max);
    let max_psi_asym = interior.clone().map(|i| psi_asym[i].amax()).fold(0.0, f64::max);
    let max_lap = interior.map(|i| laplacian_onsager[i].amax()).fold(0.0, f64::max);
    let max_k = onsager.iter().map(|k| k.amax()).fold(0.0, f64::max);
    let scale = max_lap.max(div_psi_max).max(max_k);
    let long_range = max_phi > PHI_TOL * scale || max_psi_asym > PHI_TOL * scale;
    Ok(LongRangeCriterion {
        phi,
        psi,
        psi_asym,
        laplacian_onsager,
        max_phi,
        max_psi_asym,
        scale,
        long_range,
    })
}

/// Everything the covariance stage produces for one profile.
#[derive(Clone, Debug)]
pub struct CovarianceReport {
    pub c: DMatrix<f64>,
    pub c_local: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub criterion: LongRangeCriterion,
    pub long_range: bool,
    pub onsager_defect: f64,
    /// `max|LC + CLᵀ + Γ| / max|Γ|`.
    pub lyapunov_residual: f64,
}

pub fn covariance_report(
    model: &ThermoModel,
    sys: &LinearizedSystem,
    noise: &NoiseCovariance,
) -> Result<CovarianceReport> {
    let profile = &sys.profile;
    let c = lyapunov_solve(sys, noise)?;
    let (c_local, b) = split_local_longrange(&c, model, profile)?;
    let criterion = longrange_criterion(model, profile)?;
    let onsager_defect = onsager_check(model, profile)?;
    let lyapunov_residual = lyapunov_residual(&sys.l, &c, &noise.gamma) / noise.gamma.amax().max(1e-300);
    Ok(CovarianceReport {
        long_range: criterion.long_range,
        c,
        c_local,
        b,
        criterion,
        onsager_defect,
        lyapunov_residual,
    })
}

/// Continuum long-range covariance of the exclusion process with density
/// slope `b`: `-b² x (1 - y)` for `x <= y`.
pub fn sep_longrange_oracle(x: f64, y: f64, b: f64) -> f64 {
    let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
    -b * b * lo * (1.0 - hi)
}

/// Stationary covariance of the recursion `ξ ← A ξ + η`, `Cov η = Q`,
/// by the doubling iteration for `C = A C Aᵀ + Q`.
pub fn discrete_stein(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut c = q.clone();
    let mut power = a.clone();
    for it in 0..200 {
        let update = &power * &c * power.transpose();
        c += &update;
        power = &power * &power;
        if update.amax() <= 1e-16 * c.amax() {
            symmetrize(&mut c);
            return Ok(c);
        }
        if !power.amax().is_finite() {
            return Err(Error::NoConvergence {
                context: "discrete_stein",
                iterations: it,
                residual: f64::INFINITY,
            });
        }
    }
    Err(Error::NoConvergence {
        context: "discrete_stein",
        iterations: 200,
        residual: power.amax(),
    })
}

/// Convenience: the generator's semigroup applied to a covariance,
/// `e^{Lτ} C`.
pub fn lagged_covariance(sys: &LinearizedSystem, c: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    Ok(linop::semigroup_matrix(sys, tau)? * c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schur_blocks_detect_pairs() {
        let t = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 1.0, 0.0, 0.0, 0.0, 3.0]);
        assert_eq!(schur_blocks(&t), vec![(0, 2), (2, 1)]);
    }

    #[test]
    fn bartels_stewart_with_complex_pairs_matches_kronecker() {
        let a = DMatrix::from_row_slice(
            4,
            4,
            &[-1.0, 3.0, 0.2, 0.0, -3.0, -1.0, 0.0, 0.1, 0.5, 0.0, -2.0, 1.0, 0.0, 0.3, -1.5, -2.5],
        );
        let g = DMatrix::from_fn(4, 4, |i, j| if i == j { 2.0 } else { 0.3 / (1.0 + (i + j) as f64) });
        let x1 = bartels_stewart(&a, &g).unwrap();
        let x2 = lyapunov_kronecker(&a, &g).unwrap();
        assert!((&x1 - &x2).amax() < 1e-12);
        assert!(lyapunov_residual(&a, &x1, &g) < 1e-12);
    }

    #[test]
    fn stein_scalar() {
        let a = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 3.0);
        let c = discrete_stein(&a, &q).unwrap();
        assert!((c[(0, 0)] - 4.0).abs() < 1e-14);
    }

    #[test]
    fn oracle_is_symmetric_and_negative() {
        assert_eq!(sep_longrange_oracle(0.25, 0.75, 0.4), sep_longrange_oracle(0.75, 0.25, 0.4));
        assert!((sep_longrange_oracle(0.5, 0.5, 0.4) + 0.04).abs() < 1e-15);
    }
}
