//! Linearised dynamics around a steady profile: the generator `L`, the
//! current-increment map, and the semigroup `e^{Lt}`.

use nalgebra::linalg::Schur;
use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fvm;
use crate::linalg::{bandwidths, BandedLu};
use crate::steady::{SteadyProfile, STEADY_TOL};
use crate::thermo::ThermoModel;

/// Largest `n·m` for which the semigroup uses a dense matrix exponential.
pub const DENSE_EXP_LIMIT: usize = 512;
/// Relative tolerance of the ODE fallback for the semigroup.
pub const SEMIGROUP_RTOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LinearizedSystem {
    /// `(n·m) x (n·m)` generator with Dirichlet closure.
    pub l: DMatrix<f64>,
    /// `((n+1)·m) x (n·m)` current-increment map, cells to faces.
    pub kmap: DMatrix<f64>,
    pub profile: SteadyProfile,
    pub spectral_abscissa: f64,
    bands: (usize, usize),
}

impl LinearizedSystem {
    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn m(&self) -> usize {
        self.profile.m()
    }

    /// `1 / |spectral_abscissa|`.
    pub fn relaxation_time(&self) -> f64 {
        1.0 / self.spectral_abscissa.abs()
    }

    /// Lower and upper bandwidth of `L`.
    pub fn bands(&self) -> (usize, usize) {
        self.bands
    }
}

/// Linearises the discrete dynamics around `profile`.
pub fn assemble(model: &ThermoModel, profile: &SteadyProfile) -> Result<LinearizedSystem> {
    if !(profile.residual_norm < 10.0 * STEADY_TOL) {
        return Err(Error::InvalidInput(format!(
            "linop: profile not converged (residual {:.3e})",
            profile.residual_norm
        )));
    }
    let mesh = &profile.mesh;
    let m = model.m();
    let jac = fvm::face_jacobians(model, mesh, profile.field())?;
    let kmap = fvm::current_map(mesh, m, &jac);
    let l = fvm::generator(mesh, m, &jac);
    let bands = bandwidths(&l);
    let spectral_abscissa = abscissa(&l)?;
    Ok(LinearizedSystem {
        l,
        kmap,
        profile: profile.clone(),
        spectral_abscissa,
        bands,
    })
}

/// Eigenvalues of a real square matrix via the real Schur form.
pub fn eigenvalues(a: &DMatrix<f64>) -> Result<Vec<Complex<f64>>> {
    let n = a.nrows();
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 100 * n.max(10))
        .ok_or(Error::EigSolverFailure(n))?;
    Ok(schur.complex_eigenvalues().iter().copied().collect())
}

fn abscissa(a: &DMatrix<f64>) -> Result<f64> {
    Ok(eigenvalues(a)?
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Spectral abscissa of `L`; negative certifies discrete dissipativity.
pub fn spectral_check(sys: &LinearizedSystem) -> Result<f64> {
    abscissa(&sys.l)
}

/// `e^{Lt} v`.
pub fn semigroup_apply(sys: &LinearizedSystem, t: f64, v: &DVector<f64>) -> Result<DVector<f64>> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    if t == 0.0 {
        return Ok(v.clone());
    }
    if sys.dim() <= DENSE_EXP_LIMIT {
        Ok((&sys.l * t).exp() * v)
    } else {
        extrapolated_euler(&sys.l, sys.bands, t, v, SEMIGROUP_RTOL)
    }
}

/// `e^{Lt}` as a dense matrix.
pub fn semigroup_matrix(sys: &LinearizedSystem, t: f64) -> Result<DMatrix<f64>> {
    if t < 0.0 {
        return Err(Error::NegativeTime(t));
    }
    Ok((&sys.l * t).exp())
}

/// Integrates `v' = A v` over `[0, t]` with linearly implicit Euler steps
/// and Aitken-Neville extrapolation, adapting the macro step.
pub fn extrapolated_euler(
    a: &DMatrix<f64>,
    bands: (usize, usize),
    t: f64,
    v: &DVector<f64>,
    rtol: f64,
) -> Result<DVector<f64>> {
    const SEQUENCE: [usize; 8] = [1, 2, 3, 4, 5, 6, 7, 8];
    let n = a.nrows();
    let v_norm = v.amax();
    if v_norm == 0.0 {
        return Ok(v.clone());
    }
    let tol = 0.1 * rtol * v_norm;
    let a_norm = a
        .row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut step = t.min(10.0 / a_norm.max(1e-300));
    let mut time = 0.0;
    let mut y = v.clone();
    let mut rejects = 0;
    while time < t {
        step = step.min(t - time);
        let mut table: Vec<Vec<DVector<f64>>> = Vec::with_capacity(SEQUENCE.len());
        let mut accepted = None;
        for (j, &nj) in SEQUENCE.iter().enumerate() {
            let sub = step / nj as f64;
            let system = DMatrix::identity(n, n) - a * sub;
            let lu = BandedLu::factor_with_bands(&system, bands.0, bands.1)?;
            let mut z = y.clone();
            for _ in 0..nj {
                lu.solve_in_place(z.as_mut_slice());
            }
            let mut row = vec![z];
            for k in 1..=j {
                let ratio = nj as f64 / SEQUENCE[j - k] as f64 - 1.0;
                let next = &row[k - 1] + (&row[k - 1] - &table[j - 1][k - 1]) / ratio;
                row.push(next);
            }
            if j >= 2 {
                let err = (&row[j] - &row[j - 1]).amax();
                if err < tol {
                    accepted = Some((row[j].clone(), j));
                    break;
                }
            }
            table.push(row);
        }
        match accepted {
            Some((next, j)) => {
                y = next;
                time += step;
                rejects = 0;
                if j <= 4 {
                    step *= 2.0;
                }
            }
            None => {
                step *= 0.5;
                rejects += 1;
                if rejects > 60 {
                    return Err(Error::NoConvergence {
                        context: "semigroup",
                        iterations: rejects,
                        residual: step,
                    });
                }
            }
        }
    }
    Ok(y)
}

/// Left eigenvector of `L` for the eigenvalue with the largest real part,
/// normalised to unit Euclidean norm. Intended for generators whose
/// slowest mode is real.
pub fn slowest_left_mode(sys: &LinearizedSystem) -> Result<(f64, DVector<f64>)> {
    let n = sys.dim();
    let lt = sys.l.transpose();
    let shift = sys.spectral_abscissa * (1.0 - 1e-7) + 1e-12;
    let lu = (&lt - DMatrix::identity(n, n) * shift).lu();
    let mut u = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    for _ in 0..50 {
        let next = lu
            .solve(&u)
            .ok_or(Error::EigSolverFailure(n))?;
        let next = &next / next.norm();
        let aligned = if next.dot(&u) < 0.0 { -next } else { next };
        let change = (&aligned - &u).amax();
        u = aligned;
        if change < 1e-14 {
            break;
        }
    }
    let lambda = (&lt * &u).dot(&u);
    Ok((lambda, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::steady::{solve_steady, BoundaryData, Mesh1D};

    fn sep_system(n: usize) -> LinearizedSystem {
        let model = ThermoModel::sep();
        let mesh = Mesh1D::new(n).unwrap();
        let p = solve_steady(&model, &mesh, &BoundaryData::densities(vec![0.3], vec![0.7])).unwrap();
        assemble(&model, &p).unwrap()
    }

    #[test]
    fn ode_fallback_matches_dense_exponential() {
        let sys = sep_system(24);
        let v = DVector::from_fn(24, |i, _| ((i + 1) as f64 * 0.7).sin());
        let dense = (&sys.l * 0.013).exp() * &v;
        let ode = extrapolated_euler(&sys.l, sys.bands, 0.013, &v, 1e-10).unwrap();
        assert!((dense - ode).amax() < 1e-9 * v.amax());
    }

    #[test]
    fn slowest_mode_of_laplacian() {
        let sys = sep_system(16);
        let (lambda, u) = slowest_left_mode(&sys).unwrap();
        assert!((lambda - sys.spectral_abscissa).abs() < 1e-9);
        assert!((&sys.l.transpose() * &u - lambda * &u).amax() < 1e-8);
    }

    #[test]
    fn negative_time_is_rejected() {
        let sys = sep_system(8);
        let v = DVector::zeros(8);
        assert_eq!(semigroup_apply(&sys, -1.0, &v), Err(Error::NegativeTime(-1.0)));
    }
}
