//! Cell-centred finite-volume operators on a uniform 1-D mesh.
//!
//! Faces are numbered `0..=n`; face `f` separates cell `f-1` (left) from
//! cell `f` (right). The wall faces `0` and `n` sit on the boundary, at
//! distance `h/2` from the adjacent cell centre, and see the reservoir
//! value as a ghost state. Unknown vectors are cell-major: entry
//! `i*m + k` is component `k` of cell `i`.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::mesh::Mesh1D;
use crate::thermo::ThermoModel;

/// One side of a face: a real cell or the reservoir ghost.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Cell(usize),
    Wall,
}

/// Left and right neighbours of face `f`.
pub fn face_sides(n: usize, f: usize) -> (Side, Side) {
    let left = if f == 0 { Side::Wall } else { Side::Cell(f - 1) };
    let right = if f == n { Side::Wall } else { Side::Cell(f) };
    (left, right)
}

/// Distance between the two states a face connects.
pub fn face_distance(mesh: &Mesh1D, f: usize) -> f64 {
    if f == 0 || f == mesh.n() {
        0.5 * mesh.h()
    } else {
        mesh.h()
    }
}

/// Dual-cell width of a face relative to `h`: 1/2 at walls, 1 inside.
pub fn face_weight(mesh: &Mesh1D, f: usize) -> f64 {
    face_distance(mesh, f) / mesh.h()
}

/// Cell states plus the two reservoir values, as the discrete operators see them.
#[derive(Clone, Copy)]
pub struct Field<'a> {
    pub q: &'a DMatrix<f64>,
    pub left: &'a [f64],
    pub right: &'a [f64],
}

impl Field<'_> {
    fn state(&self, side: Side, wall: &[f64]) -> Vec<f64> {
        match side {
            Side::Cell(i) => self.q.row(i).iter().copied().collect(),
            Side::Wall => wall.to_vec(),
        }
    }

    /// States on the left and right of face `f`.
    pub fn face_pair(&self, f: usize) -> (Vec<f64>, Vec<f64>) {
        let n = self.q.nrows();
        let (l, r) = face_sides(n, f);
        (self.state(l, self.left), self.state(r, self.right))
    }

    /// Arithmetic-mean reconstruction at face `f`.
    pub fn face_mean(&self, f: usize) -> Vec<f64> {
        let (a, b) = self.face_pair(f);
        a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect()
    }

    /// Value at the physical face position: the mean inside, the reservoir
    /// value on a wall face.
    pub fn face_value(&self, f: usize) -> Vec<f64> {
        let n = self.q.nrows();
        if f == 0 {
            self.left.to_vec()
        } else if f == n {
            self.right.to_vec()
        } else {
            self.face_mean(f)
        }
    }
}

/// Two-point fluxes `j_f = -K̃(q̄_f) (q_b - q_a) / d_f`, shape `(n+1) x m`.
pub fn face_fluxes(model: &ThermoModel, mesh: &Mesh1D, field: Field<'_>) -> Result<DMatrix<f64>> {
    let m = model.m();
    let mut j = DMatrix::zeros(mesh.n() + 1, m);
    for f in 0..=mesh.n() {
        let (a, b) = field.face_pair(f);
        let mobility = model.mobility(&field.face_mean(f))?;
        let d = face_distance(mesh, f);
        for k in 0..m {
            let mut acc = 0.0;
            for r in 0..m {
                acc += mobility[(k, r)] * (b[r] - a[r]) / d;
            }
            j[(f, k)] = -acc;
        }
    }
    Ok(j)
}

/// Flux divergence per cell, `(j_{i+1} - j_i) / h`, shape `n x m`.
pub fn divergence(mesh: &Mesh1D, j: &DMatrix<f64>) -> DMatrix<f64> {
    let n = mesh.n();
    DMatrix::from_fn(n, j.ncols(), |i, k| (j[(i + 1, k)] - j[(i, k)]) / mesh.h())
}

/// Discrete right-hand side `F_h(q) = -div j`, shape `n x m`.
pub fn rhs(model: &ThermoModel, mesh: &Mesh1D, field: Field<'_>) -> Result<DMatrix<f64>> {
    let j = face_fluxes(model, mesh, field)?;
    Ok(-divergence(mesh, &j))
}

/// Derivatives of a face flux with respect to its left and right cell
/// states; `None` on the reservoir side.
#[derive(Clone, Debug)]
pub struct FaceJacobian {
    pub left: Option<DMatrix<f64>>,
    pub right: Option<DMatrix<f64>>,
}

/// Exact Jacobians of [`face_fluxes`]:
/// `δj_f = -(K̃(q̄) ∇χ + [K̃'(q̄) χ̄] ∇q)` with `χ̄` the face mean of `χ`.
pub fn face_jacobians(
    model: &ThermoModel,
    mesh: &Mesh1D,
    field: Field<'_>,
) -> Result<Vec<FaceJacobian>> {
    let m = model.m();
    let n = mesh.n();
    let mut out = Vec::with_capacity(n + 1);
    for f in 0..=n {
        let (a, b) = field.face_pair(f);
        let mean = field.face_mean(f);
        let mobility = model.mobility(&mean)?;
        let grads = model.mobility_grad(&mean)?;
        let d = face_distance(mesh, f);
        let slope: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (y - x) / d).collect();
        // transport[:, r] = (∂K̃/∂q_r) ∇q
        let mut transport = DMatrix::zeros(m, m);
        for (r, g) in grads.iter().enumerate() {
            for k in 0..m {
                transport[(k, r)] = (0..m).map(|l| g[(k, l)] * slope[l]).sum::<f64>();
            }
        }
        let d_left = &mobility / d - 0.5 * &transport;
        let d_right = -&mobility / d - 0.5 * &transport;
        let (ls, rs) = face_sides(n, f);
        out.push(FaceJacobian {
            left: matches!(ls, Side::Cell(_)).then_some(d_left),
            right: matches!(rs, Side::Cell(_)).then_some(d_right),
        });
    }
    Ok(out)
}

fn add_block(target: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>, scale: f64) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            target[(row + i, col + j)] += scale * block[(i, j)];
        }
    }
}

/// Current-increment map, cells to faces, shape `(n+1)m x nm`.
pub fn current_map(mesh: &Mesh1D, m: usize, jacobians: &[FaceJacobian]) -> DMatrix<f64> {
    let n = mesh.n();
    let mut kmap = DMatrix::zeros((n + 1) * m, n * m);
    for (f, jac) in jacobians.iter().enumerate() {
        if let Some(block) = &jac.left {
            add_block(&mut kmap, f * m, (f - 1) * m, block, 1.0);
        }
        if let Some(block) = &jac.right {
            add_block(&mut kmap, f * m, f * m, block, 1.0);
        }
    }
    kmap
}

/// Discrete divergence, faces to cells, shape `nm x (n+1)m`.
pub fn divergence_matrix(mesh: &Mesh1D, m: usize) -> DMatrix<f64> {
    let n = mesh.n();
    let inv_h = 1.0 / mesh.h();
    let mut div = DMatrix::zeros(n * m, (n + 1) * m);
    for i in 0..n {
        for k in 0..m {
            div[(i * m + k, (i + 1) * m + k)] = inv_h;
            div[(i * m + k, i * m + k)] = -inv_h;
        }
    }
    div
}

/// Discrete gradient with zero ghosts, cells to faces, shape `(n+1)m x nm`.
pub fn gradient_matrix(mesh: &Mesh1D, m: usize) -> DMatrix<f64> {
    let n = mesh.n();
    let mut grad = DMatrix::zeros((n + 1) * m, n * m);
    for f in 0..=n {
        let inv_d = 1.0 / face_distance(mesh, f);
        let (ls, rs) = face_sides(n, f);
        for k in 0..m {
            if let Side::Cell(a) = ls {
                grad[(f * m + k, a * m + k)] = -inv_d;
            }
            if let Side::Cell(b) = rs {
                grad[(f * m + k, b * m + k)] = inv_d;
            }
        }
    }
    grad
}

/// Block-tridiagonal generator `L = -Div·Kmap` assembled directly.
pub fn generator(mesh: &Mesh1D, m: usize, jacobians: &[FaceJacobian]) -> DMatrix<f64> {
    let n = mesh.n();
    let inv_h = 1.0 / mesh.h();
    let mut l = DMatrix::zeros(n * m, n * m);
    for (f, jac) in jacobians.iter().enumerate() {
        // face f is the right face of cell f-1 (sign -1/h in -Div) and the
        // left face of cell f (sign +1/h)
        for (cell_side, block) in [(f.checked_sub(1), &jac.left), (Some(f), &jac.right)] {
            let (Some(col), Some(block)) = (cell_side, block) else {
                continue;
            };
            if f >= 1 {
                add_block(&mut l, (f - 1) * m, col * m, block, -inv_h);
            }
            if f < n {
                add_block(&mut l, f * m, col * m, block, inv_h);
            }
        }
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_equals_minus_div_kmap() {
        let model = ThermoModel::linear_mobility();
        let mesh = Mesh1D::new(7).unwrap();
        let q = DMatrix::from_fn(7, 1, |i, _| 1.0 + 0.1 * i as f64 + 0.02 * (i * i) as f64);
        let field = Field {
            q: &q,
            left: &[1.0],
            right: &[2.0],
        };
        let jac = face_jacobians(&model, &mesh, field).unwrap();
        let kmap = current_map(&mesh, 1, &jac);
        let div = divergence_matrix(&mesh, 1);
        let direct = generator(&mesh, 1, &jac);
        assert!((direct + &div * &kmap).amax() < 1e-12);
    }

    #[test]
    fn divergence_is_minus_weighted_gradient_transpose() {
        let mesh = Mesh1D::new(5).unwrap();
        let div = divergence_matrix(&mesh, 2);
        let grad = gradient_matrix(&mesh, 2);
        let weights = DMatrix::from_fn(12, 12, |i, j| {
            if i == j {
                face_weight(&mesh, i / 2)
            } else {
                0.0
            }
        });
        assert!((div + grad.transpose() * weights).amax() < 1e-12);
    }
}
