use crate::error::{Error, Result};

/// Uniform cell-centred mesh of the unit interval.
#[derive(Clone, Debug, PartialEq)]
pub struct Mesh1D {
    n: usize,
    h: f64,
    centers: Vec<f64>,
}

impl Mesh1D {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("mesh needs at least 2 cells, got {n}")));
        }
        let h = 1.0 / n as f64;
        let centers = (0..n).map(|i| (i as f64 + 0.5) * h).collect();
        Ok(Mesh1D { n, h, centers })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Position of face `f` (`0..=n`).
    pub fn face_position(&self, f: usize) -> f64 {
        f as f64 * self.h
    }
}
