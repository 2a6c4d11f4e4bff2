//! Estimators over independent paths. Each path contributes one vector of
//! per-path averages; standard errors come from the spread across paths
//! (batch means) or from a grouped jackknife for nonlinear statistics.

use crate::error::{Error, Result};
use crate::linalg::pairwise_sum;

/// Number of standard errors tolerated by the zero tests.
pub const Z_THRESHOLD: f64 = 4.0;
/// Path groups used by the jackknife.
pub const JACKKNIFE_GROUPS: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// `|value| / se`, infinite when the error vanishes but the value does not.
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.value.abs() / self.se
        } else if self.value == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn is_zero_within(&self, k: f64) -> bool {
        self.z() <= k
    }
}

/// Entrywise mean over paths and its standard error.
pub fn batch_means(parts: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = parts.len();
    if p < 2 {
        return Err(Error::InsufficientSamples {
            context: "batch_means",
            have: p,
            need: 2,
        });
    }
    let mut mean = pairwise_sum(parts);
    for v in &mut mean {
        *v /= p as f64;
    }
    let squares: Vec<Vec<f64>> = parts
        .iter()
        .map(|x| x.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).collect())
        .collect();
    let ss = pairwise_sum(&squares);
    let se = ss
        .iter()
        .map(|s| (s / ((p - 1) as f64 * p as f64)).sqrt())
        .collect();
    Ok((mean, se))
}

/// Delete-one-group jackknife of `stat(mean over paths)`. Paths are split
/// into `groups` contiguous groups of (nearly) equal size.
pub fn grouped_jackknife(
    parts: &[Vec<f64>],
    groups: usize,
    stat: impl Fn(&[f64]) -> f64,
) -> Result<Estimate> {
    let p = parts.len();
    let groups = groups.min(p);
    if groups < 2 {
        return Err(Error::InsufficientSamples {
            context: "grouped_jackknife",
            have: p,
            need: 2,
        });
    }
    let bounds: Vec<usize> = (0..=groups).map(|g| g * p / groups).collect();
    let group_sums: Vec<Vec<f64>> = bounds
        .windows(2)
        .map(|w| pairwise_sum(&parts[w[0]..w[1]]))
        .collect();
    let total = pairwise_sum(&group_sums);
    let scaled = |sum: &[f64], count: usize| -> Vec<f64> { sum.iter().map(|v| v / count as f64).collect() };
    let value = stat(&scaled(&total, p));
    let leave_out: Vec<f64> = bounds
        .windows(2)
        .zip(&group_sums)
        .map(|(w, gs)| {
            let rest: Vec<f64> = total.iter().zip(gs).map(|(t, g)| t - g).collect();
            stat(&scaled(&rest, p - (w[1] - w[0])))
        })
        .collect();
    let g = groups as f64;
    let mean = leave_out.iter().sum::<f64>() / g;
    let var = (g - 1.0) / g * leave_out.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    Ok(Estimate {
        value,
        se: var.sqrt(),
    })
}

/// Least-squares line `y = a + b x`; returns `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_means_of_constant_parts() {
        let parts = vec![vec![1.0, 2.0]; 5];
        let (m, se) = batch_means(&parts).unwrap();
        assert_eq!(m, vec![1.0, 2.0]);
        assert_eq!(se, vec![0.0, 0.0]);
    }

    #[test]
    fn jackknife_of_mean_matches_batch_se() {
        let parts: Vec<Vec<f64>> = (0..40).map(|i| vec![((i * 7) % 11) as f64]).collect();
        let (_, se) = batch_means(&parts).unwrap();
        let est = grouped_jackknife(&parts, 40, |m| m[0]).unwrap();
        assert!((est.se - se[0]).abs() < 1e-12);
    }

    #[test]
    fn line_fit() {
        let (a, b) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((a - 1.0).abs() < 1e-14 && (b - 2.0).abs() < 1e-14);
    }

    #[test]
    fn too_few_paths() {
        assert!(batch_means(&[vec![1.0]]).is_err());
    }
}
