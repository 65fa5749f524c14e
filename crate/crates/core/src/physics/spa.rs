//! Principal angles between the column spaces of two measurement matrices.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaError {
    #[error("matrix {which} is rank deficient (rank {rank} < {cols})")]
    RankDeficient { which: &'static str, rank: usize, cols: usize },
    #[error("row counts differ: {0} vs {1}")]
    Shape(usize, usize),
}

/// Which principal angle is used as the MTD effectiveness metric.
///
/// On a DC grid with fewer than `2(N-1)` branches every pair of Jacobian
/// column spaces shares a subspace of dimension at least `2(N-1) - L`, so the
/// smallest principal angle is identically zero. `Largest` measures how far
/// the most-displaced attack direction is pushed out of the attacker's
/// subspace and is the metric that reaches useful values on such grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleCriterion {
    Smallest,
    #[default]
    Largest,
}

impl AngleCriterion {
    pub fn select(self, angles: &[f64]) -> f64 {
        match self {
            AngleCriterion::Smallest => angles.first().copied().unwrap_or(0.0),
            AngleCriterion::Largest => angles.last().copied().unwrap_or(0.0),
        }
    }
}

impl std::str::FromStr for AngleCriterion {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "smallest" => Ok(Self::Smallest),
            "largest" => Ok(Self::Largest),
            _ => Err(format!("unknown angle criterion `{s}` (smallest|largest)")),
        }
    }
}

fn orthonormal_basis(h: &DMatrix<f64>, which: &'static str) -> Result<DMatrix<f64>, SpaError> {
    let svd = h.clone().svd(true, false);
    let s = &svd.singular_values;
    let smax = s.iter().fold(0.0f64, |m, v| m.max(*v));
    let tol = smax * (h.nrows().max(h.ncols()) as f64) * f64::EPSILON * 16.0;
    let rank = s.iter().filter(|v| **v > tol).count();
    if rank < h.ncols() {
        return Err(SpaError::RankDeficient { which, rank, cols: h.ncols() });
    }
    let u = svd.u.expect("requested U");
    // nalgebra does not sort singular values; pick the columns explicitly.
    let mut cols: Vec<usize> = (0..s.len()).filter(|&i| s[i] > tol).collect();
    cols.sort_unstable();
    Ok(DMatrix::from_columns(&cols.iter().map(|&i| u.column(i)).collect::<Vec<_>>()))
}

/// All principal angles in ascending order.
pub fn principal_angles(h1: &DMatrix<f64>, h2: &DMatrix<f64>) -> Result<Vec<f64>, SpaError> {
    if h1.nrows() != h2.nrows() {
        return Err(SpaError::Shape(h1.nrows(), h2.nrows()));
    }
    let q1 = orthonormal_basis(h1, "H")?;
    let q2 = orthonormal_basis(h2, "H'")?;
    let cosines = (q1.transpose() * q2).singular_values();
    let mut angles: Vec<f64> = cosines.iter().map(|c| c.clamp(0.0, 1.0).acos()).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(angles)
}

/// Smallest principal angle between `col(h1)` and `col(h2)`, in `[0, π/2]`.
pub fn spa(h1: &DMatrix<f64>, h2: &DMatrix<f64>) -> Result<f64, SpaError> {
    Ok(principal_angles(h1, h2)?[0])
}

pub fn subspace_angle(h1: &DMatrix<f64>, h2: &DMatrix<f64>, criterion: AngleCriterion) -> Result<f64, SpaError> {
    Ok(criterion.select(&principal_angles(h1, h2)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridTopology;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};

    #[test]
    fn identical_and_scaled_subspaces() {
        let t = GridTopology::ieee14();
        let h = t.jacobian(&t.reactances()).unwrap().matrix().clone();
        assert!(spa(&h, &h).unwrap() < 1e-9);
        assert!(spa(&h, &(&h * 3.5)).unwrap() < 1e-7);
    }

    #[test]
    fn toy_subspaces() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, FRAC_1_SQRT_2, 0.0, FRAC_1_SQRT_2]);
        let angles = principal_angles(&a, &b).unwrap();
        assert!(angles[0].abs() < 1e-12);
        assert!((angles[1] - FRAC_PI_4).abs() < 1e-12);
        assert_eq!(AngleCriterion::Largest.select(&angles), angles[1]);
    }

    #[test]
    fn dc_jacobians_always_share_directions() {
        let t = GridTopology::ieee14();
        let x = t.reactances();
        let mut x2 = x.clone();
        for (i, &l) in t.dfacts().iter().enumerate() {
            x2[l] *= if i % 2 == 0 { 1.3 } else { 0.6 };
        }
        let h1 = t.jacobian(&x).unwrap().matrix().clone();
        let h2 = t.jacobian(&x2).unwrap().matrix().clone();
        let angles = principal_angles(&h1, &h2).unwrap();
        assert!(angles[0] < 1e-7);
        assert!(angles[12] > 0.05);
        assert!((spa(&h1, &h2).unwrap() - spa(&h2, &h1).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn rank_deficiency_is_an_error() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let b = DMatrix::identity(3, 2);
        assert!(matches!(spa(&a, &b), Err(SpaError::RankDeficient { rank: 1, .. })));
    }
}
