//! Principal angles between subspaces.

use nalgebra::DMatrix;

use crate::error::TheoryError;

/// Orthonormal basis (as columns) of the span of `rows`.
fn orthonormal(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, TheoryError> {
    let k = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if k == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(TheoryError::RankDeficient(format!("{what}: empty or ragged basis")));
    }
    let a = DMatrix::from_fn(d, k, |i, j| rows[j][i]);
    let sv = a.singular_values();
    let max = sv.max();
    if sv.min() <= 1e-10 * max.max(1e-300) || k > d {
        return Err(TheoryError::RankDeficient(format!("{what}: {k} vectors do not span {k} dimensions")));
    }
    Ok(a.qr().q())
}

/// Principal angles in radians, sorted ascending; `min(dim A, dim B)` of them.
pub fn principal_angles(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>, TheoryError> {
    let qa = orthonormal(a, "first basis")?;
    let qb = orthonormal(b, "second basis")?;
    if qa.nrows() != qb.nrows() {
        return Err(TheoryError::RankDeficient(format!("ambient dimensions {} and {}", qa.nrows(), qb.nrows())));
    }
    let s = (qa.transpose() * qb).singular_values();
    let mut angles: Vec<f64> = s.iter().map(|c| c.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(|x, y| x.partial_cmp(y).expect("finite angles"));
    Ok(angles)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_subspaces() {
        let a = vec![vec![1.0, 2.0, 0.0, 1.0], vec![0.0, 1.0, 1.0, 0.0]];
        let b = vec![vec![1.0, 3.0, 1.0, 1.0], vec![2.0, 3.0, -1.0, 2.0]];
        for t in principal_angles(&a, &b).unwrap() {
            assert!(t.abs() < 1e-7, "{t}");
        }
    }

    #[test]
    fn orthogonal_subspaces() {
        let a = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 0.0, 1.0]];
        for t in principal_angles(&a, &b).unwrap() {
            assert!((t - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
    }

    #[test]
    fn known_angle_in_plane() {
        let th: f64 = 0.3;
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![th.cos(), th.sin()]];
        assert!((principal_angles(&a, &b).unwrap()[0] - th).abs() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_an_error() {
        let a = vec![vec![1.0, 0.0, 0.0], vec![2.0, 0.0, 0.0]];
        let b = vec![vec![0.0, 1.0, 0.0]];
        assert!(matches!(principal_angles(&a, &b), Err(TheoryError::RankDeficient(_))));
    }
}
