//! Small fixed-size linear algebra shared by the kinematics, FEM and BEM code.

use nalgebra::{SMatrix, SVector};

pub type Point<const D: usize> = SVector<f64, D>;
pub type Mat<const D: usize> = SMatrix<f64, D, D>;

/// Determinant by cofactor expansion; the crate only uses D in {1, 2, 3}.
pub fn det<const D: usize>(m: &Mat<D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => panic!("det: unsupported dimension {D}"),
    }
}

/// Inverse via the adjugate. Returns `None` when `|det| <= tol`.
pub fn inverse<const D: usize>(m: &Mat<D>, tol: f64) -> Option<(Mat<D>, f64)> {
    let d = det(m);
    if !(d.abs() > tol) {
        return None;
    }
    let mut inv = Mat::<D>::zeros();
    match D {
        1 => inv[(0, 0)] = 1.0 / d,
        2 => {
            inv[(0, 0)] = m[(1, 1)] / d;
            inv[(0, 1)] = -m[(0, 1)] / d;
            inv[(1, 0)] = -m[(1, 0)] / d;
            inv[(1, 1)] = m[(0, 0)] / d;
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    // cofactor of (j, i)
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    inv[(i, j)] = (m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]) / d;
                }
            }
        }
        _ => panic!("inverse: unsupported dimension {D}"),
    }
    Some((inv, d))
}

pub(crate) fn to_vec<const D: usize>(p: &Point<D>) -> Vec<f64> {
    p.iter().copied().collect()
}

/// Max-abs entry norm, used for all matrix-valued sup norms.
pub fn max_abs<const D: usize>(m: &Mat<D>) -> f64 {
    m.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix2, Matrix3};

    #[test]
    fn inverse_matches_nalgebra() {
        let m = Matrix3::new(2.0, 0.3, -0.1, 0.5, 1.7, 0.2, -0.4, 0.1, 3.0);
        let (inv, d) = inverse(&m, 1e-14).unwrap();
        assert!((d - m.determinant()).abs() < 1e-12);
        assert!((inv - m.try_inverse().unwrap()).norm() < 1e-12);
        let m2 = Matrix2::new(1.0, 2.0, 3.0, 4.0);
        let (inv2, _) = inverse(&m2, 1e-14).unwrap();
        assert!((inv2 * m2 - Matrix2::identity()).norm() < 1e-14);
    }

    #[test]
    fn singular_is_rejected() {
        let m = Matrix2::new(1.0, 2.0, 2.0, 4.0);
        assert!(inverse(&m, 1e-12).is_none());
    }
}
