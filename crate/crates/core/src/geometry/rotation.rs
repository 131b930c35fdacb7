use nalgebra::Matrix3;

/// Smallest singular value below which the projection is reported as ambiguous.
pub const DEGENERATE_SINGULAR_VALUE: f64 = 1e-12;

/// A proper rotation: `RᵀR = I`, `det R = +1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RotationProjection {
    pub rotation: RotationMatrix,
    pub min_singular_value: f64,
}

impl RotationProjection {
    /// The input was (numerically) rank-deficient, so the minimizer is not unique.
    pub fn is_degenerate(&self) -> bool {
        self.min_singular_value < DEGENERATE_SINGULAR_VALUE
    }
}

/// Closest rotation in Frobenius norm: `U diag(1, 1, ±1) Vᵀ` from the SVD
/// `A = U Σ Vᵀ`, with the sign flip on the smallest singular direction so
/// that the determinant is positive.
pub fn project_to_rotation(a: &Matrix3<f64>) -> RotationProjection {
    let svd = a.svd(true, true);
    let mut u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let sv = svd.singular_values;
    let min_index = sv.imin();
    if (u * v_t).determinant() < 0.0 {
        let mut col = u.column_mut(min_index);
        col.neg_mut();
    }
    RotationProjection {
        rotation: RotationMatrix(u * v_t),
        min_singular_value: sv[min_index],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Rotation3, Vector3};
    use proptest::prelude::*;

    fn rz90() -> Matrix3<f64> {
        Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0)
    }

    #[test]
    fn identity_fixed() {
        let p = project_to_rotation(&Matrix3::identity());
        assert!((p.rotation.matrix() - Matrix3::identity()).amax() < 1e-15);
        assert!(!p.is_degenerate());
    }

    #[test]
    fn positive_diagonal() {
        let p = project_to_rotation(&Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 0.5)));
        assert!((p.rotation.matrix() - Matrix3::identity()).amax() < 1e-14);
    }

    #[test]
    fn scaled_rotation() {
        let p = project_to_rotation(&(3.0 * rz90()));
        assert!((p.rotation.matrix() - rz90()).amax() < 1e-14);
    }

    #[test]
    fn reflection_gets_proper_rotation() {
        // U Vᵀ is a reflection here; the smallest direction gets flipped
        let p = project_to_rotation(&Matrix3::from_diagonal(&Vector3::new(3.0, 2.0, -1.0)));
        assert!((p.rotation.matrix().determinant() - 1.0).abs() < 1e-12);
        assert!((p.rotation.matrix() - Matrix3::identity()).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_is_flagged() {
        let p = project_to_rotation(&Matrix3::zeros());
        assert!(p.is_degenerate());
        let r = p.rotation.matrix();
        assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
        assert!(r.determinant() > 0.0);
    }

    fn arb_matrix() -> impl Strategy<Value = Matrix3<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 9).prop_map(|v| Matrix3::from_row_slice(&v))
    }

    fn arb_rotation() -> impl Strategy<Value = Matrix3<f64>> {
        (-3.2f64..3.2, -3.2f64..3.2, -3.2f64..3.2)
            .prop_map(|(r, p, y)| *Rotation3::from_euler_angles(r, p, y).matrix())
    }

    proptest! {
        #[test]
        fn rotations_are_fixed_points(r in arb_rotation()) {
            let p = project_to_rotation(&r);
            prop_assert!((p.rotation.matrix() - r).amax() < 1e-12);
        }

        #[test]
        fn projection_is_orthonormal_and_closest(
            a in arb_matrix(),
            qs in proptest::collection::vec(arb_rotation(), 20),
        ) {
            let p = project_to_rotation(&a);
            let r = p.rotation.matrix();
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-9);
            prop_assert!(r.determinant() > 0.0);
            let d = (a - r).norm();
            for q in qs {
                prop_assert!(d <= (a - q).norm() + 1e-12);
            }
        }
    }
}
