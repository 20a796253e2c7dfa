//! Rotation algebra: the 6D continuous representation, Euler and quaternion
//! conversions, and the reverse-mode derivative of the 6D map.
//!
//! Conventions: column vectors, right-handed frames, quaternions stored as
//! `(x, y, z, w)` through [`nalgebra::Quaternion`] whose `coords` use that order.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = Quaternion<f64>;

/// Threshold below which 6D inputs are rejected at the API boundary.
pub const DEGENERATE_EPS: f64 = 1e-8;

/// Norm regularizer used inside the network forward pass.
pub const REGULARIZE_EPS: f64 = 1e-8;

/// Reconstructs a rotation from its 6D form `[a; b]` by normalize-cross-cross:
/// `x = a/|a|`, `z = (x × b)/|x × b|`, `y = z × x`.
pub fn rotation6d_to_matrix(r6: &[f64; 6]) -> Result<Mat3> {
    let a = Vec3::new(r6[0], r6[1], r6[2]);
    let b = Vec3::new(r6[3], r6[4], r6[5]);
    let na = a.norm();
    if !(na > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation { norm: na });
    }
    let x = a / na;
    let u = x.cross(&b);
    let nu = u.norm();
    if !(nu > DEGENERATE_EPS) {
        return Err(Error::DegenerateRotation { norm: nu });
    }
    let z = u / nu;
    let y = z.cross(&x);
    Ok(Mat3::from_columns(&[x, y, z]))
}

/// Same map as [`rotation6d_to_matrix`] but with `eps` added to both norms so
/// that it never fails. Used inside training and inference.
pub fn rotation6d_to_matrix_regularized(r6: &[f64; 6], eps: f64) -> Mat3 {
    let a = Vec3::new(r6[0], r6[1], r6[2]);
    let b = Vec3::new(r6[3], r6[4], r6[5]);
    let x = a / (a.norm() + eps);
    let u = x.cross(&b);
    let z = u / (u.norm() + eps);
    let y = z.cross(&x);
    Mat3::from_columns(&[x, y, z])
}

// d/dv of v / (|v| + eps), applied to an upstream gradient.
fn normalize_eps_backward(v: &Vec3, grad: &Vec3, eps: f64) -> Vec3 {
    let n = v.norm();
    let denom = n + eps;
    if n == 0.0 {
        return grad / denom;
    }
    grad / denom - v * (v.dot(grad) / (n * denom * denom))
}

/// Gradient of a scalar loss w.r.t. the 6D input of
/// [`rotation6d_to_matrix_regularized`], given the gradient w.r.t. its output.
pub fn rotation6d_backward(r6: &[f64; 6], grad: &Mat3, eps: f64) -> [f64; 6] {
    let a = Vec3::new(r6[0], r6[1], r6[2]);
    let b = Vec3::new(r6[3], r6[4], r6[5]);
    let x = a / (a.norm() + eps);
    let u = x.cross(&b);
    let z = u / (u.norm() + eps);

    let gx_out: Vec3 = grad.column(0).into();
    let gy: Vec3 = grad.column(1).into();
    let gz_out: Vec3 = grad.column(2).into();

    // y = z × x
    let gz = gz_out + x.cross(&gy);
    let mut gx = gx_out + gy.cross(&z);
    // z = normalize(u)
    let gu = normalize_eps_backward(&u, &gz, eps);
    // u = x × b
    let gb = gu.cross(&x);
    gx += b.cross(&gu);
    // x = normalize(a)
    let ga = normalize_eps_backward(&a, &gx, eps);
    [ga[0], ga[1], ga[2], gb[0], gb[1], gb[2]]
}

/// First two columns of `r`, concatenated.
pub fn matrix_to_rotation6d(r: &Mat3) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

pub fn rot_x(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

pub fn rot_y(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

pub fn rot_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// `Z(α) · Y(β) · X(γ)` for `angles = (α, β, γ)` in radians.
pub fn euler_to_matrix(angles: &[f64; 3]) -> Mat3 {
    rot_z(angles[0]) * rot_y(angles[1]) * rot_x(angles[2])
}

/// Rotation by `angle` about `axis` (normalized internally).
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let axis = nalgebra::Unit::new_normalize(*axis);
    Rotation3::from_axis_angle(&axis, angle).into_inner()
}

/// Standard unit-quaternion to matrix map. The input is renormalized; `q` and
/// `-q` give the same matrix.
pub fn quaternion_to_matrix(q: &Quat) -> Result<Mat3> {
    let n = q.norm();
    if !(n > 1e-12) {
        return Err(Error::DegenerateRotation { norm: n });
    }
    let (x, y, z, w) = (q.i / n, q.j / n, q.k / n, q.w / n);
    Ok(Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - z * w),
        2.0 * (x * z + y * w),
        2.0 * (x * y + z * w),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - x * w),
        2.0 * (x * z - y * w),
        2.0 * (y * z + x * w),
        1.0 - 2.0 * (x * x + y * y),
    ))
}

/// Unit quaternion for a rotation matrix, with `w >= 0`.
pub fn matrix_to_quaternion(r: &Mat3) -> Quat {
    let rot = Rotation3::from_matrix_unchecked(*r);
    let q = UnitQuaternion::from_rotation_matrix(&rot).into_inner();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Frobenius norm of `RᵀR − I`.
pub fn orthonormality_error(r: &Mat3) -> f64 {
    (r.transpose() * r - Mat3::identity()).norm()
}

/// Checks the rotation-matrix invariants within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    orthonormality_error(r) < tol && (r.determinant() - 1.0).abs() < tol
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: &Mat3, b: &Mat3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    // Classical Gram-Schmidt on the two input columns, third column from the
    // right-hand rule. Independent of the cross-product route.
    fn gram_schmidt(r6: &[f64; 6]) -> Mat3 {
        let a = Vec3::new(r6[0], r6[1], r6[2]);
        let b = Vec3::new(r6[3], r6[4], r6[5]);
        let e1 = a / a.norm();
        let p = b - e1 * e1.dot(&b);
        let e2 = p / p.norm();
        let e3 = Vec3::new(
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        );
        Mat3::from_columns(&[e1, e2, e3])
    }

    #[test]
    fn six_d_identity_cases() {
        let id = Mat3::identity();
        assert!(close(&rotation6d_to_matrix(&[1., 0., 0., 0., 1., 0.]).unwrap(), &id, 1e-15));
        assert!(close(&rotation6d_to_matrix(&[2., 0., 0., 0., 3., 0.]).unwrap(), &id, 1e-15));
    }

    #[test]
    fn six_d_swapped_axes() {
        let r6 = [0., 1., 0., 1., 0., 0.];
        let r = rotation6d_to_matrix(&r6).unwrap();
        let expected = Mat3::from_columns(&[
            Vec3::new(0., 1., 0.),
            Vec3::new(1., 0., 0.),
            Vec3::new(0., 0., -1.),
        ]);
        assert!(close(&r, &expected, 1e-15));
        assert!(close(&r, &gram_schmidt(&r6), 1e-12));
    }

    #[test]
    fn six_d_matches_gram_schmidt() {
        let cases = [
            [0.3, -1.2, 0.5, 0.9, 0.1, -0.4],
            [1.0, 2.0, 3.0, -3.0, 2.0, 1.0],
            [-0.1, 0.0, 0.7, 0.2, 5.0, 0.0],
        ];
        for r6 in cases {
            let r = rotation6d_to_matrix(&r6).unwrap();
            assert!(close(&r, &gram_schmidt(&r6), 1e-12));
            assert!(is_rotation(&r, 1e-12));
        }
    }

    #[test]
    fn six_d_degenerate_inputs() {
        match rotation6d_to_matrix(&[0., 0., 0., 0., 1., 0.]) {
            Err(Error::DegenerateRotation { norm }) => assert_eq!(norm, 0.0),
            other => panic!("expected degenerate error, got {other:?}"),
        }
        assert!(matches!(
            rotation6d_to_matrix(&[1., 0., 0., 2., 0., 0.]),
            Err(Error::DegenerateRotation { .. })
        ));
        let r = rotation6d_to_matrix_regularized(&[0.0; 6], REGULARIZE_EPS);
        assert!(r.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn six_d_round_trip_identity() {
        assert_eq!(matrix_to_rotation6d(&Mat3::identity()), [1., 0., 0., 0., 1., 0.]);
    }

    #[test]
    fn euler_cases() {
        assert!(close(&euler_to_matrix(&[0., 0., 0.]), &Mat3::identity(), 0.0));
        let expected = Mat3::new(0., -1., 0., 1., 0., 0., 0., 0., 1.);
        assert!(close(&euler_to_matrix(&[FRAC_PI_2, 0., 0.]), &expected, 1e-15));
    }

    #[test]
    fn euler_factor_order() {
        // Per-axis oracle from axis-angle rotations about the canonical axes.
        let mut seed = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            seed ^= seed << 13;
            seed ^= seed >> 7;
            seed ^= seed << 17;
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 * PI - PI
        };
        for _ in 0..100 {
            let (a, b, g) = (next(), next(), next());
            let oracle = axis_angle(&Vec3::z(), a) * axis_angle(&Vec3::y(), b) * axis_angle(&Vec3::x(), g);
            assert!(close(&euler_to_matrix(&[a, b, g]), &oracle, 1e-12));
        }
    }

    #[test]
    fn quaternion_cases() {
        let id = quaternion_to_matrix(&Quat::new(1.0, 0.0, 0.0, 0.0)).unwrap();
        assert!(close(&id, &Mat3::identity(), 0.0));
        let q = Quat::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin());
        let r = quaternion_to_matrix(&q).unwrap();
        assert!(close(&r, &axis_angle(&Vec3::z(), FRAC_PI_2), 1e-12));
        assert!(close(&quaternion_to_matrix(&-q).unwrap(), &r, 0.0));
        assert!(matches!(
            quaternion_to_matrix(&Quat::new(0.0, 0.0, 0.0, 0.0)),
            Err(Error::DegenerateRotation { .. })
        ));
    }

    #[test]
    fn quaternion_round_trip() {
        let r = euler_to_matrix(&[0.3, -1.1, 2.0]);
        let q = matrix_to_quaternion(&r);
        assert!(q.w >= 0.0);
        assert!(close(&quaternion_to_matrix(&q).unwrap(), &r, 1e-12));
    }

    #[test]
    fn six_d_backward_matches_finite_differences() {
        let r6 = [0.4, -0.7, 1.1, 0.9, 0.3, -0.2];
        let weights = Mat3::new(0.3, -1.0, 0.5, 0.2, 0.8, -0.6, 1.1, 0.1, -0.4);
        let f = |v: &[f64; 6]| rotation6d_to_matrix_regularized(v, REGULARIZE_EPS).component_mul(&weights).sum();
        let analytic = rotation6d_backward(&r6, &weights, REGULARIZE_EPS);
        let h = 1e-6;
        for i in 0..6 {
            let mut p = r6;
            let mut m = r6;
            p[i] += h;
            m[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            assert!((fd - analytic[i]).abs() < 1e-7, "component {i}: {fd} vs {}", analytic[i]);
        }
    }
}
