//! SO(3) exponential and logarithm maps (Rodrigues form) with the
//! numerically stable branches needed near zero and near pi.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};

/// Skew-symmetric (hat) matrix of a 3-vector: `skew(w) * v == w x v`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential: axis-angle vector to rotation matrix.
///
/// Total function; small angles use the Taylor expansion of the
/// sinc-style coefficients so the result stays exact near zero.
pub fn so3_exp(omega: Vector3<f64>) -> Matrix3<f64> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(&omega);
    let (a, b) = if theta < 1e-8 {
        // sin(t)/t and (1-cos(t))/t^2 expanded to O(t^4)
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + a * w + b * (w * w)
}

/// Principal logarithm of a rotation matrix, |result| <= pi.
///
/// Near pi the sin-based formula loses precision, so that branch
/// recovers the axis from the diagonal of R + I instead.
pub fn so3_log(rot: &Matrix3<f64>) -> Vector3<f64> {
    let trace = rot.trace();
    let cos_theta = ((trace - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();

    if theta < 1e-8 {
        // First order: R ~ I + skew(w)
        return 0.5
            * Vector3::new(
                rot[(2, 1)] - rot[(1, 2)],
                rot[(0, 2)] - rot[(2, 0)],
                rot[(1, 0)] - rot[(0, 1)],
            );
    }

    if theta < std::f64::consts::PI - 1e-5 {
        let axis = Vector3::new(
            rot[(2, 1)] - rot[(1, 2)],
            rot[(0, 2)] - rot[(2, 0)],
            rot[(1, 0)] - rot[(0, 1)],
        ) / (2.0 * theta.sin());
        return axis * theta;
    }

    // Near pi: R + I = 2(I + outer(n, n) - I) ... diagonal gives n^2 components.
    let rp = rot + Matrix3::identity();
    let diag = Vector3::new(rp[(0, 0)], rp[(1, 1)], rp[(2, 2)]) * 0.5;
    let k = diag.imax();
    let mut axis = Vector3::zeros();
    axis[k] = diag[k].max(0.0).sqrt();
    for i in 0..3 {
        if i != k {
            axis[i] = rp[(i, k)] / (2.0 * axis[k]);
        }
    }
    let axis = axis.normalize();
    // Fix the sign so that the off-diagonal antisymmetric part agrees.
    let sin_part = Vector3::new(
        rot[(2, 1)] - rot[(1, 2)],
        rot[(0, 2)] - rot[(2, 0)],
        rot[(1, 0)] - rot[(0, 1)],
    );
    let axis = if sin_part.dot(&axis) < 0.0 { -axis } else { axis };
    axis * theta
}

/// Inverse of the right Jacobian of SO(3) at `theta`.
///
/// Used by the iterated update to relate tangent increments taken at the
/// current iterate to the tangent space of the prediction.
pub fn so3_right_jacobian_inv(theta: Vector3<f64>) -> Matrix3<f64> {
    let t2 = theta.norm_squared();
    let t = t2.sqrt();
    let w = skew(&theta);
    let coeff = if t < 1e-6 {
        1.0 / 12.0 + t2 / 720.0
    } else {
        (1.0 / t2) - (1.0 + t.cos()) / (2.0 * t * t.sin())
    };
    Matrix3::identity() + 0.5 * w + coeff * (w * w)
}

/// Flip a quaternion into the w >= 0 canonical half-space.
pub fn canonicalize_quaternion(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}
