//! Squared L2, geodesic and look-at errors, with their gradients.

use crate::error::{shape_err, Error, Result};
use crate::geometry::{Mat3, Vec3};

/// Clamp margin on arccos arguments so gradients stay finite at ±1.
pub const ACOS_CLAMP_EPS: f64 = 1e-7;

/// Squared Euclidean distance `‖y − ŷ‖²`.
pub fn l2_error(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    if y.len() != y_hat.len() {
        return Err(shape_err(format!("l2_error on lengths {} and {}", y.len(), y_hat.len())));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)).sum())
}

pub fn l2_vec3(y: &Vec3, y_hat: &Vec3) -> f64 {
    (y - y_hat).norm_squared()
}

fn clamped_acos(c: f64) -> (f64, f64) {
    let lo = -1.0 + ACOS_CLAMP_EPS;
    let hi = 1.0 - ACOS_CLAMP_EPS;
    if c >= hi {
        (hi.acos(), 0.0)
    } else if c <= lo {
        (lo.acos(), 0.0)
    } else {
        (c.acos(), -1.0 / (1.0 - c * c).sqrt())
    }
}

fn trace_product(r: &Mat3, r_hat: &Mat3) -> f64 {
    // tr(R̂ᵀR) as an elementwise product sum, symmetric in its arguments.
    r.component_mul(r_hat).sum()
}

/// `arccos((tr(R̂ᵀR) − 1)/2)` with the argument clamped to `[−1+ε, 1−ε]`.
pub fn geodesic_distance(r: &Mat3, r_hat: &Mat3) -> f64 {
    clamped_acos((trace_product(r, r_hat) - 1.0) / 2.0).0
}

/// Geodesic distance and its gradient w.r.t. `r_hat`.
pub fn geodesic_with_grad(r: &Mat3, r_hat: &Mat3) -> (f64, Mat3) {
    let (theta, dtheta_dc) = clamped_acos((trace_product(r, r_hat) - 1.0) / 2.0);
    (theta, r * (0.5 * dtheta_dc))
}

/// Geodesic distance clamped only to the arccos domain `[−1, 1]`. Used for
/// reporting metrics, where no gradient is needed.
pub fn geodesic_distance_exact(r: &Mat3, r_hat: &Mat3) -> f64 {
    ((trace_product(r, r_hat) - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Gradient of a look-at error w.r.t. the joint's global rotation and position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LookAtGrad {
    pub d_rotation: Mat3,
    pub d_position: Vec3,
}

/// Angle between the ray from the joint to `target` and the joint's local
/// `direction` expressed in world space.
pub fn lookat_error(target: &Vec3, direction: &Vec3, rotation: &Mat3, position: &Vec3) -> Result<f64> {
    let v = target - position;
    let dist = v.norm();
    if !(dist > 1e-8) {
        return Err(Error::DegenerateLookAt { distance: dist });
    }
    let dn = direction.norm();
    if !(dn > 1e-8) {
        return Err(Error::Domain(format!("look-at direction has norm {dn:e}")));
    }
    let c = (v / dist).dot(&(rotation * (direction / dn)));
    Ok(clamped_acos(c).0)
}

/// Look-at error with `eps` added to the ray and direction norms, and its
/// gradient. Never fails; used inside training.
pub fn lookat_with_grad(target: &Vec3, direction: &Vec3, rotation: &Mat3, position: &Vec3, eps: f64) -> (f64, LookAtGrad) {
    let v = target - position;
    let n = v.norm();
    let u = v / (n + eps);
    let d = direction / (direction.norm() + eps);
    let w = rotation * d;
    let (theta, dtheta_dc) = clamped_acos(u.dot(&w));
    // c = u·(R d); dc/dR = u dᵀ; dc/du = R d; du/dv = (I − v vᵀ/(n (n+eps)))/(n+eps).
    let d_rotation = u * d.transpose() * dtheta_dc;
    let du = w * dtheta_dc;
    let dv = if n > 0.0 {
        du / (n + eps) - v * (v.dot(&du) / (n * (n + eps) * (n + eps)))
    } else {
        du / (n + eps)
    };
    (theta, LookAtGrad { d_rotation, d_position: -dv })
}
