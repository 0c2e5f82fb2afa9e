use nalgebra::Vector6;

use super::{Mat3, PoseQT, RigidTransform, Vec3};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EulerOrder {
    /// `R = Rx(a) Ry(b) Rz(c)`.
    IntrinsicXyz,
    /// `R = Rz(a) Ry(b) Rx(c)`.
    IntrinsicZyx,
}

/// Euler convention used for the rotation error of [`rre_rte`].
pub const RRE_EULER_ORDER: EulerOrder = EulerOrder::IntrinsicXyz;

/// Euler angles in radians, ordered as the convention names them.
pub fn euler_angles(r: &Mat3, order: EulerOrder) -> [f64; 3] {
    match order {
        EulerOrder::IntrinsicXyz => {
            let b = r[(0, 2)].clamp(-1.0, 1.0).asin();
            let a = (-r[(1, 2)]).atan2(r[(2, 2)]);
            let c = (-r[(0, 1)]).atan2(r[(0, 0)]);
            [a, b, c]
        }
        EulerOrder::IntrinsicZyx => {
            let b = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
            let a = r[(1, 0)].atan2(r[(0, 0)]);
            let c = r[(2, 1)].atan2(r[(2, 2)]);
            [a, b, c]
        }
    }
}

/// Relative rotation error (sum of absolute Euler angles of
/// `R_pred⁻¹ R_gt`, degrees) and relative translation error
/// (`‖t_pred − t_gt‖₂`).
pub fn rre_rte(pred: &PoseQT, gt: &PoseQT) -> (f64, f64) {
    let re = pred.to_matrix().r.transpose() * gt.to_matrix().r;
    let rre = euler_angles(&re, RRE_EULER_ORDER)
        .iter()
        .map(|a| a.abs().to_degrees())
        .sum();
    (rre, (pred.t() - gt.t()).norm())
}

/// Geodesic angle (degrees) and translation norm of `pred · gt⁻¹`.
pub fn rot_transl_error(pred: &RigidTransform, gt: &RigidTransform) -> (f64, f64) {
    let e = pred.compose(&gt.inverse());
    let c = ((e.r.trace().clamp(-1.0, 3.0)) - 1.0) / 2.0;
    (c.acos().to_degrees(), e.t.norm())
}

/// Rotation log as an axis-angle vector.
fn so3_log(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-6 {
        return 0.5 * skew;
    }
    if std::f64::consts::PI - theta < 1e-4 {
        // sin θ ≈ 0: recover the axis from the symmetric part n nᵀ = (R + I)/2 near π.
        let b = (r + r.transpose()) * 0.5;
        let nn = (b - Mat3::identity() * cos) / (1.0 - cos);
        let (k, _) = (0..3)
            .map(|i| (i, nn[(i, i)]))
            .fold((0, f64::MIN), |best, c| if c.1 > best.1 { c } else { best });
        let mut n = Vec3::new(nn[(0, k)], nn[(1, k)], nn[(2, k)]) / nn[(k, k)].max(1e-300).sqrt();
        n /= n.norm();
        if n.dot(&skew) < 0.0 {
            n = -n;
        }
        return n * theta;
    }
    skew * (theta / (2.0 * theta.sin()))
}

fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// SE(3) logarithm as `(ρ, ω)` with `ω` the rotation vector in radians.
pub fn se3_log(t: &RigidTransform) -> Vector6<f64> {
    let w = so3_log(&t.r);
    let theta = w.norm();
    let wx = hat(&w);
    let coef = if theta < 1e-6 {
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        let (s, c) = theta.sin_cos();
        (1.0 - theta * s / (2.0 * (1.0 - c))) / (theta * theta)
    };
    let v_inv = Mat3::identity() - 0.5 * wx + coef * wx * wx;
    let rho = v_inv * t.t;
    Vector6::new(rho.x, rho.y, rho.z, w.x, w.y, w.z)
}

/// `‖log(a · b⁻¹)‖₂`.
pub fn se3_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    se3_log(&a.compose(&b.inverse())).norm()
}

/// Mean se(3) error and mean re-calibration rate (a fraction; 1.0 = 100%).
pub fn msee_mrr(errors: &[f64], noises: &[f64]) -> Result<(f64, f64)> {
    if errors.len() != noises.len() || errors.is_empty() {
        return Err(Error::LengthMismatch(errors.len(), noises.len()));
    }
    if let Some(i) = noises.iter().position(|n| !(*n > 0.0)) {
        return Err(Error::ZeroNoise(i));
    }
    let n = errors.len() as f64;
    let msee = errors.iter().sum::<f64>() / n;
    let mrr = errors
        .iter()
        .zip(noises)
        .map(|(e, eta)| (eta - e) / eta)
        .sum::<f64>()
        / n;
    Ok((msee, mrr))
}
