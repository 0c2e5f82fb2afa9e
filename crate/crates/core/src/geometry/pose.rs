use nalgebra::{Matrix3, Vector3};

use super::{Mat3, Vec3};
use crate::error::{Error, Result};

/// Quaternion in (w, x, y, z) order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * rhs`.
    pub fn mul(self, r: Self) -> Self {
        let (a, b) = (self, r);
        Self::new(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.normalize();
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * n.x, s * n.y, s * n.z)
    }

    /// Canonical sign: `w >= 0`, and when `w == 0` the first nonzero
    /// component is positive.
    pub fn canonical(self) -> Self {
        let a = self.to_array();
        let first = a.iter().copied().find(|v| *v != 0.0).unwrap_or(0.0);
        if first < 0.0 {
            Self::new(-self.w, -self.x, -self.y, -self.z)
        } else {
            self
        }
    }

    /// Rotates `v` by `q v q⁻¹` (assumes unit norm).
    pub fn rotate(self, v: Vec3) -> Vec3 {
        let p = Quaternion::new(0.0, v.x, v.y, v.z);
        let r = self.mul(p).mul(self.conjugate());
        Vec3::new(r.x, r.y, r.z)
    }

    pub fn to_rotation_matrix(self) -> Mat3 {
        let Quaternion { w, x, y, z } = self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }
}

/// Unit quaternion plus translation: the pose representation the network
/// regresses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseQT {
    q: Quaternion,
    t: Vec3,
}

impl PoseQT {
    pub fn identity() -> Self {
        Self {
            q: Quaternion::IDENTITY,
            t: Vec3::zeros(),
        }
    }

    /// Normalizes and sign-canonicalizes `q`.
    pub fn new(q: Quaternion, t: Vec3) -> Result<Self> {
        let n = q.norm();
        if !(n > 1e-12) || !n.is_finite() {
            return Err(Error::DegenerateQuaternion(n));
        }
        let q = Quaternion::new(q.w / n, q.x / n, q.y / n, q.z / n).canonical();
        Ok(Self { q, t })
    }

    pub fn from_rotation(q: Quaternion) -> Result<Self> {
        Self::new(q, Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            q: Quaternion::IDENTITY,
            t,
        }
    }

    pub fn from_axis_angle(axis: Vec3, angle: f64, t: Vec3) -> Self {
        Self::new(Quaternion::from_axis_angle(axis, angle), t)
            .expect("axis-angle quaternion is unit norm")
    }

    pub fn q(&self) -> Quaternion {
        self.q
    }

    pub fn t(&self) -> Vec3 {
        self.t
    }

    pub fn inverse(&self) -> Self {
        let qi = self.q.conjugate();
        let t = -qi.rotate(self.t);
        Self {
            q: qi.canonical(),
            t,
        }
    }

    /// The pose that applies `inner` first, then `outer`:
    /// `q = q_outer q_inner`, `t = q_outer t_inner q_outer⁻¹ + t_outer`.
    pub fn compose(outer: &PoseQT, inner: &PoseQT) -> PoseQT {
        let q = outer.q.mul(inner.q);
        let t = outer.q.rotate(inner.t) + outer.t;
        PoseQT::new(q, t).expect("product of unit quaternions is unit norm")
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.q.rotate(p) + self.t
    }

    pub fn apply(&self, points: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let r = self.q.to_rotation_matrix();
        points
            .iter()
            .map(|p| {
                let v = r * Vec3::new(p[0], p[1], p[2]) + self.t;
                [v.x, v.y, v.z]
            })
            .collect()
    }

    pub fn to_matrix(&self) -> RigidTransform {
        RigidTransform {
            r: self.q.to_rotation_matrix(),
            t: self.t,
        }
    }

    pub fn from_matrix(m: &RigidTransform) -> Result<Self> {
        m.check()?;
        let r = &m.r;
        let tr = r.trace();
        // Shepperd: branch on the largest of (w, x, y, z) magnitudes.
        let q = if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
            let s = (1.0 + tr).sqrt() * 2.0;
            Quaternion::new(
                0.25 * s,
                (r[(2, 1)] - r[(1, 2)]) / s,
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(1, 0)] - r[(0, 1)]) / s,
            )
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(2, 1)] - r[(1, 2)]) / s,
                0.25 * s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
            )
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(0, 2)] - r[(2, 0)]) / s,
                (r[(0, 1)] + r[(1, 0)]) / s,
                0.25 * s,
                (r[(1, 2)] + r[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Quaternion::new(
                (r[(1, 0)] - r[(0, 1)]) / s,
                (r[(0, 2)] + r[(2, 0)]) / s,
                (r[(1, 2)] + r[(2, 1)]) / s,
                0.25 * s,
            )
        };
        PoseQT::new(q, m.t)
    }

    /// Max absolute difference over quaternion and translation components.
    pub fn max_abs_diff(&self, other: &PoseQT) -> f64 {
        let a = self.q.to_array();
        let b = other.q.to_array();
        let dq = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let dt = (self.t - other.t).amax();
        dq.max(dt)
    }
}

/// Rotation matrix plus translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub r: Mat3,
    pub t: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            r: Mat3::identity(),
            t: Vec3::zeros(),
        }
    }

    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        let m = Self { r, t };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<()> {
        let ortho = (self.r.transpose() * self.r - Mat3::identity()).amax();
        let det = self.r.determinant();
        if !(ortho <= 1e-6) || !((det - 1.0).abs() <= 1e-6) {
            return Err(Error::NotARotation(ortho.max((det - 1.0).abs())));
        }
        Ok(())
    }

    /// `self * rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &RigidTransform) -> RigidTransform {
        RigidTransform {
            r: self.r * rhs.r,
            t: self.r * rhs.t + self.t,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.r.transpose();
        RigidTransform { r: rt, t: -(rt * self.t) }
    }

    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        self.r * p + self.t
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.r - other.r).amax().max((self.t - other.t).amax())
    }
}

impl From<Vector3<f64>> for PoseQT {
    fn from(t: Vector3<f64>) -> Self {
        PoseQT::from_translation(t)
    }
}
