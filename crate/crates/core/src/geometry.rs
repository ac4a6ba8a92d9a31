//! Rigid transforms, quaternions and the pinhole camera model.
//!
//! Conventions: world frame is right-handed and z-up; camera frame is
//! x-right, y-down, z-forward. A camera pose is stored world-to-camera.
//! Pixel centers sit at integer coordinates, so pixel `(i, j)` covers
//! `[i - 0.5, i + 0.5) x [j - 0.5, j + 0.5)`.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Orthonormality tolerance applied to loaded rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-6;

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Se3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl From<PoseRepr> for Se3Pose {
    fn from(r: PoseRepr) -> Self {
        let m = r.rotation;
        Se3Pose {
            rotation: Matrix3::new(
                m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
            ),
            translation: Vector3::from(r.translation),
        }
    }
}

impl From<Se3Pose> for PoseRepr {
    fn from(p: Se3Pose) -> Self {
        let r = &p.rotation;
        PoseRepr {
            rotation: [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn identity() -> Self {
        Se3Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Se3Pose { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Se3Pose::new(Matrix3::identity(), t)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Se3Pose::new(q.to_rotation_matrix().into_inner(), t)
    }

    /// Rotation about `axis` by `angle` radians followed by translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::from_quaternion(&q, t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Pose) -> Se3Pose {
        Se3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Se3Pose {
        let rt = self.rotation.transpose();
        Se3Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Checks `‖RᵀR − I‖∞ < tol`, `|det R − 1| < tol` and finiteness.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvariantViolation("non-finite pose entry".into()));
        }
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if err >= tol {
            return Err(Error::InvariantViolation(format!(
                "rotation not orthonormal (‖RᵀR − I‖∞ = {err:e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() >= tol {
            return Err(Error::InvariantViolation(format!(
                "rotation determinant {det} is not +1"
            )));
        }
        Ok(())
    }

    /// Translation lerp and shortest-path quaternion slerp, `w ∈ [0, 1]`.
    pub fn interpolate(&self, other: &Se3Pose, w: f64) -> Se3Pose {
        let qa = self.quaternion();
        let qb = other.quaternion();
        let q = slerp_aligned(&qa, &qb, w);
        Se3Pose::from_quaternion(&q, self.translation * (1.0 - w) + other.translation * w)
    }
}

/// Slerp with sign alignment so the path is the short arc.
pub fn slerp_aligned(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, w: f64) -> UnitQuaternion<f64> {
    let qa = a.into_inner();
    let mut qb = b.into_inner();
    let mut dot = qa.coords.dot(&qb.coords);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        qa.coords * (1.0 - w) + qb.coords * w
    } else {
        let theta = dot.clamp(-1.0, 1.0).acos();
        let s = theta.sin();
        qa.coords * (((1.0 - w) * theta).sin() / s) + qb.coords * ((w * theta).sin() / s)
    };
    UnitQuaternion::new_normalize(nalgebra::Quaternion::from(coords))
}

/// Rotation matrix of a unit quaternion stored as `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
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

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Hamilton product of `[w, x, y, z]` quaternions.
pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

pub fn matrix_to_quat(m: &Matrix3<f64>) -> [f64; 4] {
    let q = UnitQuaternion::from_matrix(m);
    [q.w, q.i, q.j, q.k]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvariantViolation(format!("invalid intrinsics {self:?}")))
        }
    }

    /// Centered principal point, `c = (size - 1) / 2`.
    pub fn centered(f: f64, width: u32, height: u32) -> Self {
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }
}

/// Intrinsics plus world-to-camera extrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PinholeCamera {
    pub intrinsics: CameraIntrinsics,
    pub world_to_camera: Se3Pose,
}

impl PinholeCamera {
    pub fn new(intrinsics: CameraIntrinsics, world_to_camera: Se3Pose) -> Self {
        PinholeCamera {
            intrinsics,
            world_to_camera,
        }
    }

    /// Camera looking from `eye` toward `target` with world `up`.
    pub fn look_at(intrinsics: CameraIntrinsics, eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        // rows of the world-to-camera rotation are the camera axes in world
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye);
        PinholeCamera::new(intrinsics, Se3Pose::new(r, t))
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width as usize
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height as usize
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.world_to_camera.rotation.transpose() * self.world_to_camera.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.world_to_camera.transform_point(p)
    }

    /// Continuous pixel coordinates of a camera-frame point (z must be > 0).
    pub fn project_camera_point(&self, pc: &Vector3<f64>) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy)
    }

    /// Projects a world point; `None` when it is not strictly in front.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let pc = self.to_camera(p);
        if pc.z <= 0.0 {
            return None;
        }
        let (u, v) = self.project_camera_point(&pc);
        Some((u, v, pc.z))
    }

    /// Unnormalized world-space ray direction through pixel `(u, v)`.
    pub fn ray_direction(&self, u: f64, v: f64) -> Vector3<f64> {
        let k = &self.intrinsics;
        let d = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
        self.world_to_camera.rotation.transpose() * d
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        self.world_to_camera.validate(ROTATION_TOLERANCE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn compose_inverse_is_identity() {
        let p = Se3Pose::from_axis_angle(Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(3.0, -1.0, 2.0));
        let id = p.compose(&p.inverse());
        assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
        assert!(id.translation.norm() < 1e-12);
    }

    #[test]
    fn validate_rejects_scaled_rotation() {
        let mut p = Se3Pose::identity();
        p.rotation *= 1.01;
        assert!(p.validate(ROTATION_TOLERANCE).is_err());
        let mut p = Se3Pose::identity();
        p.rotation[(0, 0)] = -1.0; // reflection
        assert!(p.validate(ROTATION_TOLERANCE).is_err());
    }

    #[test]
    fn slerp_halfway_to_right_angle() {
        let a = Se3Pose::identity();
        let b = Se3Pose::from_axis_angle(Vector3::z(), FRAC_PI_2, Vector3::zeros());
        let m = a.interpolate(&b, 0.5);
        let expect = Se3Pose::from_axis_angle(Vector3::z(), FRAC_PI_2 / 2.0, Vector3::zeros());
        assert!((m.rotation - expect.rotation).amax() < 1e-9);
    }

    #[test]
    fn slerp_takes_short_path_for_negated_quaternion() {
        let qa = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.2);
        let qb = UnitQuaternion::new_unchecked(-UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.4).into_inner());
        let q = slerp_aligned(&qa, &qb, 0.5);
        assert_relative_eq!(q.angle(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn quat_matrix_matches_nalgebra() {
        let q = UnitQuaternion::from_euler_angles(0.3, -0.2, 1.1);
        let m = quat_to_matrix([q.w, q.i, q.j, q.k]);
        assert!((m - q.to_rotation_matrix().into_inner()).amax() < 1e-14);
        let back = matrix_to_quat(&m);
        let m2 = quat_to_matrix(back);
        assert!((m - m2).amax() < 1e-14);
    }

    #[test]
    fn quat_mul_matches_matrix_product() {
        let a = UnitQuaternion::from_euler_angles(0.1, 0.5, -0.3);
        let b = UnitQuaternion::from_euler_angles(-0.4, 0.2, 0.9);
        let qa = [a.w, a.i, a.j, a.k];
        let qb = [b.w, b.i, b.j, b.k];
        let m = quat_to_matrix(quat_mul(qa, qb));
        assert!((m - quat_to_matrix(qa) * quat_to_matrix(qb)).amax() < 1e-14);
    }

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let k = CameraIntrinsics::centered(100.0, 64, 48);
        let cam = PinholeCamera::look_at(
            k,
            Vector3::new(0.0, 0.0, 1.5),
            Vector3::new(10.0, 0.0, 1.5),
            Vector3::z(),
        );
        let (u, v, z) = cam.project(&Vector3::new(10.0, 0.0, 1.5)).unwrap();
        assert_relative_eq!(u, k.cx, epsilon = 1e-12);
        assert_relative_eq!(v, k.cy, epsilon = 1e-12);
        assert_relative_eq!(z, 10.0, epsilon = 1e-12);
        // world up maps to image up (negative v)
        let (_, v_up, _) = cam.project(&Vector3::new(10.0, 0.0, 2.5)).unwrap();
        assert!(v_up < k.cy);
        // world +y (left when looking along +x) maps to smaller u
        let (u_left, _, _) = cam.project(&Vector3::new(10.0, 1.0, 1.5)).unwrap();
        assert!(u_left < k.cx);
        cam.validate().unwrap();
        assert!((cam.center() - Vector3::new(0.0, 0.0, 1.5)).norm() < 1e-12);
    }
}
