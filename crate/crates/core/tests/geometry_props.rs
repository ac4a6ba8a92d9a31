use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;

use lidarsplat::distill::{lane_shift_trajectory, Side};
use lidarsplat::geometry::{normalize_quat, quat_to_matrix};
use lidarsplat::scene_io::{interpolate_box_pose, TimedPose, TrackedBox};
use lidarsplat::{CameraIntrinsics, PinholeCamera, Se3Pose};

fn vec3(range: f64) -> impl Strategy<Value = Vector3<f64>> {
    prop::array::uniform3(-range..range).prop_map(Vector3::from)
}

fn pose() -> impl Strategy<Value = Se3Pose> {
    (vec3(1.0), -3.1..3.1f64, vec3(50.0)).prop_filter_map("degenerate axis", |(axis, angle, t)| {
        (axis.norm() > 1e-3).then(|| Se3Pose::from_axis_angle(axis, angle, t))
    })
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn se3_round_trips(a in pose(), p in vec3(30.0)) {
        let back = a.inverse().transform_point(&a.transform_point(&p));
        prop_assert!((back - p).norm() < 1e-9);
        let id = a.compose(&a.inverse());
        prop_assert!((id.rotation - Matrix3::identity()).abs().max() < 1e-12);
        prop_assert!(id.translation.norm() < 1e-9);
    }

    #[test]
    fn composition_is_associative(a in pose(), b in pose(), c in pose(), p in vec3(10.0)) {
        let left = a.compose(&b).compose(&c).transform_point(&p);
        let right = a.compose(&b.compose(&c)).transform_point(&p);
        prop_assert!((left - right).norm() < 1e-9);
    }

    #[test]
    fn constructed_poses_are_rigid(a in pose()) {
        prop_assert!(a.validate(1e-6).is_ok());
        prop_assert!((a.rotation.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalized_quaternions_give_rotations(q in prop::array::uniform4(-2.0..2.0f64)) {
        prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 1e-4);
        let r = quat_to_matrix(normalize_quat(q));
        prop_assert!((r.transpose() * r - Matrix3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn box_interpolation_is_continuous(a in pose(), b in pose(), t in 0.0..1.0f64) {
        let tracked = TrackedBox {
            object_id: "box".into(),
            class_label: "car".into(),
            dimensions: [4.0, 2.0, 1.5],
            poses: vec![TimedPose { timestamp: 0.0, pose: a }, TimedPose { timestamp: 1.0, pose: b }],
        };
        let eps = 1e-7;
        let p = interpolate_box_pose(&tracked, t).unwrap();
        let q = interpolate_box_pose(&tracked, (t + eps).min(1.0)).unwrap();
        let dt = (p.translation - q.translation).norm();
        let dr = rotation_angle(&(p.rotation.transpose() * q.rotation));
        // O(eps): bounded by the keyframe gap times a generous constant
        prop_assert!(dt <= eps * (1.0 + 10.0 * (a.translation - b.translation).norm()));
        prop_assert!(dr <= eps * 100.0);
        prop_assert!(p.validate(1e-6).is_ok());
    }

    #[test]
    fn lane_shift_moves_sideways_by_offset(
        heading in -3.1..3.1f64,
        steps in prop::collection::vec((0.5..3.0f64, -0.3..0.3f64), 2..8),
        offset in 0.1..5.0f64,
    ) {
        let cams = planar_path(heading, &steps);
        let left = lane_shift_trajectory(&cams, offset, Side::Left).unwrap();
        for (a, l) in cams.iter().zip(&left) {
            prop_assert!(((a.center() - l.center()).norm() - offset).abs() < 1e-9);
            prop_assert_eq!(a.world_to_camera.rotation, l.world_to_camera.rotation);
            prop_assert!((a.center() - l.center()).z.abs() < 1e-12);
        }
    }

    #[test]
    fn lane_shift_left_then_right_is_identity_on_straight_paths(
        heading in -3.1..3.1f64,
        lens in prop::collection::vec(0.5..3.0f64, 2..8),
        offset in 0.1..5.0f64,
    ) {
        let steps: Vec<_> = lens.into_iter().map(|l| (l, 0.0)).collect();
        let cams = planar_path(heading, &steps);
        let left = lane_shift_trajectory(&cams, offset, Side::Left).unwrap();
        let back = lane_shift_trajectory(&left, offset, Side::Right).unwrap();
        for (a, b) in cams.iter().zip(&back) {
            prop_assert!((a.center() - b.center()).norm() < 1e-9);
        }
    }
}

fn planar_path(heading: f64, steps: &[(f64, f64)]) -> Vec<PinholeCamera> {
    let k = CameraIntrinsics::centered(40.0, 64, 48);
    let mut pos = Vector3::new(0.0, 0.0, 1.5);
    let mut yaw = heading;
    let mut cams = Vec::new();
    for &(len, turn) in std::iter::once(&(0.0, 0.0)).chain(steps) {
        yaw += turn;
        pos += Vector3::new(yaw.cos(), yaw.sin(), 0.0) * len;
        let ahead = pos + Vector3::new(yaw.cos(), yaw.sin(), -0.1) * 10.0;
        cams.push(PinholeCamera::look_at(k, pos, ahead, Vector3::z()));
    }
    cams
}
