use approx::{assert_abs_diff_eq, assert_relative_eq};
use nalgebra::{Isometry3, Translation3, UnitQuaternion};
use proptest::prelude::*;

use skillgraft::geometry::{self, GeometryError, MIN_EXTENT};
use skillgraft::{cloud_distance, compute_bbox, relative_pose, PointCloud, Pose, Quat, Vec3};

fn iso(p: &Pose) -> Isometry3<f64> {
    let q = p.orientation;
    Isometry3::from_parts(
        Translation3::new(p.position.x, p.position.y, p.position.z),
        UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q.w, q.x, q.y, q.z)),
    )
}

fn vec3() -> impl Strategy<Value = Vec3> {
    (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn pose() -> impl Strategy<Value = Pose> {
    (vec3(), vec3(), -3.1f64..3.1).prop_map(|(t, axis, angle)| {
        let q = axis.try_normalize().map_or(Quat::identity(), |a| Quat::from_axis_angle(a, angle));
        Pose { position: t, orientation: q }
    })
}

fn close(a: &Pose, b: &Pose, tol: f64) -> bool {
    a.position.distance(b.position) <= tol && 1.0 - a.orientation.dot(b.orientation).abs() <= tol
}

#[test]
fn composition_examples() {
    let p = Pose { position: Vec3::new(0.3, -0.1, 2.0), orientation: Quat::from_axis_angle(Vec3::unit(1), 0.7) };
    assert!(close(&Pose::identity().compose(&p).unwrap(), &p, 1e-15));
    let ab = Pose::from_translation(Vec3::new(1.0, 0.0, 0.0)).compose(&Pose::from_translation(Vec3::new(0.0, 2.0, 0.0))).unwrap();
    assert_eq!(ab.position, Vec3::new(1.0, 2.0, 0.0));
    let bad = Pose::from_translation(Vec3::new(f64::INFINITY, 0.0, 0.0));
    assert!(matches!(p.compose(&bad), Err(GeometryError::InvalidPose(_))));
}

#[test]
fn relative_pose_examples() {
    let p = Pose { position: Vec3::new(0.3, -0.1, 2.0), orientation: Quat::from_axis_angle(Vec3::unit(0), -1.2) };
    assert!(close(&relative_pose(&p, &p).unwrap(), &Pose::identity(), 1e-12));
    assert!(close(&relative_pose(&Pose::identity(), &p).unwrap(), &p, 1e-15));
}

#[test]
fn cloud_distance_examples() {
    let a = PointCloud::new(vec![Vec3::zero()], "w");
    assert_eq!(cloud_distance(&a, &PointCloud::new(vec![Vec3::new(3.0, 4.0, 0.0)], "w")).unwrap(), 5.0);
    assert_eq!(cloud_distance(&a, &a).unwrap(), 0.0);
    assert!(matches!(cloud_distance(&a, &PointCloud::new(vec![], "w")), Err(GeometryError::EmptyInput(_))));
    assert!(matches!(cloud_distance(&a, &PointCloud::new(vec![Vec3::zero()], "hand")), Err(GeometryError::FrameMismatch { .. })));
}

#[test]
fn bbox_examples() {
    let corners = (0..8).map(|i| Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64)).collect();
    let cube = compute_bbox("cube", &PointCloud::new(corners, "w")).unwrap();
    assert_eq!(cube.bbox_extents, Vec3::splat(1.0));
    assert_eq!(cube.bbox_center.position, Vec3::splat(0.5));
    let dot = compute_bbox("dot", &PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0)], "w")).unwrap();
    assert_eq!(dot.bbox_extents, Vec3::splat(MIN_EXTENT));
    assert!(compute_bbox("none", &PointCloud::new(vec![], "w")).is_err());
}

#[test]
fn kernel_runs_in_single_precision() {
    let a = geometry::Pose::<f32>::from_translation(geometry::Vec3::new(1.0, 0.0, 0.0));
    let b = geometry::Pose::<f32> { position: geometry::Vec3::new(0.0, 2.0, 0.0), orientation: geometry::Quat::from_axis_angle(geometry::Vec3::unit(2), 0.5) };
    let ab = a.compose(&b).unwrap();
    let back = a.cast::<f64>().compose(&b.cast::<f64>()).unwrap();
    assert_abs_diff_eq!(f64::from(ab.position.y), back.position.y, epsilon = 1e-6);
    assert_abs_diff_eq!(f64::from(ab.orientation.norm()), 1.0, epsilon = 1e-6);
}

proptest! {
    #[test]
    fn compose_matches_isometry_oracle(a in pose(), b in pose()) {
        let got = a.compose(&b).unwrap();
        let want = iso(&a) * iso(&b);
        let t = want.translation.vector;
        prop_assert!(got.position.distance(Vec3::new(t.x, t.y, t.z)) < 1e-9);
        let q = want.rotation.into_inner();
        let dot = got.orientation.w * q.w + got.orientation.x * q.i + got.orientation.y * q.j + got.orientation.z * q.k;
        prop_assert!(1.0 - dot.abs() < 1e-9);
        prop_assert!((got.orientation.norm() - 1.0).abs() < 1e-9);
        prop_assert!(got.orientation.w >= 0.0);
    }

    #[test]
    fn compose_is_associative(a in pose(), b in pose(), c in pose()) {
        let l = a.compose(&b).unwrap().compose(&c).unwrap();
        let r = a.compose(&b.compose(&c).unwrap()).unwrap();
        prop_assert!(close(&l, &r, 1e-8));
    }

    #[test]
    fn inverse_cancels(p in pose()) {
        prop_assert!(close(&p.compose(&p.inverse()).unwrap(), &Pose::identity(), 1e-9));
    }

    #[test]
    fn relative_pose_round_trips(r in pose(), t in pose()) {
        let rel = relative_pose(&r, &t).unwrap();
        prop_assert!(close(&r.compose(&rel).unwrap(), &t, 1e-9));
    }

    #[test]
    fn distance_matches_pair_scan(a in prop::collection::vec(vec3(), 1..50), b in prop::collection::vec(vec3(), 1..50)) {
        let (ca, cb) = (PointCloud::new(a.clone(), "w"), PointCloud::new(b.clone(), "w"));
        let scan = a.iter().flat_map(|p| b.iter().map(move |q| ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2)).sqrt())).fold(f64::INFINITY, f64::min);
        let d = cloud_distance(&ca, &cb).unwrap();
        assert_relative_eq!(d, scan, max_relative = 1e-12, epsilon = 1e-15);
        prop_assert_eq!(d, cloud_distance(&cb, &ca).unwrap());
        let mut shared = b.clone();
        shared.push(a[0]);
        prop_assert_eq!(cloud_distance(&ca, &PointCloud::new(shared, "w")).unwrap(), 0.0);
    }

    #[test]
    fn bbox_contains_every_point(pts in prop::collection::vec(vec3(), 1..80)) {
        let props = compute_bbox("o", &PointCloud::new(pts.clone(), "w")).unwrap();
        for p in &pts {
            let n = props.normalize(*p);
            prop_assert!((0..3).all(|k| n[k].abs() <= 0.5 + 1e-9));
        }
        prop_assert!((0..3).all(|k| props.bbox_extents[k] > 0.0));
    }
}
