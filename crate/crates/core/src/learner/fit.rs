use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use super::program::{segment_distance, Curve};
use super::LearnError;
use crate::{Pose, Quat, Vec3};

const GN_MAX_ITER: usize = 50;
const GN_STEP_TOL: f64 = 1e-10;

/// Principal axes of a point set, strongest first.
fn principal_axes(points: &[Vec3]) -> (Vec3, [Vec3; 3], [f64; 3]) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vec3::zero(), |acc, p| acc + *p) / n;
    let mut m = Matrix3::<f64>::zeros();
    for p in points {
        let d = *p - c;
        let v = Vector3::new(d.x, d.y, d.z);
        m += v * v.transpose();
    }
    let eig = SymmetricEigen::new(m / n);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let col = |i: usize| {
        let v = eig.eigenvectors.column(i);
        Vec3::new(v[0], v[1], v[2])
    };
    (
        c,
        [col(order[0]), col(order[1]), col(order[2])],
        [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]],
    )
}

fn mean_orientation(poses: &[Pose]) -> Quat {
    Quat::mean(&poses.iter().map(|p| p.orientation).collect::<Vec<_>>()).unwrap_or_else(Quat::identity)
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn residual(curve: &Curve, poses: &[Pose]) -> f64 {
    rms(poses.iter().map(|p| curve.distance_to(p.position)))
}

pub fn fit_line(poses: &[Pose]) -> Result<(Curve, f64), LearnError> {
    let pts: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
    let (c, axes, _) = principal_axes(&pts);
    let mut d = axes[0];
    let chord = pts[pts.len() - 1] - pts[0];
    if chord.dot(d) < 0.0 {
        d = -d;
    }
    let t0 = (pts[0] - c).dot(d);
    let t1 = (pts[pts.len() - 1] - c).dot(d);
    if chord.norm() < 1e-12 && (t1 - t0).abs() < 1e-12 {
        return Err(LearnError::DegenerateFit("trajectory does not move".into()));
    }
    let orientation = mean_orientation(poses);
    let curve = Curve::Line { start: Pose { position: c + d * t0, orientation }, direction: d, length: t1 - t0 };
    let res = residual(&curve, poses);
    Ok((curve, res))
}

/// Gauss-Newton circle fit in 2-D, started from the circumcircle of the
/// first, middle and last points.
fn fit_circle_2d(pts: &[(f64, f64)]) -> Result<(f64, f64, f64), LearnError> {
    let (a, b, c) = (pts[0], pts[pts.len() / 2], pts[pts.len() - 1]);
    let d = 2.0 * (a.0 * (b.1 - c.1) + b.0 * (c.1 - a.1) + c.0 * (a.1 - b.1));
    let scale = pts.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1e-12, f64::max);
    if d.abs() < 1e-12 * scale * scale {
        return Err(LearnError::DegenerateFit("collinear points cannot define an arc".into()));
    }
    let sq = |p: (f64, f64)| p.0 * p.0 + p.1 * p.1;
    let mut cx = (sq(a) * (b.1 - c.1) + sq(b) * (c.1 - a.1) + sq(c) * (a.1 - b.1)) / d;
    let mut cy = (sq(a) * (c.0 - b.0) + sq(b) * (a.0 - c.0) + sq(c) * (b.0 - a.0)) / d;
    let mut r = ((a.0 - cx).powi(2) + (a.1 - cy).powi(2)).sqrt();
    for _ in 0..GN_MAX_ITER {
        let mut jtj = Matrix3::<f64>::zeros();
        let mut jtr = Vector3::<f64>::zeros();
        for p in pts {
            let (dx, dy) = (p.0 - cx, p.1 - cy);
            let dist = (dx * dx + dy * dy).sqrt().max(1e-15);
            let res = dist - r;
            let j = Vector3::new(-dx / dist, -dy / dist, -1.0);
            jtj += j * j.transpose();
            jtr += j * res;
        }
        let Some(step) = jtj.lu().solve(&(-jtr)) else { break };
        cx += step[0];
        cy += step[1];
        r += step[2];
        if step.norm() < GN_STEP_TOL {
            break;
        }
    }
    if !(r.is_finite() && r > 1e-9) {
        return Err(LearnError::DegenerateFit(format!("arc radius {r} is degenerate")));
    }
    Ok((cx, cy, r.abs()))
}

/// Unwrapped angles of points about `center` around `axis`, from the first point.
fn unwrapped_angles(pts: &[Vec3], center: Vec3, axis: Vec3) -> (Vec3, Vec<f64>) {
    let flat = |v: Vec3| v - axis * v.dot(axis);
    let u = flat(pts[0] - center).try_normalize().unwrap_or_else(|| axis.any_orthogonal());
    let v = axis.cross(u);
    let mut out = Vec::with_capacity(pts.len());
    let mut prev = 0.0;
    for p in pts {
        let d = flat(*p - center);
        let raw = d.dot(v).atan2(d.dot(u));
        let mut a = raw;
        while a - prev > std::f64::consts::PI {
            a -= std::f64::consts::TAU;
        }
        while a - prev < -std::f64::consts::PI {
            a += std::f64::consts::TAU;
        }
        out.push(a);
        prev = a;
    }
    (u, out)
}

/// Circle fit in the plane orthogonal to `axis`; returns the 3-D center at the
/// axial height of the first point, the radius and the unwrapped angles.
fn circle_about(pts: &[Vec3], axis: Vec3) -> Result<(Vec3, f64, Vec3, Vec<f64>), LearnError> {
    let e1 = axis.any_orthogonal();
    let e2 = axis.cross(e1);
    let flat: Vec<(f64, f64)> = pts.iter().map(|p| (p.dot(e1), p.dot(e2))).collect();
    let (cx, cy, r) = fit_circle_2d(&flat)?;
    let center = e1 * cx + e2 * cy + axis * pts[0].dot(axis);
    let (u, angles) = unwrapped_angles(pts, center, axis);
    Ok((center, r, u, angles))
}

/// Start orientation that best explains the poses after undoing each one's rotation.
fn derotated_orientation(poses: &[Pose], axis: Vec3, angles: &[f64]) -> Quat {
    let qs: Vec<Quat> = poses
        .iter()
        .zip(angles)
        .map(|(p, a)| Quat::from_axis_angle(axis, -a).mul_quat(p.orientation))
        .collect();
    Quat::mean(&qs).unwrap_or_else(Quat::identity)
}

pub fn fit_arc(poses: &[Pose]) -> Result<(Curve, f64), LearnError> {
    if poses.len() < 3 {
        return Err(LearnError::DegenerateFit("an arc needs at least 3 waypoints".into()));
    }
    let pts: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
    let (_, axes, _) = principal_axes(&pts);
    let mut axis = axes[2];
    let (mut center, mut r, mut u, mut angles) = circle_about(&pts, axis)?;
    if angles[angles.len() - 1] < 0.0 {
        axis = -axis;
        (center, r, u, angles) = circle_about(&pts, axis)?;
    }
    let sweep = angles[angles.len() - 1];
    let orientation = derotated_orientation(poses, axis, &angles);
    let start = Pose { position: center + u * r, orientation };
    let curve = Curve::Arc { start, center, axis, angle: sweep };
    let res = residual(&curve, poses);
    Ok((curve, res))
}

pub fn fit_screw(poses: &[Pose]) -> Result<(Curve, f64), LearnError> {
    if poses.len() < 4 {
        return Err(LearnError::DegenerateFit("a screw needs at least 4 waypoints".into()));
    }
    let pts: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
    let accel: Vec<Vec3> = pts.windows(3).map(|w| w[2] - w[1] * 2.0 + w[0]).collect();
    let n = accel.len() as f64;
    let mut m = Matrix3::<f64>::zeros();
    for a in &accel {
        let v = Vector3::new(a.x, a.y, a.z);
        m += v * v.transpose();
    }
    let eig = SymmetricEigen::new(m / n);
    let imin = (0..3).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("3 eigenvalues");
    let col = eig.eigenvectors.column(imin);
    let mut axis = Vec3::new(col[0], col[1], col[2]);
    let (mut center, mut r, mut u, mut angles) = circle_about(&pts, axis)?;
    if angles[angles.len() - 1] < 0.0 {
        axis = -axis;
        (center, r, u, angles) = circle_about(&pts, axis)?;
    }
    let z: Vec<f64> = pts.iter().map(|p| (*p - center).dot(axis)).collect();
    let (ma, mz) = (angles.iter().sum::<f64>() / n, z.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (a, zi) in angles.iter().zip(&z) {
        sxy += (a - ma) * (zi - mz);
        sxx += (a - ma) * (a - ma);
    }
    if sxx <= 0.0 {
        return Err(LearnError::DegenerateFit("screw has no angular sweep".into()));
    }
    let pitch = sxy / sxx;
    let z0 = mz - pitch * ma;
    let sweep = angles[angles.len() - 1];
    let orientation = derotated_orientation(poses, axis, &angles);
    let start = Pose { position: center + u * r + axis * z0, orientation };
    let curve = Curve::Screw { start, center: center + axis * z0, axis, angle: sweep, advance: pitch * sweep };
    let res = rms(pts.iter().zip(&angles).map(|(p, a)| {
        let model = curve.pose_at(if sweep != 0.0 { a / sweep } else { 0.0 }).position;
        p.distance(model)
    }));
    Ok((curve, res))
}

fn polyline_residual(pts: &[Vec3], knots: &[Vec3]) -> f64 {
    rms(pts.iter().map(|p| knots.windows(2).map(|w| segment_distance(*p, w[0], w[1])).fold(f64::INFINITY, f64::min)))
}

/// Exhaustive knot search over waypoints (up to two interior knots), with the
/// PCA line as an extra candidate.
pub fn fit_piecewise(poses: &[Pose]) -> Result<(Curve, f64), LearnError> {
    let pts: Vec<Vec3> = poses.iter().map(|p| p.position).collect();
    let last = pts.len() - 1;
    if pts[0].distance(pts[last]) < 1e-12 && pts.iter().all(|p| p.distance(pts[0]) < 1e-12) {
        return Err(LearnError::DegenerateFit("trajectory does not move".into()));
    }
    let mut best_knots = vec![pts[0], pts[last]];
    let mut best = polyline_residual(&pts, &best_knots);
    if let Ok((Curve::Line { start, direction, length }, _)) = fit_line(poses) {
        let knots = vec![start.position, start.position + direction * length];
        let r = polyline_residual(&pts, &knots);
        if r < best {
            best = r;
            best_knots = knots;
        }
    }
    for i in 1..last {
        let knots = vec![pts[0], pts[i], pts[last]];
        let r = polyline_residual(&pts, &knots);
        if r < best - 1e-15 {
            best = r;
            best_knots = knots;
        }
    }
    for i in 1..last {
        for j in (i + 1)..last {
            let knots = vec![pts[0], pts[i], pts[j], pts[last]];
            let r = polyline_residual(&pts, &knots);
            if r < best - 1e-15 {
                best = r;
                best_knots = knots;
            }
        }
    }
    let curve = Curve::PiecewiseLine { orientation: mean_orientation(poses), knots: best_knots };
    Ok((curve, best))
}
