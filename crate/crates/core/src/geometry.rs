//! Rigid-body pose algebra, point clouds and bounding-box properties.
//!
//! Everything here is generic over [`Real`] so the same code runs in `f32`
//! and `f64`. The rest of the crate uses the `f64` aliases exported from the
//! crate root.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_traits::{Float, FloatConst, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point scalar usable by the geometry kernel: `f32` or `f64`.
pub trait Real:
    Float + FloatConst + FromPrimitive + Debug + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Converts an `f64` literal into the scalar type.
#[inline]
pub fn lit<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("literal representable in scalar type")
}

/// Smallest bounding-box extent; degenerate clouds are clamped to it.
pub const MIN_EXTENT: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("frame mismatch: '{0}' vs '{1}'")]
    FrameMismatch(String, String),
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Vec3<T> {
    pub const fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    pub fn splat(v: T) -> Self {
        Self::new(v, v, v)
    }

    pub fn unit(axis: usize) -> Self {
        let mut v = Self::zero();
        v[axis] = T::one();
        v
    }

    pub fn from_array(a: [T; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [T; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Self) -> Self {
        Self::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> T {
        self.dot(self)
    }

    pub fn norm(self) -> T {
        self.norm_squared().sqrt()
    }

    /// Unit vector in the same direction; `None` for (near) zero vectors.
    pub fn try_normalize(self) -> Option<Self> {
        let n = self.norm();
        if n > T::epsilon() && n.is_finite() {
            Some(self / n)
        } else {
            None
        }
    }

    pub fn distance(self, o: Self) -> T {
        (self - o).norm()
    }

    pub fn component_mul(self, o: Self) -> Self {
        Self::new(self.x * o.x, self.y * o.y, self.z * o.z)
    }

    pub fn component_div(self, o: Self) -> Self {
        Self::new(self.x / o.x, self.y / o.y, self.z / o.z)
    }

    pub fn component_min(self, o: Self) -> Self {
        Self::new(self.x.min(o.x), self.y.min(o.y), self.z.min(o.z))
    }

    pub fn component_max(self, o: Self) -> Self {
        Self::new(self.x.max(o.x), self.y.max(o.y), self.z.max(o.z))
    }

    pub fn map(self, f: impl Fn(T) -> T) -> Self {
        Self::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Index of the component with the largest magnitude.
    pub fn argmax_abs(self) -> usize {
        let a = self.map(|v| v.abs());
        if a.x >= a.y && a.x >= a.z {
            0
        } else if a.y >= a.z {
            1
        } else {
            2
        }
    }

    /// Any unit vector orthogonal to `self` (which must be non-zero).
    pub fn any_orthogonal(self) -> Self {
        let other = if self.x.abs() < lit(0.9) { Self::unit(0) } else { Self::unit(1) };
        self.cross(other).try_normalize().unwrap_or_else(|| Self::unit(2))
    }

    pub fn cast<U: Real>(self) -> Vec3<U> {
        Vec3::new(
            U::from(self.x).unwrap(),
            U::from(self.y).unwrap(),
            U::from(self.z).unwrap(),
        )
    }
}

impl<T> std::ops::Index<usize> for Vec3<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T> std::ops::IndexMut<usize> for Vec3<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl<T: Real> Add for Vec3<T> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<T: Real> Sub for Vec3<T> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<T: Real> Neg for Vec3<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.x, -self.y, -self.z)
    }
}

impl<T: Real> Mul<T> for Vec3<T> {
    type Output = Self;
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s, self.z * s)
    }
}

impl<T: Real> Div<T> for Vec3<T> {
    type Output = Self;
    fn div(self, s: T) -> Self {
        Self::new(self.x / s, self.y / s, self.z / s)
    }
}

/// Unit quaternion stored as (w, x, y, z), Hamilton convention.
///
/// Constructors and products renormalize and canonicalize to `w >= 0`, so
/// each rotation has a single representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat<T> {
    pub w: T,
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Real> Default for Quat<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Quat<T> {
    pub fn identity() -> Self {
        Self { w: T::one(), x: T::zero(), y: T::zero(), z: T::zero() }
    }

    /// Normalizing constructor. Fails on zero or non-finite input.
    pub fn new(w: T, x: T, y: T, z: T) -> Result<Self, GeometryError> {
        let raw = Self { w, x, y, z };
        if !raw.is_finite() {
            return Err(GeometryError::InvalidPose("non-finite quaternion".into()));
        }
        let n = raw.norm();
        if n <= T::epsilon() {
            return Err(GeometryError::InvalidPose("zero-norm quaternion".into()));
        }
        Ok(raw.scaled(T::one() / n).canonical())
    }

    pub fn from_axis_angle(axis: Vec3<T>, angle: T) -> Self {
        let Some(a) = axis.try_normalize() else {
            return Self::identity();
        };
        let half = angle / lit(2.0);
        let s = half.sin();
        Self { w: half.cos(), x: a.x * s, y: a.y * s, z: a.z * s }.renormalized()
    }

    /// Rotation vector (axis * angle) to quaternion.
    pub fn from_rotation_vector(v: Vec3<T>) -> Self {
        let angle = v.norm();
        if angle <= T::epsilon() {
            return Self::identity();
        }
        Self::from_axis_angle(v / angle, angle)
    }

    /// Shortest-arc rotation taking unit direction `from` onto `to`.
    pub fn from_two_vectors(from: Vec3<T>, to: Vec3<T>) -> Self {
        let (Some(f), Some(t)) = (from.try_normalize(), to.try_normalize()) else {
            return Self::identity();
        };
        let d = f.dot(t);
        if d < lit(-1.0 + 1e-12) {
            return Self::from_axis_angle(f.any_orthogonal(), T::PI());
        }
        let c = f.cross(t);
        Self { w: T::one() + d, x: c.x, y: c.y, z: c.z }.renormalized()
    }

    /// Rotation whose columns are the given orthonormal axes.
    pub fn from_basis(x_axis: Vec3<T>, y_axis: Vec3<T>, z_axis: Vec3<T>) -> Self {
        let m = [
            [x_axis.x, y_axis.x, z_axis.x],
            [x_axis.y, y_axis.y, z_axis.y],
            [x_axis.z, y_axis.z, z_axis.z],
        ];
        Self::from_rotation_matrix(&m)
    }

    pub fn from_rotation_matrix(m: &[[T; 3]; 3]) -> Self {
        let one = T::one();
        let quarter = lit::<T>(0.25);
        let trace = m[0][0] + m[1][1] + m[2][2];
        let q = if trace > T::zero() {
            let s = (trace + one).sqrt() * lit(2.0);
            Self { w: quarter * s, x: (m[2][1] - m[1][2]) / s, y: (m[0][2] - m[2][0]) / s, z: (m[1][0] - m[0][1]) / s }
        } else if m[0][0] > m[1][1] && m[0][0] > m[2][2] {
            let s = (one + m[0][0] - m[1][1] - m[2][2]).sqrt() * lit(2.0);
            Self { w: (m[2][1] - m[1][2]) / s, x: quarter * s, y: (m[0][1] + m[1][0]) / s, z: (m[0][2] + m[2][0]) / s }
        } else if m[1][1] > m[2][2] {
            let s = (one + m[1][1] - m[0][0] - m[2][2]).sqrt() * lit(2.0);
            Self { w: (m[0][2] - m[2][0]) / s, x: (m[0][1] + m[1][0]) / s, y: quarter * s, z: (m[1][2] + m[2][1]) / s }
        } else {
            let s = (one + m[2][2] - m[0][0] - m[1][1]).sqrt() * lit(2.0);
            Self { w: (m[1][0] - m[0][1]) / s, x: (m[0][2] + m[2][0]) / s, y: (m[1][2] + m[2][1]) / s, z: quarter * s }
        };
        q.renormalized()
    }

    pub fn norm(self) -> T {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn dot(self, o: Self) -> T {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    fn scaled(self, s: T) -> Self {
        Self { w: self.w * s, x: self.x * s, y: self.y * s, z: self.z * s }
    }

    pub(crate) fn canonical(self) -> Self {
        if self.w < T::zero() {
            self.scaled(-T::one())
        } else {
            self
        }
    }

    pub(crate) fn renormalized(self) -> Self {
        let n = self.norm();
        if n <= T::epsilon() || !n.is_finite() {
            return Self::identity();
        }
        self.scaled(T::one() / n).canonical()
    }

    pub fn conjugate(self) -> Self {
        Self { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self * o`, renormalized.
    pub fn mul_quat(self, o: Self) -> Self {
        Self {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
        .renormalized()
    }

    pub fn rotate(self, v: Vec3<T>) -> Vec3<T> {
        let u = Vec3::new(self.x, self.y, self.z);
        let two = lit::<T>(2.0);
        let t = u.cross(v) * two;
        v + t * self.w + u.cross(t)
    }

    pub fn to_rotation_matrix(self) -> [[T; 3]; 3] {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        let one = T::one();
        let two = lit::<T>(2.0);
        [
            [one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)],
            [two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x)],
            [two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y)],
        ]
    }

    /// Rotation angle in `[0, pi]`.
    pub fn angle(self) -> T {
        let w = self.w.abs().min(T::one());
        lit::<T>(2.0) * w.acos()
    }

    /// Geodesic angle between two rotations in `[0, pi]`.
    pub fn angle_to(self, o: Self) -> T {
        let d = self.dot(o).abs().min(T::one());
        lit::<T>(2.0) * d.acos()
    }

    /// Rotation vector (axis * angle) with angle in `[0, pi]`.
    pub fn to_rotation_vector(self) -> Vec3<T> {
        let q = self.canonical();
        let v = Vec3::new(q.x, q.y, q.z);
        let s = v.norm();
        if s <= T::epsilon() {
            return v * lit(2.0);
        }
        let angle = lit::<T>(2.0) * s.atan2(q.w);
        v * (angle / s)
    }

    /// Normalized mean of a set of rotations after aligning signs with the first.
    pub fn mean(qs: &[Self]) -> Option<Self> {
        let first = *qs.first()?;
        let mut acc = Self { w: T::zero(), x: T::zero(), y: T::zero(), z: T::zero() };
        for q in qs {
            let q = if q.dot(first) < T::zero() { q.scaled(-T::one()) } else { *q };
            acc = Self { w: acc.w + q.w, x: acc.x + q.x, y: acc.y + q.y, z: acc.z + q.z };
        }
        Some(acc.renormalized())
    }

    pub fn cast<U: Real>(self) -> Quat<U> {
        Quat {
            w: U::from(self.w).unwrap(),
            x: U::from(self.x).unwrap(),
            y: U::from(self.y).unwrap(),
            z: U::from(self.z).unwrap(),
        }
        .renormalized()
    }
}

/// Rigid transform: rotate by `orientation`, then translate by `position`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T> {
    pub position: Vec3<T>,
    pub orientation: Quat<T>,
}

impl<T: Real> Default for Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self { position: Vec3::zero(), orientation: Quat::identity() }
    }

    pub fn new(position: Vec3<T>, orientation: Quat<T>) -> Result<Self, GeometryError> {
        if !position.is_finite() {
            return Err(GeometryError::InvalidPose("non-finite position".into()));
        }
        let orientation = Quat::new(orientation.w, orientation.x, orientation.y, orientation.z)?;
        Ok(Self { position, orientation })
    }

    pub fn from_translation(p: Vec3<T>) -> Self {
        Self { position: p, orientation: Quat::identity() }
    }

    pub fn from_rotation(q: Quat<T>) -> Self {
        Self { position: Vec3::zero(), orientation: q.renormalized() }
    }

    /// Rotation by `q` about the line through `center`.
    pub fn rotation_about(center: Vec3<T>, q: Quat<T>) -> Self {
        Self::from_translation(center)
            .mul_pose(&Self::from_rotation(q))
            .mul_pose(&Self::from_translation(-center))
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.orientation.is_finite()
    }

    fn check(&self) -> Result<(), GeometryError> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose("non-finite pose".into()))
        }
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Self) -> Result<Self, GeometryError> {
        self.check()?;
        other.check()?;
        let out = self.mul_pose(other);
        out.check()?;
        Ok(out)
    }

    /// Unchecked composition used on trusted, already validated poses.
    pub fn mul_pose(&self, other: &Self) -> Self {
        Self {
            position: self.position + self.orientation.rotate(other.position),
            orientation: self.orientation.mul_quat(other.orientation),
        }
    }

    pub fn inverse(&self) -> Self {
        let inv = self.orientation.conjugate();
        Self { position: -inv.rotate(self.position), orientation: inv.renormalized() }
    }

    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.position + self.orientation.rotate(p)
    }

    pub fn transform_vector(&self, v: Vec3<T>) -> Vec3<T> {
        self.orientation.rotate(v)
    }

    /// 4x4 homogeneous matrix, row-major.
    pub fn to_matrix(&self) -> [[T; 4]; 4] {
        let r = self.orientation.to_rotation_matrix();
        let p = self.position;
        let (z, o) = (T::zero(), T::one());
        [
            [r[0][0], r[0][1], r[0][2], p.x],
            [r[1][0], r[1][1], r[1][2], p.y],
            [r[2][0], r[2][1], r[2][2], p.z],
            [z, z, z, o],
        ]
    }

    /// Position distance and rotation angle to another pose.
    pub fn deviation(&self, other: &Self) -> (T, T) {
        (self.position.distance(other.position), self.orientation.angle_to(other.orientation))
    }

    pub fn cast<U: Real>(&self) -> Pose<U> {
        Pose { position: self.position.cast(), orientation: self.orientation.cast() }
    }
}

impl<T: Real> Mul for Pose<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        self.mul_pose(&o)
    }
}

/// Pose of `target` expressed in the frame of `reference`:
/// `reference ∘ relative_pose(reference, target) == target`.
pub fn relative_pose<T: Real>(reference: &Pose<T>, target: &Pose<T>) -> Result<Pose<T>, GeometryError> {
    reference.check()?;
    target.check()?;
    Ok(reference.inverse().mul_pose(target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointCloud<T> {
    pub points: Vec<Vec3<T>>,
    pub frame: String,
}

impl<T: Real> PointCloud<T> {
    pub fn new(points: Vec<Vec3<T>>, frame: impl Into<String>) -> Self {
        Self { points, frame: frame.into() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points.is_empty() {
            return Err(GeometryError::EmptyInput("point cloud"));
        }
        if self.points.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite("point cloud"));
        }
        Ok(())
    }

    /// Cloud with every point mapped through `pose`, labelled with `frame`.
    pub fn transformed(&self, pose: &Pose<T>, frame: impl Into<String>) -> Self {
        Self {
            points: self.points.iter().map(|p| pose.transform_point(*p)).collect(),
            frame: frame.into(),
        }
    }

    pub fn centroid(&self) -> Option<Vec3<T>> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Vec3::zero(), |a, p| a + *p);
        Some(sum / T::from_usize(self.points.len()).unwrap())
    }
}

/// Strategy for the scalar distance between two clouds.
pub trait CloudMetric<T: Real>: Send + Sync {
    fn distance(&self, a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, GeometryError>;
}

/// Minimum Euclidean distance over all point pairs (contact onset).
#[derive(Debug, Default, Clone, Copy)]
pub struct MinPairDistance;

/// Distance between cloud centroids.
#[derive(Debug, Default, Clone, Copy)]
pub struct CentroidDistance;

fn check_pair<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<(), GeometryError> {
    a.validate()?;
    b.validate()?;
    if a.frame != b.frame {
        return Err(GeometryError::FrameMismatch(a.frame.clone(), b.frame.clone()));
    }
    Ok(())
}

impl<T: Real> CloudMetric<T> for MinPairDistance {
    fn distance(&self, a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, GeometryError> {
        check_pair(a, b)?;
        // Sweep along x over the sorted second cloud; stop expanding once the
        // x gap alone exceeds the best distance found.
        let mut sorted: Vec<Vec3<T>> = b.points.clone();
        sorted.sort_by(|p, q| p.x.partial_cmp(&q.x).unwrap());
        let mut best = T::infinity();
        for p in &a.points {
            let start = sorted.partition_point(|q| q.x < p.x);
            for q in sorted[start..].iter() {
                let dx = q.x - p.x;
                if dx * dx > best {
                    break;
                }
                best = best.min(squared_gap(p, q));
            }
            for q in sorted[..start].iter().rev() {
                let dx = p.x - q.x;
                if dx * dx > best {
                    break;
                }
                best = best.min(squared_gap(p, q));
            }
        }
        Ok(best.sqrt())
    }
}

// Symmetric in its arguments bit for bit, so d(a, b) == d(b, a) exactly.
#[inline]
fn squared_gap<T: Real>(p: &Vec3<T>, q: &Vec3<T>) -> T {
    let dx = p.x - q.x;
    let dy = p.y - q.y;
    let dz = p.z - q.z;
    dx * dx + dy * dy + dz * dz
}

impl<T: Real> CloudMetric<T> for CentroidDistance {
    fn distance(&self, a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, GeometryError> {
        check_pair(a, b)?;
        Ok(a.centroid().unwrap().distance(b.centroid().unwrap()))
    }
}

/// Minimum pairwise distance between two non-empty clouds in the same frame.
pub fn cloud_distance<T: Real>(a: &PointCloud<T>, b: &PointCloud<T>) -> Result<T, GeometryError> {
    MinPairDistance.distance(a, b)
}

/// A named sub-box of an object (handle, lid, ...) in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part<T> {
    pub name: String,
    pub lo: Vec3<T>,
    pub hi: Vec3<T>,
}

impl<T: Real> Part<T> {
    pub fn center(&self) -> Vec3<T> {
        (self.lo + self.hi) * lit(0.5)
    }

    pub fn contains(&self, p: Vec3<T>, margin: T) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] - margin && p[i] <= self.hi[i] + margin)
    }
}

/// Axis-aligned bounding box of an object in its own frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProperties<T> {
    pub object_id: String,
    pub bbox_center: Pose<T>,
    pub bbox_extents: Vec3<T>,
    pub cloud: PointCloud<T>,
    /// Visually identifiable sub-parts, when known.
    #[serde(default)]
    pub parts: Vec<Part<T>>,
}

impl<T: Real> ObjectProperties<T> {
    /// Object-frame point to normalized box coordinates in `[-0.5, 0.5]^3`.
    pub fn normalize(&self, p: Vec3<T>) -> Vec3<T> {
        let local = self.bbox_center.inverse().transform_point(p);
        local.component_div(self.bbox_extents)
    }

    pub fn denormalize(&self, n: Vec3<T>) -> Vec3<T> {
        self.bbox_center.transform_point(n.component_mul(self.bbox_extents))
    }

    /// Direction vectors are rotated into the box frame but not scaled.
    pub fn box_rotation(&self) -> Quat<T> {
        self.bbox_center.orientation
    }

    /// Copy with the box (and cloud, parts) scaled about the box center.
    pub fn scaled(&self, factors: Vec3<T>) -> Self {
        let c = self.bbox_center;
        let scale = |p: Vec3<T>| {
            let local = c.inverse().transform_point(p).component_mul(factors);
            c.transform_point(local)
        };
        Self {
            object_id: self.object_id.clone(),
            bbox_center: c,
            bbox_extents: self.bbox_extents.component_mul(factors),
            cloud: PointCloud::new(self.cloud.points.iter().map(|p| scale(*p)).collect(), self.cloud.frame.clone()),
            parts: self
                .parts
                .iter()
                .map(|part| {
                    let (a, b) = (scale(part.lo), scale(part.hi));
                    Part { name: part.name.clone(), lo: a.component_min(b), hi: a.component_max(b) }
                })
                .collect(),
        }
    }
}

/// Axis-aligned box around a cloud, expressed in the cloud's own frame.
pub fn compute_bbox<T: Real>(object_id: &str, cloud: &PointCloud<T>) -> Result<ObjectProperties<T>, GeometryError> {
    cloud.validate()?;
    let first = cloud.points[0];
    let (lo, hi) = cloud
        .points
        .iter()
        .fold((first, first), |(lo, hi), p| (lo.component_min(*p), hi.component_max(*p)));
    let min_extent = lit::<T>(MIN_EXTENT);
    Ok(ObjectProperties {
        object_id: object_id.to_string(),
        bbox_center: Pose::from_translation((lo + hi) * lit(0.5)),
        bbox_extents: (hi - lo).map(|e| e.max(min_extent)),
        cloud: cloud.clone(),
        parts: Vec::new(),
    })
}
