//! Camera parametrization, projection and two-view epipolar geometry.
//!
//! A camera is encoded as a flat 8-vector
//! `(log_focal, q_w, q_x, q_y, q_z, t_x, t_y, t_z)`. Extrinsics map a world
//! point to camera coordinates as `p_c = R p_w + t`; intrinsics have a
//! single focal length `f = exp(log_focal)` and a principal point fixed at
//! the image center. Image coordinates are normalized to `[-1, 1]²` with the
//! principal point at the origin.

pub mod dual;
pub(crate) mod epipolar;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use epipolar::{
    fundamental_matrix, sampson_error, sampson_evaluate, sampson_gradient, sampson_term,
    PairGradient, SampsonEval,
};

/// Number of scalar parameters describing one camera.
pub const CAMERA_DIM: usize = 8;

/// Default robust clamp for the Sampson error.
pub const DEFAULT_SAMPSON_EPSILON: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth})")]
    BehindCamera { depth: f64 },
    #[error("cameras {0} and {1} share the same optical center; epipolar geometry is undefined")]
    DegenerateGeometry(usize, usize),
    #[error("correspondence set ({0}, {1}) is empty")]
    EmptyCorrespondences(usize, usize),
    #[error("correspondence set ({i}, {j}) has {left} points in image i but {right} in image j")]
    LengthMismatch {
        i: usize,
        j: usize,
        left: usize,
        right: usize,
    },
    #[error("non-finite coordinate in correspondence set ({0}, {1})")]
    NonFiniteCorrespondence(usize, usize),
    #[error("sampson clamp must be positive, got {0}")]
    InvalidEpsilon(f64),
    #[error("quaternion has zero norm")]
    ZeroQuaternion,
}

/// Rotation quaternion `w + xi + yj + zk` (Hamilton convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::identity();
        }
        let (s, c) = (angle * 0.5).sin_cos();
        let a = axis / n;
        Self::new(c, a.x * s, a.y * s, a.z * s)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Self, GeometryError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(GeometryError::ZeroQuaternion);
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Sign-canonical representative with `w >= 0`.
    pub fn canonical(&self) -> Self {
        if self.w < 0.0 {
            -*self
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    /// Rotation matrix of the normalized quaternion. A zero quaternion maps to
    /// the identity.
    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let q = self.normalized().unwrap_or_default();
        let r = rotation_from_quat(q.w, q.x, q.y, q.z);
        Matrix3::from_fn(|i, j| r[i][j])
    }

    pub fn from_rotation_matrix(m: &Matrix3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*m);
        let uq = nalgebra::UnitQuaternion::from_rotation_matrix(&rot);
        let q = uq.quaternion();
        Self::new(q.w, q.i, q.j, q.k)
    }
}

impl std::ops::Neg for Quaternion {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl std::ops::Mul for Quaternion {
    type Output = Self;
    fn mul(self, r: Self) -> Self {
        let l = self;
        Self::new(
            l.w * r.w - l.x * r.x - l.y * r.y - l.z * r.z,
            l.w * r.x + l.x * r.w + l.y * r.z - l.z * r.y,
            l.w * r.y - l.x * r.z + l.y * r.w + l.z * r.x,
            l.w * r.z + l.x * r.y - l.y * r.x + l.z * r.w,
        )
    }
}

/// Rotation matrix of a quaternion assumed to have unit norm.
pub(crate) fn rotation_from_quat<S: dual::Scalar>(w: S, x: S, y: S, z: S) -> [[S; 3]; 3] {
    let one = S::cst(1.0);
    let two = S::cst(2.0);
    [
        [
            one - two * (y * y + z * z),
            two * (x * y - w * z),
            two * (x * z + w * y),
        ],
        [
            two * (x * y + w * z),
            one - two * (x * x + z * z),
            two * (y * z - w * x),
        ],
        [
            two * (x * z - w * y),
            two * (y * z + w * x),
            one - two * (x * x + y * y),
        ],
    ]
}

/// World-to-camera rigid transform `p_c = R p_w + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Extrinsics {
    pub rotation: Quaternion,
    pub translation: Vector3<f64>,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::identity()
    }
}

impl Extrinsics {
    pub fn new(rotation: Quaternion, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quaternion::identity(), Vector3::zeros())
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix()
    }

    pub fn transform_point(&self, p_w: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p_w + self.translation
    }

    /// Optical center in world coordinates, `c = -Rᵀ t`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation)
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Extrinsics) -> Extrinsics {
        let q = (self.rotation.normalized().unwrap_or_default()
            * other.rotation.normalized().unwrap_or_default())
        .normalized()
        .unwrap_or_default();
        let t = self.rotation_matrix() * other.translation + self.translation;
        Extrinsics::new(q, t)
    }

    pub fn inverse(&self) -> Extrinsics {
        let q = self.rotation.normalized().unwrap_or_default().conjugate();
        let t = -(self.rotation_matrix().transpose() * self.translation);
        Extrinsics::new(q, t)
    }
}

/// Single-focal pinhole intrinsics with a fixed, centered principal point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub log_focal: f64,
    principal_point: Vector2<f64>,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self::from_log_focal(0.0)
    }
}

impl Intrinsics {
    pub fn from_log_focal(log_focal: f64) -> Self {
        Self {
            log_focal,
            principal_point: Vector2::zeros(),
        }
    }

    pub fn from_focal(focal: f64) -> Self {
        Self::from_log_focal(focal.ln())
    }

    pub fn focal(&self) -> f64 {
        self.log_focal.exp()
    }

    pub fn principal_point(&self) -> Vector2<f64> {
        self.principal_point
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let f = self.focal();
        let p = self.principal_point;
        Matrix3::new(f, 0.0, p.x, 0.0, f, p.y, 0.0, 0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "CameraRecord", into = "CameraRecord")]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

/// On-disk camera layout: `{"log_focal": f, "quat": [w,x,y,z], "trans": [x,y,z]}`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct CameraRecord {
    log_focal: f64,
    quat: [f64; 4],
    trans: [f64; 3],
}

impl From<CameraRecord> for Camera {
    fn from(r: CameraRecord) -> Self {
        Camera::new(
            Intrinsics::from_log_focal(r.log_focal),
            Extrinsics::new(Quaternion::from_array(r.quat), Vector3::from(r.trans)),
        )
    }
}

impl From<Camera> for CameraRecord {
    fn from(c: Camera) -> Self {
        CameraRecord {
            log_focal: c.intrinsics.log_focal,
            quat: c.extrinsics.rotation.to_array(),
            trans: c.extrinsics.translation.into(),
        }
    }
}

impl Camera {
    pub fn new(intrinsics: Intrinsics, extrinsics: Extrinsics) -> Self {
        Self {
            intrinsics,
            extrinsics,
        }
    }

    pub fn to_params(&self) -> [f64; CAMERA_DIM] {
        let q = self.extrinsics.rotation;
        let t = self.extrinsics.translation;
        [self.intrinsics.log_focal, q.w, q.x, q.y, q.z, t.x, t.y, t.z]
    }

    pub fn from_params(p: &[f64]) -> Self {
        assert!(p.len() >= CAMERA_DIM, "camera parameter block too short");
        Camera::new(
            Intrinsics::from_log_focal(p[0]),
            Extrinsics::new(
                Quaternion::new(p[1], p[2], p[3], p[4]),
                Vector3::new(p[5], p[6], p[7]),
            ),
        )
    }

    /// Same camera with a unit, `w >= 0` quaternion.
    pub fn normalized(&self) -> Result<Self, GeometryError> {
        let q = self.extrinsics.rotation.normalized()?.canonical();
        Ok(Camera::new(
            self.intrinsics,
            Extrinsics::new(q, self.extrinsics.translation),
        ))
    }

    pub fn is_finite(&self) -> bool {
        self.to_params().iter().all(|v| v.is_finite())
    }
}

/// Perspective projection of a world point into normalized image coordinates.
pub fn project(camera: &Camera, p_w: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    let p_c = camera.extrinsics.transform_point(p_w);
    if !(p_c.z > 0.0) {
        return Err(GeometryError::BehindCamera { depth: p_c.z });
    }
    let f = camera.intrinsics.focal();
    let pp = camera.intrinsics.principal_point();
    Ok(Vector2::new(f * p_c.x / p_c.z + pp.x, f * p_c.y / p_c.z + pp.y))
}

/// Matched 2D points between images `i` and `j`, in normalized coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub i: usize,
    pub j: usize,
    pub points_i: Vec<[f64; 2]>,
    pub points_j: Vec<[f64; 2]>,
}

impl CorrespondenceSet {
    pub fn new(
        i: usize,
        j: usize,
        points_i: Vec<[f64; 2]>,
        points_j: Vec<[f64; 2]>,
    ) -> Result<Self, GeometryError> {
        let set = Self {
            i,
            j,
            points_i,
            points_j,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.points_i.len() != self.points_j.len() {
            return Err(GeometryError::LengthMismatch {
                i: self.i,
                j: self.j,
                left: self.points_i.len(),
                right: self.points_j.len(),
            });
        }
        if self.points_i.is_empty() {
            return Err(GeometryError::EmptyCorrespondences(self.i, self.j));
        }
        let finite = self
            .points_i
            .iter()
            .chain(self.points_j.iter())
            .all(|p| p[0].is_finite() && p[1].is_finite());
        if !finite {
            return Err(GeometryError::NonFiniteCorrespondence(self.i, self.j));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_i.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64; 2], &[f64; 2])> {
        self.points_i.iter().zip(self.points_j.iter())
    }
}
