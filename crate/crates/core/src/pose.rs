//! Rigid-body pose representations and the composition operators used by
//! registration and the per-object pose filter.
//!
//! Three views of a pose coexist here:
//!
//! * [`RigidTransform`] — rotation matrix + translation vector, the working
//!   representation for all geometry.
//! * [`Pose6D`] — translation plus extrinsic X-Y-Z Euler angles, used at the
//!   I/O boundary (configs, logs, reports).
//! * [`TangentVector6`] — a local 6-dof increment (translation difference +
//!   rotation vector of the relative rotation). `plus`/`minus` move between a
//!   pose and this local parameterization; Euler subtraction is discontinuous
//!   and is never used for filtering or optimization.

use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("rotation is not orthonormal (max |R^T R - I| = {0:.3e})")]
    NotOrthonormal(f64),
    #[error("rotation determinant is {0}, expected +1")]
    NotProperRotation(f64),
    #[error("matrix is not a rigid transform: bottom row must be [0 0 0 1]")]
    BadHomogeneousRow,
    #[error("non-finite component in pose")]
    NonFinite,
}

/// Wrap an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

/// Translation plus extrinsic X-Y-Z Euler angles (radians), each wrapped to
/// `(-pi, pi]`. The rotation acts as `Rz(rz) * Ry(ry) * Rx(rx)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose6D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub rx: f64,
    pub ry: f64,
    pub rz: f64,
}

impl Pose6D {
    pub fn new(x: f64, y: f64, z: f64, rx: f64, ry: f64, rz: f64) -> Self {
        Self {
            x,
            y,
            z,
            rx: wrap_angle(rx),
            ry: wrap_angle(ry),
            rz: wrap_angle(rz),
        }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    }

    pub fn to_transform(&self) -> RigidTransform {
        let rot = Rotation3::from_axis_angle(&Vector3::z_axis(), self.rz)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), self.ry)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), self.rx);
        RigidTransform {
            rotation: rot.into_inner(),
            translation: Vector3::new(self.x, self.y, self.z),
        }
    }
}

/// Result of decomposing a rotation into extrinsic X-Y-Z Euler angles.
#[derive(Debug, Clone, Copy)]
pub struct EulerDecomposition {
    pub pose: Pose6D,
    /// Set when `|cos(ry)| < 1e-6`; the decomposition is then canonical with
    /// `rx = 0` but no longer unique.
    pub gimbal_lock: bool,
}

/// A rigid transform: orthonormal rotation (det +1) plus translation in
/// meters. Applies to points as `R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts, validating the rotation invariants.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, PoseError> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(PoseError::NonFinite);
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let max_dev = gram.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_dev > ROTATION_TOL {
            return Err(PoseError::NotOrthonormal(max_dev));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ROTATION_TOL {
            return Err(PoseError::NotProperRotation(det));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Internal constructor for rotations known valid by construction.
    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(x: f64, y: f64, z: f64) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::new(x, y, z),
        }
    }

    pub fn rot_x(angle: f64) -> Self {
        Self::from_parts(
            Rotation3::from_axis_angle(&Vector3::x_axis(), angle).into_inner(),
            Vector3::zeros(),
        )
    }

    pub fn rot_y(angle: f64) -> Self {
        Self::from_parts(
            Rotation3::from_axis_angle(&Vector3::y_axis(), angle).into_inner(),
            Vector3::zeros(),
        )
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_parts(
            Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner(),
            Vector3::zeros(),
        )
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, PoseError> {
        let bottom = m.row(3);
        if (bottom[0].abs() > ROTATION_TOL)
            || (bottom[1].abs() > ROTATION_TOL)
            || (bottom[2].abs() > ROTATION_TOL)
            || ((bottom[3] - 1.0).abs() > ROTATION_TOL)
        {
            return Err(PoseError::BadHomogeneousRow);
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Rotate a direction without translating it.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// `self ∘ other`: the transform applying `other` first, then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rot_t = self.rotation.transpose();
        RigidTransform {
            rotation: rot_t,
            translation: -(rot_t * self.translation),
        }
    }

    /// Local error of `self` relative to `reference` (the ⊖ operator):
    /// translation difference plus the rotation vector of
    /// `reference.rotation⁻¹ * self.rotation`.
    pub fn minus(&self, reference: &RigidTransform) -> TangentVector6 {
        let rel = reference.rotation.transpose() * self.rotation;
        TangentVector6 {
            dt: self.translation - reference.translation,
            dr: rotation_to_vector(&rel),
        }
    }

    /// Apply a local increment (the ⊕ operator): additive on translation,
    /// right-multiplied rotation-vector exponential on rotation.
    pub fn plus(&self, delta: &TangentVector6) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * Rotation3::from_scaled_axis(delta.dr).into_inner(),
            translation: self.translation + delta.dt,
        }
    }

    /// Decompose into extrinsic X-Y-Z Euler angles. Within `1e-6` of gimbal
    /// lock (`|cos ry| < 1e-6`) a canonical decomposition with `rx = 0` is
    /// returned and the flag is set.
    pub fn to_euler(&self) -> EulerDecomposition {
        let m = &self.rotation;
        let sy = (-m[(2, 0)]).clamp(-1.0, 1.0);
        let ry = sy.asin();
        if ry.cos().abs() >= 1e-6 {
            EulerDecomposition {
                pose: Pose6D::new(
                    self.translation.x,
                    self.translation.y,
                    self.translation.z,
                    m[(2, 1)].atan2(m[(2, 2)]),
                    ry,
                    m[(1, 0)].atan2(m[(0, 0)]),
                ),
                gimbal_lock: false,
            }
        } else {
            // At ry = ±pi/2 only rx∓rz is observable; fix rx = 0.
            let rz = if sy > 0.0 {
                -m[(0, 1)].atan2(m[(1, 1)])
            } else {
                (-m[(0, 1)]).atan2(m[(1, 1)])
            };
            EulerDecomposition {
                pose: Pose6D::new(
                    self.translation.x,
                    self.translation.y,
                    self.translation.z,
                    0.0,
                    ry,
                    rz,
                ),
                gimbal_lock: true,
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// Rotation vector (scaled axis, |v| <= pi) of a rotation matrix.
pub fn rotation_to_vector(rot: &Matrix3<f64>) -> Vector3<f64> {
    UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rot)).scaled_axis()
}

/// A 6-dof local increment: translation difference in meters plus rotation
/// vector in radians, canonicalized to `|dr| <= pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentVector6 {
    pub dt: Vector3<f64>,
    pub dr: Vector3<f64>,
}

impl TangentVector6 {
    pub fn zero() -> Self {
        Self {
            dt: Vector3::zeros(),
            dr: Vector3::zeros(),
        }
    }

    pub fn new(dt: Vector3<f64>, dr: Vector3<f64>) -> Self {
        Self { dt, dr }.canonicalized()
    }

    /// Wrap the rotation part back into `|dr| <= pi`.
    pub fn canonicalized(&self) -> Self {
        let angle = self.dr.norm();
        if angle <= std::f64::consts::PI || angle == 0.0 {
            return *self;
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let wrapped = angle - two_pi * (angle / two_pi).round();
        Self {
            dt: self.dt,
            dr: self.dr / angle * wrapped,
        }
    }

    pub fn from_vector6(v: &Vector6<f64>) -> Self {
        Self {
            dt: Vector3::new(v[0], v[1], v[2]),
            dr: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_vector6(&self) -> Vector6<f64> {
        Vector6::new(
            self.dt.x, self.dt.y, self.dt.z, self.dr.x, self.dr.y, self.dr.z,
        )
    }

    pub fn norm(&self) -> f64 {
        (self.dt.norm_squared() + self.dr.norm_squared()).sqrt()
    }
}

/// JSON form of a pose: serialized as translation + Euler angles, accepted
/// either that way or as a 4x4 row-major matrix under the key `matrix`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PoseJson {
    Euler { t: [f64; 3], euler_xyz: [f64; 3] },
    Matrix { matrix: Vec<f64> },
}

impl PoseJson {
    pub fn from_transform(t: &RigidTransform) -> Self {
        let dec = t.to_euler();
        PoseJson::Euler {
            t: [t.translation.x, t.translation.y, t.translation.z],
            euler_xyz: [dec.pose.rx, dec.pose.ry, dec.pose.rz],
        }
    }

    pub fn to_transform(&self) -> Result<RigidTransform, PoseError> {
        match self {
            PoseJson::Euler { t, euler_xyz } => Ok(Pose6D::new(
                t[0],
                t[1],
                t[2],
                euler_xyz[0],
                euler_xyz[1],
                euler_xyz[2],
            )
            .to_transform()),
            PoseJson::Matrix { matrix } => {
                if matrix.len() != 16 {
                    return Err(PoseError::BadHomogeneousRow);
                }
                let m = Matrix4::from_row_slice(matrix);
                RigidTransform::from_matrix4(&m)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Independent matrix-log oracle: angle from the trace, axis from the
    /// skew part. Valid away from angle = 0 and pi.
    fn matrix_log_oracle(m: &Matrix3<f64>) -> Vector3<f64> {
        let cos_theta = ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        if theta < 1e-12 {
            return Vector3::zeros();
        }
        let axis = Vector3::new(
            m[(2, 1)] - m[(1, 2)],
            m[(0, 2)] - m[(2, 0)],
            m[(1, 0)] - m[(0, 1)],
        ) / (2.0 * theta.sin());
        axis * theta
    }

    fn max_component_diff(a: &RigidTransform, b: &RigidTransform) -> f64 {
        let rot = (a.rotation - b.rotation)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let tr = (a.translation - b.translation)
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        rot.max(tr)
    }

    #[test]
    fn compose_identity_is_neutral() {
        let t = Pose6D::new(0.3, -0.2, 1.0, 0.1, 0.2, -0.4).to_transform();
        let id = RigidTransform::identity();
        assert!(max_component_diff(&id.compose(&t), &t) < 1e-15);
        assert!(max_component_diff(&t.compose(&id), &t) < 1e-15);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = Pose6D::new(0.3, -0.2, 1.0, 0.5, -0.7, 1.2).to_transform();
        let prod = t.compose(&t.inverse());
        assert!(max_component_diff(&prod, &RigidTransform::identity()) < 1e-9);
    }

    #[test]
    fn pure_translations_add() {
        let a = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let b = RigidTransform::from_translation(0.0, 2.0, 0.0);
        let c = a.compose(&b);
        assert_abs_diff_eq!(c.translation, Vector3::new(1.0, 2.0, 0.0), epsilon = 1e-15);
        assert!(max_component_diff(
            &RigidTransform::from_parts(c.rotation, Vector3::zeros()),
            &RigidTransform::identity()
        ) < 1e-15);
    }

    #[test]
    fn inverse_of_identity_and_translation() {
        let id = RigidTransform::identity();
        assert!(max_component_diff(&id.inverse(), &id) < 1e-15);
        let t = RigidTransform::from_translation(1.0, 2.0, 3.0);
        assert_abs_diff_eq!(
            t.inverse().translation,
            Vector3::new(-1.0, -2.0, -3.0),
            epsilon = 1e-15
        );
    }

    #[test]
    fn inverse_of_rotation() {
        let r = RigidTransform::rot_z(std::f64::consts::FRAC_PI_2);
        let expect = RigidTransform::rot_z(-std::f64::consts::FRAC_PI_2);
        assert!(max_component_diff(&r.inverse(), &expect) < 1e-12);
    }

    #[test]
    fn minus_of_self_is_zero() {
        let t = Pose6D::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6).to_transform();
        let d = t.minus(&t);
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn minus_of_pure_translation() {
        let z = RigidTransform::from_translation(1.0, 0.0, 0.0);
        let d = z.minus(&RigidTransform::identity());
        assert_abs_diff_eq!(d.dt, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-15);
        assert!(d.dr.norm() < 1e-15);
    }

    #[test]
    fn minus_matches_matrix_log_oracle() {
        let z = RigidTransform::rot_z(0.3);
        let x = RigidTransform::rot_z(0.1);
        let d = z.minus(&x);
        assert_abs_diff_eq!(d.dr, Vector3::new(0.0, 0.0, 0.2), epsilon = 1e-12);

        // Cross-check against the independent trace/skew log on a batch of
        // random rotation pairs.
        let mut rng_state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for _ in 0..50 {
            let a = Pose6D::new(0.0, 0.0, 0.0, next(), next(), next()).to_transform();
            let b = Pose6D::new(0.0, 0.0, 0.0, next(), next(), next()).to_transform();
            let rel = a.rotation.transpose() * b.rotation;
            let oracle = matrix_log_oracle(&rel);
            let got = b.minus(&a).dr;
            assert_abs_diff_eq!(got, oracle, epsilon = 1e-9);
        }
    }

    #[test]
    fn plus_zero_is_identity_increment() {
        let x = Pose6D::new(0.1, 0.2, 0.3, 0.4, 0.5, 0.6).to_transform();
        assert!(max_component_diff(&x.plus(&TangentVector6::zero()), &x) < 1e-15);
    }

    #[test]
    fn plus_on_identity_translates() {
        let v = TangentVector6::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros());
        let t = RigidTransform::identity().plus(&v);
        assert!(max_component_diff(&t, &RigidTransform::from_translation(1.0, 2.0, 3.0)) < 1e-15);
    }

    #[test]
    fn plus_rotation_vector_composes_about_z() {
        let x = RigidTransform::rot_z(0.1);
        let v = TangentVector6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 0.2));
        assert!(max_component_diff(&x.plus(&v), &RigidTransform::rot_z(0.3)) < 1e-12);
    }

    #[test]
    fn euler_identity_and_single_axis() {
        assert!(max_component_diff(&Pose6D::zero().to_transform(), &RigidTransform::identity()) < 1e-15);
        let dec = RigidTransform::rot_x(0.5).to_euler();
        assert!(!dec.gimbal_lock);
        assert_abs_diff_eq!(dec.pose.rx, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.pose.ry, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(dec.pose.rz, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gimbal_lock_flag_and_canonical_form() {
        let t = Pose6D::new(0.0, 0.0, 0.0, 0.3, std::f64::consts::FRAC_PI_2, 0.2).to_transform();
        let dec = t.to_euler();
        assert!(dec.gimbal_lock);
        assert_eq!(dec.pose.rx, 0.0);
        // Canonical decomposition must still reproduce the rotation.
        assert!(max_component_diff(&dec.pose.to_transform(), &t) < 1e-9);
    }

    #[test]
    fn angle_wrapping() {
        assert_abs_diff_eq!(wrap_angle(3.0 * std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(-std::f64::consts::PI), std::f64::consts::PI, epsilon = 1e-12);
        assert_abs_diff_eq!(wrap_angle(0.1), 0.1, epsilon = 1e-15);
    }

    #[test]
    fn pose_json_round_trip_and_matrix_form() {
        let t = Pose6D::new(0.1, -0.2, 0.3, 0.4, 0.5, -0.6).to_transform();
        let json = serde_json::to_string(&PoseJson::from_transform(&t)).unwrap();
        assert!(json.contains("euler_xyz"));
        let back: PoseJson = serde_json::from_str(&json).unwrap();
        assert!(max_component_diff(&back.to_transform().unwrap(), &t) < 1e-9);

        let m = t.to_matrix4();
        let flat: Vec<f64> = m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect();
        let mat_json = serde_json::json!({ "matrix": flat }).to_string();
        let back: PoseJson = serde_json::from_str(&mat_json).unwrap();
        assert!(max_component_diff(&back.to_transform().unwrap(), &t) < 1e-9);
    }

    #[test]
    fn rejects_non_rotation() {
        let bad = Matrix3::new(1.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        assert!(RigidTransform::new(bad, Vector3::zeros()).is_err());
        let reflect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(matches!(
            RigidTransform::new(reflect, Vector3::zeros()),
            Err(PoseError::NotProperRotation(_))
        ));
    }

    proptest! {
        #[test]
        fn euler_round_trip_away_from_gimbal(
            x in -2.0f64..2.0, y in -2.0f64..2.0, z in -2.0f64..2.0,
            rx in -3.1f64..3.1, ry in -1.4f64..1.4, rz in -3.1f64..3.1,
        ) {
            let pose = Pose6D::new(x, y, z, rx, ry, rz);
            let dec = pose.to_transform().to_euler();
            prop_assert!(!dec.gimbal_lock);
            prop_assert!((dec.pose.x - pose.x).abs() < 1e-9);
            prop_assert!((dec.pose.rx - pose.rx).abs() < 1e-9);
            prop_assert!((dec.pose.ry - pose.ry).abs() < 1e-9);
            prop_assert!((dec.pose.rz - pose.rz).abs() < 1e-9);
        }

        #[test]
        fn compose_is_associative(
            a in prop::array::uniform6(-1.0f64..1.0),
            b in prop::array::uniform6(-1.0f64..1.0),
            c in prop::array::uniform6(-1.0f64..1.0),
        ) {
            let ta = Pose6D::new(a[0], a[1], a[2], a[3], a[4], a[5]).to_transform();
            let tb = Pose6D::new(b[0], b[1], b[2], b[3], b[4], b[5]).to_transform();
            let tc = Pose6D::new(c[0], c[1], c[2], c[3], c[4], c[5]).to_transform();
            let lhs = ta.compose(&tb).compose(&tc);
            let rhs = ta.compose(&tb.compose(&tc));
            prop_assert!(max_component_diff(&lhs, &rhs) < 1e-9);
        }

        #[test]
        fn plus_minus_are_local_inverses(
            a in prop::array::uniform6(-1.0f64..1.0),
            b in prop::array::uniform6(-0.9f64..0.9),
        ) {
            let x = Pose6D::new(a[0], a[1], a[2], a[3], a[4], a[5]).to_transform();
            let z = Pose6D::new(b[0], b[1], b[2], b[3], b[4], b[5]).to_transform();
            let rel_angle = z.minus(&x).dr.norm();
            prop_assume!(rel_angle < std::f64::consts::PI - 0.01);
            let recovered = x.plus(&z.minus(&x));
            prop_assert!(max_component_diff(&recovered, &z) < 1e-9);
        }
    }
}
