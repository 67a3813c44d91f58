//! Endoscope coordinate frame and projection of world-frame poses into it.
//!
//! The frame has its origin at the endoscope tip, `X` pointing from the tip
//! toward the hand-held end, and the `X`-`Z` plane spanned by `X` and the
//! cranial vector, so that "up" on the monitor is toward the top of the head.

use nalgebra::{Matrix3, Matrix4, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum distance of `|dot(axis, cranial)|` from 1 for a usable frame.
pub const DEGENERACY_EPS: f64 = 1e-6;
/// Tolerance on the norm of direction vectors passed in as unit vectors.
pub const UNIT_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("cranial vector is parallel to the endoscope axis (|dot| = {0})")]
    DegenerateFrame(f64),
    #[error("expected a unit vector, got norm {0}")]
    NotUnit(f64),
    #[error("rotation is not orthonormal and right-handed")]
    NotRotation,
    #[error("vector has a non-finite component")]
    NonFinite,
}

/// Tracked device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    Endoscope,
    Instrument,
}

impl Device {
    pub fn as_str(self) -> &'static str {
        match self {
            Device::Endoscope => "endoscope",
            Device::Instrument => "instrument",
        }
    }
}

impl std::str::FromStr for Device {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "endoscope" => Ok(Device::Endoscope),
            "instrument" => Ok(Device::Instrument),
            _ => Err(()),
        }
    }
}

/// Time-stamped world-frame pose of one tracked device tip.
///
/// The quaternion is stored exactly as delivered (w, x, y, z); parsers check
/// that it is unit-norm before constructing a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSample {
    pub t: f64,
    pub device: Device,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub valid: bool,
}

impl PoseSample {
    pub fn new(
        t: f64,
        device: Device,
        position: Vector3<f64>,
        orientation: UnitQuaternion<f64>,
        valid: bool,
    ) -> Self {
        Self { t, device, position, orientation, valid }
    }

    /// Placeholder row for a sample the tracker could not deliver.
    pub fn dropped(t: f64, device: Device) -> Self {
        Self {
            t,
            device,
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
            valid: false,
        }
    }

    /// Quaternion components in w, x, y, z order.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }
}

/// Builds a unit quaternion from w, x, y, z without renormalizing, provided
/// its norm is within `tol` of one.
pub fn quaternion_from_wxyz(wxyz: [f64; 4], tol: f64) -> Option<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let norm = q.norm();
    if !norm.is_finite() || (norm - 1.0).abs() > tol {
        return None;
    }
    Some(UnitQuaternion::new_unchecked(q))
}

/// World-frame unit vector pointing toward the top of the patient's head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CranialVector(Vector3<f64>);

impl CranialVector {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self, GeometryError> {
        if !v.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let n = v.norm();
        if n < 1e-12 {
            return Err(GeometryError::NotUnit(n));
        }
        Ok(Self(v / n))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }
}

/// Endoscope-local frame: `local = rotation * (world - origin)`.
///
/// Rows of `rotation` are the local X, Y, Z axes expressed in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndoscopeFrame {
    origin: Vector3<f64>,
    rotation: Matrix3<f64>,
}

impl EndoscopeFrame {
    pub fn identity() -> Self {
        Self { origin: Vector3::zeros(), rotation: Matrix3::identity() }
    }

    /// Wraps an explicit origin and world-to-local rotation after checking
    /// that the rotation is proper.
    pub fn from_parts(origin: Vector3<f64>, rotation: Matrix3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeometryError::NotRotation);
        }
        Ok(Self { origin, rotation })
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    /// World-to-local rotation (rows are the local axes).
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn x_axis(&self) -> Vector3<f64> {
        self.rotation.row(0).transpose()
    }

    pub fn y_axis(&self) -> Vector3<f64> {
        self.rotation.row(1).transpose()
    }

    pub fn z_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    /// Rotates a world-frame free vector (direction, velocity) into the frame.
    pub fn rotate_vector(&self, v_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v_world
    }

    /// Inverse of [`project_point`].
    pub fn unproject_point(&self, p_local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * p_local + self.origin
    }

    /// 4x4 homogeneous world-to-local transform.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        let t = -(self.rotation * self.origin);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }
}

/// Builds the endoscope frame at `scope_tip` with local X along
/// `scope_handle_dir` (tip toward handle) and Z the component of the cranial
/// vector orthogonal to X.
pub fn build_endoscope_frame(
    scope_tip: Vector3<f64>,
    scope_handle_dir: Vector3<f64>,
    cranial: &CranialVector,
) -> Result<EndoscopeFrame, GeometryError> {
    if !scope_tip.iter().chain(scope_handle_dir.iter()).all(|c| c.is_finite()) {
        return Err(GeometryError::NonFinite);
    }
    let n = scope_handle_dir.norm();
    if (n - 1.0).abs() > UNIT_EPS {
        return Err(GeometryError::NotUnit(n));
    }
    let x = scope_handle_dir / n;
    let c = cranial.as_vector();
    let dot = c.dot(&x);
    if (1.0 - dot.abs()).abs() <= DEGENERACY_EPS {
        return Err(GeometryError::DegenerateFrame(dot.abs()));
    }
    let z = (c - x * dot).normalize();
    let y = z.cross(&x);
    let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(EndoscopeFrame { origin: scope_tip, rotation })
}

/// Expresses a world-frame point in the endoscope frame.
pub fn project_point(frame: &EndoscopeFrame, p_world: &Vector3<f64>) -> Vector3<f64> {
    frame.rotation * (p_world - frame.origin)
}

/// Rotates a body-frame shaft axis by the instrument orientation and expresses
/// the resulting direction in the endoscope frame.
pub fn instrument_direction_local(
    frame: &EndoscopeFrame,
    instrument_q: &UnitQuaternion<f64>,
    shaft_axis_body: &Vector3<f64>,
) -> Vector3<f64> {
    frame.rotation * instrument_q.transform_vector(shaft_axis_body)
}

/// Body-frame description of the endoscope.
///
/// `shaft_axis_body` is the direction the scope points (handle toward tip)
/// in the tracker body frame. A nonzero `scope_angle_deg` tilts that axis
/// about body X to model an angled scope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScopeModel {
    pub shaft_axis_body: Vector3<f64>,
    pub scope_angle_deg: f64,
}

impl Default for ScopeModel {
    fn default() -> Self {
        Self { shaft_axis_body: Vector3::z(), scope_angle_deg: 0.0 }
    }
}

impl ScopeModel {
    pub fn with_angle(scope_angle_deg: f64) -> Self {
        Self { scope_angle_deg, ..Self::default() }
    }

    /// Pointing axis in the body frame after the angled-scope tilt.
    pub fn viewing_axis_body(&self) -> Vector3<f64> {
        if self.scope_angle_deg == 0.0 {
            return self.shaft_axis_body;
        }
        let tilt = Rotation3::from_axis_angle(&Vector3::x_axis(), self.scope_angle_deg.to_radians());
        tilt * self.shaft_axis_body
    }

    /// Frame for an endoscope pose: origin at the tip, X opposite the viewing
    /// direction.
    pub fn frame_for(
        &self,
        tip: &Vector3<f64>,
        orientation: &UnitQuaternion<f64>,
        cranial: &CranialVector,
    ) -> Result<EndoscopeFrame, GeometryError> {
        let view = orientation.transform_vector(&self.viewing_axis_body());
        let handle = Unit::new_normalize(-view).into_inner();
        build_endoscope_frame(*tip, handle, cranial)
    }
}

/// Homogeneous 4-vector of a point, mostly useful for cross-checking.
pub fn homogeneous(p: &Vector3<f64>) -> Vector4<f64> {
    Vector4::new(p.x, p.y, p.z, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn cranial(x: f64, y: f64, z: f64) -> CranialVector {
        CranialVector::new(Vector3::new(x, y, z)).unwrap()
    }

    /// Classical Gram-Schmidt done by hand, independent of the nalgebra path.
    fn gram_schmidt_rows(x: [f64; 3], c: [f64; 3]) -> [[f64; 3]; 3] {
        let dot = x[0] * c[0] + x[1] * c[1] + x[2] * c[2];
        let mut z = [c[0] - dot * x[0], c[1] - dot * x[1], c[2] - dot * x[2]];
        let n = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
        z.iter_mut().for_each(|v| *v /= n);
        let y = [
            z[1] * x[2] - z[2] * x[1],
            z[2] * x[0] - z[0] * x[2],
            z[0] * x[1] - z[1] * x[0],
        ];
        [x, y, z]
    }

    #[test]
    fn axis_aligned_frame() {
        let f = build_endoscope_frame(Vector3::zeros(), Vector3::z(), &cranial(0.0, 1.0, 0.0)).unwrap();
        assert_eq!(f.x_axis(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(f.z_axis(), Vector3::new(0.0, 1.0, 0.0));
        assert_eq!(f.y_axis(), Vector3::new(1.0, 0.0, 0.0));
        let p = project_point(&f, &Vector3::new(2.0, 3.0, 4.0));
        assert_eq!(p, Vector3::new(4.0, 2.0, 3.0));
    }

    #[test]
    fn parallel_cranial_is_degenerate() {
        let err = build_endoscope_frame(Vector3::zeros(), Vector3::z(), &cranial(0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateFrame(_)));
        let err = build_endoscope_frame(Vector3::zeros(), -Vector3::z(), &cranial(0.0, 0.0, 1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::DegenerateFrame(_)));
    }

    #[test]
    fn non_unit_axis_rejected() {
        let err = build_endoscope_frame(Vector3::zeros(), Vector3::new(0.0, 0.0, 2.0), &cranial(0.0, 1.0, 0.0));
        assert!(matches!(err, Err(GeometryError::NotUnit(_))));
    }

    #[test]
    fn oblique_cranial_matches_gram_schmidt() {
        let c = cranial(FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0);
        let f = build_endoscope_frame(Vector3::new(1.0, 2.0, 3.0), Vector3::x(), &c).unwrap();
        assert_abs_diff_eq!(f.z_axis(), Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
        let oracle = gram_schmidt_rows([1.0, 0.0, 0.0], [FRAC_1_SQRT_2, FRAC_1_SQRT_2, 0.0]);
        for (i, row) in oracle.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(f.rotation()[(i, j)], *v, epsilon = 1e-12);
            }
        }
        assert_eq!(project_point(&f, &Vector3::new(1.0, 2.0, 3.0)), Vector3::zeros());
    }

    #[test]
    fn instrument_direction_examples() {
        let id = EndoscopeFrame::identity();
        let shaft = Vector3::z();
        assert_eq!(instrument_direction_local(&id, &UnitQuaternion::identity(), &shaft), shaft);
        let flip = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
        assert_abs_diff_eq!(
            instrument_direction_local(&id, &flip, &shaft),
            Vector3::new(0.0, 0.0, -1.0),
            epsilon = 1e-12
        );
        // the built frame with X = world x, cranial = world z is the identity
        let built = build_endoscope_frame(Vector3::zeros(), Vector3::x(), &cranial(0.0, 0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(*built.rotation(), Matrix3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn from_parts_rejects_reflection() {
        let m = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert_eq!(EndoscopeFrame::from_parts(Vector3::zeros(), m), Err(GeometryError::NotRotation));
    }

    #[test]
    fn angled_scope_tilts_view() {
        let m = ScopeModel::with_angle(30.0);
        let v = m.viewing_axis_body();
        assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.dot(&Vector3::z()), 30f64.to_radians().cos(), epsilon = 1e-12);
        assert_eq!(ScopeModel::default().viewing_axis_body(), Vector3::z());
    }

    /// Quaternion to rotation matrix from the textbook closed form.
    fn quat_matrix(w: f64, x: f64, y: f64, z: f64) -> [[f64; 3]; 3] {
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn unit3() -> impl Strategy<Value = Vector3<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c)| a * a + b * b + c * c > 1e-4)
            .prop_map(|(a, b, c)| Vector3::new(a, b, c).normalize())
    }

    fn point3() -> impl Strategy<Value = Vector3<f64>> {
        (-100.0..100.0f64, -100.0..100.0f64, -100.0..100.0f64).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    fn quat() -> impl Strategy<Value = UnitQuaternion<f64>> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(a, b, c, d)| a * a + b * b + c * c + d * d > 1e-4)
            .prop_map(|(a, b, c, d)| UnitQuaternion::new_normalize(Quaternion::new(a, b, c, d)))
    }

    proptest! {
        #[test]
        fn frame_is_proper_rotation(tip in point3(), axis in unit3(), c in unit3()) {
            prop_assume!((1.0 - axis.dot(&c).abs()) > 1e-3);
            let cv = CranialVector::new(c).unwrap();
            let f = build_endoscope_frame(tip, axis, &cv).unwrap();
            let r = f.rotation();
            prop_assert!((r * r.transpose() - Matrix3::identity()).amax() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((f.x_axis() - axis).amax() < 1e-12);
            // cranial lies in the X-Z plane
            prop_assert!(f.rotate_vector(cv.as_vector()).y.abs() < 1e-9);
            prop_assert!(f.rotate_vector(cv.as_vector()).z > 0.0);
        }

        #[test]
        fn projection_round_trips(tip in point3(), axis in unit3(), c in unit3(), p in point3()) {
            prop_assume!((1.0 - axis.dot(&c).abs()) > 1e-3);
            let f = build_endoscope_frame(tip, axis, &CranialVector::new(c).unwrap()).unwrap();
            let local = project_point(&f, &p);
            prop_assert!((f.unproject_point(&local) - p).amax() < 1e-12);
            let h = f.to_homogeneous() * homogeneous(&p);
            prop_assert!((h.xyz() - local).amax() < 1e-12);
        }

        #[test]
        fn direction_matches_matrix_oracle(q in quat(), axis in unit3(), c in unit3(), shaft in unit3()) {
            prop_assume!((1.0 - axis.dot(&c).abs()) > 1e-3);
            let f = build_endoscope_frame(Vector3::zeros(), axis, &CranialVector::new(c).unwrap()).unwrap();
            let d = instrument_direction_local(&f, &q, &shaft);
            let qq = q.quaternion();
            let m = quat_matrix(qq.w, qq.i, qq.j, qq.k);
            let mut world = [0.0; 3];
            for i in 0..3 {
                world[i] = m[i][0] * shaft.x + m[i][1] * shaft.y + m[i][2] * shaft.z;
            }
            let oracle = f.rotation() * Vector3::from(world);
            prop_assert!((d - oracle).amax() < 1e-12);
            prop_assert!((d.norm() - 1.0).abs() < 1e-9);
        }
    }
}
