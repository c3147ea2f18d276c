//! Rigid-body pose type and small rotation helpers shared by the simulator,
//! the policy observation and the reward terms.

use nalgebra::{Isometry3, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum tolerated deviation of a pose quaternion from unit norm.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-9;

/// Position (meters, robot base frame) plus orientation quaternion.
///
/// The quaternion is stored raw so that non-normalized input can be detected
/// and rejected at module boundaries instead of being silently renormalized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: Quaternion<f64>,
}

/// File representation: quaternion written scalar-first.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    position: [f64; 3],
    orientation_wxyz: [f64; 4],
}

impl From<PoseRepr> for Pose {
    fn from(r: PoseRepr) -> Self {
        let [w, x, y, z] = r.orientation_wxyz;
        Pose {
            position: Vector3::from(r.position),
            orientation: Quaternion::new(w, x, y, z),
        }
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.orientation;
        PoseRepr {
            position: [p.position.x, p.position.y, p.position.z],
            orientation_wxyz: [q.w, q.i, q.j, q.k],
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            orientation: Quaternion::identity(),
        }
    }

    /// Renormalizes `rotation` to absorb accumulated rounding.
    pub fn new(position: Vector3<f64>, rotation: UnitQuaternion<f64>) -> Self {
        Pose {
            position,
            orientation: rotation.into_inner().normalize(),
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Pose {
            position,
            orientation: Quaternion::identity(),
        }
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        Pose::new(iso.translation.vector, iso.rotation)
    }

    /// Fails with [`Error::NonUnitQuaternion`] when the orientation drifts
    /// from unit norm by more than [`QUATERNION_NORM_TOLERANCE`].
    pub fn validate(&self) -> Result<()> {
        let norm = self.orientation.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(Error::NonUnitQuaternion(norm));
        }
        if !self.position.iter().all(|v| v.is_finite()) {
            return Err(Error::input("pose position is not finite"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::new_unchecked(self.orientation)
    }

    /// Checked conversion to an isometry.
    pub fn isometry(&self) -> Result<Isometry3<f64>> {
        self.validate()?;
        Ok(self.isometry_unchecked())
    }

    pub(crate) fn isometry_unchecked(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.position), self.rotation())
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.position
    }

    /// Orientation as an axis-angle vector (axis scaled by angle, angle in [0, π]).
    pub fn axis_angle(&self) -> Vector3<f64> {
        self.rotation().scaled_axis()
    }
}

/// Rotation from a scaled-axis vector; zero vector gives identity.
pub fn rotation_from_axis_angle(v: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*v)
}

/// Rotation about the vertical (z) axis.
pub fn yaw_rotation(angle: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angle)
}

/// Applies an isometry to a vector treated as a point.
pub(crate) fn apply(iso: &Isometry3<f64>, p: &Vector3<f64>) -> Vector3<f64> {
    (iso * Point3::from(*p)).coords
}

/// Moves `from` toward `to` by at most `max_step` along the straight line.
pub fn clip_translation(from: &Vector3<f64>, to: &Vector3<f64>, max_step: f64) -> Vector3<f64> {
    let delta = to - from;
    let dist = delta.norm();
    if dist <= max_step || dist == 0.0 {
        *to
    } else {
        from + delta * (max_step / dist)
    }
}

/// Rotates `from` toward `to` by at most `max_angle` radians about the
/// relative rotation axis.
pub fn clip_rotation(
    from: &UnitQuaternion<f64>,
    to: &UnitQuaternion<f64>,
    max_angle: f64,
) -> UnitQuaternion<f64> {
    let rel = to * from.inverse();
    let angle = rel.angle();
    let out = if angle <= max_angle {
        *to
    } else {
        let scaled = rel.scaled_axis() * (max_angle / angle);
        UnitQuaternion::from_scaled_axis(scaled) * from
    };
    // composition drifts off the unit sphere over many steps
    UnitQuaternion::new_normalize(out.into_inner())
}
