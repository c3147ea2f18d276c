//! Kinematic model of the four-finger, sixteen-joint hand with a floating palm.

use std::fmt;
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply, Pose};

pub const NUM_FINGERS: usize = 4;
pub const JOINTS_PER_FINGER: usize = 4;
pub const NUM_JOINTS: usize = NUM_FINGERS * JOINTS_PER_FINGER;
pub const HAND_FORMAT_VERSION: u32 = 1;

const DEFAULT_HAND_TOML: &str = include_str!("../data/hand_default.toml");

/// Finger identity. The order (index, middle, ring, thumb) is used for joint
/// vectors, contact vectors, fingertip sets and demonstration files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Finger {
    Index,
    Middle,
    Ring,
    Thumb,
}

impl Finger {
    pub const ALL: [Finger; NUM_FINGERS] = [Finger::Index, Finger::Middle, Finger::Ring, Finger::Thumb];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Finger::Index => "index",
            Finger::Middle => "middle",
            Finger::Ring => "ring",
            Finger::Thumb => "thumb",
        }
    }

    pub fn from_index(i: usize) -> Finger {
        Finger::ALL[i]
    }

    /// Slice of the joint vector belonging to this finger.
    pub fn joint_range(self) -> std::ops::Range<usize> {
        let s = self.index() * JOINTS_PER_FINGER;
        s..s + JOINTS_PER_FINGER
    }
}

impl fmt::Display for Finger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Sixteen joint angles (rad), finger-major.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointVector(pub [f64; NUM_JOINTS]);

impl JointVector {
    pub fn zeros() -> Self {
        JointVector([0.0; NUM_JOINTS])
    }

    pub fn finger(&self, f: Finger) -> &[f64] {
        &self.0[f.joint_range()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for JointVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub axis: Unit<Vector3<f64>>,
    /// Translation from the previous joint frame (or the mount) to this joint.
    pub offset: Vector3<f64>,
    pub limits: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct FingerChain {
    pub finger: Finger,
    pub mount: Isometry3<f64>,
    pub joints: [Joint; JOINTS_PER_FINGER],
    pub tip_offset: Vector3<f64>,
}

impl FingerChain {
    /// Fingertip center in the palm frame for this finger's four joint angles.
    pub fn tip_in_palm(&self, q: &[f64]) -> Vector3<f64> {
        let mut iso = self.mount;
        for (joint, &angle) in self.joints.iter().zip(q) {
            iso = iso
                * Translation3::from(joint.offset)
                * UnitQuaternion::from_axis_angle(&joint.axis, angle);
        }
        apply(&iso, &self.tip_offset)
    }

    /// Sum of link lengths from the mount to the fingertip center.
    pub fn chain_length(&self) -> f64 {
        self.joints.iter().map(|j| j.offset.norm()).sum::<f64>() + self.tip_offset.norm()
    }

    pub fn mount_position(&self) -> Vector3<f64> {
        self.mount.translation.vector
    }
}

/// Kinematic description of the hand.
#[derive(Clone, Debug, PartialEq)]
pub struct HandModel {
    pub description: String,
    pub fingers: [FingerChain; NUM_FINGERS],
    pub fingertip_radius: f64,
    /// Radius of the collision sphere at the palm origin.
    pub palm_radius: f64,
    /// Joint configuration the hand starts each episode in.
    pub open_pose: JointVector,
    /// Zero-configuration fingertip centers as documented in the config file.
    pub rest_tips: Option<[Vector3<f64>; NUM_FINGERS]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct JointFile {
    axis: [f64; 3],
    offset: [f64; 3],
    limits: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct FingerFile {
    name: String,
    mount_position: [f64; 3],
    mount_orientation_wxyz: [f64; 4],
    tip_offset: [f64; 3],
    joints: Vec<JointFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct HandFile {
    format_version: u32,
    #[serde(default)]
    description: String,
    fingertip_radius: f64,
    palm_radius: f64,
    fingers: Vec<FingerFile>,
    open_pose: [f64; JOINTS_PER_FINGER],
    #[serde(default)]
    rest_tips: Option<Vec<[f64; 3]>>,
}

impl Default for HandModel {
    fn default() -> Self {
        HandModel::from_toml_str(DEFAULT_HAND_TOML).expect("bundled hand config is valid")
    }
}

impl HandModel {
    pub fn default_config_text() -> &'static str {
        DEFAULT_HAND_TOML
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_toml_str(&text)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: HandFile = toml::from_str(text).map_err(|e| Error::format("hand model", e))?;
        Self::from_file(file)
    }

    fn from_file(file: HandFile) -> Result<Self> {
        if file.format_version != HAND_FORMAT_VERSION {
            return Err(Error::format(
                "hand model",
                format!("unsupported format_version {}", file.format_version),
            ));
        }
        if file.fingers.len() != NUM_FINGERS {
            return Err(Error::Dimension {
                what: "fingers",
                expected: NUM_FINGERS,
                got: file.fingers.len(),
            });
        }
        if !(file.fingertip_radius > 0.0) || !(file.palm_radius >= 0.0) {
            return Err(Error::format("hand model", "radii must be positive"));
        }
        let mut chains = Vec::with_capacity(NUM_FINGERS);
        for (i, f) in file.fingers.into_iter().enumerate() {
            let finger = Finger::from_index(i);
            if f.name != finger.name() {
                return Err(Error::format(
                    "hand model",
                    format!("finger {} must be '{}', found '{}'", i, finger.name(), f.name),
                ));
            }
            if f.joints.len() != JOINTS_PER_FINGER {
                return Err(Error::Dimension {
                    what: "joints per finger",
                    expected: JOINTS_PER_FINGER,
                    got: f.joints.len(),
                });
            }
            let [w, x, y, z] = f.mount_orientation_wxyz;
            let mount_rot = Pose {
                position: Vector3::from(f.mount_position),
                orientation: Quaternion::new(w, x, y, z),
            };
            mount_rot.validate()?;
            let mut joints = Vec::with_capacity(JOINTS_PER_FINGER);
            for (j, jf) in f.joints.into_iter().enumerate() {
                let axis = Vector3::from(jf.axis);
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return Err(Error::format(
                        "hand model",
                        format!("{} joint {} axis is not unit length", finger, j),
                    ));
                }
                if !(jf.limits[0] < jf.limits[1]) {
                    return Err(Error::format(
                        "hand model",
                        format!("{} joint {} limits must satisfy lo < hi", finger, j),
                    ));
                }
                joints.push(Joint {
                    axis: Unit::new_unchecked(axis),
                    offset: Vector3::from(jf.offset),
                    limits: jf.limits,
                });
            }
            chains.push(FingerChain {
                finger,
                mount: mount_rot.isometry_unchecked(),
                joints: joints.try_into().expect("length checked"),
                tip_offset: Vector3::from(f.tip_offset),
            });
        }
        let rest_tips = match file.rest_tips {
            None => None,
            Some(v) if v.len() == NUM_FINGERS => {
                Some([0, 1, 2, 3].map(|i| Vector3::from(v[i])))
            }
            Some(v) => {
                return Err(Error::Dimension {
                    what: "rest_tips",
                    expected: NUM_FINGERS,
                    got: v.len(),
                })
            }
        };
        let fingers: [FingerChain; NUM_FINGERS] = chains.try_into().expect("length checked");
        let mut open = [0.0; NUM_JOINTS];
        for f in Finger::ALL {
            open[f.joint_range()].copy_from_slice(&file.open_pose);
        }
        let mut model = HandModel {
            description: file.description,
            fingers,
            fingertip_radius: file.fingertip_radius,
            palm_radius: file.palm_radius,
            open_pose: JointVector(open),
            rest_tips,
        };
        model.open_pose = clamp_joints(&model, &open);
        Ok(model)
    }

    pub fn chain(&self, f: Finger) -> &FingerChain {
        &self.fingers[f.index()]
    }

    pub fn limits(&self, joint: usize) -> [f64; 2] {
        self.fingers[joint / JOINTS_PER_FINGER].joints[joint % JOINTS_PER_FINGER].limits
    }

    /// Fingertip centers in the palm frame.
    pub fn tips_in_palm(&self, q: &JointVector) -> [Vector3<f64>; NUM_FINGERS] {
        Finger::ALL.map(|f| self.chain(f).tip_in_palm(q.finger(f)))
    }

    /// Longest mount-to-tip chain; bounds the fingertip Lipschitz constant.
    pub fn max_chain_length(&self) -> f64 {
        self.fingers
            .iter()
            .map(|c| c.chain_length())
            .fold(0.0, f64::max)
    }
}

/// Instantaneous hand configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandState {
    pub palm: Pose,
    pub q: JointVector,
    pub qdot: [f64; NUM_JOINTS],
    pub contacts: [bool; NUM_FINGERS],
}

/// Fingertip centers (robot base frame), ordered index, middle, ring, thumb.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FingertipSet {
    pub tips: [Vector3<f64>; NUM_FINGERS],
}

impl FingertipSet {
    pub fn tip(&self, f: Finger) -> &Vector3<f64> {
        &self.tips[f.index()]
    }
}

/// Fingertip centers for palm pose `palm` and joint angles `q`.
pub fn forward_kinematics(model: &HandModel, palm: &Pose, q: &JointVector) -> Result<FingertipSet> {
    let iso = palm.isometry()?;
    let local = model.tips_in_palm(q);
    Ok(FingertipSet {
        tips: local.map(|p| apply(&iso, &p)),
    })
}

/// Projects `q` onto the joint-limit box.
pub fn clamp_joints(model: &HandModel, q: &[f64; NUM_JOINTS]) -> JointVector {
    let mut out = [0.0; NUM_JOINTS];
    for (i, (o, &v)) in out.iter_mut().zip(q.iter()).enumerate() {
        let [lo, hi] = model.limits(i);
        *o = v.clamp(lo, hi);
    }
    JointVector(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::yaw_rotation;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    /// Hand-composed zero-configuration chain: at zero angles every joint
    /// rotation is identity, so the tip sits at mount + R_mount·(sum of offsets).
    fn zero_config_oracle(model: &HandModel) -> [Vector3<f64>; 4] {
        Finger::ALL.map(|f| {
            let c = model.chain(f);
            let along: Vector3<f64> =
                c.joints.iter().map(|j| j.offset).sum::<Vector3<f64>>() + c.tip_offset;
            c.mount.translation.vector + c.mount.rotation * along
        })
    }

    fn random_q(model: &HandModel, u: &[f64]) -> JointVector {
        let mut q = [0.0; NUM_JOINTS];
        for i in 0..NUM_JOINTS {
            let [lo, hi] = model.limits(i);
            q[i] = lo + (hi - lo) * u[i];
        }
        JointVector(q)
    }

    #[test]
    fn zero_config_matches_rest_tips() {
        let model = HandModel::default();
        let tips = forward_kinematics(&model, &Pose::identity(), &JointVector::zeros()).unwrap();
        let listed = model.rest_tips.unwrap();
        let oracle = zero_config_oracle(&model);
        for i in 0..4 {
            assert!((tips.tips[i] - listed[i]).norm() < 1e-12, "finger {i}");
            assert!((tips.tips[i] - oracle[i]).norm() < 1e-12, "finger {i}");
        }
    }

    #[test]
    fn rejects_unnormalized_palm() {
        let model = HandModel::default();
        let mut palm = Pose::identity();
        palm.orientation = Quaternion::new(2.0, 0.0, 0.0, 0.0);
        let err = forward_kinematics(&model, &palm, &JointVector::zeros()).unwrap_err();
        assert!(matches!(err, Error::NonUnitQuaternion(_)));
    }

    #[test]
    fn clamp_examples() {
        let model = HandModel::default();
        let q = model.open_pose;
        assert_eq!(clamp_joints(&model, &q.0), q);
        let mut over = q.0;
        let hi = model.limits(5)[1];
        over[5] = hi + 0.5;
        assert_eq!(clamp_joints(&model, &over)[5], hi);
    }

    #[test]
    fn config_validation() {
        let bad = HandModel::default_config_text().replace("limits = [-0.35, 0.35]", "limits = [0.35, -0.35]");
        assert!(HandModel::from_toml_str(&bad).is_err());
        let bad = HandModel::default_config_text().replace("format_version = 1", "format_version = 9");
        assert!(HandModel::from_toml_str(&bad).is_err());
        let bad = HandModel::default_config_text().replacen("name = \"index\"", "name = \"pinky\"", 1);
        assert!(HandModel::from_toml_str(&bad).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn fk_translation_equivariance(
            u in prop::collection::vec(0.0f64..1.0, NUM_JOINTS),
            t in prop::array::uniform3(-1.0f64..1.0),
        ) {
            let model = HandModel::default();
            let q = random_q(&model, &u);
            let base = forward_kinematics(&model, &Pose::identity(), &q).unwrap();
            let t = Vector3::from(t);
            let moved = forward_kinematics(&model, &Pose::from_translation(t), &q).unwrap();
            for i in 0..4 {
                prop_assert!((moved.tips[i] - (base.tips[i] + t)).norm() < 1e-9);
            }
        }

        #[test]
        fn fk_rotation_equivariance(
            u in prop::collection::vec(0.0f64..1.0, NUM_JOINTS),
            axis in prop::array::uniform3(-1.0f64..1.0),
            angle in -3.0f64..3.0,
        ) {
            let model = HandModel::default();
            let q = random_q(&model, &u);
            let axis = Vector3::from(axis);
            prop_assume!(axis.norm() > 1e-3);
            let r = UnitQuaternion::from_axis_angle(&Unit::new_normalize(axis), angle);
            let base = forward_kinematics(&model, &Pose::identity(), &q).unwrap();
            let rotated = forward_kinematics(&model, &Pose::new(Vector3::zeros(), r), &q).unwrap();
            for i in 0..4 {
                prop_assert!((rotated.tips[i] - r * base.tips[i]).norm() < 1e-9);
            }
        }

        #[test]
        fn fk_lipschitz_in_joints(
            u in prop::collection::vec(0.05f64..0.95, NUM_JOINTS),
            d in prop::collection::vec(-1e-4f64..1e-4, NUM_JOINTS),
        ) {
            let model = HandModel::default();
            let q = random_q(&model, &u);
            let mut q2 = q;
            for i in 0..NUM_JOINTS { q2.0[i] += d[i]; }
            let a = model.tips_in_palm(&q);
            let b = model.tips_in_palm(&q2);
            let l = model.max_chain_length();
            for f in Finger::ALL {
                let dq: f64 = d[f.joint_range()].iter().map(|x| x * x).sum::<f64>().sqrt();
                // each joint moves the tip by at most (distance to tip) * |dq_j|
                prop_assert!((a[f.index()] - b[f.index()]).norm() <= l * dq * 2.0 + 1e-15);
            }
        }

        #[test]
        fn clamp_is_idempotent_projection(q in prop::collection::vec(-4.0f64..4.0, NUM_JOINTS)) {
            let model = HandModel::default();
            let q: [f64; NUM_JOINTS] = q.try_into().unwrap();
            let c = clamp_joints(&model, &q);
            prop_assert_eq!(clamp_joints(&model, &c.0), c);
            // never farther from any feasible point than the input was
            let feasible = model.open_pose;
            let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            prop_assert!(dist(&c.0, &feasible.0) <= dist(&q, &feasible.0) + 1e-12);
        }
    }

    #[test]
    fn yaw_rotates_tips_about_vertical() {
        let model = HandModel::default();
        let palm = Pose::new(Vector3::zeros(), yaw_rotation(std::f64::consts::FRAC_PI_2));
        let tips = forward_kinematics(&model, &palm, &JointVector::zeros()).unwrap();
        assert_relative_eq!(tips.tips[1].y, 0.1828, epsilon = 1e-12);
        assert_relative_eq!(tips.tips[1].x, 0.0, epsilon = 1e-12);
    }
}
