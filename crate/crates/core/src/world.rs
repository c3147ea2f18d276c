//! Quasi-static grasping world: rate-limited target tracking for the palm and
//! joints, fingertip/object contact constraints, grasp retention and the
//! automatic lift test.
//!
//! There is no gravity integration and no object dynamics before the grasp
//! holds: the object stays frozen during the reach/grasp phase, moves rigidly
//! with the palm while held during the lift phase, and falls back toward its
//! resting pose (stopping on any fingertip underneath) whenever the grasp is
//! lost.

use nalgebra::{Isometry3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{apply, clip_rotation, clip_translation, rotation_from_axis_angle, Pose};
use crate::hand::{clamp_joints, Finger, HandModel, HandState, JointVector, NUM_FINGERS, NUM_JOINTS};
use crate::object::{normal_world, sdf_world, ObjectSpec, Shape};

pub const ACTION_DIM: usize = 6 + NUM_JOINTS;

/// Distance band around the surface that still registers as touch.
pub const CONTACT_BAND: f64 = 1e-3;

/// Motion is truncated before a fingertip sinks deeper than this.
pub const PENETRATION_SLACK: f64 = 5e-5;

const GRAVITY: f64 = 9.81;
const BISECTION_STEPS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    ReachGrasp,
    Lift,
}

/// Simulation constants; several are domain-randomized per episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimParams {
    /// s
    pub dt: f64,
    /// m per step
    pub max_palm_step: f64,
    /// rad per step
    pub max_palm_rot_step: f64,
    /// rad per step
    pub max_joint_step: f64,
    pub pd_gain_scale: f64,
    pub joint_damping: f64,
    pub episode_length: usize,
    /// Steps of the reach/grasp phase; the lift phase fills the remainder.
    pub reach_steps: usize,
    /// Height above the start the object must exceed for success (m).
    pub lift_height: f64,
    /// Extra palm rise beyond `lift_height` during the automatic lift (m).
    pub lift_overshoot: f64,
    /// Steps over which the palm target rises during the lift phase.
    pub lift_rise_steps: usize,
    pub hold_steps: usize,
    /// Two contacts hold when their normals oppose within this angle (deg).
    pub opposition_angle_deg: f64,
    /// Normal force each touching fingertip applies while squeezing (N).
    pub grip_force: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: 0.05,
            max_palm_step: 0.01,
            max_palm_rot_step: 0.05,
            max_joint_step: 0.1,
            pd_gain_scale: 1.0,
            joint_damping: 0.1,
            episode_length: 140,
            reach_steps: 100,
            lift_height: 0.07,
            lift_overshoot: 0.01,
            lift_rise_steps: 20,
            hold_steps: 20,
            opposition_angle_deg: 45.0,
            grip_force: 2.5,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dt", self.dt),
            ("max_palm_step", self.max_palm_step),
            ("max_palm_rot_step", self.max_palm_rot_step),
            ("max_joint_step", self.max_joint_step),
            ("pd_gain_scale", self.pd_gain_scale),
            ("joint_damping", self.joint_damping),
            ("lift_height", self.lift_height),
            ("opposition_angle_deg", self.opposition_angle_deg),
            ("grip_force", self.grip_force),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::input(format!("sim parameter {name} must be positive")));
            }
        }
        if self.hold_steps < 1 || self.lift_rise_steps < 1 {
            return Err(Error::input("hold_steps and lift_rise_steps must be >= 1"));
        }
        if self.reach_steps == 0 || self.reach_steps >= self.episode_length {
            return Err(Error::input("reach_steps must be in 1..episode_length"));
        }
        if !(self.lift_overshoot >= 0.0) {
            return Err(Error::input("lift_overshoot must be >= 0"));
        }
        Ok(())
    }

    /// Fraction of the commanded joint error corrected per step.
    pub fn tracking_gain(&self) -> f64 {
        (self.pd_gain_scale / (1.0 + self.joint_damping)).min(1.0)
    }
}

/// Absolute targets: palm position (m) + axis-angle orientation (rad), then
/// sixteen joint angles (rad).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Action {
    pub palm_target: [f64; 6],
    pub joint_targets: [f64; NUM_JOINTS],
}

impl Action {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != ACTION_DIM {
            return Err(Error::Dimension {
                what: "action",
                expected: ACTION_DIM,
                got: v.len(),
            });
        }
        let mut palm_target = [0.0; 6];
        let mut joint_targets = [0.0; NUM_JOINTS];
        palm_target.copy_from_slice(&v[..6]);
        joint_targets.copy_from_slice(&v[6..]);
        Ok(Action {
            palm_target,
            joint_targets,
        })
    }

    /// Action that asks the hand to stay exactly where it is.
    pub fn hold(hand: &HandState) -> Self {
        let p = hand.palm.position;
        let r = hand.palm.axis_angle();
        Action {
            palm_target: [p.x, p.y, p.z, r.x, r.y, r.z],
            joint_targets: hand.q.0,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.palm_target.iter().chain(self.joint_targets.iter()).copied().collect()
    }
}

/// Per-fingertip contact flags, outward surface normals and surface distances
/// of the fingertip spheres.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContactReport {
    pub contacts: [bool; NUM_FINGERS],
    pub normals: [Vector3<f64>; NUM_FINGERS],
    pub gaps: [f64; NUM_FINGERS],
}

impl ContactReport {
    pub fn count(&self) -> usize {
        self.contacts.iter().filter(|&&c| c).count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub hand: HandState,
    pub object_pose: Pose,
    /// Pose the object returns to when dropped.
    pub object_rest_pose: Pose,
    pub object_start_height: f64,
    pub phase: Phase,
    pub step_index: usize,
    pub held: bool,
    pub lift_anchor: Option<Pose>,
    pub max_height: f64,
    pub hold_streak: usize,
    pub best_hold_streak: usize,
    pub first_contact_step: Option<usize>,
}

impl WorldState {
    /// Episode start: hand at `palm` with joints `q`, object resting at its
    /// spec pose.
    pub fn initial(model: &HandModel, spec: &ObjectSpec, palm: Pose, q: JointVector) -> Result<Self> {
        spec.validate()?;
        palm.validate()?;
        let q = clamp_joints(model, &q.0);
        let mut hand = HandState {
            palm,
            q,
            qdot: [0.0; NUM_JOINTS],
            contacts: [false; NUM_FINGERS],
        };
        let report = contacts_at(model, &palm.isometry_unchecked(), &q, &spec.shape(), &spec.pose.isometry_unchecked());
        hand.contacts = report.contacts;
        let height = spec.pose.position.z;
        Ok(WorldState {
            hand,
            object_pose: spec.pose,
            object_rest_pose: spec.pose,
            object_start_height: height,
            phase: Phase::ReachGrasp,
            step_index: 0,
            held: false,
            lift_anchor: None,
            max_height: height,
            hold_streak: 0,
            best_hold_streak: 0,
            first_contact_step: report.contacts.iter().any(|&c| c).then_some(0),
        })
    }

    pub fn object_height(&self) -> f64 {
        self.object_pose.position.z
    }

    pub fn is_done(&self, params: &SimParams) -> bool {
        self.step_index >= params.episode_length
    }
}

/// Contact state of all fingertips against an object placed at `spec.pose`.
pub fn detect_contacts(model: &HandModel, hand: &HandState, spec: &ObjectSpec) -> Result<ContactReport> {
    let palm = hand.palm.isometry()?;
    let obj = spec.pose.isometry()?;
    Ok(contacts_at(model, &palm, &hand.q, &spec.shape(), &obj))
}

pub(crate) fn contacts_at(
    model: &HandModel,
    palm: &Isometry3<f64>,
    q: &JointVector,
    shape: &Shape,
    obj: &Isometry3<f64>,
) -> ContactReport {
    let local = model.tips_in_palm(q);
    let mut report = ContactReport {
        contacts: [false; NUM_FINGERS],
        normals: [Vector3::zeros(); NUM_FINGERS],
        gaps: [0.0; NUM_FINGERS],
    };
    for i in 0..NUM_FINGERS {
        let tip = apply(palm, &local[i]);
        let gap = sdf_world(shape, obj, &tip) - model.fingertip_radius;
        report.gaps[i] = gap;
        report.contacts[i] = gap <= CONTACT_BAND;
        report.normals[i] = normal_world(shape, obj, &tip);
    }
    report
}

/// Grasp retention rule: an opposing pair of touching fingertips, or any
/// three touching fingertips.
pub fn update_held(
    contacts: &[bool; NUM_FINGERS],
    normals: &[Vector3<f64>; NUM_FINGERS],
    opposition_angle: f64,
) -> bool {
    let touching: Vec<usize> = (0..NUM_FINGERS).filter(|&i| contacts[i]).collect();
    if touching.len() >= 3 {
        return true;
    }
    if touching.len() == 2 {
        let d = normals[touching[0]].dot(&normals[touching[1]]);
        return d <= -opposition_angle.cos();
    }
    false
}

/// Whether `n_contacts` squeezing fingertips carry the object's weight
/// through friction.
pub fn grip_supports_load(n_contacts: usize, friction: f64, mass: f64, grip_force: f64) -> bool {
    friction * grip_force * n_contacts as f64 >= mass * GRAVITY
}

/// True once the object has stayed above start + `lift_height` while held for
/// `hold_steps` consecutive steps.
pub fn episode_success(state: &WorldState, params: &SimParams) -> bool {
    state.best_hold_streak >= params.hold_steps
}

fn interpolate_pose(a: &Pose, b: &Pose, t: f64) -> Isometry3<f64> {
    let pos = a.position + (b.position - a.position) * t;
    let rot = a.rotation().slerp(&b.rotation(), t);
    Isometry3::from_parts(pos.into(), rot)
}

/// Largest fraction in [0, 1] for which `ok` holds, assuming it holds at 0.
fn feasible_fraction(mut ok: impl FnMut(f64) -> bool) -> f64 {
    if ok(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if ok(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn clearance_ok(gap_new: f64, gap_old: f64) -> bool {
    gap_new >= -PENETRATION_SLACK || gap_new >= gap_old
}

/// Advances the world by one control step.
pub fn step(
    state: &WorldState,
    action: &Action,
    params: &SimParams,
    model: &HandModel,
    spec: &ObjectSpec,
) -> Result<WorldState> {
    if action.palm_target.iter().chain(action.joint_targets.iter()).any(|v| !v.is_finite()) {
        return Err(Error::input("action contains non-finite values"));
    }
    let shape = spec.shape();
    let mut s = state.clone();
    let lifting = s.step_index >= params.reach_steps;
    if lifting && s.lift_anchor.is_none() {
        s.lift_anchor = Some(s.hand.palm);
        s.phase = Phase::Lift;
    }

    let (target_pos, target_rot) = match (lifting, s.lift_anchor) {
        (true, Some(anchor)) => {
            let k = (s.step_index - params.reach_steps + 1) as f64;
            let frac = (k / params.lift_rise_steps as f64).min(1.0);
            let rise = frac * (params.lift_height + params.lift_overshoot);
            (anchor.position + Vector3::z() * rise, anchor.rotation())
        }
        _ => {
            let p = &action.palm_target;
            (
                Vector3::new(p[0], p[1], p[2]),
                rotation_from_axis_angle(&Vector3::new(p[3], p[4], p[5])),
            )
        }
    };

    let old_palm = s.hand.palm;
    let cand = Pose::new(
        clip_translation(&old_palm.position, &target_pos, params.max_palm_step),
        clip_rotation(&old_palm.rotation(), &target_rot, params.max_palm_rot_step),
    );
    let carried = lifting && s.held;
    let mut obj_iso = s.object_pose.isometry_unchecked();
    let local_tips = model.tips_in_palm(&s.hand.q);

    let new_palm_iso = if carried {
        let new_iso = cand.isometry_unchecked();
        obj_iso = new_iso * old_palm.isometry_unchecked().inverse() * obj_iso;
        new_iso
    } else {
        let old_iso = old_palm.isometry_unchecked();
        let old_gaps: Vec<f64> = local_tips
            .iter()
            .map(|t| sdf_world(&shape, &obj_iso, &apply(&old_iso, t)) - model.fingertip_radius)
            .collect();
        let old_palm_gap = sdf_world(&shape, &obj_iso, &old_palm.position) - model.palm_radius;
        let alpha = feasible_fraction(|a| {
            let iso = interpolate_pose(&old_palm, &cand, a);
            let palm_gap = sdf_world(&shape, &obj_iso, &iso.translation.vector) - model.palm_radius;
            if !clearance_ok(palm_gap, old_palm_gap) {
                return false;
            }
            local_tips.iter().zip(&old_gaps).all(|(t, &g0)| {
                let g = sdf_world(&shape, &obj_iso, &apply(&iso, t)) - model.fingertip_radius;
                clearance_ok(g, g0)
            })
        });
        interpolate_pose(&old_palm, &cand, alpha)
    };
    s.hand.palm = Pose::from_isometry(&new_palm_iso);

    let targets = clamp_joints(model, &action.joint_targets);
    let gain = params.tracking_gain();
    let old_q = s.hand.q;
    let mut q = old_q;
    for f in Finger::ALL {
        let r = f.joint_range();
        let chain = model.chain(f);
        let delta: Vec<f64> = r
            .clone()
            .map(|j| (gain * (targets[j] - old_q[j])).clamp(-params.max_joint_step, params.max_joint_step))
            .collect();
        if delta.iter().all(|&d| d == 0.0) {
            continue;
        }
        let q0 = &old_q.0[r.clone()];
        let gap0 = sdf_world(&shape, &obj_iso, &apply(&new_palm_iso, &chain.tip_in_palm(q0)))
            - model.fingertip_radius;
        let beta = feasible_fraction(|b| {
            let qf: Vec<f64> = q0.iter().zip(&delta).map(|(a, d)| a + b * d).collect();
            let tip = apply(&new_palm_iso, &chain.tip_in_palm(&qf));
            clearance_ok(sdf_world(&shape, &obj_iso, &tip) - model.fingertip_radius, gap0)
        });
        for (j, d) in r.zip(delta) {
            q.0[j] = old_q[j] + beta * d;
        }
    }
    let q = clamp_joints(model, &q.0);
    for j in 0..NUM_JOINTS {
        s.hand.qdot[j] = (q[j] - old_q[j]) / params.dt;
    }
    s.hand.q = q;

    let holds = |r: &ContactReport| {
        update_held(&r.contacts, &r.normals, params.opposition_angle_deg.to_radians())
            && grip_supports_load(r.count(), spec.friction, spec.mass, params.grip_force)
    };
    let mut report = contacts_at(model, &new_palm_iso, &q, &shape, &obj_iso);
    let mut held = holds(&report);
    if lifting && !held && obj_iso.translation.vector != s.object_rest_pose.position {
        // drop toward the resting pose until the object lands on a fingertip
        let from = Pose::from_isometry(&obj_iso);
        let rest = s.object_rest_pose;
        let tips: Vec<Vector3<f64>> = model
            .tips_in_palm(&q)
            .iter()
            .map(|t| apply(&new_palm_iso, t))
            .collect();
        let gaps0: Vec<f64> = tips
            .iter()
            .map(|t| sdf_world(&shape, &obj_iso, t) - model.fingertip_radius)
            .collect();
        let t = feasible_fraction(|t| {
            let iso = interpolate_pose(&from, &rest, t);
            tips.iter()
                .zip(&gaps0)
                .all(|(p, &g0)| clearance_ok(sdf_world(&shape, &iso, p) - model.fingertip_radius, g0))
        });
        obj_iso = if t == 1.0 {
            rest.isometry_unchecked()
        } else {
            interpolate_pose(&from, &rest, t)
        };
        report = contacts_at(model, &new_palm_iso, &q, &shape, &obj_iso);
        held = holds(&report);
    }
    s.object_pose = Pose::from_isometry(&obj_iso);
    s.hand.contacts = report.contacts;
    s.held = held;

    let height = s.object_height();
    s.max_height = s.max_height.max(height);
    if held && height > s.object_start_height + params.lift_height {
        s.hold_streak += 1;
    } else {
        s.hold_streak = 0;
    }
    s.best_hold_streak = s.best_hold_streak.max(s.hold_streak);
    s.step_index += 1;
    if s.first_contact_step.is_none() && report.contacts.iter().any(|&c| c) {
        s.first_contact_step = Some(s.step_index);
    }
    Ok(s)
}

/// Palm orientation pointing the fingers' closing side down at the table.
pub fn default_palm_rotation() -> UnitQuaternion<f64> {
    UnitQuaternion::identity()
}
