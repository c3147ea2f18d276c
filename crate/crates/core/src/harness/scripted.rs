//! Hand-written grasp controller: hover above the estimated center, close
//! each finger until it touches, squeeze, then let the automatic lift run.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::hand::{Finger, HandModel};
use crate::rollout::{EpisodeOutcome, EpisodeSetup, Env, Task};
use crate::world::Action;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedParams {
    /// Palm height above the estimated center (m).
    pub hover_height: f64,
    /// Palm position tolerance before closing starts (m).
    pub approach_tolerance: f64,
    /// Last step of the approach phase; closing starts no later than this.
    pub approach_deadline: usize,
    /// Flexion increment per step while closing (rad).
    pub close_rate: f64,
    /// Extra flexion commanded on touching fingers once closing ends (rad).
    pub squeeze: f64,
}

impl Default for ScriptedParams {
    fn default() -> Self {
        ScriptedParams {
            hover_height: 0.06,
            approach_tolerance: 2e-3,
            approach_deadline: 40,
            close_rate: 0.05,
            squeeze: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Stage {
    Approach,
    Close,
    Squeeze,
}

/// Runs the scripted controller for one episode. `center_estimate` is the
/// (possibly noisy) object center it aims at.
pub fn scripted_baseline(
    task: &Task,
    setup: EpisodeSetup,
    center_estimate: &Vector3<f64>,
    params: &ScriptedParams,
) -> Result<EpisodeOutcome> {
    let model: &HandModel = &task.model;
    let mut env = Env::new(task, setup)?;
    let hover = center_estimate + Vector3::z() * params.hover_height;
    let palm_rot = env.state.hand.palm.axis_angle();
    let palm_target = [hover.x, hover.y, hover.z, palm_rot.x, palm_rot.y, palm_rot.z];
    let mut joints = model.open_pose.0;
    let mut stopped = [false; 4];
    let mut stage = Stage::Approach;
    let reach_steps = env.setup.sim.reach_steps;
    while !env.done() {
        let s = &env.state;
        match stage {
            Stage::Approach => {
                let close_enough = (s.hand.palm.position - hover).norm() < params.approach_tolerance;
                if close_enough || s.step_index >= params.approach_deadline {
                    stage = Stage::Close;
                }
            }
            Stage::Close => {
                for f in Finger::ALL {
                    let i = f.index();
                    if stopped[i] {
                        continue;
                    }
                    let r = f.joint_range();
                    if s.hand.contacts[i] {
                        stopped[i] = true;
                        joints[r.clone()].copy_from_slice(&s.hand.q.0[r]);
                        continue;
                    }
                    // flexion joints only; abduction stays put
                    let at_limit = r.clone().skip(1).all(|j| joints[j] >= model.limits(j)[1]);
                    if at_limit {
                        stopped[i] = true;
                        continue;
                    }
                    for j in r.skip(1) {
                        joints[j] = (joints[j] + params.close_rate).min(model.limits(j)[1]);
                    }
                }
                if stopped.iter().all(|&b| b) || s.step_index + 1 >= reach_steps {
                    stage = Stage::Squeeze;
                    for f in Finger::ALL {
                        if s.hand.contacts[f.index()] {
                            for j in f.joint_range().skip(1) {
                                joints[j] = (s.hand.q[j] + params.squeeze).min(model.limits(j)[1]);
                            }
                        }
                    }
                }
            }
            Stage::Squeeze => {}
        }
        let action = Action {
            palm_target,
            joint_targets: joints,
        };
        env.step_action(task, &action)?;
    }
    Ok(env.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{synthesize_demo, StyleSpec};
    use crate::geometry::Pose;
    use crate::object::{compute_keypoints, ObjectSpec};
    use crate::rewards::{AblationFlags, RewardWeights};
    use crate::world::SimParams;

    fn task() -> Task {
        let model = HandModel::default();
        let demo = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        Task::new(model, demo, RewardWeights::default(), AblationFlags::default())
    }

    fn setup(spec: ObjectSpec) -> EpisodeSetup {
        EpisodeSetup {
            context: compute_keypoints(&spec),
            spec,
            sim: SimParams::default(),
            palm_start: Pose::from_translation(Vector3::new(0.0, 0.0, 0.2)),
        }
    }

    #[test]
    fn grasps_and_lifts_centered_cube() {
        let t = task();
        let spec = ObjectSpec::cuboid(0.05, 0.05, 0.05, Pose::from_translation(Vector3::new(0.0, 0.0, 0.025)));
        let center = spec.pose.position;
        let out = scripted_baseline(&t, setup(spec), &center, &ScriptedParams::default()).unwrap();
        assert!(out.first_contact_step.is_some());
        assert!(out.success, "{out:?}");
    }

    #[test]
    fn misplaced_estimate_fails_without_contact() {
        let t = task();
        let spec = ObjectSpec::cuboid(0.05, 0.05, 0.05, Pose::from_translation(Vector3::new(0.0, 0.0, 0.025)));
        let wrong = spec.pose.position + Vector3::new(0.5, 0.0, 0.0);
        let out = scripted_baseline(&t, setup(spec), &wrong, &ScriptedParams::default()).unwrap();
        assert!(out.first_contact_step.is_none());
        assert!(!out.success);
    }
}
