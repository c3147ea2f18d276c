//! Environment wrapper around the world simulator: per-episode setup,
//! observation, action mapping, reward and episode bookkeeping.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{demo_target, DemoTrajectory};
use crate::error::Result;
use crate::geometry::{apply, Pose};
use crate::hand::{forward_kinematics, HandModel, JointVector, NUM_FINGERS};
use crate::object::{Keypoints, ObjectSpec};
use crate::policy::{act, observe, ActOutput, ActionMap, ObsNormalizer, Observation, PolicyParams};
use crate::rewards::{total_reward, AblationFlags, RewardBreakdown, RewardInputs, RewardWeights};
use crate::world::{episode_success, step, Action, SimParams, WorldState};

/// Everything that stays fixed across the episodes of one experiment.
#[derive(Clone, Debug)]
pub struct Task {
    pub model: HandModel,
    pub demo: DemoTrajectory,
    pub weights: RewardWeights,
    pub flags: AblationFlags,
    pub action_map: ActionMap,
}

impl Task {
    pub fn new(model: HandModel, demo: DemoTrajectory, weights: RewardWeights, flags: AblationFlags) -> Self {
        let action_map = ActionMap::default();
        Task {
            model,
            demo,
            weights,
            flags,
            action_map,
        }
    }
}

/// One episode's object, observed context and actuation parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSetup {
    pub spec: ObjectSpec,
    /// Keypoints the policy observes; fixed for the whole episode.
    pub context: Keypoints,
    pub sim: SimParams,
    pub palm_start: Pose,
}

/// Trained policy plus the observation statistics it expects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Agent {
    pub params: PolicyParams,
    pub normalizer: ObsNormalizer,
}

impl Agent {
    pub fn act<R: Rng + ?Sized>(&self, obs: &Observation, stochastic: bool, rng: &mut R) -> Result<(Vec<f64>, ActOutput)> {
        let z = self.normalizer.normalize(obs);
        let out = act(&self.params, &z, stochastic, rng)?;
        Ok((z, out))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub success: bool,
    pub max_height: f64,
    pub start_height: f64,
    /// Step after which some fingertip first touched the object.
    pub first_contact_step: Option<usize>,
    pub total_reward: f64,
    pub reward_terms: [f64; 4],
    pub steps: usize,
}

/// A running episode.
#[derive(Clone, Debug)]
pub struct Env {
    pub setup: EpisodeSetup,
    pub state: WorldState,
    /// Joint targets of the last step.
    pub joint_command: JointVector,
    pub total_reward: f64,
    pub reward_terms: [f64; 4],
}

impl Env {
    pub fn new(task: &Task, setup: EpisodeSetup) -> Result<Self> {
        setup.sim.validate()?;
        let state = WorldState::initial(&task.model, &setup.spec, setup.palm_start, task.model.open_pose)?;
        Ok(Env {
            setup,
            joint_command: state.hand.q,
            state,
            total_reward: 0.0,
            reward_terms: [0.0; 4],
        })
    }

    pub fn observe(&self, task: &Task) -> Observation {
        observe(&self.state, &self.setup.context, task.flags)
    }

    pub fn done(&self) -> bool {
        self.state.is_done(&self.setup.sim)
    }

    /// Applies raw policy output `u`; returns the reward of the new state.
    pub fn step_raw(&mut self, task: &Task, u: &[f64]) -> Result<RewardBreakdown> {
        let action = task.action_map.apply(u, &self.state.hand.palm, &self.joint_command, &task.model)?;
        self.step_action(task, &action)
    }

    pub fn step_action(&mut self, task: &Task, action: &Action) -> Result<RewardBreakdown> {
        self.state = step(&self.state, action, &self.setup.sim, &task.model, &self.setup.spec)?;
        self.joint_command = JointVector(action.joint_targets);
        let r = self.reward(task)?;
        self.total_reward += r.total;
        for (acc, t) in self.reward_terms.iter_mut().zip(r.terms()) {
            *acc += t;
        }
        Ok(r)
    }

    fn reward(&self, task: &Task) -> Result<RewardBreakdown> {
        let s = &self.state;
        let phase = (s.step_index as f64 / self.setup.sim.reach_steps as f64).min(1.0);
        let palm = s.hand.palm.isometry()?;
        let local = demo_target(&task.demo, phase)?;
        let demo_tips: [_; NUM_FINGERS] = local.map(|p| apply(&palm, &p));
        let tips = forward_kinematics(&task.model, &s.hand.palm, &s.hand.q)?;
        let inputs = RewardInputs {
            palm_position: s.hand.palm.position,
            tips,
            // fingers outside the demonstrated style earn no contact reward
            contacts: std::array::from_fn(|i| s.hand.contacts[i] && task.demo.style.active_fingers[i]),
            object_height: s.object_height(),
            start_height: s.object_start_height,
        };
        Ok(total_reward(&inputs, &self.setup.context, &demo_tips, &task.weights, task.flags))
    }

    pub fn outcome(&self) -> EpisodeOutcome {
        EpisodeOutcome {
            success: episode_success(&self.state, &self.setup.sim),
            max_height: self.state.max_height,
            start_height: self.state.object_start_height,
            first_contact_step: self.state.first_contact_step,
            total_reward: self.total_reward,
            reward_terms: self.reward_terms,
            steps: self.state.step_index,
        }
    }
}

/// Runs one full episode with `agent`; deterministic (mean actions) unless
/// `stochastic`.
pub fn run_episode<R: Rng + ?Sized>(
    task: &Task,
    agent: &Agent,
    setup: EpisodeSetup,
    stochastic: bool,
    rng: &mut R,
) -> Result<EpisodeOutcome> {
    let mut env = Env::new(task, setup)?;
    while !env.done() {
        let obs = env.observe(task);
        let (_, out) = agent.act(&obs, stochastic, rng)?;
        env.step_raw(task, &out.action)?;
    }
    Ok(env.outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{synthesize_demo, StyleSpec};
    use crate::object::compute_keypoints;
    use crate::policy::{PolicyParams, OBS_DIM};
    use crate::world::ACTION_DIM;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn task() -> Task {
        let model = HandModel::default();
        let demo = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        Task::new(model, demo, RewardWeights::default(), AblationFlags::default())
    }

    fn setup() -> EpisodeSetup {
        let spec = ObjectSpec::cuboid(0.05, 0.05, 0.05, Pose::from_translation(Vector3::new(0.0, 0.0, 0.025)));
        EpisodeSetup {
            context: compute_keypoints(&spec),
            spec,
            sim: SimParams::default(),
            palm_start: Pose::from_translation(Vector3::new(0.0, 0.0, 0.2)),
        }
    }

    #[test]
    fn episode_runs_full_length_and_is_deterministic() {
        let t = task();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let agent = Agent {
            params: PolicyParams::random(OBS_DIM, &[16, 16], ACTION_DIM, -1.0, &mut rng),
            normalizer: ObsNormalizer::new(OBS_DIM),
        };
        let a = run_episode(&t, &agent, setup(), true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = run_episode(&t, &agent, setup(), true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.steps, SimParams::default().episode_length);
        assert!(a.total_reward.is_finite() && a.total_reward > 0.0);
        let sum: f64 = a.reward_terms.iter().zip(t.weights.mix).map(|(r, m)| r * m).sum();
        assert!((sum - a.total_reward).abs() < 1e-9);
    }
}
