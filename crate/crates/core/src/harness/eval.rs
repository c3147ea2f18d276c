//! Evaluation protocol: every object of a set at several random poses, with
//! an optional common offset on the observed pose.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::objects::{generate_object_set, place_object, ObjectSet};
use crate::harness::stats::RateSummary;
use crate::object::{compute_keypoints, ObjectKind, ObjectSpec};
use crate::ppo::{palm_start, RandomizationRanges};
use crate::rollout::{run_episode, Agent, EpisodeOutcome, EpisodeSetup, Task};
use crate::world::SimParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    pub n_objects: usize,
    pub poses_per_object: usize,
    pub orientation_range_deg: [f64; 2],
    pub position_xy: [f64; 2],
    /// Std of a Gaussian translation added to the observed object pose (m).
    pub pose_noise_sigma: f64,
    /// Fraction of non-cuboid objects.
    pub object_mix: f64,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_objects: 100,
            poses_per_object: 5,
            orientation_range_deg: [-30.0, 30.0],
            position_xy: [-0.04, 0.04],
            pose_noise_sigma: 0.0,
            object_mix: 0.0,
            seed: 1000,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_objects == 0 || self.poses_per_object == 0 {
            return Err(Error::input("protocol needs n_objects >= 1 and poses_per_object >= 1"));
        }
        let [lo, hi] = self.orientation_range_deg;
        if !(lo <= hi) || !(self.position_xy[0] <= self.position_xy[1]) {
            return Err(Error::input("protocol ranges must satisfy lo <= hi"));
        }
        if !(self.pose_noise_sigma >= 0.0) {
            return Err(Error::input("pose noise sigma must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.object_mix) {
            return Err(Error::input("object mix must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn trials(&self) -> usize {
        self.n_objects * self.poses_per_object
    }

    /// The protocol's own held-out object set.
    pub fn object_set(&self, ranges: &RandomizationRanges) -> Result<ObjectSet> {
        generate_object_set(self.n_objects, self.object_mix, ranges, self.seed)
    }
}

/// One posed object and the error of its observed pose.
#[derive(Clone, Debug)]
pub struct TrialSetup {
    pub trial: usize,
    pub object_id: usize,
    pub spec: ObjectSpec,
    pub pose_offset: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub object_id: usize,
    pub kind: ObjectKind,
    pub x: f64,
    pub y: f64,
    pub yaw_deg: f64,
    pub success: bool,
    pub steps_to_contact: Option<usize>,
    /// Highest lift above the start height (m).
    pub max_lift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub protocol: EvalProtocol,
    pub overall: RateSummary,
    pub per_category: BTreeMap<String, RateSummary>,
    pub notes: Vec<String>,
    pub trials: Vec<TrialRecord>,
}

/// Builds every trial of the protocol; trial `t` draws from its own stream
/// of the protocol seed, so results do not depend on scheduling.
pub fn trial_setups(protocol: &EvalProtocol, set: &ObjectSet) -> Result<Vec<TrialSetup>> {
    protocol.validate()?;
    if set.objects.len() < protocol.n_objects {
        return Err(Error::input(format!(
            "object set has {} objects, protocol needs {}",
            set.objects.len(),
            protocol.n_objects
        )));
    }
    let noise = Normal::new(0.0, protocol.pose_noise_sigma).map_err(|e| Error::input(e.to_string()))?;
    let mut out = Vec::with_capacity(protocol.trials());
    for (o, entry) in set.objects.iter().take(protocol.n_objects).enumerate() {
        for p in 0..protocol.poses_per_object {
            let trial = o * protocol.poses_per_object + p;
            let mut rng = ChaCha8Rng::seed_from_u64(protocol.seed);
            rng.set_stream(trial as u64);
            let spec = place_object(&entry.spec, protocol.position_xy, protocol.orientation_range_deg, &mut rng);
            let pose_offset = if protocol.pose_noise_sigma > 0.0 {
                Vector3::from_fn(|_, _| noise.sample(&mut rng))
            } else {
                Vector3::zeros()
            };
            out.push(TrialSetup {
                trial,
                object_id: entry.id,
                spec,
                pose_offset,
            });
        }
    }
    Ok(out)
}

/// Runs `run` on every trial in parallel and assembles the report in trial
/// order.
pub fn run_trials<F>(protocol: &EvalProtocol, set: &ObjectSet, controller: &str, run: F) -> Result<EvalReport>
where
    F: Fn(&TrialSetup) -> Result<EpisodeOutcome> + Sync,
{
    let setups = trial_setups(protocol, set)?;
    let outcomes: Vec<EpisodeOutcome> = setups.par_iter().map(&run).collect::<Result<_>>()?;
    let trials: Vec<TrialRecord> = setups
        .iter()
        .zip(&outcomes)
        .map(|(s, o)| TrialRecord {
            trial: s.trial,
            object_id: s.object_id,
            kind: s.spec.kind,
            x: s.spec.pose.position.x,
            y: s.spec.pose.position.y,
            yaw_deg: s.spec.pose.rotation().euler_angles().2.to_degrees(),
            success: o.success,
            steps_to_contact: o.first_contact_step,
            max_lift: o.max_height - o.start_height,
        })
        .collect();
    Ok(summarize(controller, protocol, trials))
}

pub fn summarize(controller: &str, protocol: &EvalProtocol, trials: Vec<TrialRecord>) -> EvalReport {
    let overall = RateSummary::from_bools(trials.iter().map(|t| t.success));
    let mut per_category = BTreeMap::new();
    for kind in ObjectKind::ALL {
        let xs: Vec<bool> = trials.iter().filter(|t| t.kind == kind).map(|t| t.success).collect();
        if !xs.is_empty() {
            per_category.insert(kind.name().to_string(), RateSummary::from_bools(xs));
        }
    }
    if per_category.len() > 1 {
        per_category.insert("mixed".to_string(), overall.clone());
    }
    EvalReport {
        controller: controller.to_string(),
        protocol: protocol.clone(),
        overall,
        per_category,
        notes: vec!["object_database category not evaluated: mesh objects are not supported".to_string()],
        trials,
    }
}

/// Observed keypoints for a trial: the true box shifted by the pose error.
pub fn observed_context(setup: &TrialSetup) -> crate::object::Keypoints {
    compute_keypoints(&setup.spec).translated(&setup.pose_offset)
}

/// Deterministic (mean-action) evaluation of a trained policy.
pub fn evaluate(
    task: &Task,
    agent: &Agent,
    protocol: &EvalProtocol,
    set: &ObjectSet,
    sim: &SimParams,
) -> Result<EvalReport> {
    run_trials(protocol, set, "policy", |s| {
        let setup = EpisodeSetup {
            spec: s.spec.clone(),
            context: observed_context(s),
            sim: sim.clone(),
            palm_start: palm_start(),
        };
        run_episode(task, agent, setup, false, &mut ChaCha8Rng::seed_from_u64(0))
    })
}
