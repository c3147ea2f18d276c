//! Adapting the keypoint context of a frozen policy to a novel object with
//! CMA-ES. The search starts from the bounding-box keypoints and scores each
//! candidate context by how high one deterministic rollout lifts the object.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cma::CmaState;
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::object::{compute_keypoints, Keypoints, ObjectSpec};
use crate::rollout::{run_episode, Agent, EpisodeSetup, Task};
use crate::world::SimParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    /// Total rollouts, including the bounding-box context itself.
    pub budget: usize,
    pub population: usize,
    /// Initial CMA-ES step size (m).
    pub initial_step: f64,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            budget: 70,
            population: 5,
            initial_step: 0.02,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::input("adaptation population must be >= 2"));
        }
        if self.budget < self.population {
            return Err(Error::input(format!(
                "adaptation budget {} is smaller than one generation of {}",
                self.budget, self.population
            )));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(Error::input("adaptation initial step must be positive"));
        }
        Ok(())
    }

    pub fn generations(&self) -> usize {
        self.budget / self.population
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub evaluations: usize,
    pub generation_best: f64,
    pub best_so_far: f64,
    pub step_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptResult {
    pub initial_context: Keypoints,
    pub initial_fitness: f64,
    pub best_context: Keypoints,
    pub best_fitness: f64,
    pub evaluations: usize,
    pub history: Vec<GenerationRecord>,
}

pub const FITNESS_CSV_HEADER: &str = "generation,evaluations,generation_best,best_so_far,step_size";

impl AdaptResult {
    pub fn fitness_csv(&self) -> String {
        let mut out = String::from(FITNESS_CSV_HEADER);
        out.push('\n');
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.generation, r.evaluations, r.generation_best, r.best_so_far, r.step_size
            ));
        }
        out
    }
}

/// Height the object was lifted above its start in one deterministic
/// rollout with `context`.
pub fn context_fitness(
    task: &Task,
    agent: &Agent,
    spec: &ObjectSpec,
    sim: &SimParams,
    palm_start: Pose,
    context: Keypoints,
) -> Result<f64> {
    let setup = EpisodeSetup {
        spec: spec.clone(),
        context,
        sim: sim.clone(),
        palm_start,
    };
    // mean actions never touch the rng
    let out = run_episode(task, agent, setup, false, &mut ChaCha8Rng::seed_from_u64(0))?;
    Ok(out.max_height - out.start_height)
}

pub fn adapt_context(
    task: &Task,
    agent: &Agent,
    spec: &ObjectSpec,
    sim: &SimParams,
    palm_start: Pose,
    config: &AdaptConfig,
) -> Result<AdaptResult> {
    config.validate()?;
    spec.validate()?;
    let initial = compute_keypoints(spec);
    let mean = DVector::from_row_slice(&initial.to_array());
    let mut cma = CmaState::new(mean, config.initial_step, config.population)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut history = Vec::with_capacity(config.generations());
    let mut best_context = initial;
    let mut best_fitness = f64::NEG_INFINITY;
    let mut initial_fitness = f64::NAN;
    let mut evaluations = 0;
    for g in 0..config.generations() {
        let mut pop = cma.ask(&mut rng)?;
        if g == 0 {
            // the bounding box competes in the first generation
            pop[0] = cma.mean.clone();
        }
        let contexts: Vec<Keypoints> = pop.iter().map(|x| Keypoints::from_slice(x.as_slice())).collect::<Result<_>>()?;
        let fitness: Vec<f64> = contexts
            .par_iter()
            .map(|c| context_fitness(task, agent, spec, sim, palm_start, *c))
            .collect::<Result<_>>()?;
        evaluations += pop.len();
        if g == 0 {
            initial_fitness = fitness[0];
        }
        let (gi, &gbest) = fitness
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("population is non-empty");
        if gbest > best_fitness {
            best_fitness = gbest;
            best_context = contexts[gi];
        }
        cma.tell(&pop, &fitness)?;
        log::debug!("adapt generation {}: best {gbest:.4}, elite {best_fitness:.4}", g + 1);
        history.push(GenerationRecord {
            generation: g + 1,
            evaluations,
            generation_best: gbest,
            best_so_far: best_fitness,
            step_size: cma.step_size,
        });
    }
    Ok(AdaptResult {
        initial_context: initial,
        initial_fitness,
        best_context,
        best_fitness,
        evaluations,
        history,
    })
}

/// Moves a context found for the object at `from` to the same object at `to`.
pub fn transfer_context(context: &Keypoints, from: &Pose, to: &Pose) -> Result<Keypoints> {
    let rel = to.isometry()? * from.isometry()?.inverse();
    Ok(context.transformed(&rel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{synthesize_demo, StyleSpec};
    use crate::hand::HandModel;
    use crate::geometry::yaw_rotation;
    use crate::policy::{ObsNormalizer, PolicyParams, OBS_DIM};
    use crate::ppo::palm_start;
    use crate::rewards::{AblationFlags, RewardWeights};
    use crate::world::ACTION_DIM;
    use nalgebra::Vector3;

    fn fixture() -> (Task, Agent, ObjectSpec) {
        let model = HandModel::default();
        let demo = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        let task = Task::new(model, demo, RewardWeights::default(), AblationFlags::default());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let agent = Agent {
            params: PolicyParams::random(OBS_DIM, &[16, 16], ACTION_DIM, -1.0, &mut rng),
            normalizer: ObsNormalizer::new(OBS_DIM),
        };
        let spec = ObjectSpec::cone(0.04, 0.08, Pose::from_translation(Vector3::new(0.0, 0.0, 0.04)));
        (task, agent, spec)
    }

    #[test]
    fn budget_arithmetic_and_history() {
        let (task, agent, spec) = fixture();
        let cfg = AdaptConfig {
            budget: 12,
            ..AdaptConfig::default()
        };
        let r = adapt_context(&task, &agent, &spec, &SimParams::default(), palm_start(), &cfg).unwrap();
        assert_eq!(r.history.len(), 2);
        assert_eq!(r.evaluations, 10);
        assert_eq!(AdaptConfig::default().generations(), 14);
        assert!(r.best_fitness >= r.initial_fitness);
        for w in r.history.windows(2) {
            assert!(w[1].best_so_far >= w[0].best_so_far);
        }
        assert_eq!(r.fitness_csv().lines().count(), 3);
    }

    #[test]
    fn budget_below_one_generation_is_rejected() {
        let (task, agent, spec) = fixture();
        let cfg = AdaptConfig {
            budget: 4,
            ..AdaptConfig::default()
        };
        let err = adapt_context(&task, &agent, &spec, &SimParams::default(), palm_start(), &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn repeat_runs_are_identical() {
        let (task, agent, spec) = fixture();
        let cfg = AdaptConfig {
            budget: 10,
            seed: 4,
            ..AdaptConfig::default()
        };
        let a = adapt_context(&task, &agent, &spec, &SimParams::default(), palm_start(), &cfg).unwrap();
        let b = adapt_context(&task, &agent, &spec, &SimParams::default(), palm_start(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn transfer_follows_the_object() {
        let spec = ObjectSpec::cuboid(0.05, 0.06, 0.07, Pose::from_translation(Vector3::new(0.0, 0.0, 0.035)));
        let to = Pose::new(Vector3::new(0.03, -0.02, 0.035), yaw_rotation(0.4));
        let moved = ObjectSpec { pose: to, ..spec.clone() };
        let k = transfer_context(&compute_keypoints(&spec), &spec.pose, &to).unwrap();
        let direct = compute_keypoints(&moved);
        for (a, b) in k.corners.iter().zip(direct.corners.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }
}
