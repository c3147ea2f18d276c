//! PPO training with domain randomization: episode sampling, parallel rollout
//! workers, generalized advantage estimation and clipped updates.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{yaw_rotation, Pose};
use crate::nn::{clip_grad_norm, Adam};
use crate::object::{add_keypoint_noise, add_pose_offset, compute_keypoints, ObjectKind, ObjectSpec};
use crate::policy::{policy_gradient, LossBatch, LossCoefs, LossStats, ObsNormalizer, PolicyParams, OBS_DIM};
use crate::rewards::AblationFlags;
use crate::rollout::{Agent, EpisodeOutcome, EpisodeSetup, Env, Task};
use crate::world::{SimParams, ACTION_DIM};

/// Where every episode's palm starts (m).
pub const PALM_START: [f64; 3] = [0.0, 0.0, 0.2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    /// Decay the learning rate linearly to zero over the run.
    pub anneal_lr: bool,
    pub epochs_per_iter: usize,
    pub minibatch_size: usize,
    pub iterations: usize,
    pub samples_per_iteration: usize,
    pub workers: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
    pub style_id: String,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub max_grad_norm: f64,
    pub init_log_std: f64,
    pub hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.95,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            anneal_lr: false,
            epochs_per_iter: 10,
            minibatch_size: 500,
            iterations: 100,
            samples_per_iteration: 2000,
            workers: 4,
            seed: 0,
            ablation: AblationFlags::default(),
            style_id: "all".into(),
            value_coef: 0.5,
            entropy_coef: 0.01,
            max_grad_norm: 0.5,
            init_log_std: 0.5,
            hidden: vec![128, 128],
        }
    }
}

impl TrainConfig {
    /// 1.2e6 samples over 500 iterations.
    pub fn paper_scale() -> Self {
        TrainConfig {
            iterations: 500,
            samples_per_iteration: 2400,
            minibatch_size: 600,
            ..TrainConfig::default()
        }
    }

    /// 2e5 samples over 100 iterations; the default.
    pub fn desk_scale() -> Self {
        TrainConfig::default()
    }

    pub fn total_samples(&self) -> usize {
        self.iterations * self.samples_per_iteration
    }

    pub fn validate(&self, sim: &SimParams) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::input("gamma must be in (0, 1]"));
        }
        if !(self.gae_lambda >= 0.0 && self.gae_lambda <= 1.0) {
            return Err(Error::input("gae_lambda must be in [0, 1]"));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(Error::input("clip_epsilon must be in (0, 1)"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::input("learning_rate must be finite and >= 0"));
        }
        if self.samples_per_iteration < sim.episode_length {
            return Err(Error::input("samples_per_iteration must be at least the episode length"));
        }
        if self.workers == 0 || self.epochs_per_iter == 0 || self.minibatch_size == 0 {
            return Err(Error::input("workers, epochs_per_iter and minibatch_size must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::input("hidden layer sizes must be non-empty and positive"));
        }
        if !(self.max_grad_norm > 0.0) || self.value_coef < 0.0 || self.entropy_coef < 0.0 {
            return Err(Error::input("loss coefficients out of range"));
        }
        Ok(())
    }

    fn loss_coefs(&self) -> LossCoefs {
        LossCoefs {
            clip_epsilon: self.clip_epsilon,
            value_coef: self.value_coef,
            entropy_coef: self.entropy_coef,
        }
    }
}

/// Uniform ranges for per-episode domain randomization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationRanges {
    /// Cuboid side lengths (m).
    pub dims: [f64; 2],
    /// Std of the Gaussian noise added to each keypoint coordinate (m).
    pub keypoint_noise_sigma: f64,
    /// Std of a Gaussian translation shared by all keypoints (m).
    pub pose_offset_sigma: f64,
    /// kg
    pub mass: [f64; 2],
    pub friction: [f64; 2],
    pub pd_gain_scale: [f64; 2],
    pub joint_damping: [f64; 2],
    /// Object center offset along x and y (m).
    pub position_xy: [f64; 2],
    /// Object yaw (deg).
    pub yaw_deg: [f64; 2],
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        RandomizationRanges {
            dims: [0.03, 0.12],
            keypoint_noise_sigma: 0.002,
            pose_offset_sigma: 0.0,
            mass: [0.05, 0.4],
            friction: [0.4, 1.0],
            pd_gain_scale: [0.8, 1.2],
            joint_damping: [0.05, 0.2],
            position_xy: [-0.04, 0.04],
            yaw_deg: [-30.0, 30.0],
        }
    }
}

fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

impl RandomizationRanges {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("dims", self.dims),
            ("mass", self.mass),
            ("friction", self.friction),
            ("pd_gain_scale", self.pd_gain_scale),
            ("joint_damping", self.joint_damping),
            ("position_xy", self.position_xy),
            ("yaw_deg", self.yaw_deg),
        ];
        for (name, r) in ranges {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(Error::input(format!("range {name} must satisfy lo <= hi")));
            }
        }
        if !(self.dims[0] > 0.0 && self.mass[0] > 0.0 && self.friction[0] >= 0.0) {
            return Err(Error::input("dims and mass must be positive, friction non-negative"));
        }
        if !(self.pd_gain_scale[0] > 0.0 && self.joint_damping[0] > 0.0) {
            return Err(Error::input("gain and damping ranges must be positive"));
        }
        if !(self.keypoint_noise_sigma >= 0.0 && self.pose_offset_sigma >= 0.0) {
            return Err(Error::input("keypoint noise sigmas must be >= 0"));
        }
        Ok(())
    }

    /// Object resting on the ground plane at a random planar pose.
    pub fn sample_object<R: Rng + ?Sized>(&self, kind: ObjectKind, rng: &mut R) -> ObjectSpec {
        let d = [uniform(self.dims, rng), uniform(self.dims, rng), uniform(self.dims, rng)];
        let x = uniform(self.position_xy, rng);
        let y = uniform(self.position_xy, rng);
        let yaw = uniform(self.yaw_deg, rng).to_radians();
        let mut spec = match kind {
            ObjectKind::Cuboid => ObjectSpec::cuboid(d[0], d[1], d[2], Pose::identity()),
            ObjectKind::Cylinder => ObjectSpec::cylinder(0.5 * d[0], d[2], Pose::identity()),
            ObjectKind::Cone => ObjectSpec::cone(0.5 * d[0], d[2], Pose::identity()),
            ObjectKind::Sphere => ObjectSpec::sphere(0.5 * d[0], Pose::identity()),
        };
        let h = spec.shape().half_extents().z;
        spec.pose = Pose::new(Vector3::new(x, y, h), yaw_rotation(yaw));
        spec.mass = uniform(self.mass, rng);
        spec.friction = uniform(self.friction, rng);
        spec
    }

    pub fn sample_sim<R: Rng + ?Sized>(&self, base: &SimParams, rng: &mut R) -> SimParams {
        SimParams {
            pd_gain_scale: uniform(self.pd_gain_scale, rng),
            joint_damping: uniform(self.joint_damping, rng),
            ..base.clone()
        }
    }
}

pub fn palm_start() -> Pose {
    Pose::from_translation(Vector3::from(PALM_START))
}

/// Draws a training episode: a cuboid, its noisy keypoint context (fixed for
/// the episode) and randomized actuation parameters.
pub fn sample_episode_setup<R: Rng + ?Sized>(
    ranges: &RandomizationRanges,
    base: &SimParams,
    rng: &mut R,
) -> Result<EpisodeSetup> {
    let spec = ranges.sample_object(ObjectKind::Cuboid, rng);
    let sim = ranges.sample_sim(base, rng);
    let (shifted, _) = add_pose_offset(&compute_keypoints(&spec), ranges.pose_offset_sigma, rng)?;
    let context = add_keypoint_noise(&shifted, ranges.keypoint_noise_sigma, rng)?;
    Ok(EpisodeSetup {
        spec,
        context,
        sim,
        palm_start: palm_start(),
    })
}

/// Generalized advantage estimation. `last_value` bootstraps the step after
/// the final one unless that step ended an episode.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert_eq!(values.len(), n);
    assert_eq!(dones.len(), n);
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// Transitions collected in one iteration, in worker order.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    /// Normalized observations the policy acted on.
    pub observations: Vec<Vec<f64>>,
    pub raw_observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Episodes that finished during this iteration.
    pub episodes: Vec<EpisodeOutcome>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    fn append(&mut self, mut other: RolloutBatch) {
        self.observations.append(&mut other.observations);
        self.raw_observations.append(&mut other.raw_observations);
        self.actions.append(&mut other.actions);
        self.log_probs.append(&mut other.log_probs);
        self.rewards.append(&mut other.rewards);
        self.values.append(&mut other.values);
        self.dones.append(&mut other.dones);
        self.advantages.append(&mut other.advantages);
        self.returns.append(&mut other.returns);
        self.episodes.append(&mut other.episodes);
    }

    /// Rescales advantages to zero mean and unit variance.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n < 2.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt() + 1e-8;
        self.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

/// A rollout worker: its own environment, persisting across iterations, and
/// its own random stream.
struct Worker {
    env: Option<Env>,
    rng: ChaCha8Rng,
}

struct Collector<'a> {
    task: &'a Task,
    ranges: &'a RandomizationRanges,
    sim: &'a SimParams,
    gamma: f64,
    lambda: f64,
    reward_scale: f64,
}

impl Collector<'_> {
    fn collect(&self, w: &mut Worker, agent: &Agent, steps: usize) -> Result<RolloutBatch> {
        let mut b = RolloutBatch::default();
        for _ in 0..steps {
            if w.env.is_none() {
                let setup = sample_episode_setup(self.ranges, self.sim, &mut w.rng)?;
                w.env = Some(Env::new(self.task, setup)?);
            }
            let env = w.env.as_mut().expect("just created");
            let obs = env.observe(self.task);
            let (z, out) = agent.act(&obs, true, &mut w.rng)?;
            let r = env.step_raw(self.task, &out.action)?;
            let done = env.done();
            b.raw_observations.push(obs.to_vec());
            b.observations.push(z);
            b.actions.push(out.action);
            b.log_probs.push(out.log_prob);
            b.values.push(out.value);
            b.rewards.push(r.total);
            b.dones.push(done);
            if done {
                b.episodes.push(env.outcome());
                w.env = None;
            }
        }
        let last_value = match &w.env {
            Some(env) => {
                let obs = env.observe(self.task);
                let z = agent.normalizer.normalize(&obs);
                agent.params.critic.forward_one(&z)[0]
            }
            None => 0.0,
        };
        let scaled: Vec<f64> = b.rewards.iter().map(|r| r * self.reward_scale).collect();
        let (adv, ret) = gae(&scaled, &b.values, &b.dones, last_value, self.gamma, self.lambda);
        b.advantages = adv;
        b.returns = ret;
        Ok(b)
    }
}

/// Running variance of the discounted return, used to put rewards on a unit
/// scale for the critic.
#[derive(Clone, Debug, Default)]
struct ReturnScaler {
    running: Vec<f64>,
    count: f64,
    mean: f64,
    m2: f64,
}

impl ReturnScaler {
    fn scale(&self) -> f64 {
        if self.count < 2.0 {
            return 1.0;
        }
        let std = (self.m2 / self.count).sqrt();
        if std > 1e-8 {
            1.0 / std
        } else {
            1.0
        }
    }

    /// Feeds the raw per-worker reward streams of one iteration.
    fn observe(&mut self, worker_rewards: &[(Vec<f64>, Vec<bool>)], gamma: f64) {
        if self.running.len() != worker_rewards.len() {
            self.running = vec![0.0; worker_rewards.len()];
        }
        for (w, (rewards, dones)) in worker_rewards.iter().enumerate() {
            for (r, d) in rewards.iter().zip(dones) {
                self.running[w] = self.running[w] * gamma + r;
                self.count += 1.0;
                let delta = self.running[w] - self.mean;
                self.mean += delta / self.count;
                self.m2 += delta * (self.running[w] - self.mean);
                if *d {
                    self.running[w] = 0.0;
                }
            }
        }
    }
}

/// One row of the training curve.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub samples: usize,
    pub episodes: usize,
    pub mean_reward: f64,
    pub mean_r_pos: f64,
    pub mean_r_hand: f64,
    pub mean_r_lift: f64,
    pub mean_r_contact: f64,
    pub success_rate: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
}

pub const METRICS_CSV_HEADER: &str = "iteration,samples,episodes,mean_reward,mean_r_pos,mean_r_hand,mean_r_lift,mean_r_contact,success_rate,policy_loss,value_loss,entropy,approx_kl";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.iteration,
            self.samples,
            self.episodes,
            self.mean_reward,
            self.mean_r_pos,
            self.mean_r_hand,
            self.mean_r_lift,
            self.mean_r_contact,
            self.success_rate,
            self.policy_loss,
            self.value_loss,
            self.entropy,
            self.approx_kl
        )
    }
}

pub fn metrics_csv(rows: &[IterationMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Everything needed to run a trained policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub actor_shape: Vec<usize>,
    pub critic_shape: Vec<usize>,
    pub agent: Agent,
    pub ablation: AblationFlags,
    pub style_id: String,
    pub iteration: usize,
    /// sha256 of the configuration that produced the checkpoint.
    pub config_digest: String,
}

impl Checkpoint {
    pub fn new(agent: Agent, ablation: AblationFlags, style_id: &str, iteration: usize, config_digest: &str) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            actor_shape: agent.params.actor.sizes(),
            critic_shape: agent.params.critic.sizes(),
            agent,
            ablation,
            style_id: style_id.to_string(),
            iteration,
            config_digest: config_digest.to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint format_version {}", self.format_version)));
        }
        let p = &self.agent.params;
        if p.actor.sizes() != self.actor_shape || p.critic.sizes() != self.critic_shape {
            return Err(Error::Load("layer shapes disagree with the stored weights".into()));
        }
        let dims_ok = p.obs_dim() == OBS_DIM
            && p.critic.input_dim() == OBS_DIM
            && p.act_dim() == ACTION_DIM
            && p.actor.output_dim() == ACTION_DIM
            && p.critic.output_dim() == 1
            && self.agent.normalizer.mean.len() == OBS_DIM
            && self.agent.normalizer.var.len() == OBS_DIM;
        if !dims_ok {
            return Err(Error::Load(format!(
                "checkpoint dimensions do not match observation {OBS_DIM} / action {ACTION_DIM}"
            )));
        }
        if !p.is_finite() {
            return Err(Error::Load("checkpoint contains non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Load(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Load(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where to write the offending minibatch if the loss turns non-finite.
    pub dump_dir: Option<PathBuf>,
    /// Called after every iteration with the latest metrics.
    pub progress: Option<fn(&IterationMetrics)>,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<IterationMetrics>,
    /// Parameters before the first update.
    pub initial: Agent,
}

fn mean_of(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn gather(cols: &[Vec<f64>], idx: &[usize], rows: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, idx.len());
    for (j, &i) in idx.iter().enumerate() {
        m.set_column(j, &DVector::from_column_slice(&cols[i]));
    }
    m
}

fn dump_minibatch(dir: &Path, iteration: usize, batch: &LossBatch) -> Option<PathBuf> {
    #[derive(Serialize)]
    struct Dump<'a> {
        iteration: usize,
        obs: &'a DMatrix<f64>,
        actions: &'a DMatrix<f64>,
        old_log_probs: &'a [f64],
        old_values: &'a [f64],
        advantages: &'a [f64],
        returns: &'a [f64],
    }
    let path = dir.join(format!("nonfinite_minibatch_iter{iteration}.json"));
    let d = Dump {
        iteration,
        obs: &batch.obs,
        actions: &batch.actions,
        old_log_probs: &batch.old_log_probs,
        old_values: &batch.old_values,
        advantages: &batch.advantages,
        returns: &batch.returns,
    };
    let text = serde_json::to_string(&d).ok()?;
    std::fs::write(&path, text).ok()?;
    Some(path)
}

/// Trains a policy for `task` from scratch. Fully determined by the inputs.
pub fn train(
    config: &TrainConfig,
    ranges: &RandomizationRanges,
    sim: &SimParams,
    task: &Task,
    config_digest: &str,
    options: &TrainOptions,
) -> Result<TrainOutput> {
    config.validate(sim)?;
    ranges.validate()?;
    sim.validate()?;
    task.weights.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let params = PolicyParams::random(OBS_DIM, &config.hidden, ACTION_DIM, config.init_log_std, &mut rng);
    let mut agent = Agent {
        params,
        normalizer: ObsNormalizer::new(OBS_DIM),
    };
    let initial = agent.clone();
    let mut workers: Vec<Worker> = (0..config.workers)
        .map(|i| Worker {
            env: None,
            rng: ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64 + 1)),
        })
        .collect();
    let mut theta = agent.params.flatten();
    let mut opt = Adam::new(theta.len(), config.learning_rate);
    let coefs = config.loss_coefs();
    let mut scaler = ReturnScaler::default();
    let mut metrics = Vec::with_capacity(config.iterations);
    let per_worker: Vec<usize> = (0..config.workers)
        .map(|i| config.samples_per_iteration / config.workers + usize::from(i < config.samples_per_iteration % config.workers))
        .collect();
    let mut total_samples = 0;

    for it in 0..config.iterations {
        let collector = Collector {
            task,
            ranges,
            sim,
            gamma: config.gamma,
            lambda: config.gae_lambda,
            reward_scale: scaler.scale(),
        };
        let parts: Vec<Result<RolloutBatch>> = workers
            .par_iter_mut()
            .zip(per_worker.par_iter())
            .map(|(w, &n)| collector.collect(w, &agent, n))
            .collect();
        let mut batch = RolloutBatch::default();
        let mut streams = Vec::with_capacity(parts.len());
        for p in parts {
            let p = p?;
            streams.push((p.rewards.clone(), p.dones.clone()));
            batch.append(p);
        }
        scaler.observe(&streams, config.gamma);
        total_samples += batch.len();
        batch.normalize_advantages();

        let n = batch.len();
        let obs = gather(&batch.observations, &(0..n).collect::<Vec<_>>(), OBS_DIM);
        let acts = gather(&batch.actions, &(0..n).collect::<Vec<_>>(), ACTION_DIM);
        if config.anneal_lr {
            opt.lr = config.learning_rate * (1.0 - it as f64 / config.iterations as f64);
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut last = LossStats::default();
        for _ in 0..config.epochs_per_iter {
            idx.shuffle(&mut rng);
            for chunk in idx.chunks(config.minibatch_size) {
                let mb = LossBatch {
                    obs: DMatrix::from_fn(OBS_DIM, chunk.len(), |r, c| obs[(r, chunk[c])]),
                    actions: DMatrix::from_fn(ACTION_DIM, chunk.len(), |r, c| acts[(r, chunk[c])]),
                    old_log_probs: chunk.iter().map(|&i| batch.log_probs[i]).collect(),
                    old_values: chunk.iter().map(|&i| batch.values[i]).collect(),
                    advantages: chunk.iter().map(|&i| batch.advantages[i]).collect(),
                    returns: chunk.iter().map(|&i| batch.returns[i]).collect(),
                };
                let (mut grad, st) = policy_gradient(&agent.params, &mb, &coefs);
                if !st.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    let dump = options.dump_dir.as_deref().and_then(|d| dump_minibatch(d, it, &mb));
                    return Err(Error::NonFiniteLoss {
                        iteration: it,
                        detail: format!("{st:?}"),
                        dump,
                    });
                }
                clip_grad_norm(&mut grad, config.max_grad_norm);
                opt.step(&mut theta, &grad);
                agent.params.unflatten(&theta)?;
                agent.params.clamp_log_std();
                theta.copy_from_slice(&agent.params.flatten());
                last = st;
            }
        }
        agent.normalizer.update(batch.raw_observations.iter().map(|v| v.as_slice()));

        let eps = &batch.episodes;
        let m = IterationMetrics {
            iteration: it + 1,
            samples: total_samples,
            episodes: eps.len(),
            mean_reward: mean_of(eps.iter().map(|e| e.total_reward)),
            mean_r_pos: mean_of(eps.iter().map(|e| e.reward_terms[0])),
            mean_r_hand: mean_of(eps.iter().map(|e| e.reward_terms[1])),
            mean_r_lift: mean_of(eps.iter().map(|e| e.reward_terms[2])),
            mean_r_contact: mean_of(eps.iter().map(|e| e.reward_terms[3])),
            success_rate: mean_of(eps.iter().map(|e| if e.success { 1.0 } else { 0.0 })),
            policy_loss: last.policy_loss,
            value_loss: last.value_loss,
            entropy: last.entropy,
            approx_kl: last.approx_kl,
        };
        log::info!(
            "iter {} reward {:.2} success {:.2} kl {:.4}",
            m.iteration,
            m.mean_reward,
            m.success_rate,
            m.approx_kl
        );
        if let Some(cb) = options.progress {
            cb(&m);
        }
        metrics.push(m);
    }
    let checkpoint = Checkpoint::new(agent, config.ablation, &config.style_id, config.iterations, config_digest);
    Ok(TrainOutput {
        checkpoint,
        metrics,
        initial,
    })
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smoothed(xs: &[f64], w: usize) -> Vec<f64> {
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{synthesize_demo, StyleSpec};
    use crate::hand::HandModel;
    use crate::rewards::RewardWeights;
    use proptest::prelude::*;

    fn brute_force_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, g: f64, l: f64) -> Vec<f64> {
        let n = r.len();
        let next_v = |t: usize| if t + 1 < n { v[t + 1] } else { last };
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + g * next_v(t) * if d[t] { 0.0 } else { 1.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                let mut a = 0.0;
                let mut w = 1.0;
                for k in t..n {
                    a += w * delta[k];
                    if d[k] {
                        break;
                    }
                    w *= g * l;
                }
                a
            })
            .collect()
    }

    #[test]
    fn gae_lambda_zero_is_one_step() {
        let r = [1.0, 0.5, -0.2, 2.0];
        let v = [0.3, 0.1, 0.7, -0.4];
        let d = [false, false, true, false];
        let (a, ret) = gae(&r, &v, &d, 0.9, 0.97, 0.0);
        for t in 0..4 {
            let nv = if t + 1 < 4 { v[t + 1] } else { 0.9 };
            let live = if d[t] { 0.0 } else { 1.0 };
            assert_eq!(a[t], r[t] + 0.97 * nv * live - v[t]);
            assert_eq!(ret[t], a[t] + v[t]);
        }
    }

    #[test]
    fn gae_monte_carlo_limit() {
        let r = [1.0, 2.0, 3.0, 4.0];
        let (a, _) = gae(&r, &[0.0; 4], &[false, false, false, true], 0.0, 1.0, 1.0);
        assert_eq!(a, vec![10.0, 9.0, 7.0, 4.0]);
    }

    proptest! {
        #[test]
        fn gae_matches_double_loop(
            r in prop::collection::vec(-5.0f64..5.0, 20),
            v in prop::collection::vec(-5.0f64..5.0, 20),
            d in prop::collection::vec(prop::bool::weighted(0.15), 20),
            last in -5.0f64..5.0,
            g in 0.5f64..1.0, l in 0.0f64..1.0,
        ) {
            let (a, _) = gae(&r, &v, &d, last, g, l);
            let b = brute_force_gae(&r, &v, &d, last, g, l);
            for t in 0..20 {
                prop_assert!((a[t] - b[t]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_ranges_give_fixed_setup() {
        let ranges = RandomizationRanges {
            dims: [0.05, 0.05],
            keypoint_noise_sigma: 0.0,
            pose_offset_sigma: 0.0,
            mass: [0.2, 0.2],
            friction: [0.8, 0.8],
            pd_gain_scale: [1.0, 1.0],
            joint_damping: [0.1, 0.1],
            position_xy: [0.0, 0.0],
            yaw_deg: [0.0, 0.0],
        };
        let sim = SimParams::default();
        let a = sample_episode_setup(&ranges, &sim, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_episode_setup(&ranges, &sim, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.spec.dims, [0.05, 0.05, 0.05]);
        assert_eq!(a.spec.pose.position, Vector3::new(0.0, 0.0, 0.025));
        assert_eq!(a.context, compute_keypoints(&a.spec));
    }

    #[test]
    fn side_length_mean_and_seed_determinism() {
        let ranges = RandomizationRanges::default();
        let sim = SimParams::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += sample_episode_setup(&ranges, &sim, &mut rng).unwrap().spec.dims[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 0.075).abs() <= 0.02 * 0.075, "{mean}");
        let a = sample_episode_setup(&ranges, &sim, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_episode_setup(&ranges, &sim, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn paper_scale_sample_budget() {
        let c = TrainConfig::paper_scale();
        c.validate(&SimParams::default()).unwrap();
        assert_eq!(c.total_samples(), 1_200_000);
        assert_eq!(c.iterations, 500);
        assert_eq!(TrainConfig::desk_scale().total_samples(), 200_000);
    }

    #[test]
    fn config_validation() {
        let sim = SimParams::default();
        let bad = [
            TrainConfig { gamma: 0.0, ..TrainConfig::default() },
            TrainConfig { clip_epsilon: 1.0, ..TrainConfig::default() },
            TrainConfig { samples_per_iteration: 100, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(c.validate(&sim).is_err());
        }
        let r = RandomizationRanges { mass: [0.5, 0.1], ..Default::default() };
        assert!(r.validate().is_err());
    }

    fn tiny() -> (TrainConfig, Task) {
        let model = HandModel::default();
        let demo = synthesize_demo(&StyleSpec::all_fingers(), &model).unwrap();
        let task = Task::new(model, demo, RewardWeights::default(), AblationFlags::default());
        let cfg = TrainConfig {
            iterations: 2,
            samples_per_iteration: 300,
            minibatch_size: 100,
            epochs_per_iter: 2,
            workers: 2,
            hidden: vec![16, 16],
            seed: 4,
            ..TrainConfig::default()
        };
        (cfg, task)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut cfg, task) = tiny();
        cfg.learning_rate = 0.0;
        let out = train(&cfg, &RandomizationRanges::default(), &SimParams::default(), &task, "x", &TrainOptions::default()).unwrap();
        assert_eq!(out.checkpoint.agent.params, out.initial.params);
    }

    #[test]
    fn training_is_deterministic() {
        let (cfg, task) = tiny();
        let run = || train(&cfg, &RandomizationRanges::default(), &SimParams::default(), &task, "x", &TrainOptions::default()).unwrap();
        let a = run();
        let b = run();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.checkpoint, b.checkpoint);
        assert_eq!(a.metrics.len(), 2);
        assert_eq!(a.metrics[1].samples, 600);
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let (cfg, task) = tiny();
        let out = train(&cfg, &RandomizationRanges::default(), &SimParams::default(), &task, "abc", &TrainOptions::default()).unwrap();
        let text = out.checkpoint.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, out.checkpoint);
        let mut broken = out.checkpoint.clone();
        broken.agent.normalizer.mean.pop();
        assert!(matches!(Checkpoint::from_json(&broken.to_json().unwrap()), Err(Error::Load(_))));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
    }
}
