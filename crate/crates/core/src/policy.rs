//! Observation assembly, the diagonal-Gaussian MLP policy with its value
//! function, and the exact gradient of the clipped PPO loss.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::hand::{clamp_joints, HandModel, JointVector, NUM_FINGERS, NUM_JOINTS};
use crate::nn::{ForwardCache, Mlp};
use crate::object::{Keypoints, CONTEXT_DIM};
use crate::rewards::AblationFlags;
use crate::world::{Action, WorldState, ACTION_DIM};

/// Robot state part of the observation.
pub const STATE_DIM: usize = 3 + 4 + NUM_JOINTS + NUM_JOINTS + NUM_FINGERS;
pub const OBS_DIM: usize = STATE_DIM + CONTEXT_DIM;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Frozen index table of the observation vector.
pub mod layout {
    use std::ops::Range;
    pub const PALM_POSITION: Range<usize> = 0..3;
    /// (w, x, y, z) with w ≥ 0.
    pub const PALM_QUATERNION: Range<usize> = 3..7;
    pub const JOINTS: Range<usize> = 7..23;
    pub const JOINT_VELOCITIES: Range<usize> = 23..39;
    pub const CONTACTS: Range<usize> = 39..43;
    pub const CONTEXT: Range<usize> = 43..67;
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation(pub [f64; OBS_DIM]);

impl std::ops::Deref for Observation {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

fn put(out: &mut [f64; OBS_DIM], r: Range<usize>, v: &[f64]) {
    out[r].copy_from_slice(v);
}

/// Builds the policy input from the world state and the episode context.
pub fn observe(world: &WorldState, context: &Keypoints, flags: AblationFlags) -> Observation {
    let mut o = [0.0; OBS_DIM];
    let hand = &world.hand;
    put(&mut o, layout::PALM_POSITION, hand.palm.position.as_slice());
    let q = hand.palm.orientation;
    let s = if q.w < 0.0 { -1.0 } else { 1.0 };
    put(&mut o, layout::PALM_QUATERNION, &[s * q.w, s * q.i, s * q.j, s * q.k]);
    put(&mut o, layout::JOINTS, &hand.q.0);
    put(&mut o, layout::JOINT_VELOCITIES, &hand.qdot);
    if !flags.no_contact {
        let c = hand.contacts.map(|b| if b { 1.0 } else { 0.0 });
        put(&mut o, layout::CONTACTS, &c);
    }
    if flags.pose_context {
        let p = context.center_pose_vector();
        put(&mut o, layout::CONTEXT.start..layout::CONTEXT.start + 6, &p);
    } else {
        put(&mut o, layout::CONTEXT, &context.to_array());
    }
    Observation(o)
}

/// Actor and critic networks plus the state-independent log standard
/// deviations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub actor: Mlp,
    pub critic: Mlp,
    pub log_std: Vec<f64>,
}

fn layer_sizes(obs_dim: usize, hidden: &[usize], out: usize) -> Vec<usize> {
    let mut s = vec![obs_dim];
    s.extend_from_slice(hidden);
    s.push(out);
    s
}

impl PolicyParams {
    pub fn zeros(obs_dim: usize, hidden: &[usize], act_dim: usize) -> Self {
        PolicyParams {
            actor: Mlp::zeros(&layer_sizes(obs_dim, hidden, act_dim)),
            critic: Mlp::zeros(&layer_sizes(obs_dim, hidden, 1)),
            log_std: vec![0.0; act_dim],
        }
    }

    /// Fresh parameters: small actor output layer so initial actions sit near
    /// the action-map offset.
    pub fn random<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        act_dim: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        PolicyParams {
            actor: Mlp::random(&layer_sizes(obs_dim, hidden, act_dim), 0.01, rng),
            critic: Mlp::random(&layer_sizes(obs_dim, hidden, 1), 1.0, rng),
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); act_dim],
        }
    }

    /// Default-architecture policy (two hidden layers of 128).
    pub fn standard<R: Rng + ?Sized>(init_log_std: f64, rng: &mut R) -> Self {
        Self::random(OBS_DIM, &[128, 128], ACTION_DIM, init_log_std, rng)
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn num_params(&self) -> usize {
        self.actor.num_params() + self.critic.num_params() + self.log_std.len()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.actor.flatten_into(&mut v);
        self.critic.flatten_into(&mut v);
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn unflatten(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::Dimension {
                what: "policy parameters",
                expected: self.num_params(),
                got: v.len(),
            });
        }
        let a = self.actor.unflatten_from(v)?;
        let c = self.critic.unflatten_from(&v[a..])?;
        self.log_std.copy_from_slice(&v[a + c..]);
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.iter_mut().for_each(|l| *l = l.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    fn effective_log_std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite() && self.log_std.iter().all(|v| v.is_finite())
    }

    /// Entropy of the action distribution (nats).
    pub fn entropy(&self) -> f64 {
        self.effective_log_std().iter().map(|l| l + HALF_LN_2PI + 0.5).sum()
    }
}

/// Diagonal-Gaussian log density.
pub fn gaussian_log_prob(action: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    action
        .iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), l)| {
            let z = (a - m) / l.exp();
            -0.5 * z * z - l - HALF_LN_2PI
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActOutput {
    /// Raw policy output; map through [`ActionMap`] to get world targets.
    pub action: Vec<f64>,
    pub mean: Vec<f64>,
    pub log_prob: f64,
    pub value: f64,
}

/// Samples (or takes the mean of) the action distribution for a normalized
/// observation.
pub fn act<R: Rng + ?Sized>(params: &PolicyParams, obs: &[f64], stochastic: bool, rng: &mut R) -> Result<ActOutput> {
    if obs.len() != params.obs_dim() {
        return Err(Error::Dimension {
            what: "observation",
            expected: params.obs_dim(),
            got: obs.len(),
        });
    }
    if obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("observation contains non-finite values"));
    }
    let mean: Vec<f64> = params.actor.forward_one(obs).iter().copied().collect();
    let value = params.critic.forward_one(obs)[0];
    if !value.is_finite() || mean.iter().any(|m| !m.is_finite()) || params.log_std.iter().any(|l| !l.is_finite()) {
        return Err(Error::Fault("policy parameters are not finite".into()));
    }
    let log_std = params.effective_log_std();
    let action: Vec<f64> = if stochastic {
        mean.iter()
            .zip(&log_std)
            .map(|(m, l)| {
                let n: f64 = StandardNormal.sample(rng);
                m + l.exp() * n
            })
            .collect()
    } else {
        mean.clone()
    };
    let log_prob = gaussian_log_prob(&action, &mean, &log_std);
    Ok(ActOutput {
        action,
        mean,
        log_prob,
        value,
    })
}

/// Running mean/variance standardization of observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObsNormalizer {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: f64,
}

const NORM_EPS: f64 = 1e-8;
const NORM_CLIP: f64 = 10.0;

impl ObsNormalizer {
    pub fn new(dim: usize) -> Self {
        ObsNormalizer {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 0.0,
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.var)
            .map(|((x, m), v)| ((x - m) / (v + NORM_EPS).sqrt()).clamp(-NORM_CLIP, NORM_CLIP))
            .collect()
    }

    /// Merges the statistics of a batch of raw observations.
    pub fn update<'a>(&mut self, batch: impl IntoIterator<Item = &'a [f64]>) {
        let dim = self.mean.len();
        let mut n = 0.0;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for x in batch {
            n += 1.0;
            for i in 0..dim {
                let d = x[i] - mean[i];
                mean[i] += d / n;
                m2[i] += d * (x[i] - mean[i]);
            }
        }
        if n == 0.0 {
            return;
        }
        if self.count == 0.0 {
            self.mean = mean;
            self.var = m2.iter().map(|v| v / n).collect();
            self.count = n;
            return;
        }
        let total = self.count + n;
        for i in 0..dim {
            let delta = mean[i] - self.mean[i];
            let m_a = self.var[i] * self.count;
            let m_b = m2[i];
            self.mean[i] += delta * n / total;
            self.var[i] = (m_a + m_b + delta * delta * self.count * n / total) / total;
        }
        self.count = total;
    }
}

/// Maps raw policy outputs to world targets. The palm target is a scaled
/// offset from the current palm pose; joint targets integrate scaled offsets
/// onto the previous joint command, clamped to the joint limits, so a finger
/// pressed against the object keeps squeezing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionMap {
    pub scale: Vec<f64>,
}

impl Default for ActionMap {
    /// 0.02 m and 0.1 rad of palm motion per unit, 0.1 rad per unit on joints.
    fn default() -> Self {
        let mut scale = vec![0.0; ACTION_DIM];
        scale[..3].fill(0.02);
        scale[3..6].fill(0.1);
        scale[6..].fill(0.1);
        ActionMap { scale }
    }
}

impl ActionMap {
    pub fn apply(&self, u: &[f64], palm: &Pose, joint_command: &JointVector, model: &HandModel) -> Result<Action> {
        if u.len() != ACTION_DIM {
            return Err(Error::Dimension {
                what: "action",
                expected: ACTION_DIM,
                got: u.len(),
            });
        }
        let rot = palm.axis_angle();
        let mut palm_target = [0.0; 6];
        for i in 0..3 {
            palm_target[i] = palm.position[i] + self.scale[i] * u[i];
            palm_target[i + 3] = rot[i] + self.scale[i + 3] * u[i + 3];
        }
        let mut joints = [0.0; NUM_JOINTS];
        for (j, t) in joints.iter_mut().enumerate() {
            *t = joint_command.0[j] + self.scale[6 + j] * u[6 + j];
        }
        Ok(Action {
            palm_target,
            joint_targets: clamp_joints(model, &joints).0,
        })
    }
}

/// Coefficients of the PPO loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCoefs {
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl Default for LossCoefs {
    fn default() -> Self {
        LossCoefs {
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

/// Training samples, one column per sample.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub obs: DMatrix<f64>,
    pub actions: DMatrix<f64>,
    pub old_log_probs: Vec<f64>,
    pub old_values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl LossBatch {
    pub fn len(&self) -> usize {
        self.obs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

/// Per-sample clipped surrogate min(r·A, clip(r, 1−ε, 1+ε)·A).
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

struct Forward {
    actor: ForwardCache,
    critic: ForwardCache,
    log_std: Vec<f64>,
    ratios: Vec<f64>,
    log_probs: Vec<f64>,
}

fn forward(params: &PolicyParams, batch: &LossBatch) -> Forward {
    let actor = params.actor.forward(&batch.obs);
    let critic = params.critic.forward(&batch.obs);
    let log_std = params.effective_log_std();
    let mean = actor.output();
    let log_probs: Vec<f64> = (0..batch.len())
        .map(|j| {
            let a = batch.actions.column(j);
            let m = mean.column(j);
            gaussian_log_prob(a.as_slice(), m.as_slice(), &log_std)
        })
        .collect();
    let ratios = log_probs
        .iter()
        .zip(&batch.old_log_probs)
        .map(|(l, o)| (l - o).exp())
        .collect();
    Forward {
        actor,
        critic,
        log_std,
        ratios,
        log_probs,
    }
}

fn stats(params: &PolicyParams, batch: &LossBatch, coefs: &LossCoefs, f: &Forward) -> LossStats {
    let n = batch.len() as f64;
    let eps = coefs.clip_epsilon;
    let values = f.critic.output();
    let mut pl = 0.0;
    let mut vl = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0.0;
    for j in 0..batch.len() {
        let r = f.ratios[j];
        pl -= clipped_surrogate(r, batch.advantages[j], eps);
        let v = values[(0, j)];
        let v_old = batch.old_values[j];
        let v_clip = v_old + (v - v_old).clamp(-eps, eps);
        let ret = batch.returns[j];
        vl += 0.5 * (v - ret).powi(2).max((v_clip - ret).powi(2));
        kl += batch.old_log_probs[j] - f.log_probs[j];
        if (r - 1.0).abs() > eps {
            clipped += 1.0;
        }
    }
    let entropy = params.entropy();
    let (pl, vl) = (pl / n, vl / n);
    LossStats {
        policy_loss: pl,
        value_loss: vl,
        entropy,
        total: pl + coefs.value_coef * vl - coefs.entropy_coef * entropy,
        approx_kl: kl / n,
        clip_fraction: clipped / n,
    }
}

/// Clipped surrogate + clipped value loss − entropy bonus, to be minimized.
pub fn ppo_loss(params: &PolicyParams, batch: &LossBatch, coefs: &LossCoefs) -> LossStats {
    stats(params, batch, coefs, &forward(params, batch))
}

/// Exact gradient of [`ppo_loss`] in the [`PolicyParams::flatten`] layout.
pub fn policy_gradient(params: &PolicyParams, batch: &LossBatch, coefs: &LossCoefs) -> (Vec<f64>, LossStats) {
    let f = forward(params, batch);
    let st = stats(params, batch, coefs, &f);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let eps = coefs.clip_epsilon;
    let act_dim = params.act_dim();
    let mean = f.actor.output();
    let values = f.critic.output();
    let sigma: Vec<f64> = f.log_std.iter().map(|l| l.exp()).collect();

    let mut d_mean = DMatrix::zeros(act_dim, n);
    let mut d_log_std = vec![0.0; act_dim];
    let mut d_value = DMatrix::zeros(1, n);
    for j in 0..n {
        let r = f.ratios[j];
        let a = batch.advantages[j];
        // the unclipped branch is the active one
        let active = if a >= 0.0 { r < 1.0 + eps } else { r > 1.0 - eps };
        let g = if active { -inv_n * a * r } else { 0.0 };
        if g != 0.0 {
            for i in 0..act_dim {
                let z = (batch.actions[(i, j)] - mean[(i, j)]) / sigma[i];
                d_mean[(i, j)] = g * z / sigma[i];
                d_log_std[i] += g * (z * z - 1.0);
            }
        }
        let v = values[(0, j)];
        let v_old = batch.old_values[j];
        let dv = v - v_old;
        let v_clip = v_old + dv.clamp(-eps, eps);
        let ret = batch.returns[j];
        let grad_v = if (v - ret).powi(2) >= (v_clip - ret).powi(2) {
            v - ret
        } else if dv.abs() < eps {
            v_clip - ret
        } else {
            0.0
        };
        d_value[(0, j)] = coefs.value_coef * inv_n * grad_v;
    }
    for (i, d) in d_log_std.iter_mut().enumerate() {
        let l = params.log_std[i];
        *d = if (LOG_STD_MIN..=LOG_STD_MAX).contains(&l) {
            *d - coefs.entropy_coef
        } else {
            0.0
        };
    }
    let ga = params.actor.backward(&f.actor, &d_mean);
    let gc = params.critic.backward(&f.critic, &d_value);
    let mut grad = Vec::with_capacity(params.num_params());
    ga.flatten_into(&mut grad);
    gc.flatten_into(&mut grad);
    grad.extend_from_slice(&d_log_std);
    (grad, st)
}

/// Largest relative disagreement between [`policy_gradient`] and central
/// finite differences of [`ppo_loss`] with step `h`, over every parameter.
/// The denominator is floored at 1e-6.
pub fn gradient_check(params: &PolicyParams, batch: &LossBatch, coefs: &LossCoefs, h: f64) -> f64 {
    let (g, _) = policy_gradient(params, batch, coefs);
    let theta = params.flatten();
    let mut q = params.clone();
    let mut t = theta.clone();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        t[i] = theta[i] + h;
        q.unflatten(&t).expect("same shape");
        let up = ppo_loss(&q, batch, coefs).total;
        t[i] = theta[i] - h;
        q.unflatten(&t).expect("same shape");
        let down = ppo_loss(&q, batch, coefs).total;
        t[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
