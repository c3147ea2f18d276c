//! Comparison experiments: variant ablation, grasp styles, the scripted
//! baseline under pose noise and per-object context adaptation.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{adapt_context, AdaptConfig};
use crate::config::{variant_flags, ExperimentConfig};
use crate::error::Result;
use crate::harness::eval::{evaluate, observed_context, run_trials, EvalProtocol, EvalReport};
use crate::harness::objects::ObjectSet;
use crate::harness::scripted::{scripted_baseline, ScriptedParams};
use crate::harness::stats::{mean_std, RateSummary};
use crate::object::{compute_keypoints, Keypoints, ObjectKind, ObjectSpec};
use crate::ppo::{palm_start, train, Checkpoint, IterationMetrics, RandomizationRanges, TrainOptions};
use crate::rollout::{run_episode, Agent, EpisodeSetup, Task};
use crate::world::SimParams;

pub struct TrainedPolicy {
    pub task: Task,
    pub checkpoint: Checkpoint,
    pub metrics: Vec<IterationMetrics>,
}

/// Trains one policy for a comparison variant and style with `seed`.
pub fn train_policy(config: &ExperimentConfig, variant: &str, style_id: &str, seed: u64) -> Result<TrainedPolicy> {
    let flags = variant_flags(variant)?;
    let mut tc = config.train.clone();
    tc.seed = seed;
    tc.ablation = flags;
    tc.style_id = style_id.to_string();
    let task = config.build_task(style_id, flags)?;
    let out = train(&tc, &config.ranges, &config.sim, &task, &config.digest()?, &TrainOptions::default())?;
    Ok(TrainedPolicy {
        task,
        checkpoint: out.checkpoint,
        metrics: out.metrics,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub success: RateSummary,
    pub per_category: BTreeMap<String, RateSummary>,
    /// Training success rate per iteration.
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub name: String,
    pub mean_success: f64,
    pub std_success: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub protocol: EvalProtocol,
    pub variants: Vec<VariantSummary>,
}

impl AblationReport {
    pub fn variant(&self, name: &str) -> Option<&VariantSummary> {
        self.variants.iter().find(|v| v.name == name)
    }
}

fn seed_result(p: &TrainedPolicy, seed: u64, protocol: &EvalProtocol, set: &ObjectSet, sim: &SimParams) -> Result<SeedResult> {
    let rep = evaluate(&p.task, &p.checkpoint.agent, protocol, set, sim)?;
    Ok(SeedResult {
        seed,
        success: rep.overall,
        per_category: rep.per_category,
        curve: p.metrics.iter().map(|m| m.success_rate).collect(),
    })
}

fn summarize_variant(name: &str, seeds: Vec<SeedResult>) -> VariantSummary {
    let rates: Vec<f64> = seeds.iter().map(|s| s.success.rate).collect();
    let (mean_success, std_success) = mean_std(&rates);
    VariantSummary {
        name: name.to_string(),
        mean_success,
        std_success,
        seeds,
    }
}

/// Protocol of the comparison experiments: the configured one with the
/// given object mix.
pub fn mixed_protocol(config: &ExperimentConfig, object_mix: f64) -> EvalProtocol {
    EvalProtocol {
        object_mix,
        ..config.eval.clone()
    }
}

/// Every configured variant trained with every configured seed, all with
/// the same budget and reward weights, evaluated on one mixed object set.
/// `done` sees each finished (variant, seed) result.
pub fn run_ablation(config: &ExperimentConfig, mut done: impl FnMut(&str, &SeedResult)) -> Result<AblationReport> {
    config.validate()?;
    let protocol = mixed_protocol(config, config.ablation.object_mix);
    let set = protocol.object_set(&config.ranges)?;
    let mut variants = Vec::new();
    for name in &config.ablation.variants {
        let mut seeds = Vec::new();
        for &seed in &config.ablation.seeds {
            let p = train_policy(config, name, &config.train.style_id, seed)?;
            let r = seed_result(&p, seed, &protocol, &set, &config.sim)?;
            done(name, &r);
            seeds.push(r);
        }
        variants.push(summarize_variant(name, seeds));
    }
    Ok(AblationReport { protocol, variants })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleResult {
    pub id: String,
    pub finger_count: usize,
    pub result: SeedResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub protocol: EvalProtocol,
    pub styles: Vec<StyleResult>,
    /// Mean success of the two-finger styles.
    pub two_finger_mean: f64,
    /// Mean success of the styles with three or more fingers.
    pub multi_finger_mean: f64,
}

/// One policy per style, trained with that style's demonstration.
pub fn style_eval(config: &ExperimentConfig, mut done: impl FnMut(&StyleResult)) -> Result<StyleReport> {
    config.validate()?;
    let protocol = mixed_protocol(config, config.styles.object_mix);
    let set = protocol.object_set(&config.ranges)?;
    let mut styles = Vec::new();
    for id in &config.styles.ids {
        let style = config.style(id)?;
        let p = train_policy(config, "full", id, config.train.seed)?;
        let r = StyleResult {
            id: id.clone(),
            finger_count: style.finger_count(),
            result: seed_result(&p, config.train.seed, &protocol, &set, &config.sim)?,
        };
        done(&r);
        styles.push(r);
    }
    let mean_of = |pred: &dyn Fn(usize) -> bool| {
        let xs: Vec<f64> = styles.iter().filter(|s| pred(s.finger_count)).map(|s| s.result.success.rate).collect();
        mean_std(&xs).0
    };
    let two_finger_mean = mean_of(&|n| n == 2);
    let multi_finger_mean = mean_of(&|n| n >= 3);
    Ok(StyleReport {
        protocol,
        styles,
        two_finger_mean,
        multi_finger_mean,
    })
}

/// Scripted controller on a protocol; its center estimate carries the same
/// pose error the policy's keypoints do.
pub fn scripted_eval(
    task: &Task,
    protocol: &EvalProtocol,
    set: &ObjectSet,
    sim: &SimParams,
    params: &ScriptedParams,
) -> Result<EvalReport> {
    run_trials(protocol, set, "scripted", |s| {
        let setup = EpisodeSetup {
            spec: s.spec.clone(),
            context: observed_context(s),
            sim: sim.clone(),
            palm_start: palm_start(),
        };
        let estimate = s.spec.pose.position + s.pose_offset;
        scripted_baseline(task, setup, &estimate, params)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseCell {
    pub pose_noise_sigma: f64,
    pub policy: RateSummary,
    pub scripted: RateSummary,
}

/// Policy and scripted controller on identical trials at each noise level.
pub fn compare_with_scripted(
    task: &Task,
    agent: &Agent,
    protocol: &EvalProtocol,
    set: &ObjectSet,
    sim: &SimParams,
    params: &ScriptedParams,
    sigmas: &[f64],
) -> Result<Vec<NoiseCell>> {
    sigmas
        .iter()
        .map(|&sigma| {
            let p = EvalProtocol {
                pose_noise_sigma: sigma,
                ..protocol.clone()
            };
            Ok(NoiseCell {
                pose_noise_sigma: sigma,
                policy: evaluate(task, agent, &p, set, sim)?.overall,
                scripted: scripted_eval(task, &p, set, sim, params)?.overall,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationTrial {
    pub object: ObjectSpec,
    pub bbox_success: bool,
    pub adapted_success: bool,
    pub initial_fitness: f64,
    pub best_fitness: f64,
    pub evaluations: usize,
    pub elite_monotone: bool,
    pub best_context: Keypoints,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptationStudy {
    pub kind: ObjectKind,
    pub adapt: AdaptConfig,
    pub bbox: RateSummary,
    pub adapted: RateSummary,
    pub elite_monotone: bool,
    pub max_evaluations: usize,
    pub trials: Vec<AdaptationTrial>,
}

/// `n` random objects of `kind`, each at its own random pose. Every object
/// gets its own adaptation run; both the bounding-box context and the
/// adapted one are then scored by a fresh deterministic grasp of that
/// object.
pub fn adaptation_study(
    task: &Task,
    agent: &Agent,
    kind: ObjectKind,
    n: usize,
    ranges: &RandomizationRanges,
    sim: &SimParams,
    adapt: &AdaptConfig,
    seed: u64,
) -> Result<AdaptationStudy> {
    let objects: Vec<ObjectSpec> = (0..n)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            ranges.sample_object(kind, &mut rng)
        })
        .collect();
    let grasp = |spec: &ObjectSpec, context: Keypoints| -> Result<bool> {
        let setup = EpisodeSetup {
            spec: spec.clone(),
            context,
            sim: sim.clone(),
            palm_start: palm_start(),
        };
        Ok(run_episode(task, agent, setup, false, &mut ChaCha8Rng::seed_from_u64(0))?.success)
    };
    let trials: Vec<AdaptationTrial> = objects
        .par_iter()
        .enumerate()
        .map(|(t, spec)| {
            let cfg = AdaptConfig {
                seed: adapt.seed.wrapping_add(t as u64),
                ..adapt.clone()
            };
            let r = adapt_context(task, agent, spec, sim, palm_start(), &cfg)?;
            Ok(AdaptationTrial {
                object: spec.clone(),
                bbox_success: grasp(spec, compute_keypoints(spec))?,
                adapted_success: grasp(spec, r.best_context)?,
                initial_fitness: r.initial_fitness,
                best_fitness: r.best_fitness,
                evaluations: r.evaluations,
                elite_monotone: r.history.windows(2).all(|w| w[1].best_so_far >= w[0].best_so_far),
                best_context: r.best_context,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AdaptationStudy {
        kind,
        adapt: adapt.clone(),
        bbox: RateSummary::from_bools(trials.iter().map(|t| t.bbox_success)),
        adapted: RateSummary::from_bools(trials.iter().map(|t| t.adapted_success)),
        elite_monotone: trials.iter().all(|t| t.elite_monotone),
        max_evaluations: trials.iter().map(|t| t.evaluations).max().unwrap_or(0),
        trials,
    })
}
