//! Experiment configuration: one TOML file with every knob, a digest that
//! identifies it, and named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::demos::{find_style, load_demo, parse_styles, retarget_demo, shipped_styles, synthesize_demo, StyleSpec};
use crate::error::{Error, Result};
use crate::harness::eval::EvalProtocol;
use crate::harness::scripted::ScriptedParams;
use crate::hand::HandModel;
use crate::ppo::{RandomizationRanges, TrainConfig};
use crate::rewards::{AblationFlags, RewardWeights};
use crate::rollout::Task;
use crate::world::SimParams;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

pub const ABLATION_VARIANTS: [&str; 4] = ["full", "no_contact", "no_demo", "pose_context"];

/// Flags for a named comparison variant.
pub fn variant_flags(name: &str) -> Result<AblationFlags> {
    let mut f = AblationFlags::default();
    match name {
        "full" => {}
        "no_contact" => f.no_contact = true,
        "no_demo" => f.no_demo = true,
        "pose_context" => f.pose_context = true,
        _ => {
            return Err(Error::input(format!(
                "unknown variant '{name}' (expected one of {})",
                ABLATION_VARIANTS.join(", ")
            )))
        }
    }
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Non-cuboid share of the comparison's object set.
    pub object_mix: f64,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            variants: ABLATION_VARIANTS.iter().map(|s| s.to_string()).collect(),
            seeds: vec![0, 1, 2, 3],
            object_mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleSettings {
    pub ids: Vec<String>,
    /// Style table to use instead of the shipped one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub styles_path: Option<PathBuf>,
    pub object_mix: f64,
}

impl Default for StyleSettings {
    fn default() -> Self {
        StyleSettings {
            ids: shipped_styles().into_iter().map(|s| s.id).collect(),
            styles_path: None,
            object_mix: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_path: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ranges: RandomizationRanges,
    #[serde(default)]
    pub rewards: RewardWeights,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub eval: EvalProtocol,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default)]
    pub scripted: ScriptedParams,
    #[serde(default)]
    pub ablation: AblationSettings,
    #[serde(default)]
    pub styles: StyleSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::desk()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    fn with_train(train: TrainConfig) -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            hand_path: None,
            demo_path: None,
            train,
            ranges: RandomizationRanges::default(),
            rewards: RewardWeights::default(),
            sim: SimParams::default(),
            eval: EvalProtocol::default(),
            adapt: AdaptConfig::default(),
            scripted: ScriptedParams::default(),
            ablation: AblationSettings::default(),
            styles: StyleSettings::default(),
        }
    }

    /// 2e5 samples; the budget of the single-machine experiments.
    pub fn desk() -> Self {
        ExperimentConfig::with_train(TrainConfig::desk_scale())
    }

    /// 1.2e6 samples. Training contexts also get a common 1 cm pose offset so
    /// the policy holds up under coarse pose estimates.
    pub fn paper() -> Self {
        let mut c = ExperimentConfig::with_train(TrainConfig::paper_scale());
        c.ranges.pose_offset_sigma = 0.01;
        c
    }

    /// A few seconds end to end; for plumbing checks only.
    pub fn smoke() -> Self {
        let mut c = ExperimentConfig::with_train(TrainConfig {
            iterations: 3,
            samples_per_iteration: 280,
            minibatch_size: 140,
            epochs_per_iter: 2,
            workers: 2,
            hidden: vec![32, 32],
            ..TrainConfig::desk_scale()
        });
        c.eval.n_objects = 6;
        c.eval.poses_per_object = 2;
        c.adapt.budget = 10;
        c.ablation.seeds = vec![0];
        c.styles.ids = vec!["all".into(), "thumb_index".into()];
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(ExperimentConfig::desk()),
            "paper" => Ok(ExperimentConfig::paper()),
            "smoke" => Ok(ExperimentConfig::smoke()),
            _ => Err(Error::input(format!("unknown preset '{name}' (expected desk, paper or smoke)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Load(format!(
                "config format_version {} is not supported (expected {CONFIG_FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.sim.validate()?;
        self.train.validate(&self.sim)?;
        self.ranges.validate()?;
        self.eval.validate()?;
        self.adapt.validate()?;
        for v in &self.ablation.variants {
            variant_flags(v)?;
        }
        if self.ablation.seeds.is_empty() {
            return Err(Error::input("ablation needs at least one seed"));
        }
        if self.styles.ids.is_empty() {
            return Err(Error::input("style experiment needs at least one style"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::format("config", e))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config; relative hand/demo/style paths resolve against the
    /// config file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut c = ExperimentConfig::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut c.hand_path, &mut c.demo_path, &mut c.styles.styles_path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(c)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e))
    }

    /// SHA-256 of the canonical TOML form; formatting and comments in the
    /// source file do not change it.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    /// Sets every seed the experiment uses.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.adapt.seed = seed;
        self.eval.seed = seed.wrapping_add(1000);
    }

    pub fn hand_model(&self) -> Result<HandModel> {
        match &self.hand_path {
            Some(p) => HandModel::load(p),
            None => Ok(HandModel::default()),
        }
    }

    pub fn style(&self, id: &str) -> Result<StyleSpec> {
        match &self.styles.styles_path {
            Some(p) => parse_styles(&std::fs::read_to_string(p)?)?
                .into_iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::input(format!("unknown style '{id}'"))),
            None => find_style(id),
        }
    }

    /// Task for the given style and comparison flags. A demo file, when
    /// configured, replaces the synthesized demonstration.
    pub fn build_task(&self, style_id: &str, flags: AblationFlags) -> Result<Task> {
        let model = self.hand_model()?;
        let demo = match &self.demo_path {
            Some(p) => retarget_demo(&load_demo(p)?, &model)?,
            None => synthesize_demo(&self.style(style_id)?, &model)?,
        };
        Ok(Task::new(model, demo, self.rewards.clone(), flags))
    }

    /// Task for the configured training run.
    pub fn train_task(&self) -> Result<Task> {
        self.build_task(&self.train.style_id, self.train.ablation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for name in ["desk", "paper", "smoke"] {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.digest().unwrap(), c.digest().unwrap());
        }
        assert_eq!(ExperimentConfig::paper().train.total_samples(), 1_200_000);
        assert_eq!(ExperimentConfig::desk().train.total_samples(), 200_000);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let c = ExperimentConfig::from_toml_str("format_version = 1\n").unwrap();
        assert_eq!(c, ExperimentConfig::desk());
        let c = ExperimentConfig::from_toml_str("format_version = 1\n[train]\niterations = 7\n").unwrap();
        assert_eq!(c.train.iterations, 7);
        assert_eq!(c.train.samples_per_iteration, TrainConfig::desk_scale().samples_per_iteration);
    }

    #[test]
    fn digest_ignores_formatting_but_not_values() {
        let a = ExperimentConfig::from_toml_str("format_version = 1\n[train]\niterations = 7\n").unwrap();
        let b = ExperimentConfig::from_toml_str("# comment\nformat_version=1\n\n[train]\niterations=7").unwrap();
        let c = ExperimentConfig::from_toml_str("format_version = 1\n[train]\niterations = 8\n").unwrap();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
        assert_eq!(a.digest().unwrap().len(), 64);
    }

    #[test]
    fn rejects_wrong_version_unknown_keys_and_bad_values() {
        assert!(matches!(ExperimentConfig::from_toml_str("format_version = 2\n"), Err(Error::Load(_))));
        assert!(ExperimentConfig::from_toml_str("format_version = 1\nbogus = 3\n").is_err());
        assert!(ExperimentConfig::from_toml_str("").is_err());
        assert!(ExperimentConfig::from_toml_str("format_version = 1\n[adapt]\nbudget = 2\n").is_err());
        assert!(ExperimentConfig::from_toml_str("format_version = 1\n[ablation]\nvariants = [\"nope\"]\n").is_err());
    }

    #[test]
    fn sha256_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn builds_tasks_for_every_shipped_style_and_variant() {
        let c = ExperimentConfig::smoke();
        for s in shipped_styles() {
            for v in ABLATION_VARIANTS {
                let t = c.build_task(&s.id, variant_flags(v).unwrap()).unwrap();
                assert_eq!(t.demo.style.id, s.id);
            }
        }
    }
}
