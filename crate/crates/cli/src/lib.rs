//! Command implementations behind the `graspctx` binary. Every command
//! writes `report.json`, `metrics.csv` and `plotdata.json` into the output
//! directory; none of them embeds paths or timestamps, so identical inputs
//! give byte-identical files.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use graspctx::adapt::{adapt_context, AdaptResult};
use graspctx::config::{sha256_hex, ExperimentConfig};
use graspctx::demos::{save_demo, synthesize_demo};
use graspctx::geometry::{yaw_rotation, Pose};
use graspctx::harness::experiments::{run_ablation, scripted_eval, style_eval, AblationReport, StyleReport};
use graspctx::harness::objects::{generate_object_set, ObjectSet};
use graspctx::harness::{evaluate, EvalReport};
use graspctx::object::{ObjectKind, ObjectSpec};
use graspctx::ppo::{metrics_csv, palm_start, smoothed, train, Checkpoint, IterationMetrics, TrainOptions};
use graspctx::Finger;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "graspctx", version, about = "Train, evaluate and adapt contextual grasp policies")]
pub struct Cli {
    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given: desk, paper or smoke.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a policy; writes checkpoint.json.
    Train,
    /// Evaluate a checkpoint, or the scripted controller, on held-out objects.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluate the scripted controller instead of a policy.
        #[arg(long)]
        scripted: bool,
        /// Object set file written by demo-gen; generated from the seed otherwise.
        #[arg(long)]
        objects: Option<PathBuf>,
        /// Pose noise sigma (m) applied to the observed object pose.
        #[arg(long)]
        noise: Option<f64>,
        /// Fraction of non-cuboid objects.
        #[arg(long)]
        mix: Option<f64>,
    },
    /// Adapt the keypoint context of a checkpoint to one object.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Object description (TOML).
        #[arg(long)]
        object: PathBuf,
        /// Rollout budget.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Train and evaluate every comparison variant with every seed.
    Ablation,
    /// Train and evaluate one policy per grasp style.
    Styles,
    /// Write a demonstration file and a held-out object set.
    DemoGen {
        #[arg(long, default_value = "all")]
        style: String,
        /// Fraction of non-cuboid objects in the set.
        #[arg(long, default_value_t = 0.5)]
        mix: f64,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Adapt { .. } => "adapt",
            Command::Ablation => "ablation",
            Command::Styles => "styles",
            Command::DemoGen { .. } => "demo-gen",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] graspctx::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Serialize(_) => "serialize",
        }
    }

    /// The machine-readable record printed on failure.
    pub fn record(&self, command: &str) -> serde_json::Value {
        json!({
            "status": "error",
            "command": command,
            "kind": self.kind(),
            "message": self.to_string(),
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(io_err(path))
}

fn to_json<T: Serialize>(v: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| CliError::Serialize(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Files every command leaves behind.
pub struct Outputs {
    pub report: serde_json::Value,
    pub metrics_csv: String,
    pub plotdata: serde_json::Value,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    format_version: u32,
    command: &'a str,
    config_digest: &'a str,
    seed: u64,
    result: T,
}

pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut config = match (&cli.config, &cli.preset) {
        (Some(_), Some(_)) => return Err(CliError::Usage("--config and --preset are mutually exclusive".into())),
        (Some(p), None) => ExperimentConfig::load(p)?,
        (None, Some(name)) => ExperimentConfig::preset(name)?,
        (None, None) => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    config.validate()?;
    Ok(config)
}

/// Runs the command and writes its outputs; returns the report.
pub fn run(cli: &Cli) -> CliResult<serde_json::Value> {
    let config = resolve_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(io_err(&cli.out))?;
    let out = &cli.out;
    let outputs = match &cli.command {
        Command::Train => cmd_train(&config, out)?,
        Command::Eval {
            checkpoint,
            scripted,
            objects,
            noise,
            mix,
        } => cmd_eval(&config, checkpoint.as_deref(), *scripted, objects.as_deref(), *noise, *mix)?,
        Command::Adapt {
            checkpoint,
            object,
            budget,
        } => cmd_adapt(&config, checkpoint, object, *budget, out)?,
        Command::Ablation => cmd_ablation(&config)?,
        Command::Styles => cmd_styles(&config)?,
        Command::DemoGen { style, mix } => cmd_demo_gen(&config, style, *mix, out)?,
    };
    let digest = config.digest()?;
    let report = serde_json::to_value(Envelope {
        format_version: REPORT_FORMAT_VERSION,
        command: cli.command.name(),
        config_digest: &digest,
        seed: config.train.seed,
        result: outputs.report,
    })
    .map_err(|e| CliError::Serialize(e.to_string()))?;
    write_file(&out.join("report.json"), &to_json(&report)?)?;
    write_file(&out.join("metrics.csv"), &outputs.metrics_csv)?;
    write_file(&out.join("plotdata.json"), &to_json(&outputs.plotdata)?)?;
    Ok(report)
}

fn value<T: Serialize>(v: &T) -> CliResult<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| CliError::Serialize(e.to_string()))
}

fn learning_curve(metrics: &[IterationMetrics]) -> serde_json::Value {
    let success: Vec<f64> = metrics.iter().map(|m| m.success_rate).collect();
    json!({
        "iteration": metrics.iter().map(|m| m.iteration).collect::<Vec<_>>(),
        "samples": metrics.iter().map(|m| m.samples).collect::<Vec<_>>(),
        "mean_reward": metrics.iter().map(|m| m.mean_reward).collect::<Vec<_>>(),
        "success_rate": success,
        "success_rate_smoothed": smoothed(&success, 5),
    })
}

fn cmd_train(config: &ExperimentConfig, out: &Path) -> CliResult<Outputs> {
    let task = config.train_task()?;
    let digest = config.digest()?;
    let options = TrainOptions {
        dump_dir: Some(out.to_path_buf()),
        progress: None,
    };
    let result = train(&config.train, &config.ranges, &config.sim, &task, &digest, &options)?;
    let ck_text = result.checkpoint.to_json()?;
    write_file(&out.join("checkpoint.json"), &ck_text)?;
    write_file(&out.join("config.toml"), &config.to_toml()?)?;
    let last = result.metrics.last().cloned().unwrap_or_default();
    Ok(Outputs {
        report: json!({
            "checkpoint": "checkpoint.json",
            "checkpoint_sha256": sha256_hex(ck_text.as_bytes()),
            "iterations": config.train.iterations,
            "total_samples": config.train.total_samples(),
            "style_id": config.train.style_id,
            "ablation": value(&config.train.ablation)?,
            "final": value(&last)?,
        }),
        metrics_csv: metrics_csv(&result.metrics),
        plotdata: json!({ "learning_curve": learning_curve(&result.metrics) }),
    })
}

fn load_checkpoint(path: &Path) -> CliResult<(Checkpoint, String)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| graspctx::Error::Load(format!("{}: {e}", path.display())))?;
    let ck = Checkpoint::from_json(&text)?;
    Ok((ck, sha256_hex(text.as_bytes())))
}

const TRIAL_CSV_HEADER: &str = "trial,object_id,kind,x,y,yaw_deg,success,steps_to_contact,max_lift";

fn trials_csv(report: &EvalReport) -> String {
    let mut s = String::from(TRIAL_CSV_HEADER);
    s.push('\n');
    for t in &report.trials {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            t.trial,
            t.object_id,
            t.kind.name(),
            t.x,
            t.y,
            t.yaw_deg,
            t.success as u8,
            t.steps_to_contact.map(|v| v.to_string()).unwrap_or_default(),
            t.max_lift
        ));
    }
    s
}

fn category_bars(report: &EvalReport) -> serde_json::Value {
    let cats: Vec<&String> = report.per_category.keys().collect();
    json!({
        "category": cats,
        "rate": report.per_category.values().map(|r| r.rate).collect::<Vec<_>>(),
        "ci_low": report.per_category.values().map(|r| r.ci_low).collect::<Vec<_>>(),
        "ci_high": report.per_category.values().map(|r| r.ci_high).collect::<Vec<_>>(),
    })
}

fn cmd_eval(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    scripted: bool,
    objects: Option<&Path>,
    noise: Option<f64>,
    mix: Option<f64>,
) -> CliResult<Outputs> {
    let mut protocol = config.eval.clone();
    if let Some(s) = noise {
        protocol.pose_noise_sigma = s;
    }
    if let Some(m) = mix {
        protocol.object_mix = m;
    }
    protocol.validate()?;
    let set = match objects {
        Some(p) => ObjectSet::load(p)?,
        None => protocol.object_set(&config.ranges)?,
    };
    let (report, ck_digest) = match (checkpoint, scripted) {
        (Some(_), true) => return Err(CliError::Usage("--checkpoint and --scripted are mutually exclusive".into())),
        (None, false) => return Err(CliError::Usage("eval needs --checkpoint or --scripted".into())),
        (None, true) => {
            let task = config.train_task()?;
            (scripted_eval(&task, &protocol, &set, &config.sim, &config.scripted)?, None)
        }
        (Some(path), false) => {
            let (ck, digest) = load_checkpoint(path)?;
            let task = config.build_task(&ck.style_id, ck.ablation)?;
            (evaluate(&task, &ck.agent, &protocol, &set, &config.sim)?, Some(digest))
        }
    };
    log::info!(
        "{}: {}/{} successes ({:.3})",
        report.controller,
        report.overall.successes,
        report.overall.trials,
        report.overall.rate
    );
    Ok(Outputs {
        metrics_csv: trials_csv(&report),
        plotdata: json!({ "categories": category_bars(&report) }),
        report: json!({
            "checkpoint_sha256": ck_digest,
            "object_set_seed": set.seed,
            "evaluation": value(&report)?,
        }),
    })
}

/// Object description accepted by `adapt`; the object rests on the ground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectFile {
    pub format_version: u32,
    pub kind: ObjectKind,
    /// (dx, dy, dz) for cuboids, (radius, height) for cylinders and cones,
    /// (radius) for spheres.
    pub dims: Vec<f64>,
    #[serde(default = "default_mass")]
    pub mass: f64,
    #[serde(default = "default_friction")]
    pub friction: f64,
    #[serde(default)]
    pub position_xy: [f64; 2],
    #[serde(default)]
    pub yaw_deg: f64,
}

fn default_mass() -> f64 {
    0.2
}

fn default_friction() -> f64 {
    1.0
}

impl ObjectFile {
    pub fn to_spec(&self) -> CliResult<ObjectSpec> {
        if self.format_version != 1 {
            return Err(graspctx::Error::Load(format!("object file format_version {} is not supported", self.format_version)).into());
        }
        if self.dims.len() != self.kind.dim_count() {
            return Err(CliError::Usage(format!(
                "{} needs {} dims, got {}",
                self.kind.name(),
                self.kind.dim_count(),
                self.dims.len()
            )));
        }
        let mut dims = [0.0; 3];
        dims[..self.dims.len()].copy_from_slice(&self.dims);
        let mut spec = ObjectSpec::new(self.kind, dims, Pose::identity());
        let z = spec.shape().half_extents().z;
        spec.pose = Pose::new(
            Vector3::new(self.position_xy[0], self.position_xy[1], z),
            yaw_rotation(self.yaw_deg.to_radians()),
        );
        spec.mass = self.mass;
        spec.friction = self.friction;
        spec.validate()?;
        Ok(spec)
    }
}

fn cmd_adapt(
    config: &ExperimentConfig,
    checkpoint: &Path,
    object: &Path,
    budget: Option<usize>,
    out: &Path,
) -> CliResult<Outputs> {
    let (ck, ck_digest) = load_checkpoint(checkpoint)?;
    let text = std::fs::read_to_string(object).map_err(io_err(object))?;
    let file: ObjectFile = toml::from_str(&text).map_err(|e| graspctx::Error::Format {
        what: "object file".into(),
        msg: e.to_string(),
    })?;
    let spec = file.to_spec()?;
    let mut cfg = config.adapt.clone();
    if let Some(b) = budget {
        cfg.budget = b;
    }
    let task = config.build_task(&ck.style_id, ck.ablation)?;
    let result: AdaptResult = adapt_context(&task, &ck.agent, &spec, &config.sim, palm_start(), &cfg)?;
    log::info!(
        "adapted context: fitness {:.4} -> {:.4} in {} rollouts",
        result.initial_fitness,
        result.best_fitness,
        result.evaluations
    );
    let context_file = json!({
        "format_version": 1,
        "object": value(&spec)?,
        "context": result.best_context.to_array().to_vec(),
        "fitness": result.best_fitness,
        "initial_context": result.initial_context.to_array().to_vec(),
        "initial_fitness": result.initial_fitness,
    });
    write_file(&out.join("adapted_context.json"), &to_json(&context_file)?)?;
    let csv = result.fitness_csv();
    write_file(&out.join("fitness.csv"), &csv)?;
    Ok(Outputs {
        report: json!({
            "checkpoint_sha256": ck_digest,
            "adapt": value(&cfg)?,
            "generations": result.history.len(),
            "evaluations": result.evaluations,
            "initial_fitness": result.initial_fitness,
            "best_fitness": result.best_fitness,
            "adapted_context": "adapted_context.json",
            "fitness_csv": "fitness.csv",
        }),
        metrics_csv: csv,
        plotdata: json!({
            "generation": result.history.iter().map(|r| r.generation).collect::<Vec<_>>(),
            "best_so_far": result.history.iter().map(|r| r.best_so_far).collect::<Vec<_>>(),
            "generation_best": result.history.iter().map(|r| r.generation_best).collect::<Vec<_>>(),
            "step_size": result.history.iter().map(|r| r.step_size).collect::<Vec<_>>(),
        }),
    })
}

const CURVE_CSV_HEADER: &str = "group,seed,iteration,success_rate";

fn curve_rows(group: &str, seed: u64, curve: &[f64], out: &mut String) {
    for (i, v) in curve.iter().enumerate() {
        out.push_str(&format!("{group},{seed},{i},{v}\n"));
    }
}

fn cmd_ablation(config: &ExperimentConfig) -> CliResult<Outputs> {
    let report: AblationReport = run_ablation(config, |name, r| {
        log::info!("{name} seed {}: success {:.3}", r.seed, r.success.rate);
    })?;
    let mut csv = format!("{CURVE_CSV_HEADER}\n");
    for v in &report.variants {
        for s in &v.seeds {
            curve_rows(&v.name, s.seed, &s.curve, &mut csv);
        }
    }
    let plot = json!({
        "variant": report.variants.iter().map(|v| v.name.clone()).collect::<Vec<_>>(),
        "mean_success": report.variants.iter().map(|v| v.mean_success).collect::<Vec<_>>(),
        "std_success": report.variants.iter().map(|v| v.std_success).collect::<Vec<_>>(),
        "curves": report.variants.iter().map(|v| (v.name.clone(), v.seeds.iter().map(|s| s.curve.clone()).collect::<Vec<_>>())).collect::<std::collections::BTreeMap<_, _>>(),
    });
    Ok(Outputs {
        report: value(&report)?,
        metrics_csv: csv,
        plotdata: plot,
    })
}

fn cmd_styles(config: &ExperimentConfig) -> CliResult<Outputs> {
    let report: StyleReport = style_eval(config, |r| {
        log::info!("style {}: success {:.3}", r.id, r.result.success.rate);
    })?;
    let mut csv = format!("{CURVE_CSV_HEADER}\n");
    for s in &report.styles {
        curve_rows(&s.id, s.result.seed, &s.result.curve, &mut csv);
    }
    let plot = json!({
        "style": report.styles.iter().map(|s| s.id.clone()).collect::<Vec<_>>(),
        "finger_count": report.styles.iter().map(|s| s.finger_count).collect::<Vec<_>>(),
        "success": report.styles.iter().map(|s| s.result.success.rate).collect::<Vec<_>>(),
    });
    Ok(Outputs {
        report: value(&report)?,
        metrics_csv: csv,
        plotdata: plot,
    })
}

fn cmd_demo_gen(config: &ExperimentConfig, style_id: &str, mix: f64, out: &Path) -> CliResult<Outputs> {
    let model = config.hand_model()?;
    let style = config.style(style_id)?;
    let demo = synthesize_demo(&style, &model)?;
    let demo_name = format!("demo_{style_id}.demo");
    save_demo(&demo, out.join(&demo_name))?;
    let set = generate_object_set(config.eval.n_objects, mix, &config.ranges, config.eval.seed)?;
    set.save(out.join("objects.json"))?;
    let mut csv = String::from("frame,phase,finger,x,y,z\n");
    for (i, (frame, phase)) in demo.frames.iter().zip(&demo.phase).enumerate() {
        for f in Finger::ALL {
            let p = frame[f.index()];
            csv.push_str(&format!("{i},{phase},{},{},{},{}\n", f.name(), p.x, p.y, p.z));
        }
    }
    let counts: std::collections::BTreeMap<&str, usize> = ObjectKind::ALL.iter().map(|&k| (k.name(), set.count(k))).collect();
    let tips: std::collections::BTreeMap<&str, Vec<[f64; 3]>> = Finger::ALL
        .iter()
        .map(|&f| (f.name(), demo.frames.iter().map(|fr| [fr[f.index()].x, fr[f.index()].y, fr[f.index()].z]).collect()))
        .collect();
    Ok(Outputs {
        report: json!({
            "style": value(&style)?,
            "frames": demo.len(),
            "demo_file": demo_name,
            "objects_file": "objects.json",
            "object_counts": counts,
            "object_mix": mix,
        }),
        metrics_csv: csv,
        plotdata: json!({ "phase": demo.phase, "fingertips": tips }),
    })
}
