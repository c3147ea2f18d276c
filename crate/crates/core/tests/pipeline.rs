//! End-to-end checks through the public API: train, save, reload, evaluate,
//! adapt, and file-based configuration.

use nalgebra::Vector3;

use graspctx::adapt::{adapt_context, AdaptConfig};
use graspctx::config::ExperimentConfig;
use graspctx::demos::{find_style, retarget_demo, save_demo, synthesize_demo};
use graspctx::harness::evaluate;
use graspctx::harness::experiments::train_policy;
use graspctx::ppo::{palm_start, Checkpoint};
use graspctx::{HandModel, ObjectSpec, Pose};

#[test]
fn checkpoint_reload_gives_identical_evaluation() {
    let c = ExperimentConfig::smoke();
    let p = train_policy(&c, "full", "all", 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    p.checkpoint.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, p.checkpoint);

    let set = c.eval.object_set(&c.ranges).unwrap();
    let a = evaluate(&p.task, &p.checkpoint.agent, &c.eval, &set, &c.sim).unwrap();
    let b = evaluate(&p.task, &back.agent, &c.eval, &set, &c.sim).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.trials.len(), c.eval.trials());
}

#[test]
fn adaptation_with_a_trained_policy_respects_the_budget() {
    let c = ExperimentConfig::smoke();
    let p = train_policy(&c, "full", "all", 0).unwrap();
    let spec = ObjectSpec::cylinder(0.03, 0.1, Pose::from_translation(Vector3::new(0.01, 0.0, 0.05)));
    let cfg = AdaptConfig {
        budget: 23,
        ..c.adapt.clone()
    };
    let r = adapt_context(&p.task, &p.checkpoint.agent, &spec, &c.sim, palm_start(), &cfg).unwrap();
    assert_eq!(r.evaluations, 20);
    assert_eq!(r.history.len(), 4);
    assert!(r.best_fitness >= r.initial_fitness);
    assert_eq!(r.history.last().unwrap().best_so_far, r.best_fitness);
}

#[test]
fn config_file_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = HandModel::default();
    let demo = synthesize_demo(&find_style("thumb_index").unwrap(), &model).unwrap();
    save_demo(&demo, dir.path().join("pinch.demo")).unwrap();
    std::fs::write(dir.path().join("hand.toml"), HandModel::default_config_text()).unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "format_version = 1\nhand_path = \"hand.toml\"\ndemo_path = \"pinch.demo\"\n[train]\niterations = 2\n",
    )
    .unwrap();

    let c = ExperimentConfig::load(dir.path().join("exp.toml")).unwrap();
    assert_eq!(c.train.iterations, 2);
    assert_eq!(c.hand_model().unwrap(), model);
    let task = c.train_task().unwrap();
    assert_eq!(task.demo, retarget_demo(&demo, &model).unwrap());
    assert_eq!(task.demo.style.id, "thumb_index");
}

#[test]
fn missing_files_are_load_errors() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("exp.toml"), "format_version = 1\ndemo_path = \"nope.demo\"\n").unwrap();
    let c = ExperimentConfig::load(dir.path().join("exp.toml")).unwrap();
    assert!(c.train_task().is_err());
    assert!(ExperimentConfig::load(dir.path().join("absent.toml")).is_err());
}
