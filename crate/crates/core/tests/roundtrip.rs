//! File-level round trips through the public API.

use bipkit::basis::BasisConfig;
use bipkit::commands;
use bipkit::config::RunConfig;
use bipkit::filter::NoiseConfig;
use bipkit::interaction::{load_interaction, save_interaction};
use bipkit::model::Model;
use bipkit::prior::learn_prior;
use bipkit::response::{replay, LoopConfig};
use bipkit::simgen::{gen_demo_set, gen_test, Scene, SpeedClass};
use bipkit::Error;

fn model(scene: &Scene) -> Model {
    let demos: Vec<_> = gen_demo_set(scene, 24, 31).unwrap().into_iter().map(|g| g.interaction).collect();
    let cfgs = vec![BasisConfig::uniform(12).unwrap(); scene.dof_count()];
    let prior = learn_prior(&demos, &cfgs).unwrap();
    let noise = NoiseConfig::from_ranges(&prior.dof_ranges);
    Model::new(prior, noise).unwrap()
}

#[test]
fn saved_interaction_reloads_exactly() {
    let dir = tempfile::TempDir::new().unwrap();
    let g = gen_test(&Scene::desk(), SpeedClass::Fast, 12, 32).unwrap();
    let path = dir.path().join("t.txt");
    save_interaction(&g.interaction, &path).unwrap();
    assert_eq!(load_interaction(&path).unwrap(), g.interaction);
}

#[test]
fn reloaded_model_replays_identically() {
    let scene = Scene::desk();
    let m = model(&scene);
    let dir = tempfile::TempDir::new().unwrap();
    let path = dir.path().join("m.json");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, m);

    let test = gen_test(&scene, SpeedClass::Slow, 0, 33).unwrap().interaction;
    let a = replay(&m.prior, &m.noise, &test, &LoopConfig::default()).unwrap();
    let b = replay(&back.prior, &back.noise, &test, &LoopConfig::default()).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.executed, b.executed);
    assert!(a.executed.executed);
}

#[test]
fn future_model_version_is_rejected() {
    let m = model(&Scene::new(1, 1).unwrap());
    let text = m.to_json().replacen("\"format_version\":1", "\"format_version\":2", 1);
    assert!(matches!(Model::from_json(&text), Err(Error::Format(_))));
}

#[test]
fn infer_outputs_reload_as_eval_inputs() {
    let dir = tempfile::TempDir::new().unwrap();
    let cfg = RunConfig::from_toml("[scenario]\ntests_per_speed = 1\npause_tests = 1\nstatic_runs = 2\n").unwrap();
    let sim = dir.path().join("sim");
    commands::simulate(&cfg, &sim).unwrap();
    let trained = commands::train(&sim.join("demos"), &cfg, &dir.path().join("model")).unwrap();
    let runs = dir.path().join("runs");
    let summaries = commands::infer(&trained.model_path, &[sim.join("tests")], &cfg, &runs).unwrap();
    let collected = commands::collect_runs(&[runs.clone(), sim.join("static")]).unwrap();
    assert_eq!(collected.len(), summaries.len() + 2);
    for run in collected.iter().filter(|r| r.group == commands::BIP_GROUP) {
        let trace = run.trace.as_ref().expect("phase trace next to the executed run");
        assert_eq!(trace.len(), run.interaction.len());
        assert!(run.interaction.executed);
    }
    assert_eq!(collected.iter().filter(|r| r.group == commands::STATIC_GROUP).count(), 2);
}
