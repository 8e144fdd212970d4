//! File-level train / infer / simulate / eval, as run by the command-line
//! tool. Each command reads its inputs, writes only under `out_dir` and is
//! deterministic for fixed inputs and configuration.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{build_report, EvalReport, RunInput};
use crate::interaction::{load_interaction, save_interaction, DofLayout, Interaction};
use crate::model::Model;
use crate::prior::{learn_prior, DemonstrationSet};
use crate::response::{replay, PhaseSample};
use crate::simgen::{
    gen_repeated_demos, gen_static, gen_test, sub_seed, Generated, ScenarioParams,
    SpeedClass,
};

pub const MODEL_FILE: &str = "model.json";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const EXECUTED_SUFFIX: &str = ".executed.txt";
pub const PHASE_SUFFIX: &str = ".phase.csv";
pub const TRUTH_SUFFIX: &str = ".truth.csv";
pub const STATIC_GROUP: &str = "static";
pub const BIP_GROUP: &str = "bip";

const STREAM_DEMOS: u64 = 0;
const STREAM_TESTS: u64 = 1;
const STREAM_PAUSE: u64 = 5;
const STREAM_STATIC: u64 = 6;

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Interaction files (`*.txt`) directly inside `dir`, sorted by name.
pub fn interaction_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?
            .path();
        if path.is_file() && path.extension().is_some_and(|x| x == "txt") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// File name without `.txt` or `.executed.txt`.
pub fn run_name(path: &Path) -> String {
    let name = file_name(path);
    name.strip_suffix(EXECUTED_SUFFIX)
        .or_else(|| name.strip_suffix(".txt"))
        .unwrap_or(&name)
        .to_string()
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub demos: usize,
    pub basis_count: usize,
    pub layout: DofLayout,
    pub weight_dim: usize,
    pub state_dim: usize,
    pub worst_condition: f64,
    pub regularized_fits: usize,
    pub model_path: PathBuf,
}

/// Loads every demonstration in `demo_dir`. Files that fail to parse or do
/// not match the first file's layout and rate are all reported together.
pub fn load_demos(demo_dir: &Path, min_len: usize) -> Result<Vec<Interaction>> {
    let files = interaction_files(demo_dir)?;
    let mut demos = Vec::new();
    let mut problems = Vec::new();
    let mut reference: Option<(DofLayout, f64, String)> = None;
    for path in &files {
        let name = file_name(path);
        let demo = match load_interaction(path) {
            Ok(d) => d,
            Err(e) => {
                problems.push(format!("{name}: {e}"));
                continue;
            }
        };
        if demo.len() < min_len {
            problems.push(format!("{name}: {} samples, need at least {min_len}", demo.len()));
            continue;
        }
        match &reference {
            None => reference = Some((demo.layout().clone(), demo.sample_rate(), name)),
            Some((layout, rate, first)) => {
                if demo.layout() != layout {
                    problems.push(format!("{name}: layout differs from {first}"));
                    continue;
                }
                if demo.sample_rate() != *rate {
                    problems.push(format!(
                        "{name}: sample rate {} Hz differs from {first} ({rate} Hz)",
                        demo.sample_rate()
                    ));
                    continue;
                }
            }
        }
        demos.push(demo);
    }
    if !problems.is_empty() {
        return Err(Error::Nonconforming(problems));
    }
    if demos.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: demos.len(),
        });
    }
    Ok(demos)
}

pub fn train(demo_dir: &Path, cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let demos = load_demos(demo_dir, cfg.basis.count)?;
    let layout = demos[0].layout().clone();
    let cfgs = cfg.basis_configs(layout.dof_count())?;
    let set = DemonstrationSet::from_interactions(&demos, &cfgs)?;
    if set.regularized_fits > 0 {
        warn!("{} per-DoF fits were rank deficient and regularized", set.regularized_fits);
    }
    let prior = learn_prior(&demos, &cfgs)?;
    let noise = cfg.noise.to_noise(&prior.dof_ranges);
    let model = Model::new(prior, noise)?;
    create_dir(out_dir)?;
    let model_path = out_dir.join(MODEL_FILE);
    model.save(&model_path)?;
    info!("wrote {}", model_path.display());
    Ok(TrainSummary {
        demos: demos.len(),
        basis_count: cfg.basis.count,
        weight_dim: model.prior.weight_dim(),
        state_dim: model.prior.state_dim(),
        layout,
        worst_condition: set.worst_condition,
        regularized_fits: set.regularized_fits,
        model_path,
    })
}

// ---------------------------------------------------------------- infer

#[derive(Debug, Clone, Serialize)]
pub struct InferSummary {
    pub name: String,
    pub samples: usize,
    pub terminal: PhaseSample,
    pub plans_issued: usize,
    pub jitter_events: usize,
}

pub fn format_trace(trace: &[PhaseSample]) -> String {
    let mut out = String::from("tick,phase,phase_vel,var_phase,var_phase_vel\n");
    for s in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.tick, s.phase, s.phase_vel, s.var_phase, s.var_phase_vel
        );
    }
    out
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Vec<PhaseSample>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "tick,phase,phase_vel,var_phase,var_phase_vel" => {}
        _ => return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "missing phase trace header".into(),
        }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: m.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let tick = f[0].trim().parse().map_err(|_| bad("bad tick"))?;
        let mut v = [0.0; 4];
        for (slot, s) in v.iter_mut().zip(&f[1..]) {
            *slot = s.trim().parse().map_err(|_| bad("bad number"))?;
        }
        out.push(PhaseSample {
            tick,
            phase: v[0],
            phase_vel: v[1],
            var_phase: v[2],
            var_phase_vel: v[3],
        });
    }
    Ok(out)
}

/// Expands directories into their interaction files; plain files pass
/// through.
pub fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            files.extend(interaction_files(input)?);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

pub fn infer(model_path: &Path, inputs: &[PathBuf], cfg: &RunConfig, out_dir: &Path) -> Result<Vec<InferSummary>> {
    cfg.validate()?;
    let model = Model::load(model_path)?;
    let loop_cfg = cfg.loop_config();
    let files = expand_inputs(inputs)?;
    if files.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let mut seen = BTreeSet::new();
    for f in &files {
        if !seen.insert(run_name(f)) {
            return Err(Error::Config(format!("two inputs share the name {}", run_name(f))));
        }
    }
    create_dir(out_dir)?;
    let mut summaries = Vec::new();
    for path in &files {
        let name = run_name(path);
        let recording = load_interaction(path)?;
        if recording.layout() != &model.prior.layout {
            return Err(Error::Layout(format!(
                "{}: layout does not match the model",
                path.display()
            )));
        }
        let out = replay(&model.prior, &model.noise, &recording, &loop_cfg)?;
        write_file(&out_dir.join(format!("{name}{PHASE_SUFFIX}")), &format_trace(&out.trace))?;
        save_interaction(&out.executed, out_dir.join(format!("{name}{EXECUTED_SUFFIX}")))?;
        let terminal = *out.trace.last().expect("loop output has samples");
        info!(
            "{name}: terminal phase {:.3}, phase velocity {:.3e}",
            terminal.phase, terminal.phase_vel
        );
        summaries.push(InferSummary {
            name,
            samples: recording.len(),
            terminal,
            plans_issued: out.plans_issued,
            jitter_events: out.jitter_events,
        });
    }
    Ok(summaries)
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, Default, Serialize)]
pub struct SimulateSummary {
    pub demos: usize,
    pub tests: usize,
    pub statics: usize,
}

#[derive(Serialize)]
struct ManifestEntry<'a> {
    file: String,
    kind: &'a str,
    seed: u64,
    speed_factor: f64,
    pause_ticks: usize,
    endpoint: &'a [f64],
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    scenario: Vec<ManifestEntry<'a>>,
}

fn entry<'a>(file: String, kind: &'a str, p: &'a ScenarioParams) -> ManifestEntry<'a> {
    ManifestEntry {
        file,
        kind,
        seed: p.seed,
        speed_factor: p.speed_factor,
        pause_ticks: p.pause_ticks,
        endpoint: &p.endpoint,
    }
}

fn truth_csv(g: &Generated) -> String {
    let mut out = String::from("tick,phase\n");
    for (t, p) in g.truth_phase.iter().enumerate() {
        let _ = writeln!(out, "{t},{p}");
    }
    out
}

/// Writes `demos/`, `tests/` and `static/` plus a `scenarios.toml` listing
/// the parameters of every file.
pub fn simulate(cfg: &RunConfig, out_dir: &Path) -> Result<SimulateSummary> {
    cfg.validate()?;
    let scene = cfg.scene()?;
    let sc = &cfg.scenario;
    let root = cfg.seed;

    let demos = gen_repeated_demos(&scene, sc.trajectories, sc.repetitions, sub_seed(root, STREAM_DEMOS))?;
    let mut tests: Vec<(String, Generated)> = Vec::new();
    for (k, class) in SpeedClass::ALL.iter().enumerate() {
        let stream = sub_seed(root, STREAM_TESTS + k as u64);
        for i in 0..sc.tests_per_speed {
            let g = gen_test(&scene, *class, 0, sub_seed(stream, i as u64))?;
            tests.push((format!("test_{}_{i:02}", class.tag()), g));
        }
    }
    let pause_stream = sub_seed(root, STREAM_PAUSE);
    for i in 0..sc.pause_tests {
        let g = gen_test(&scene, SpeedClass::Normal, cfg.pause_ticks(), sub_seed(pause_stream, i as u64))?;
        tests.push((format!("test_normal_pause_{i:02}"), g));
    }
    let static_stream = sub_seed(root, STREAM_STATIC);
    let statics: Vec<Generated> = (0..sc.static_runs)
        .map(|i| gen_static(&scene, sub_seed(static_stream, i as u64)))
        .collect::<Result<_>>()?;

    let dirs = ["demos", "tests", "static"].map(|d| out_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let mut manifest = Manifest {
        seed: root,
        scenario: Vec::new(),
    };
    for (n, g) in demos.iter().enumerate() {
        let file = format!("demo_{:02}_{}.txt", n / sc.repetitions, n % sc.repetitions);
        save_interaction(&g.interaction, dirs[0].join(&file))?;
        manifest.scenario.push(entry(format!("demos/{file}"), "demo", &g.params));
    }
    for (name, g) in &tests {
        save_interaction(&g.interaction, dirs[1].join(format!("{name}.txt")))?;
        write_file(&dirs[1].join(format!("{name}{TRUTH_SUFFIX}")), &truth_csv(g))?;
        manifest.scenario.push(entry(format!("tests/{name}.txt"), "test", &g.params));
    }
    for (i, g) in statics.iter().enumerate() {
        let mut rec = g.interaction.clone();
        rec.executed = true;
        let file = format!("static_{i:02}.txt");
        save_interaction(&rec, dirs[2].join(&file))?;
        manifest.scenario.push(entry(format!("static/{file}"), "static", &g.params));
    }
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    write_file(&out_dir.join("scenarios.toml"), &text)?;
    info!(
        "wrote {} demos, {} tests, {} static runs under {}",
        demos.len(),
        tests.len(),
        statics.len(),
        out_dir.display()
    );
    Ok(SimulateSummary {
        demos: demos.len(),
        tests: tests.len(),
        statics: statics.len(),
    })
}

// ---------------------------------------------------------------- eval

/// Runs whose name starts with `static` form the static group; everything
/// else is a filter-driven run.
pub fn run_group(name: &str) -> &'static str {
    if name.starts_with(STATIC_GROUP) {
        STATIC_GROUP
    } else {
        BIP_GROUP
    }
}

/// Collects executed interactions from `run_dirs`, with their phase traces
/// where present.
pub fn collect_runs(run_dirs: &[PathBuf]) -> Result<Vec<RunInput>> {
    let mut runs = Vec::new();
    let mut seen = BTreeSet::new();
    for dir in run_dirs {
        for path in interaction_files(dir)? {
            let name = run_name(&path);
            if !seen.insert(name.clone()) {
                return Err(Error::Config(format!("run {name} appears twice")));
            }
            let interaction = load_interaction(&path)?;
            let trace_path = dir.join(format!("{name}{PHASE_SUFFIX}"));
            let trace = if trace_path.is_file() {
                let text = fs::read_to_string(&trace_path).map_err(|e| Error::Io {
                    path: trace_path.clone(),
                    source: e,
                })?;
                Some(parse_trace(&text, &trace_path)?)
            } else {
                None
            };
            runs.push(RunInput {
                group: run_group(&name).to_string(),
                name,
                interaction,
                trace,
            });
        }
    }
    Ok(runs)
}

pub fn eval(model_path: &Path, run_dirs: &[PathBuf], cfg: &RunConfig, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let model = Model::load(model_path)?;
    let runs = collect_runs(run_dirs)?;
    if runs.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    for r in &runs {
        if r.interaction.layout() != &model.prior.layout {
            return Err(Error::Layout(format!("run {}: layout does not match the model", r.name)));
        }
    }
    let report = build_report(&runs, &cfg.eval)?;
    create_dir(out_dir)?;
    write_file(&out_dir.join(REPORT_JSON), &report.to_json())?;
    write_file(&out_dir.join(REPORT_CSV), &report.to_csv())?;
    for g in &report.groups {
        if let Some(csv) = report.pearson_csv(&g.group) {
            write_file(&out_dir.join(format!("pearson_{}.csv", g.group)), &csv)?;
        }
    }
    info!("evaluated {} runs", runs.len());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_names_strip_suffixes() {
        assert_eq!(run_name(Path::new("a/test_fast_01.executed.txt")), "test_fast_01");
        assert_eq!(run_name(Path::new("static_03.txt")), "static_03");
        assert_eq!(run_group("static_03"), STATIC_GROUP);
        assert_eq!(run_group("test_fast_01"), BIP_GROUP);
    }

    #[test]
    fn trace_round_trips() {
        let trace = vec![
            PhaseSample { tick: 0, phase: 0.1, phase_vel: 1.0 / 3.0, var_phase: 1e-4, var_phase_vel: 2.5e-9 },
            PhaseSample { tick: 1, phase: 0.2, phase_vel: 0.0, var_phase: 0.0, var_phase_vel: 1e-300 },
        ];
        let text = format_trace(&trace);
        assert_eq!(parse_trace(&text, Path::new("x")).unwrap(), trace);
        assert!(parse_trace("tick,phase\n", Path::new("x")).is_err());
        assert!(parse_trace(&text.replace("0.2", "zz"), Path::new("x")).is_err());
    }
}
