use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn bipkit(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bipkit"))
        .args(args)
        .current_dir(cwd)
        .env_remove("BIPKIT_LOG")
        .output()
        .expect("binary runs")
}

fn ok(cwd: &Path, args: &[&str]) -> String {
    let out = bipkit(cwd, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Hash of every file under `dir`, keyed by relative path.
fn tree_hash(dir: &Path) -> String {
    fn walk(base: &Path, dir: &Path, files: &mut Vec<PathBuf>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(base, &p, files);
            } else {
                files.push(p.strip_prefix(base).unwrap().to_path_buf());
            }
        }
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(dir.join(&f)).unwrap());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(
        &path,
        "seed = 11\n[scenario]\ntests_per_speed = 2\npause_tests = 1\nstatic_runs = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_tagged_files_deterministically() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path().join("cwd");
    fs::create_dir(&cwd).unwrap();
    let cfg = small_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&cwd, &["simulate", "--config", s(&cfg), "--out", s(&a)]);
    ok(&cwd, &["simulate", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(tree_hash(&a), tree_hash(&b));
    assert_eq!(fs::read_dir(a.join("demos")).unwrap().count(), 36);
    for tag in ["slow", "normal", "fast", "none"] {
        assert!(a.join("tests").join(format!("test_{tag}_01.txt")).is_file(), "{tag}");
    }
    assert!(fs::read_to_string(a.join("static/static_00.txt")).unwrap().lines().next().unwrap().contains("executed=true"));
    assert_eq!(fs::read_dir(&cwd).unwrap().count(), 0, "nothing written to the working directory");

    let c = tmp.path().join("c");
    ok(&cwd, &["simulate", "--config", s(&cfg), "--seed", "12", "--out", s(&c)]);
    assert_ne!(tree_hash(&a), tree_hash(&c));
}

#[test]
fn full_pipeline_reruns_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let cwd = tmp.path().join("cwd");
    fs::create_dir(&cwd).unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    ok(&cwd, &["simulate", "--config", s(&cfg), "--out", s(&sim)]);

    let mut hashes = Vec::new();
    for run in ["r1", "r2"] {
        let root = tmp.path().join(run);
        let model_dir = root.join("model");
        let stdout = ok(&cwd, &["train", s(&sim.join("demos")), "--config", s(&cfg), "--out", s(&model_dir)]);
        assert!(stdout.contains("demonstrations: 36"), "{stdout}");
        assert!(stdout.contains("latent weights: 120"), "{stdout}");
        let model = model_dir.join("model.json");
        let runs = root.join("runs");
        ok(&cwd, &["infer", s(&model), s(&sim.join("tests")), "--config", s(&cfg), "--out", s(&runs)]);
        assert!(runs.join("test_fast_00.phase.csv").is_file());
        assert!(runs.join("test_fast_00.executed.txt").is_file());
        let report = root.join("report");
        let stdout = ok(
            &cwd,
            &["eval", s(&model), s(&runs), s(&sim.join("static")), "--config", s(&cfg), "--out", s(&report)],
        );
        assert!(stdout.contains("mann_whitney_ttc:bip:static"), "{stdout}");
        for f in ["report.json", "report.csv", "pearson_bip.csv", "pearson_static.csv"] {
            assert!(report.join(f).is_file(), "{f}");
        }
        hashes.push([tree_hash(&model_dir), tree_hash(&runs), tree_hash(&report)]);
    }
    assert_eq!(hashes[0], hashes[1]);
    assert_eq!(fs::read_dir(&cwd).unwrap().count(), 0);
}

#[test]
fn replayed_demo_and_still_partner_end_where_expected() {
    let tmp = TempDir::new().unwrap();
    let cfg = small_config(tmp.path());
    let sim = tmp.path().join("sim");
    ok(tmp.path(), &["simulate", "--config", s(&cfg), "--out", s(&sim)]);
    let model_dir = tmp.path().join("m");
    ok(tmp.path(), &["train", s(&sim.join("demos")), "--out", s(&model_dir)]);
    let model = model_dir.join("model.json");
    let runs = tmp.path().join("runs");
    ok(
        tmp.path(),
        &["infer", s(&model), s(&sim.join("demos/demo_00_0.txt")), s(&sim.join("tests/test_none_00.txt")), "--out", s(&runs)],
    );
    let last = |name: &str| -> Vec<f64> {
        let text = fs::read_to_string(runs.join(format!("{name}.phase.csv"))).unwrap();
        text.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect()
    };
    let demo = last("demo_00_0");
    assert!((0.95..=1.05).contains(&demo[1]), "replayed demo ended at {}", demo[1]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&model).unwrap()).unwrap();
    let phase_vel0 = doc["phase_vel0"].as_f64().unwrap();
    let still = last("test_none_00");
    assert!(still[1] < 0.3, "still partner phase {}", still[1]);
    assert!(still[2] < 0.1 * phase_vel0, "still partner velocity {}", still[2]);
}

#[test]
fn exit_codes_follow_error_kind() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let out = p.join("out");

    assert_eq!(code(&bipkit(p, &["--help"])), 0);
    assert_eq!(code(&bipkit(p, &["--version"])), 0);
    assert_eq!(code(&bipkit(p, &["train"])), 1);
    assert_eq!(code(&bipkit(p, &["simulate", "--bogus", "--out", s(&out)])), 1);
    assert_eq!(code(&bipkit(p, &["simulate"])), 1, "missing --out");
    assert_eq!(code(&bipkit(p, &["simulate", "--rates", "30,7,10", "--out", s(&out)])), 1);
    assert_eq!(code(&bipkit(p, &["simulate", "--basis", "1", "--out", s(&out)])), 1);
    let bad_cfg = p.join("bad.toml");
    fs::write(&bad_cfg, "[scenario]\nobserved = \"three\"\n").unwrap();
    assert_eq!(code(&bipkit(p, &["simulate", "--config", s(&bad_cfg), "--out", s(&out)])), 1);
    assert_eq!(code(&bipkit(p, &["simulate", "--config", s(&p.join("missing.toml")), "--out", s(&out)])), 1);

    assert_eq!(code(&bipkit(p, &["train", s(&p.join("nope")), "--out", s(&out)])), 2);
    let empty = p.join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(code(&bipkit(p, &["train", s(&empty), "--out", s(&out)])), 2);
    assert_eq!(code(&bipkit(p, &["eval", "m.json", s(&empty), "--out", s(&out)])), 2);
    assert!(!out.exists(), "failed commands write nothing");
}

#[test]
fn nonconforming_demos_are_listed_individually() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let sim = p.join("sim");
    ok(p, &["simulate", "--out", s(&sim)]);
    let demos = sim.join("demos");
    fs::write(demos.join("demo_zz_bad.txt"), "3 5 4 30\n1 2 3\n").unwrap();
    let names = "hand_x,hand_y,hand_z,act0,act1,act2,act3,act4\nm,m,m,mPa,mPa,mPa,mPa,mPa\n";
    fs::write(demos.join("demo_zz_short.txt"), format!("3 5 3 30\n{names}{}", "0,0,0,0,0,0,0,0\n".repeat(3))).unwrap();
    fs::write(demos.join("demo_zz_layout.txt"), format!("2 1 20 30\na,b,c\nm,m,m\n{}", "0,0,0\n".repeat(20))).unwrap();
    let out = bipkit(p, &["train", s(&demos), "--out", s(&p.join("m"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["demo_zz_bad.txt", "demo_zz_short.txt", "demo_zz_layout.txt"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
    assert!(err.contains("3 nonconforming"), "{err}");
}

#[test]
fn single_demo_is_insufficient() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let sim = p.join("sim");
    ok(p, &["simulate", "--out", s(&sim)]);
    let one = p.join("one");
    fs::create_dir(&one).unwrap();
    fs::copy(sim.join("demos/demo_00_0.txt"), one.join("demo.txt")).unwrap();
    let out = bipkit(p, &["train", s(&one), "--out", s(&p.join("m"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient"));
}

#[test]
fn overflowing_model_is_a_numerical_failure() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let sim = p.join("sim");
    ok(p, &["simulate", "--out", s(&sim)]);
    ok(p, &["train", s(&sim.join("demos")), "--out", s(&p.join("m"))]);
    let text = fs::read_to_string(p.join("m/model.json")).unwrap();
    // Blow up every weight variance.
    let start = text.find("\"sigma0\":").unwrap();
    let (head, tail) = text.split_at(start);
    let mut rows: Vec<String> = Vec::new();
    let body = tail.trim_start_matches("\"sigma0\":[[").trim_end().trim_end_matches("]]}");
    for (i, row) in body.split("],[").enumerate() {
        let mut vals: Vec<String> = row.split(',').map(str::to_string).collect();
        if i >= 2 {
            vals[i] = "1e300".into();
        }
        rows.push(vals.join(","));
    }
    let bad = format!("{head}\"sigma0\":[[{}]]}}\n", rows.join("],["));
    let bad_path = p.join("bad.json");
    fs::write(&bad_path, bad).unwrap();
    let out = bipkit(p, &["infer", s(&bad_path), s(&sim.join("tests/test_normal_00.txt")), "--out", s(&p.join("r"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn layout_mismatch_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let sim = p.join("sim");
    ok(p, &["simulate", "--out", s(&sim)]);
    ok(p, &["train", s(&sim.join("demos")), "--out", s(&p.join("m"))]);
    let other = p.join("other.toml");
    fs::write(&other, "[scenario]\ncontrolled = 2\ntests_per_speed = 1\npause_tests = 0\nstatic_runs = 0\n").unwrap();
    let sim2 = p.join("sim2");
    ok(p, &["simulate", "--config", s(&other), "--out", s(&sim2)]);
    let out = bipkit(p, &["infer", s(&p.join("m/model.json")), s(&sim2.join("tests/test_fast_00.txt")), "--out", s(&p.join("r"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn log_level_comes_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let p = tmp.path();
    let out = Command::new(env!("CARGO_BIN_EXE_bipkit"))
        .args(["simulate", "--out", s(&p.join("sim"))])
        .current_dir(p)
        .env("BIPKIT_LOG", "info")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("INFO"));
    let quiet = bipkit(p, &["simulate", "--out", s(&p.join("sim2"))]);
    assert!(!String::from_utf8_lossy(&quiet.stderr).contains("INFO"));
}
