//! Loads the freshly built extension into Python and runs the smoke script.

use std::path::PathBuf;
use std::process::Command;

fn built_extension() -> PathBuf {
    // target/<profile>/deps/<test> -> target/<profile>/
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    ["libbipkit_py.so", "libbipkit_py.dylib", "bipkit_py.dll"]
        .iter()
        .map(|n| profile_dir.join(n))
        .find(|p| p.exists())
        .expect("cdylib next to the test binary")
}

#[test]
fn python_smoke_script_passes() {
    let ext = built_extension();
    let dir = tempfile::TempDir::new().unwrap();
    let name = if ext.extension().is_some_and(|e| e == "dll") { "bipkit_py.pyd" } else { "bipkit_py.so" };
    std::fs::copy(&ext, dir.path().join(name)).unwrap();
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../python/smoke_test.py");
    let out = Command::new("python3")
        .arg(&script)
        .env("PYTHONPATH", dir.path())
        .current_dir(dir.path())
        .output()
        .expect("python3 on PATH");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "smoke script failed\nstdout:\n{stdout}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("python smoke test passed"));
}
