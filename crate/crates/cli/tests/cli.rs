use std::path::Path;
use std::process::Command;

fn cosmicq(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_cosmicq")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let out = cosmicq(&["show-config"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let text = text
        .replace("sample_count = 1000000", "sample_count = 20000")
        .replace("entries = 8", "entries = 2")
        .replace("bursts = 5000", "bursts = 100");
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "no_such_field = 1\n").unwrap();
    let out = cosmicq(&["--config", p.to_str().unwrap(), "sample-muons"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(cosmicq(&["--stages", "nope"]).status.code(), Some(2));
}

#[test]
fn missing_upstream_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = cosmicq(&["--out", dir.path().to_str().unwrap(), "detect"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulate"));
}

#[test]
fn rate_algebra_query() {
    let dir = tempfile::tempdir().unwrap();
    let q = dir.path().join("q.txt");
    std::fs::write(&q, "labels A B\nlambda A 1e-3\nlambda AB 2e-4\neff A 0.9\neff B 0.8\ntarget AB\norder 2\n").unwrap();
    let out = cosmicq(&["rate-algebra", q.to_str().unwrap()]);
    assert!(out.status.success());
    let s = String::from_utf8(out.stdout).unwrap();
    assert!(s.contains("probability = "));
    assert!(s.contains("AB*"));
}

#[test]
fn stages_flag_and_reruns_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("out");
    let args = [
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seed",
        "7",
        "--threads",
        "1",
        "--stages",
        "sample,transport,xsection",
    ];
    assert!(cosmicq(&args).status.success());
    let a = std::fs::read(out_dir.join("xsections.txt")).unwrap();
    assert!(String::from_utf8_lossy(&a).contains("seed=7"));
    assert!(cosmicq(&args).status.success());
    assert_eq!(a, std::fs::read(out_dir.join("xsections.txt")).unwrap());
}
