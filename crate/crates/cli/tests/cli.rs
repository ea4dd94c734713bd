use std::path::Path;
use std::process::{Command, Output};

use posediff::config::RunConfig;

const CONFIG: &str = r#"seed = 2
output_dir = "run"

[data]
dir = "data"
n_scenes = 6

[denoiser]
width = 16
layers = 1
heads = 2
ff_width = 32
time_dim = 8

[train]
steps = 20
batch_size = 4
"#;

fn posediff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_posediff"))
        .current_dir(dir)
        .env_remove("POSEDIFF_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = posediff(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn prepared() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.toml"), CONFIG).unwrap();
    ok(dir.path(), &["-c", "cfg.toml", "synth"]);
    ok(dir.path(), &["-c", "cfg.toml", "train"]);
    dir
}

fn trace(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn guidance_only_touches_the_last_steps_of_the_trace() {
    let dir = prepared();
    let d = dir.path();
    ok(d, &["-c", "cfg.toml", "sample", "--checkpoint", "run/checkpoint.json", "--out", "g"]);
    ok(d, &["-c", "cfg.toml", "--no-ggs", "sample", "--checkpoint", "run/checkpoint.json", "--out", "u"]);
    let name = std::fs::read_dir(d.join("g/traces")).unwrap().next().unwrap().unwrap().file_name();
    let g = trace(&d.join("g/traces").join(&name));
    let u = trace(&d.join("u/traces").join(&name));
    assert_eq!(g.len(), 100);
    for (a, b) in g.iter().zip(&u) {
        let t: usize = a[0].parse().unwrap();
        if t > 10 {
            assert_eq!(a, b, "step {t} differs");
        } else {
            assert_eq!(a[3], "1");
            assert_eq!(b[3], "0");
        }
    }
    assert_ne!(g.last(), u.last());
}

#[test]
fn eval_of_ground_truth_is_perfect() {
    let dir = prepared();
    let d = dir.path();
    let scene = std::fs::read_dir(d.join("data/scenes")).unwrap().next().unwrap().unwrap().path();
    let record: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scene).unwrap()).unwrap();
    let cams = serde_json::json!({ "cameras": record["cameras"] });
    std::fs::write(d.join("gt.json"), cams.to_string()).unwrap();
    ok(d, &["eval", "--pred", "gt.json", "--gt", "gt.json", "--out", "e"]);
    let csv = std::fs::read_to_string(d.join("e/report.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",1"), "{line}");
    }
}

#[test]
fn effective_config_is_echoed_with_overrides() {
    let dir = prepared();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_posediff"))
        .current_dir(d)
        .env("POSEDIFF_SEED", "77")
        .env("RUST_LOG", "warn")
        .args(["-c", "cfg.toml", "--ggs-iters", "7", "synth", "--out", "d2"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let echoed = RunConfig::load(&d.join("d2/config.toml")).unwrap();
    assert_eq!(echoed.seed, 77);
    assert_eq!(echoed.train.seed, 77);
    assert_eq!(echoed.guidance.ggs_iters, 7);
    assert_eq!(echoed.denoiser.width, 16);
}

#[test]
fn failures_map_to_exit_codes_with_structured_messages() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let check = |args: &[&str], code: i32, kind: &str| {
        let out = posediff(d, args);
        assert_eq!(out.status.code(), Some(code), "{args:?}");
        let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["error"]["kind"], kind);
        assert_eq!(err["error"]["code"], code);
    };
    check(&["-c", "missing.toml", "synth"], 2, "config");
    check(&["--ggs-alpha", "-1", "synth"], 2, "config");
    std::fs::write(d.join("bad.toml"), "[guidance]\nalfa = 1\n").unwrap();
    check(&["-c", "bad.toml", "synth"], 2, "config");
    check(&["eval", "--pred", "nowhere", "--gt", "nothing"], 3, "data");
    check(&["sample", "--checkpoint", "none.json"], 3, "data");
    std::fs::write(d.join("x.toml"), CONFIG).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_posediff"))
        .current_dir(d)
        .env("POSEDIFF_SEED", "abc")
        .args(["-c", "x.toml", "synth"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
