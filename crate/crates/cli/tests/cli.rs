use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn steerlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steerlab"))
        .args(args)
        .current_dir(cwd)
        .env_remove("STEERLAB_SEED")
        .output()
        .expect("run steerlab")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn manifest(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Settings for a model small enough to train in well under a second.
const SMALL: &[&str] = &["--layers", "1", "--width", "8", "--heads", "2", "--context-len", "96", "--sft-epochs", "1"];

#[test]
fn no_arguments_prints_usage_and_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(&[], dir.path());
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    let help = steerlab(&["--help"], dir.path());
    assert_eq!(code(&help), 0);
}

#[test]
fn defaults_lists_every_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = steerlab(&["defaults"], dir.path());
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    for key in ["seed = 0", "rl_lr = ", "kl_ceiling = ", "gains = 1,2,3,4"] {
        assert!(text.contains(key), "{key}");
    }
}

#[test]
fn synth_is_deterministic_and_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = steerlab(&["synth", "--seed", "7", "--n", "200", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("manifest:"));
    }
    let a = manifest(&dir.path().join("a/run-manifest.json"));
    let b = manifest(&dir.path().join("b/run-manifest.json"));
    assert_eq!(a["command"], "synth");
    assert_eq!(a["outputs"], b["outputs"]);
    for file in ["ideas.jsonl", "papers.jsonl", "scores.jsonl", "manifest.json"] {
        assert_eq!(
            std::fs::read(dir.path().join("a").join(file)).unwrap(),
            std::fs::read(dir.path().join("b").join(file)).unwrap()
        );
    }
    let other = steerlab(&["synth", "--seed", "8", "--n", "200", "--out", "c"], dir.path());
    assert_eq!(code(&other), 0);
    assert_ne!(manifest(&dir.path().join("c/run-manifest.json"))["outputs"], a["outputs"]);
}

#[test]
fn seed_precedence_is_file_then_environment_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.conf"), "seed = 3\nn = 20\n").unwrap();
    let run = |env: Option<&str>, extra: &[&str], out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_steerlab"));
        c.args(["synth", "--config", "run.conf", "--out", out]).args(extra).current_dir(dir.path());
        match env {
            Some(v) => c.env("STEERLAB_SEED", v),
            None => c.env_remove("STEERLAB_SEED"),
        };
        let o = c.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let m = manifest(&dir.path().join(out).join("run-manifest.json"));
        let cfg = m["config"].as_str().unwrap().to_string();
        assert!(cfg.contains("n = 20\n"));
        cfg.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    assert_eq!(run(None, &[], "f"), "seed = 3");
    assert_eq!(run(Some("11"), &[], "e"), "seed = 11");
    assert_eq!(run(Some("11"), &["--seed", "5"], "g"), "seed = 5");

    let mut bad = Command::new(env!("CARGO_BIN_EXE_steerlab"));
    let o = bad
        .args(["synth", "--out", "h"])
        .env("STEERLAB_SEED", "twelve")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn exit_codes_distinguish_usage_data_and_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = steerlab(&["synth", "--no-such-key", "1", "--out", "x"], dir.path());
    assert_eq!(code(&unknown), 1);
    let required = steerlab(&["sft", "--out", "x"], dir.path());
    assert_eq!(code(&required), 1);
    std::fs::write(dir.path().join("bad.conf"), "foo = 1\n").unwrap();
    let bad_file = steerlab(&["synth", "--config", "bad.conf", "--out", "x"], dir.path());
    assert_eq!(code(&bad_file), 1);
    assert!(String::from_utf8_lossy(&bad_file.stderr).contains("bad.conf:1"));
    let missing = steerlab(&["sft", "--corpus", "nowhere", "--out", "x"], dir.path());
    assert_eq!(code(&missing), 2);

    assert_eq!(code(&steerlab(&["synth", "--n", "40", "--out", "corpus"], dir.path())), 0);
    let mut args = vec!["sft", "--corpus", "corpus", "--out", "sft", "--sft-lr", "1e200", "--sft-clip", "1e300"];
    args.extend_from_slice(SMALL);
    let diverged = steerlab(&args, dir.path());
    assert_eq!(code(&diverged), 3, "{}", String::from_utf8_lossy(&diverged.stderr));
}

#[test]
fn rerunning_a_manifest_reproduces_every_output() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&steerlab(&["synth", "--n", "40", "--out", "corpus"], dir.path())), 0);
    let mut args = vec!["sft", "--corpus", "corpus", "--out", "sft"];
    args.extend_from_slice(SMALL);
    let first = steerlab(&args, dir.path());
    assert_eq!(code(&first), 0, "{}", String::from_utf8_lossy(&first.stderr));
    let m1 = manifest(&dir.path().join("sft/run-manifest.json"));
    assert!(dir.path().join("sft/sft.ckpt").exists());

    std::fs::rename(dir.path().join("sft"), dir.path().join("sft-first")).unwrap();
    let again = steerlab(&["sft", "--config", "sft-first/run-manifest.json"], dir.path());
    assert_eq!(code(&again), 0, "{}", String::from_utf8_lossy(&again.stderr));
    let m2 = manifest(&dir.path().join("sft/run-manifest.json"));
    assert_eq!(m1, m2);
    for name in m1["outputs"].as_object().unwrap().keys() {
        assert_eq!(
            std::fs::read(dir.path().join("sft-first").join(name)).unwrap(),
            std::fs::read(dir.path().join("sft").join(name)).unwrap(),
            "{name}"
        );
    }
}
