use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.clips_per_class = 6
train.epochs = 1
train.batch_size = 8
probe.epochs = 1
probe.layers = Conv2C,Block3A
ablation.seeds = 0
viz.clips = 2
paths.data = data
paths.teacher = teacher/model.ckpt
paths.baseline = baseline/model.ckpt
paths.d3d = d3d/model.ckpt
";

fn d3d(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_d3d"))
        .current_dir(dir)
        .args(args)
        .arg("-q")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) {
    let out = d3d(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.kv"), TINY).unwrap();
    dir
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = setup();
    let p = dir.path();
    for (cmd, out) in [
        ("generate", "data"),
        ("train-teacher", "teacher"),
        ("train-baseline", "baseline"),
        ("train-d3d", "d3d"),
        ("eval", "eval"),
        ("probe-sweep", "sweep"),
        ("flow-viz", "viz"),
        ("ablation", "abl"),
    ] {
        ok(p, &[cmd, "--config", "tiny.kv", "--out", out]);
        assert!(p.join(out).join("config.kv").exists(), "{cmd}");
        if cmd != "generate" {
            assert!(p.join(out).join("summary.txt").exists(), "{cmd}");
        }
    }
    for f in ["teacher/model.ckpt", "d3d/train_log.csv", "d3d/loss.svg", "sweep/sweep.svg", "viz/grid.png"] {
        assert!(p.join(f).exists(), "{f}");
    }
    let table = fs::read_to_string(p.join("abl/ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 11);
    assert!(table.lines().nth(1).unwrap().starts_with("rgb_baseline,"));
    let sweep = fs::read_to_string(p.join("sweep/sweep_baseline.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 3 * 2);
}

#[test]
fn same_snapshot_reproduces_identical_outputs() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["generate", "--config", "tiny.kv", "--out", "data"]);
    ok(p, &["train-baseline", "--config", "tiny.kv", "--out", "a", "--set", "train.checkpoint_every=2"]);
    // The second run reads only the snapshot the first one wrote.
    ok(p, &["train-baseline", "--config", "a/config.kv", "--out", "b"]);
    for f in ["model.ckpt", "train_log.csv", "metrics.csv", "config.kv", "checkpoints/step_000002.ckpt"] {
        let (a, b) = (fs::read(p.join("a").join(f)).unwrap(), fs::read(p.join("b").join(f)).unwrap());
        assert!(a == b, "{f} differs");
    }
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = setup();
    let p = dir.path();
    let code = |args: &[&str]| d3d(p, args).status.code().unwrap();
    assert_eq!(code(&["train-baseline", "--config", "tiny.kv"]), 2, "missing --out");
    assert_eq!(code(&["generate", "--out", "x", "--set", "data.num_classes=zero"]), 2);
    assert_eq!(code(&["generate", "--out", "x", "--set", "no_equals_sign"]), 2);
    assert_eq!(code(&["no-such-command", "--out", "x"]), 2);
    assert_eq!(code(&["train-baseline", "--config", "tiny.kv", "--out", "x"]), 3, "no dataset yet");
    assert_eq!(code(&["eval", "--config", "missing.kv", "--out", "x"]), 3);
    ok(p, &["generate", "--config", "tiny.kv", "--out", "data"]);
    assert_eq!(code(&["train-d3d", "--config", "tiny.kv", "--out", "x"]), 3, "no teacher yet");
}

#[test]
fn seed_flag_sets_training_seeds_but_not_the_dataset() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["generate", "--config", "tiny.kv", "--out", "data", "--seed", "7"]);
    let snap = fs::read_to_string(p.join("data/config.kv")).unwrap();
    let has = |kv: String| snap.lines().any(|l| l.replace(' ', "") == kv);
    for key in ["seed", "train.seed", "probe.seed"] {
        assert!(has(format!("{key}=7")), "{key} in\n{snap}");
    }
    assert!(has("data.seed=0".into()));
}
