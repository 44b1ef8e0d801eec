use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cmpese::diagnostics::{read_inner_images, AttentionStats, INNER_IMAGE_FILE, STATS_FILE};

fn cmpese(args: &[&str]) -> Output {
    cmd(args, None)
}

fn cmd(args: &[&str], seed: Option<&str>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_cmpese"));
    c.args(args).env_remove("CMPESE_SEED");
    if let Some(s) = seed {
        c.env("CMPESE_SEED", s);
    }
    c.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn param_count_compares_against_published_size() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("net.toml");
    fs::write(
        &spec,
        "family = \"preact-resnet\"\ndepth = 164\n[attention]\nmode = \"double-fc\"\n",
    )
    .unwrap();
    let out = cmpese(&["param-count", s(&spec)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let count: f64 = text
        .split_whitespace()
        .find_map(|w| w.parse::<u64>().ok())
        .expect("count printed") as f64;
    assert!((count / 2.12e6 - 1.0).abs() < 0.02, "{text}");
    assert!(text.contains("reference: 2.12M"), "{text}");
}

#[test]
fn gradcheck_single_mode_passes() {
    let out = cmpese(&["gradcheck", "--mode", "folded3x3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let err: f64 = text.split_whitespace().nth(4).unwrap().parse().unwrap();
    assert!(err < 1e-4, "{text}");
}

#[test]
fn usage_errors_exit_with_two() {
    for args in [
        vec!["frobnicate"],
        vec!["gradcheck", "--bogus"],
        vec!["gradcheck", "--mode", "spatial"],
        vec!["eval", "only-one"],
    ] {
        let out = cmpese(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", stderr(&out));
        assert!(stderr(&out).contains("--help"), "{args:?}");
    }
}

#[test]
fn missing_checkpoint_is_reported_by_path() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("absent.bin");
    let out = cmpese(&["eval", s(&ckpt), "data.bin"]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
    assert!(stderr(&out).contains(s(&ckpt)), "{}", stderr(&out));
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn workspace(mode: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(
        root.join("synth.toml"),
        "class_count = 2\nn_per_class = 12\nseed = 5\nimage_size = 8\ntest_per_class = 4\noutput = \"data\"\n",
    )
    .unwrap();
    let config = format!(
        r#"preset = "wrn-cifar"
epochs = 2
batch_size = 8
base_lr = 0.05
schedule = [[1, 10.0]]
timing = false
output = "run"

[network]
family = "wrn"
depth = 10
widen_factor = 1
num_classes = 2
input_size = 8

[network.attention]
mode = "{mode}"
t = 4

[data]
source = "binary"
train = "data/train.bin"
test = "data/test.bin"
class_count = 2
image_size = 8
augment = true
"#
    );
    fs::write(root.join("train.toml"), config).unwrap();
    let out = cmpese(&["synth-data", s(&root.join("synth.toml"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(root.join("data/train.bin").exists() && root.join("data/test.bin").exists());
    Workspace { _dir: dir, root }
}

#[test]
fn train_eval_and_export_end_to_end() {
    let ws = workspace("folded3x3");
    let out = cmpese(&["train", s(&ws.root.join("train.toml"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        stdout(&out).matches("epoch ").count(),
        2,
        "{}",
        stdout(&out)
    );
    let run = ws.root.join("run");
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = run.join("checkpoint.bin");
    let out = cmpese(&["eval", s(&ckpt), s(&ws.root.join("data/test.bin"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    let err: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("top-1 error: "))
        .and_then(|v| v.trim_end_matches('%').parse().ok())
        .unwrap();
    // the log's last evaluation used the same split
    let last = metrics
        .lines()
        .last()
        .unwrap()
        .split(',')
        .nth(4)
        .unwrap()
        .parse::<f64>()
        .unwrap();
    assert!((err - last).abs() < 1e-9, "{err} vs {last}");

    let outdir = ws.root.join("attention");
    let out = cmpese(&[
        "export-attention",
        s(&ckpt),
        s(&ws.root.join("data/test.bin")),
        s(&outdir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let st = AttentionStats::read_csv(&outdir.join(STATS_FILE)).unwrap();
    assert_eq!(st.blocks.len(), 3);
    let rows = read_inner_images(&outdir.join(INNER_IMAGE_FILE)).unwrap();
    // three blocks, four probe samples, before and after
    assert_eq!(rows.len(), 3 * 4 * 2);
}

#[test]
fn rerun_resumes_and_seed_variable_overrides() {
    let ws = workspace("se");
    let config = ws.root.join("train.toml");
    let first = cmpese(&["train", s(&config)]);
    assert!(first.status.success(), "{}", stderr(&first));
    let log = fs::read(ws.root.join("run/metrics.csv")).unwrap();

    let again = cmpese(&["train", s(&config)]);
    assert!(again.status.success(), "{}", stderr(&again));
    assert!(stdout(&again).contains("resuming"), "{}", stdout(&again));
    assert_eq!(stdout(&again).matches("epoch ").count(), 1);
    assert_eq!(fs::read(ws.root.join("run/metrics.csv")).unwrap(), log);

    // a different seed changes the config, so the old checkpoint is refused
    let reseeded = cmd(&["train", s(&config)], Some("77"));
    assert!(!reseeded.status.success());
    assert!(
        stderr(&reseeded).contains("different configuration"),
        "{}",
        stderr(&reseeded)
    );

    fs::remove_dir_all(ws.root.join("run")).unwrap();
    let out = cmd(&["train", s(&config)], Some("77"));
    assert!(out.status.success(), "{}", stderr(&out));
    assert_ne!(fs::read(ws.root.join("run/metrics.csv")).unwrap(), log);

    let bad = cmd(&["train", s(&config)], Some("seven"));
    assert!(stderr(&bad).contains("CMPESE_SEED"), "{}", stderr(&bad));
}

#[test]
fn export_rejects_networks_without_attention() {
    let ws = workspace("none");
    let out = cmpese(&["train", s(&ws.root.join("train.toml"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let out = cmpese(&[
        "export-attention",
        s(&ws.root.join("run/checkpoint.bin")),
        s(&ws.root.join("data/test.bin")),
        s(&ws.root.join("attn")),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("none"), "{}", stderr(&out));
}
