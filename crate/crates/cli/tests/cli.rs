use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
episodes = 6
[codecs]
codebook_size = 16
action_vocab = 160
[model]
d_model = 16
n_layers = 1
n_heads = 2
d_ff = 32
[posttrain]
steps = 4
batch_size = 2
[finetune]
steps = 4
batch_size = 2
[eval]
episodes = 3
"#;

fn tokvla(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokvla"))
        .current_dir(dir)
        .env_remove("UNIVLA_RUN_DIR")
        .args(args)
        .output()
        .expect("spawn tokvla")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tokvla(dir, args);
    let err = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed: {err}");
    err
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn pipeline_is_idempotent_and_guarded() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    let c = ["--config", "tiny.toml"];
    let with = |rest: &[&'static str]| -> Vec<&str> { c.iter().copied().chain(rest.iter().copied()).collect() };

    ok(d, &with(&["make-data", "--out", "data"]));
    assert!(d.join("data/manifest.tsv").exists() && d.join("data/run.json").exists());
    let again = ok(d, &with(&["make-data", "--out", "data"]));
    assert!(again.contains("up to date"), "{again}");

    ok(d, &with(&["fit-codecs", "--dataset", "data", "--out", "codecs"]));
    ok(d, &with(&["posttrain", "--dataset", "data", "--codecs", "codecs", "--strategy", "world_model", "--out", "wm"]));
    assert!(d.join("wm/stage1.ckpt").exists() && d.join("wm/loss.png").exists());
    ok(
        d,
        &with(&[
            "finetune",
            "--dataset",
            "data",
            "--codecs",
            "codecs",
            "--init",
            "wm/stage1.ckpt",
            "--data-fraction",
            "0.5",
            "--out",
            "ft",
        ]),
    );
    assert_eq!(fs::read_to_string(d.join("ft/subset.txt")).unwrap().lines().count(), 3);
    let metrics = fs::read_to_string(d.join("ft/metrics.tsv")).unwrap();
    assert_eq!(metrics.lines().count(), 5, "header plus one line per step");

    ok(d, &with(&["eval", "--checkpoint", "ft/final.ckpt", "--codecs", "codecs", "--dataset", "data", "--out", "ev1"]));
    ok(d, &with(&["eval", "--checkpoint", "ft/final.ckpt", "--codecs", "codecs", "--dataset", "data", "--out", "ev2"]));
    assert_eq!(fs::read(d.join("ev1/report.tsv")).unwrap(), fs::read(d.join("ev2/report.tsv")).unwrap());
    assert_eq!(fs::read_to_string(d.join("ev1/report.tsv")).unwrap().lines().count(), 4);

    let changed = tokvla(d, &with(&["make-data", "--seed", "8", "--out", "data"]));
    assert_eq!(code(&changed), 3, "different settings into a finished run are refused");

    fs::write(d.join("codecs/actions.tok"), "garbage").unwrap();
    let corrupt = tokvla(d, &with(&["eval", "--checkpoint", "ft/final.ckpt", "--codecs", "codecs", "--out", "ev3"]));
    assert_eq!(code(&corrupt), 3, "{}", String::from_utf8_lossy(&corrupt.stderr));
    assert!(String::from_utf8_lossy(&corrupt.stderr).contains("actions.tok"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("tiny.toml"), TINY).unwrap();
    assert_eq!(code(&tokvla(d, &["bogus"])), 2);
    assert_eq!(code(&tokvla(d, &["--set", "finetune.stepz=1", "make-data", "--out", "x"])), 2);
    assert_eq!(code(&tokvla(d, &["ablate", "--arms", "none,bogus", "--out", "x"])), 2);
    let missing = tokvla(d, &["fit-codecs", "--dataset", "nowhere", "--out", "c"]);
    assert_eq!(code(&missing), 3);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nowhere"));

    ok(d, &["--config", "tiny.toml", "make-data", "--out", "data"]);
    ok(d, &["--config", "tiny.toml", "fit-codecs", "--dataset", "data", "--out", "codecs"]);
    let diverge = tokvla(
        d,
        &[
            "--config",
            "tiny.toml",
            "--set",
            "finetune.lr0=1e308",
            "finetune",
            "--dataset",
            "data",
            "--codecs",
            "codecs",
            "--out",
            "ft",
        ],
    );
    assert_eq!(code(&diverge), 4, "{}", String::from_utf8_lossy(&diverge.stderr));
}

#[test]
fn run_dir_env_sets_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("root");
    let out = Command::new(env!("CARGO_BIN_EXE_tokvla"))
        .current_dir(tmp.path())
        .env("UNIVLA_RUN_DIR", &root)
        .args(["--set", "data.episodes=2", "make-data", "--out", "data"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("data/manifest.tsv").exists());
    assert!(!tmp.path().join("data").exists());
}
