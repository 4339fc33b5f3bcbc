use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[data]
num_classes = 4
n_max = 60
imbalance = 10.0
dim = 6
test_per_class = 20

[model]
encoder_widths = [16]
embedding_dim = 8

[bank]
queue_capacity = 64

[optim]
batch_size = 32
epochs = 3
warmup_epochs = 1
"#;

fn lll(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lll"))
        .args(args)
        .current_dir(dir)
        .env_remove("LLL_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn gradcheck_passes_and_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = lll(&["gradcheck", "--trials", "2"], dir.path());
    assert_eq!(ok.status.code(), Some(0), "{}", stdout(&ok));
    assert!(stdout(&ok).contains("chain/ncibl"));

    let bad = lll(&["gradcheck", "--trials", "2", "--inject-fault"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("failed: "));

    let none = lll(&["gradcheck", "--trials", "0"], dir.path());
    assert_eq!(none.status.code(), Some(0));
    assert!(stdout(&none).contains("warning"));

    let one = lll(&["gradcheck", "--trials", "1", "--loss", "paco"], dir.path());
    assert_eq!(one.status.code(), Some(0));
    assert!(!stdout(&one).contains("supcon"));
}

#[test]
fn train_emits_report_and_table() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = lll(&["train", "--config", "c.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    for col in ["Many", "Medium", "Few", "All"] {
        assert!(out.contains(col));
    }
    for f in ["epochs.csv", "per_class.csv", "summary.json", "gap.svg"] {
        assert!(dir.path().join("run").join(f).exists(), "{f}");
    }

    let before = fs::read(dir.path().join("run/summary.json")).unwrap();
    fs::remove_file(dir.path().join("run/summary.json")).unwrap();
    let r = lll(&["report", "--log", "run"], dir.path());
    assert_eq!(r.status.code(), Some(0), "{}", stderr(&r));
    assert_eq!(fs::read(dir.path().join("run/summary.json")).unwrap(), before);
}

#[test]
fn default_output_goes_under_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let o = lll(&["train", "--config", "c.toml"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs: Vec<_> = fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    let run = |args: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_lll"));
        cmd.args(args).current_dir(dir.path()).env_remove("LLL_SEED");
        if let Some(v) = env {
            cmd.env("LLL_SEED", v);
        }
        let o = cmd.output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        stdout(&o)
    };
    let env_only = run(&["train", "--config", "c.toml", "--dry-run"], Some("11"));
    assert!(env_only.contains("seed = 11"));
    let both = run(&["train", "--config", "c.toml", "--dry-run", "--seed", "5"], Some("11"));
    assert!(both.contains("seed = 5"));
    let neither = run(&["train", "--config", "c.toml", "--dry-run"], None);
    assert!(neither.contains("seed = 0"));
    assert!(neither.contains("# train counts: [60, 28, 13, 6]"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn config_problems_exit_1_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let missing = lll(&["train", "--config", "nowhere.toml"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    assert!(stderr(&missing).contains("nowhere.toml"));

    fs::write(dir.path().join("bad.toml"), "[loss]\nkind = \"cibl\"\ntau = \"hot\"\n").unwrap();
    let bad = lll(&["train", "--config", "bad.toml"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("bad.toml:3"), "{}", stderr(&bad));

    let usage = lll(&["train"], dir.path());
    assert_eq!(usage.status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = TINY.replace("warmup_epochs = 1", "warmup_epochs = 0\nbase_lr = 1e30");
    fs::write(dir.path().join("c.toml"), text).unwrap();
    let o = lll(&["train", "--config", "c.toml", "--out", "run"], dir.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn single_cell_sweep_matches_train() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), TINY).unwrap();
    fs::write(
        dir.path().join("s.toml"),
        "base_config = \"c.toml\"\nparameter = \"loss.lambda_scl\"\nvalues = [0.05]\nseeds = [0]\noutput_dir = \"sweep\"\n",
    )
    .unwrap();
    let s = lll(&["sweep", "--spec", "s.toml", "--jobs", "2"], dir.path());
    assert_eq!(s.status.code(), Some(0), "{}", stderr(&s));
    let t = lll(&["train", "--config", "c.toml", "--out", "single"], dir.path());
    assert_eq!(t.status.code(), Some(0));
    let cell = fs::read(dir.path().join("sweep/loss_lambda_scl=0.05/seed0/summary.json")).unwrap();
    assert_eq!(cell, fs::read(dir.path().join("single/summary.json")).unwrap());
    let csv = fs::read_to_string(dir.path().join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.starts_with("value,many,medium,few,all,train_acc"));
}
