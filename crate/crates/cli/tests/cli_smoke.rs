use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
synth_students = 120
synth_questions = 40
synth_concepts = 8
synth_mean_length = 20
dim = 8
attention_hidden = 8
dnn_hidden = [8]
pretrain_epochs = 3
epochs = 2
batch_size = 128
num_folds = 3
ablation_variants = ["full", "r_recent"]
ablation_folds = [0]
"#;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        fs::write(root.join("small.toml"), SMALL).unwrap();
        Workspace { _tmp: tmp, root }
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_mfdakt"))
            .current_dir(&self.root)
            .env("RUST_LOG", "warn")
            .arg("-c")
            .arg("small.toml")
            .args(args)
            .output()
            .unwrap()
    }

    /// Runs a command that must succeed and returns the output directory it printed.
    fn ok(&self, args: &[&str]) -> PathBuf {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let stdout = String::from_utf8(out.stdout).unwrap();
        self.root.join(stdout.lines().last().unwrap().trim())
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn metrics(dir: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("variant,fold,auc,acc"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn synth_train_eval_round_trip() {
    let ws = Workspace::new();
    let synth = ws.ok(&["synth"]);
    assert!(synth.join("log.csv").exists() && synth.join("truth.csv").exists());

    let train = ws.ok(&["train"]);
    for file in ["model.ckpt", "trace.csv", "metrics.csv", "config.toml", "manifest.toml"] {
        assert!(train.join(file).exists(), "train is missing {file}");
    }
    let eval = ws.ok(&["eval"]);
    assert!(eval.join("config.toml").exists());
    let (t, e) = (metrics(&train), metrics(&eval));
    assert_eq!(t, e, "eval disagrees with the train run");
    let auc: f64 = e[0][2].parse().unwrap();
    assert!(auc > 0.0 && auc < 1.0);

    // every stage directory carries its resolved config
    for entry in fs::read_dir(ws.root.join("mfdakt-work")).unwrap() {
        let dir = entry.unwrap().path();
        assert!(dir.join("config.toml").exists(), "{} has no config.toml", dir.display());
    }

    // rerunning from the echoed config reproduces the checkpoint bit for bit
    let echoed = ws.root.join("echoed.toml");
    fs::copy(train.join("config.toml"), &echoed).unwrap();
    let before = fs::read(train.join("model.ckpt")).unwrap();
    fs::remove_dir_all(&train).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mfdakt"))
        .current_dir(&ws.root)
        .env("RUST_LOG", "warn")
        .arg("-c")
        .arg(&echoed)
        .arg("train")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(train.join("model.ckpt")).unwrap(), before);

    let explain = ws.ok(&["explain"]);
    assert!(explain.join("explanations.csv").exists());
    let emb = ws.ok(&["export-embeddings", "--source", "model"]);
    assert!(emb.join("questions_F.csv").exists() && emb.join("questions_J.csv").exists());
}

#[test]
fn ablation_flag_and_command() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    let train = ws.ok(&["--ablate", "r_recent", "train"]);
    assert_eq!(metrics(&train)[0][0], "r_recent");

    let ablate = ws.ok(&["ablate"]);
    let rows = metrics(&ablate);
    let variants: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["full", "r_recent"]);
    let summary = fs::read_to_string(ablate.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
}

#[test]
fn exit_codes() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&["--set", "no_such_key=1", "train"])), 1);
    assert_eq!(code(&ws.run(&["--set", "dim=0", "train"])), 1);
    assert_eq!(code(&ws.run(&["no-such-command"])), 1);
    assert_eq!(code(&ws.run(&["--set", "data_path=missing.csv", "ingest"])), 2);
    assert_eq!(code(&ws.run(&["eval"])), 2, "eval without a trained model");

    ws.ok(&["synth"]);
    assert_eq!(code(&ws.run(&["--set", "learning_rate=1e300", "train"])), 3);
}

#[test]
fn lenient_ingest_skips_bad_rows() {
    let ws = Workspace::new();
    let synth = ws.ok(&["synth"]);
    let mut log = fs::read_to_string(synth.join("log.csv")).unwrap();
    log.push_str("s0,q1,c1,abc,1\n");
    fs::write(ws.root.join("bad.csv"), log).unwrap();
    assert_eq!(code(&ws.run(&["--set", "data_path=bad.csv", "ingest"])), 2);
    let dir = ws.ok(&["--set", "data_path=bad.csv", "--lenient", "ingest"]);
    assert_eq!(fs::read_to_string(dir.join("rejected.txt")).unwrap().lines().count(), 1);
}

#[test]
fn stale_artifacts_are_refused() {
    let ws = Workspace::new();
    ws.ok(&["synth"]);
    let train = ws.ok(&["train"]);

    // a manifest that no longer matches its directory's configuration
    let manifest = train.join("manifest.toml");
    let original = fs::read_to_string(&manifest).unwrap();
    fs::write(&manifest, original.replacen("hash = \"", "hash = \"0", 1)).unwrap();
    assert_eq!(code(&ws.run(&["eval"])), 2);
    fs::write(&manifest, &original).unwrap();
    ws.ok(&["eval"]);

    // changing the data invalidates everything downstream
    let log = ws.root.join("mfdakt-work/synth/log.csv");
    let text = fs::read_to_string(&log).unwrap();
    let trimmed: String = text.lines().take(text.lines().count() - 5).map(|l| format!("{l}\n")).collect();
    fs::write(&log, trimmed).unwrap();
    assert_eq!(code(&ws.run(&["eval"])), 2, "eval must not reuse a model trained on other data");
}

#[test]
fn grad_check_passes() {
    let ws = Workspace::new();
    let out = ws.run(&["grad-check"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("full_loss_d8"));
}
