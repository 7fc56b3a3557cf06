use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 5
schedule = "tan-9"

[corpus]
size = 400
seq_len = 24
val = 40
test = 40

[encoder]
dim = 8
layers = 1
heads = 2

[encoder.pretrain]
max_steps = 20
eval_every = 10

[denoiser]
layers = 1
heads = 2
ff_mult = 2

[denoiser.train]
steps = 30
batch = 8

[decoder]
layers = 1
heads = 2
hidden = 16

[decoder.train]
steps = 20
eval_every = 10

[eval]
samples = 12
repeats = 2

[analyze]
samples = 4
trace_steps = [3, 6]
probe_iterates = 3
difficulty_grid = [0.1, 0.5]
schedule_d = [9.0]
schedule_points = 5
"#;

const STAGES: [&str; 8] = [
    "gen-corpus",
    "pretrain-encoder",
    "fit-normalizer",
    "train-decoder",
    "train-diffusion",
    "sample",
    "eval",
    "analyze",
];

fn tencdm(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tencdm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn run_all(out: &Path, config: &Path) {
    for stage in STAGES {
        let o = tencdm(out, &[stage, "--config", config.to_str().unwrap(), "--steps", "6"]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn downstream_stage_without_prerequisites_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = tencdm(dir.path(), &["sample"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("gen-corpus"), "{err}");
    assert!(!dir.path().join(".lock").exists());
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "1").unwrap();
    let o = tencdm(dir.path(), &["gen-corpus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("locked"));
}

#[test]
fn bad_flags_and_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!tencdm(dir.path(), &["gen-corpus", "--self-cond", "maybe"]).status.success());
    assert!(!tencdm(dir.path(), &["gen-corpus", "--schedule", "linear"]).status.success());
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sed = 1\n").unwrap();
    assert!(!tencdm(dir.path(), &["gen-corpus", "--config", cfg.to_str().unwrap()]).status.success());
}

#[test]
fn full_pipeline_reruns_are_byte_identical() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    run_all(&a, &cfg);
    run_all(&b, &cfg);

    let csvs = [
        "metrics.csv",
        "metrics_summary.csv",
        "trace.csv",
        "training_curve.csv",
        "decoder_curve.csv",
        "encoder_curve.csv",
        "normalizer.csv",
        "analysis/magnitude.csv",
        "analysis/probe.csv",
        "analysis/difficulty.csv",
        "analysis/schedule.csv",
        "analysis/reference.csv",
        "samples.txt",
    ];
    for f in csvs {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        assert!(!x.is_empty(), "{f} is empty");
        assert_eq!(x, y, "{f} differs between identical runs");
    }

    // rerunning one stage in place reproduces its output
    let before = std::fs::read(a.join("metrics.csv")).unwrap();
    assert!(tencdm(&a, &["eval", "--steps", "6"]).status.success());
    assert_eq!(before, std::fs::read(a.join("metrics.csv")).unwrap());

    // the directory describes itself
    for stage in STAGES {
        let snap = std::fs::read_to_string(a.join("snapshots").join(format!("{stage}.toml"))).unwrap();
        assert!(snap.contains("# seed 5") && snap.contains(env!("CARGO_PKG_VERSION")), "{snap}");
    }
    let log = std::fs::read_to_string(a.join("run.log")).unwrap();
    assert!(STAGES.iter().all(|s| log.contains(&format!("[{s}] finished"))));
    assert!(!a.join(".lock").exists());

    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value,seed\n"));
    assert_eq!(metrics.lines().count(), 1 + 3 * 2);

    // a different seed changes the samples
    assert!(tencdm(&a, &["sample", "--seed", "6", "--steps", "6"]).status.success());
    assert_ne!(std::fs::read(a.join("samples.txt")).unwrap(), std::fs::read(b.join("samples.txt")).unwrap());
}
