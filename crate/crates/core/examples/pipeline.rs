//! Runs every pipeline stage at toy size into one output directory, the
//! same way the `tencdm` binary does.
//!
//! ```text
//! cargo run --release --example pipeline -- /tmp/tencdm-demo
//! ```

use std::path::PathBuf;

use tencdm::config::ExperimentConfig;
use tencdm::pipeline::{run_stage, Overrides, Stage};

fn main() -> tencdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "tencdm-demo".into()));
    let mut config = ExperimentConfig::default();
    config.corpus.size = 1000;
    config.corpus.seq_len = 24;
    config.encoder.model.dim = 16;
    config.encoder.pretrain.max_steps = 100;
    config.decoder.train.steps = 200;
    config.denoiser.layers = 2;
    config.denoiser.train.steps = 300;
    config.eval.samples = 50;
    config.eval.repeats = 2;
    config.analyze.samples = 16;
    config.analyze.trace_steps = vec![5, 20];
    std::fs::create_dir_all(&out)?;
    let path = out.join("demo.toml");
    std::fs::write(&path, config.to_toml()?)?;

    for stage in Stage::ALL {
        run_stage(stage, &out, Some(&path), &Overrides::default())?;
    }
    println!("{}", std::fs::read_to_string(out.join("metrics_summary.csv"))?);
    println!("artifacts in {}", out.display());
    Ok(())
}
