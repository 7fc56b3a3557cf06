//! End to end at toy size: encode stories, train a self-conditioned
//! denoiser and a decoder, sample with the Euler solver and score the texts.
//!
//! ```text
//! cargo run --release --example diffusion -- 2000
//! ```
//!
//! A few thousand steps give recognizable fragments; fluent stories need a
//! wider model and much longer training (see the README).

use tencdm::corpus::{generate_story_corpus, split_corpus, tokenize_all, Vocab};
use tencdm::decoder::{train_decoder, DecoderConfig, DecoderData};
use tencdm::denoiser::{train_denoiser, DenoiserConfig};
use tencdm::encoder::{EncoderConfig, EncoderMode, EncoderModel, LatentSpace};
use tencdm::metrics::{FourGramIndex, MetricReport};
use tencdm::sampler::{generate, SamplerConfig};
use tencdm::schedule::NoiseSchedule;
use tencdm::trainer::TrainerConfig;

fn main() -> tencdm::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let steps = std::env::args().nth(1).map_or(Ok(2000), |s| s.parse()).expect("steps must be a number");
    let (seq, dim) = (24, 32);
    let vocab = Vocab::synthetic();
    let splits = split_corpus(&generate_story_corpus(1, 5000), 200, 200)?;
    let train = tokenize_all(&splits.train, seq, &vocab)?;
    let val = tokenize_all(&splits.val, seq, &vocab)?;

    let encoder = EncoderModel::new(
        EncoderConfig { mode: EncoderMode::Embedding, dim, layers: 0, heads: 4 },
        vocab.len(),
        seq,
        1,
    )?;
    let mut space = LatentSpace::new(encoder);
    let norm = space.fit(&train)?.clone();
    let z_train = space.encode(&train)?;
    let z_val = space.encode(&val)?;
    let schedule = NoiseSchedule::tan(9.0);

    let decoder_cfg = DecoderConfig { train: TrainerConfig { steps: 400, ..Default::default() }, ..Default::default() };
    let (decoder, report) = train_decoder(
        DecoderData { latents: &z_train, tokens: &train, cond: None },
        DecoderData { latents: &z_val, tokens: &val, cond: None },
        vocab.len(),
        norm,
        &schedule,
        decoder_cfg,
        2,
    )?;
    println!("decoder val accuracy {:.3}", report.best_val_accuracy);

    let mut denoiser_cfg = DenoiserConfig { layers: 3, ..Default::default() };
    denoiser_cfg.train.steps = steps;
    let (model, _, curve) = train_denoiser(&z_train, None, &schedule, denoiser_cfg, 3)?;
    let tail = &curve[curve.len().saturating_sub(100)..];
    println!("final loss {:.4}", tail.iter().map(|c| c.loss).sum::<f64>() / tail.len() as f64);

    let sampler = SamplerConfig { steps: 50, ..Default::default() };
    let out = generate(&model, &decoder, &vocab, 100, seq, &sampler, &schedule, None)?;
    for text in out.texts.iter().take(5) {
        println!("  {text}");
    }
    let m = MetricReport::compute(&out.texts, &FourGramIndex::new(&splits.train), sampler.seed)?;
    println!("div {:.3}  mem {:.3}  grammar-valid {:.3}", m.div, m.mem, m.grammar_valid_rate);
    Ok(())
}
