//! Pretrains a small contextual encoder with masked-token prediction, fits
//! the latent normalizer and reports latent statistics.
//!
//! ```text
//! cargo run --release --example encoder -- 400
//! ```

use tencdm::corpus::{generate_story_corpus, split_corpus, tokenize_all, Vocab};
use tencdm::encoder::{pretrain_encoder, EncoderConfig, EncoderMode, LatentSpace, PretrainConfig};

fn main() -> tencdm::Result<()> {
    let steps = std::env::args().nth(1).map_or(Ok(400), |s| s.parse()).expect("steps must be a number");
    let vocab = Vocab::synthetic();
    let splits = split_corpus(&generate_story_corpus(1, 3000), 200, 200)?;
    let train = tokenize_all(&splits.train, 24, &vocab)?;
    let val = tokenize_all(&splits.val, 24, &vocab)?;

    let config = EncoderConfig { mode: EncoderMode::Contextual, dim: 32, layers: 2, heads: 4 };
    let pretrain = PretrainConfig { max_steps: steps, eval_every: 100, ..Default::default() };
    let (encoder, report) = pretrain_encoder(&train, &val, config, vocab.len(), &pretrain, 7)?;
    for (step, loss, acc) in &report.history {
        println!("step {step:>5}  loss {loss:.3}  val masked accuracy {acc:.3}");
    }

    let mut space = LatentSpace::new(encoder);
    let norm = space.fit(&train)?;
    let spread = norm.std.iter().fold((f64::MAX, 0.0f64), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    println!("raw latent std per coordinate: {:.3} .. {:.3}", spread.0, spread.1);
    let z = space.encode(&val)?;
    println!("normalized val latents {:?}, mean square {:.3}", z.shape(), z.mean_sq());
    Ok(())
}
