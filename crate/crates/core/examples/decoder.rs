//! Trains token decoders on frozen encoder latents, with and without
//! corruption, and compares their accuracy on clean and noised latents.
//!
//! ```text
//! cargo run --release --example decoder
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tencdm::corpus::{generate_story_corpus, split_corpus, tokenize_all, Vocab};
use tencdm::decoder::{corrupt, train_decoder, Corruption, DecoderConfig, DecoderData, DecoderVariant};
use tencdm::encoder::{EncoderConfig, EncoderMode, EncoderModel, LatentSpace};
use tencdm::schedule::NoiseSchedule;
use tencdm::trainer::TrainerConfig;

fn main() -> tencdm::Result<()> {
    let vocab = Vocab::synthetic();
    let splits = split_corpus(&generate_story_corpus(1, 3000), 200, 200)?;
    let train = tokenize_all(&splits.train, 24, &vocab)?;
    let val = tokenize_all(&splits.val, 24, &vocab)?;
    // An untrained contextual encoder is enough to show the decoders at work.
    let encoder = EncoderModel::new(
        EncoderConfig { mode: EncoderMode::Contextual, dim: 32, layers: 1, heads: 4 },
        vocab.len(),
        24,
        5,
    )?;
    let mut space = LatentSpace::new(encoder);
    let norm = space.fit(&train)?.clone();
    let z_train = space.encode(&train)?;
    let z_val = space.encode(&val)?;
    let schedule = NoiseSchedule::tan(9.0);
    let noisy_spec = Corruption::Zt { t_max: 0.15 };
    let z_noisy = corrupt(&z_val, noisy_spec, &schedule, &mut ChaCha8Rng::seed_from_u64(9))?;

    let runs = [
        ("mlp", DecoderVariant::Mlp, Corruption::None),
        ("mlp + corruption", DecoderVariant::Mlp, noisy_spec),
        ("transformer + corruption", DecoderVariant::Transformer, noisy_spec),
    ];
    for (name, variant, corruption) in runs {
        let config = DecoderConfig {
            variant,
            corruption,
            layers: 2,
            train: TrainerConfig { steps: 300, eval_every: 100, ..Default::default() },
            ..Default::default()
        };
        let (dec, _) = train_decoder(
            DecoderData { latents: &z_train, tokens: &train, cond: None },
            DecoderData { latents: &z_val, tokens: &val, cond: None },
            vocab.len(),
            norm.clone(),
            &schedule,
            config,
            3,
        )?;
        println!(
            "{name:<26} clean {:.3}  noised {:.3}",
            dec.token_accuracy(&z_val, &val, None)?,
            dec.token_accuracy(&z_noisy, &val, None)?
        );
    }
    Ok(())
}
