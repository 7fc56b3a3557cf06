//! Sample-quality metrics and model diagnostics.
//!
//! Texts are split on whitespace and `<pad>`, `<bos>` and `<eos>` words are
//! dropped before n-grams are taken. N-grams never cross text boundaries
//! but counts are pooled over the whole set.

use std::collections::HashSet;
use std::fmt;

use autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{is_structural_word, TokenSeq};
use crate::decoder::{token_accuracy, DecoderModel};
use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::grammar::is_valid_story;
use crate::schedule::NoiseSchedule;

fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().filter(|w| !is_structural_word(w)).collect()
}

fn ngrams(text: &str, n: usize) -> impl Iterator<Item = Vec<&str>> {
    let w = words(text);
    let count = w.len().saturating_sub(n - 1);
    (0..count).map(move |i| w[i..i + n].to_vec())
}

/// Product over `n = 2..=4` of unique / total n-grams across `texts`.
pub fn diversity(texts: &[String]) -> Result<f64> {
    if texts.is_empty() {
        return Err(Error::Empty("texts"));
    }
    let mut div = 1.0;
    for n in 2..=4 {
        let mut total = 0usize;
        let mut unique = HashSet::new();
        for t in texts {
            for g in ngrams(t, n) {
                total += 1;
                unique.insert(g);
            }
        }
        if total == 0 {
            return Err(Error::Empty("n-grams (texts too short)"));
        }
        div *= unique.len() as f64 / total as f64;
    }
    Ok(div)
}

/// The set of 4-grams of a training corpus.
#[derive(Clone, Debug, Default)]
pub struct FourGramIndex {
    grams: HashSet<Vec<String>>,
}

impl FourGramIndex {
    pub fn new(texts: &[String]) -> Self {
        let grams = texts
            .iter()
            .flat_map(|t| ngrams(t, 4).map(|g| g.iter().map(|s| s.to_string()).collect()).collect::<Vec<_>>())
            .collect();
        Self { grams }
    }

    pub fn contains(&self, gram: &[&str]) -> bool {
        let owned: Vec<String> = gram.iter().map(|s| s.to_string()).collect();
        self.grams.contains(&owned)
    }

    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }
}

/// Share of generated 4-grams that occur in the training set.
pub fn memorization(texts: &[String], train: &FourGramIndex) -> Result<f64> {
    let (mut found, mut total) = (0usize, 0usize);
    for t in texts {
        for g in ngrams(t, 4) {
            total += 1;
            found += usize::from(train.contains(&g));
        }
    }
    if total == 0 {
        return Err(Error::Empty("4-grams"));
    }
    Ok(found as f64 / total as f64)
}

/// Mean squared entry.
pub fn magnitude(z: &Tensor) -> f64 {
    z.mean_sq()
}

pub fn grammar_valid_rate(texts: &[String]) -> f64 {
    if texts.is_empty() {
        return 0.0;
    }
    texts.iter().filter(|t| is_valid_story(t)).count() as f64 / texts.len() as f64
}

/// Feeds the model its own prediction `k` times at a fixed `z_t`, starting
/// from the zero estimate, and records each prediction's magnitude.
pub fn repeated_sc_probe(
    model: &impl Denoise,
    z_t: &Tensor,
    t: f64,
    k: usize,
    cond: Option<&[TokenSeq]>,
) -> Result<Vec<f64>> {
    if k < 2 {
        return Err(Error::Config("the probe needs at least two iterates".into()));
    }
    let ts = vec![t; z_t.shape()[0]];
    let mut sc: Option<Tensor> = None;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let pred = model.denoise(z_t, &ts, sc.as_ref(), cond)?;
        let m = magnitude(&pred);
        if !m.is_finite() {
            return Err(Error::NonFinite("repeated self-conditioning probe".into()));
        }
        out.push(m);
        sc = Some(pred);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DifficultyRow {
    pub t: f64,
    /// Mean squared error of the single-pass prediction.
    pub mse: f64,
    pub accuracy: f64,
}

/// Reconstruction error and decoded-token accuracy of single-pass
/// predictions (zero self-conditioning) from `z_t` at each `t` in `grid`.
/// The same noise draw (from `seed`) is reused at every `t`.
#[allow(clippy::too_many_arguments)]
pub fn timestep_difficulty(
    model: &impl Denoise,
    decoder: &DecoderModel,
    latents: &Tensor,
    targets: &[TokenSeq],
    grid: &[f64],
    schedule: &NoiseSchedule,
    seed: u64,
    cond: Option<&[TokenSeq]>,
) -> Result<Vec<DifficultyRow>> {
    let n = latents.shape().first().copied().unwrap_or(0);
    if n == 0 || targets.len() != n {
        return Err(Error::Shape(format!("{n} latents vs {} targets", targets.len())));
    }
    let eps = Tensor::randn(latents.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    grid.iter()
        .map(|&t| {
            let z_t = schedule.forward_sample(latents, t, &eps)?;
            let pred = model.denoise(&z_t, &vec![t; n], None, cond)?;
            let mse = pred.zip_map(latents, |a, b| (a - b) * (a - b))?.sum() / pred.numel() as f64;
            let decoded = decoder.decode_normalized(&pred, cond)?;
            Ok(DifficultyRow {
                t,
                mse,
                accuracy: token_accuracy(&decoded, targets),
            })
        })
        .collect()
}

/// Sample mean and standard deviation (`n − 1` denominator).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3}±{:.3}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub div: f64,
    pub mem: f64,
    pub grammar_valid_rate: f64,
    pub samples: usize,
    pub seed: u64,
}

impl MetricReport {
    pub fn compute(texts: &[String], train: &FourGramIndex, seed: u64) -> Result<Self> {
        Ok(Self {
            div: diversity(texts)?,
            mem: memorization(texts, train)?,
            grammar_valid_rate: grammar_valid_rate(texts),
            samples: texts.len(),
            seed,
        })
    }
}
