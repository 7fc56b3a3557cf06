//! Generation by deterministic Euler steps from Gaussian noise, with
//! self-conditioning and minimum-Bayes-risk candidate selection.
//!
//! Each step turns the model's clean-latent prediction into an implied
//! noise estimate and moves to the next timestep along the forward
//! process:
//!
//! ```text
//! ε̂   = (z_t − √α_t · ẑ₀) / √(1 − α_t)
//! z_s = √α_s · ẑ₀ + √(1 − α_s) · ε̂
//! ```

use std::collections::HashMap;

use autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{detokenize, TokenSeq, Vocab};
use crate::decoder::DecoderModel;
use crate::denoiser::Denoise;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Number of denoising steps `T`.
    pub steps: usize,
    pub self_condition: bool,
    /// Candidates per output for MBR selection; 0 or 1 takes a single
    /// sample.
    pub mbr_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            self_condition: true,
            mbr_k: 0,
            seed: 0,
        }
    }
}

/// `steps + 1` evenly spaced timesteps from 1 down to 0.
pub fn timestep_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| 1.0 - i as f64 / steps as f64).collect()
}

/// Moves `z_t` from `t` to `s < t` given the prediction `ẑ₀`.
pub fn euler_step(z_t: &Tensor, z0_hat: &Tensor, t: f64, s: f64, schedule: &NoiseSchedule) -> Result<Tensor> {
    if !(0.0 <= s && s < t && t <= 1.0) {
        return Err(Error::OutOfRange(format!("Euler step from {t} to {s}")));
    }
    if s == 0.0 {
        return Ok(z0_hat.clone());
    }
    let (at, as_) = (schedule.alpha(t)?, schedule.alpha(s)?);
    let (st, nt) = (at.sqrt(), (1.0 - at).sqrt());
    let (ss, ns) = (as_.sqrt(), (1.0 - as_).sqrt());
    Ok(z_t.zip_map(z0_hat, |z, x| {
        let eps = (z - st * x) / nt;
        ss * x + ns * eps
    })?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub t: f64,
    /// Mean squared entry of the prediction at this step.
    pub magnitude: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub trace: Vec<TraceRow>,
    /// Final prediction in normalized latent space, `[n, seq, dim]`.
    pub latents: Tensor,
}

/// Initial noise for chains `first..first + n`. Chain `i` draws from its
/// own stream of the seeded generator, so a chain's noise does not depend
/// on how chains are batched.
pub fn initial_noise(seed: u64, first: usize, n: usize, seq: usize, dim: usize) -> Result<Tensor> {
    let chains: Vec<Tensor> = (first..first + n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Tensor::randn(&[1, seq, dim], 1.0, &mut rng)
        })
        .collect();
    Ok(Tensor::cat_outer(&chains)?)
}

/// Runs the reverse process from `z` at `t = 1`.
pub fn denoise_from(
    model: &impl Denoise,
    z: Tensor,
    steps: usize,
    self_condition: bool,
    schedule: &NoiseSchedule,
    cond: Option<&[TokenSeq]>,
) -> Result<Trajectory> {
    if steps == 0 {
        return Err(Error::Config("sampling needs at least one step".into()));
    }
    let n = z.shape()[0];
    let grid = timestep_grid(steps);
    let mut z = z;
    let mut sc: Option<Tensor> = None;
    let mut trace = Vec::with_capacity(steps);
    for i in 0..steps {
        let (t, s) = (grid[i], grid[i + 1]);
        let pred = model.denoise(&z, &vec![t; n], sc.as_ref(), cond).inspect_err(|_| dump(&trace))?;
        let magnitude = pred.mean_sq();
        trace.push(TraceRow { step: i, t, magnitude });
        if !magnitude.is_finite() {
            dump(&trace);
            return Err(Error::NonFinite(format!("prediction at step {i} (t = {t})")));
        }
        z = euler_step(&z, &pred, t, s, schedule)?;
        if self_condition {
            sc = Some(pred);
        }
    }
    Ok(Trajectory { trace, latents: z })
}

fn dump(trace: &[TraceRow]) {
    for r in trace {
        log::error!("trace step {} t {:.4} magnitude {}", r.step, r.t, r.magnitude);
    }
}

/// Samples `n` latents from pure noise.
pub fn sample_latents(
    model: &impl Denoise,
    n: usize,
    seq: usize,
    dim: usize,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    cond: Option<&[TokenSeq]>,
) -> Result<Trajectory> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let z = initial_noise(config.seed, 0, n, seq, dim)?;
    denoise_from(model, z, config.steps, config.self_condition, schedule, cond)
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub texts: Vec<String>,
    pub trace: Vec<TraceRow>,
}

/// Generates `n` texts: sample, denormalize, decode and, with `mbr_k > 1`,
/// pick one of `mbr_k` candidates per output. `cond` holds one source per
/// output.
#[allow(clippy::too_many_arguments)]
pub fn generate(
    model: &impl Denoise,
    decoder: &DecoderModel,
    vocab: &Vocab,
    n: usize,
    seq: usize,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    cond: Option<&[TokenSeq]>,
) -> Result<Generation> {
    if cond.is_some_and(|c| c.len() != n) {
        return Err(Error::Shape(format!("{n} outputs but {} sources", cond.map_or(0, |c| c.len()))));
    }
    let k = config.mbr_k.max(1);
    let expanded: Option<Vec<TokenSeq>> = cond.map(|c| c.iter().flat_map(|s| std::iter::repeat_n(s.clone(), k)).collect());
    let dim = decoder.normalizer().dim();
    let traj = sample_latents(model, n * k, seq, dim, config, schedule, expanded.as_deref())?;
    let raw = decoder.normalizer().denormalize(&traj.latents)?;
    let seqs = decoder.decode_latent(&raw, expanded.as_deref())?;
    let candidates: Vec<String> = seqs.iter().map(|s| detokenize(s, vocab)).collect();
    let texts = candidates
        .chunks(k)
        .map(|group| mbr_select(group).map(|i| group[i].clone()))
        .collect::<Result<_>>()?;
    Ok(Generation { texts, trace: traj.trace })
}

fn ngram_counts(words: &[&str]) -> HashMap<Vec<String>, usize> {
    let mut counts = HashMap::new();
    for n in 1..=4 {
        for w in words.windows(n) {
            *counts.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// `1 − F1` between the pooled 1–4-gram multisets of two texts.
pub fn ngram_distance(a: &str, b: &str) -> f64 {
    let wa: Vec<&str> = a.split_whitespace().collect();
    let wb: Vec<&str> = b.split_whitespace().collect();
    let (ca, cb) = (ngram_counts(&wa), ngram_counts(&wb));
    let (na, nb): (usize, usize) = (ca.values().sum(), cb.values().sum());
    if na + nb == 0 {
        return 0.0;
    }
    let overlap: usize = ca.iter().map(|(g, &c)| c.min(cb.get(g).copied().unwrap_or(0))).sum();
    1.0 - 2.0 * overlap as f64 / (na + nb) as f64
}

/// Index of the candidate with the lowest mean [`ngram_distance`] to the
/// others; ties go to the first.
pub fn mbr_select(candidates: &[String]) -> Result<usize> {
    mbr_select_with(candidates, ngram_distance)
}

pub fn mbr_select_with(candidates: &[String], distance: impl Fn(&str, &str) -> f64) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Empty("MBR candidates"));
    }
    let k = candidates.len();
    let mut best = (0, f64::INFINITY);
    for i in 0..k {
        let risk: f64 = (0..k).filter(|&j| j != i).map(|j| distance(&candidates[i], &candidates[j])).sum();
        let risk = risk / (k - 1).max(1) as f64;
        if risk < best.1 {
            best = (i, risk);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_descends_to_zero() {
        assert_eq!(timestep_grid(4), vec![1.0, 0.75, 0.5, 0.25, 0.0]);
    }

    #[test]
    fn final_step_returns_prediction() {
        let s = NoiseSchedule::tan(9.0);
        let z = Tensor::full(&[1, 2, 2], 3.0);
        let x = Tensor::full(&[1, 2, 2], -1.0);
        assert_eq!(euler_step(&z, &x, 0.3, 0.0, &s).unwrap(), x);
        assert!(euler_step(&z, &x, 0.3, 0.5, &s).is_err());
    }

    #[test]
    fn distance_basics() {
        assert_eq!(ngram_distance("a b c", "a b c"), 0.0);
        assert_eq!(ngram_distance("a b", "c d"), 1.0);
        assert_eq!(ngram_distance("", ""), 0.0);
    }

    #[test]
    fn mbr_prefers_duplicate() {
        let c: Vec<String> = ["x y z", "a b c", "a b c"].iter().map(|s| s.to_string()).collect();
        assert_eq!(mbr_select(&c).unwrap(), 1);
        assert_eq!(mbr_select(&c[..1]).unwrap(), 0);
        assert!(mbr_select(&[]).is_err());
    }

    #[test]
    fn chain_noise_ignores_batching() {
        let all = initial_noise(3, 0, 4, 2, 3).unwrap();
        let tail = initial_noise(3, 2, 2, 2, 3).unwrap();
        assert_eq!(&all.data()[12..], tail.data());
    }
}
