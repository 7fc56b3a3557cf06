//! The diffusion model: a transformer predicting `z₀` from a noised latent
//! `z_t`, its timestep, a self-conditioning estimate and an optional source
//! sequence.
//!
//! Every layer gets a learned projection of sinusoidal timestep features
//! and a linear projection of the self-conditioning estimate added to its
//! hidden states. The self-conditioning projection has no bias, so the
//! zero estimate contributes exactly nothing. Attention runs over the whole sequence without a mask.
//!
//! Training follows the self-conditioning recipe: half of the steps
//! predict with a zero estimate; the other half make a first prediction,
//! detach it, feed it back as the estimate and take the loss on the second
//! prediction.

use autograd::{AdamW, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::nn::{padding_bias, position_ids, timestep_features, Block, LayerNorm, Linear, Memory, TokenEncoder};
use crate::schedule::NoiseSchedule;
use crate::trainer::{sample_indices, select, TrainerConfig};

/// Anything that predicts clean latents. Implemented by
/// [`DenoiserModel`]; tests and probes substitute simpler predictors.
pub trait Denoise {
    /// Predicts `ẑ₀` for `z_t` of shape `[n, seq, dim]` with one timestep
    /// per example. `sc = None` means the zero estimate.
    fn denoise(&self, z_t: &Tensor, ts: &[f64], sc: Option<&Tensor>, cond: Option<&[TokenSeq]>) -> Result<Tensor>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of the latent width.
    pub ff_mult: usize,
    pub self_condition: bool,
    /// Probability of the zero-estimate branch during training.
    pub p_zero_sc: f64,
    /// Predict with the EMA weights rather than the raw ones.
    pub use_ema: bool,
    pub cond_layers: usize,
    pub train: TrainerConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            ff_mult: 4,
            self_condition: true,
            p_zero_sc: 0.5,
            use_ema: true,
            cond_layers: 2,
            train: TrainerConfig {
                steps: 5000,
                lr: 1e-3,
                warmup: 200,
                ema: 0.9999,
                eval_every: 0,
                ..TrainerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub ema: ParamStore,
    dim: usize,
    seq_len: usize,
    cond_len: Option<usize>,
    in_proj: Linear,
    pos_emb: ParamId,
    time_proj: Vec<Linear>,
    sc_proj: Vec<Linear>,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    out_proj: Linear,
    cond: Option<TokenEncoder>,
}

/// What one training step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    /// Whether the loss was taken on the self-conditioned second pass.
    pub self_cond: bool,
    pub grad_norm: f64,
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    pub self_cond: bool,
}

impl DenoiserModel {
    /// `cond` is `(vocab size, source length)` in sequence-to-sequence
    /// mode.
    pub fn new(config: DenoiserConfig, dim: usize, seq_len: usize, cond: Option<(usize, usize)>, seed: u64) -> Result<Self> {
        if dim == 0 || !dim.is_multiple_of(2) || !dim.is_multiple_of(config.heads.max(1)) {
            return Err(Error::Config(format!(
                "latent width {dim} must be even and divisible by {} heads",
                config.heads
            )));
        }
        if !(0.0..=1.0).contains(&config.p_zero_sc) {
            return Err(Error::Config(format!("p_zero_sc {} outside [0, 1]", config.p_zero_sc)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let cond_enc = cond
            .map(|(vocab, len)| TokenEncoder::new(&mut p, "cond", vocab, len, dim, config.cond_layers, config.heads, &mut rng))
            .transpose()?;
        let in_proj = Linear::new(&mut p, "in_proj", dim, dim, &mut rng)?;
        let pos_emb = p.add("pos_emb", Tensor::randn(&[seq_len, dim], 0.1, &mut rng))?;
        let mut time_proj = Vec::new();
        let mut sc_proj = Vec::new();
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            time_proj.push(Linear::new(&mut p, &format!("time{l}"), dim, dim, &mut rng)?);
            if config.self_condition {
                sc_proj.push(Linear::no_bias(&mut p, &format!("sc{l}"), dim, dim, &mut rng)?);
            }
            blocks.push(Block::new(
                &mut p,
                &format!("block{l}"),
                dim,
                config.heads,
                config.ff_mult * dim,
                cond_enc.is_some(),
                &mut rng,
            )?);
        }
        let final_norm = LayerNorm::new(&mut p, "final_norm", dim)?;
        let out_proj = Linear::new(&mut p, "out_proj", dim, dim, &mut rng)?;
        Ok(Self {
            config,
            ema: p.clone(),
            params: p,
            dim,
            seq_len,
            cond_len: cond.map(|c| c.1),
            in_proj,
            pos_emb,
            time_proj,
            sc_proj,
            blocks,
            final_norm,
            out_proj,
            cond: cond_enc,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn is_conditional(&self) -> bool {
        self.cond.is_some()
    }

    /// Weights used for prediction.
    pub fn weights(&self) -> &ParamStore {
        if self.config.use_ema {
            &self.ema
        } else {
            &self.params
        }
    }

    /// Builds the prediction for `z_t` given as `[n·seq, dim]`. With
    /// self-conditioning disabled `sc` is ignored.
    pub fn forward(&self, g: &mut Graph<'_>, z_t: Var, ts: &[f64], sc: Option<Var>, cond: Option<&[TokenSeq]>) -> Var {
        let n = ts.len();
        let h = self.in_proj.forward(g, z_t);
        let table = g.param(self.pos_emb);
        let pos = g.gather(table, &position_ids(n, self.seq_len));
        let mut h = g.add(h, pos);
        let feats = g.constant(timestep_features(ts, self.dim));
        let memory = match (&self.cond, cond) {
            (Some(enc), Some(src)) => Some((enc.forward(g, src), padding_bias(src), enc.seq_len)),
            _ => None,
        };
        for (l, block) in self.blocks.iter().enumerate() {
            let temb = self.time_proj[l].forward(g, feats);
            let temb = g.repeat_rows(temb, self.seq_len);
            h = g.add(h, temb);
            if let (Some(proj), Some(sc)) = (self.sc_proj.get(l), sc) {
                let s = proj.forward(g, sc);
                h = g.add(h, s);
            }
            let mem = memory.as_ref().map(|(states, bias, len)| Memory {
                states: *states,
                len: *len,
                key_bias: Some(bias),
            });
            h = block.forward(g, h, self.seq_len, None, mem);
        }
        let h = self.final_norm.forward(g, h);
        self.out_proj.forward(g, h)
    }

    fn check(&self, z: &Tensor, ts: &[f64], sc: Option<&Tensor>, cond: Option<&[TokenSeq]>) -> Result<()> {
        let n = z.shape().first().copied().unwrap_or(0);
        if z.shape() != [n, self.seq_len, self.dim] || n == 0 {
            return Err(Error::Shape(format!(
                "denoiser expects [n, {}, {}], got {:?}",
                self.seq_len,
                self.dim,
                z.shape()
            )));
        }
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for {n} latents", ts.len())));
        }
        if let Some(&t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::OutOfRange(format!("timestep {t} outside [0, 1]")));
        }
        if sc.is_some_and(|s| s.shape() != z.shape()) {
            return Err(Error::Shape("self-conditioning estimate differs in shape from z_t".into()));
        }
        match (self.cond_len, cond) {
            (Some(len), Some(c)) if c.len() == n && c.iter().all(|s| s.len() == len) => Ok(()),
            (Some(_), Some(_)) => Err(Error::Shape("condition batch does not match latents".into())),
            (Some(_), None) => Err(Error::Config("conditional denoiser needs a source sequence".into())),
            (None, _) => Ok(()),
        }
    }

    /// Prediction with an explicit weight set.
    pub fn denoise_with(
        &self,
        weights: &ParamStore,
        z_t: &Tensor,
        ts: &[f64],
        sc: Option<&Tensor>,
        cond: Option<&[TokenSeq]>,
    ) -> Result<Tensor> {
        self.check(z_t, ts, sc, cond)?;
        let (n, m, d) = (ts.len(), self.seq_len, self.dim);
        let mut parts = Vec::new();
        for start in (0..n).step_by(128) {
            let end = (start + 128).min(n);
            let mut g = Graph::inference(weights);
            let x = g.constant(z_t.slice_outer(start, end)?.reshape(&[(end - start) * m, d])?);
            let s = sc
                .map(|s| -> Result<Var> { Ok(g.constant(s.slice_outer(start, end)?.reshape(&[(end - start) * m, d])?)) })
                .transpose()?;
            let out = self.forward(&mut g, x, &ts[start..end], s, cond.map(|c| &c[start..end]));
            parts.push(g.value(out).clone().reshape(&[end - start, m, d])?);
        }
        let out = Tensor::cat_outer(&parts)?;
        if !out.is_finite() {
            return Err(Error::NonFinite(format!("denoiser output at t = {:?}", &ts[..ts.len().min(8)])));
        }
        Ok(out)
    }

    /// Plain mean-squared-error loss of one training step; the caller picks
    /// the branch. Exposed for gradient tests.
    pub fn loss(
        &self,
        g: &mut Graph<'_>,
        z0: &Tensor,
        z_t: &Tensor,
        ts: &[f64],
        self_cond: bool,
        cond: Option<&[TokenSeq]>,
    ) -> Var {
        let (n, m, d) = (ts.len(), self.seq_len, self.dim);
        let x = g.constant(z_t.clone().reshape(&[n * m, d]).expect("checked shape"));
        let target = g.constant(z0.clone().reshape(&[n * m, d]).expect("checked shape"));
        let first = self.forward(g, x, ts, None, cond);
        let pred = if self_cond && self.config.self_condition {
            let sc = g.stop_gradient(first);
            self.forward(g, x, ts, Some(sc), cond)
        } else {
            first
        };
        g.mse(pred, target)
    }

    /// One optimizer step on a batch of clean normalized latents.
    pub fn train_step(
        &mut self,
        opt: &mut AdamW,
        z0: &Tensor,
        cond: Option<&[TokenSeq]>,
        schedule: &NoiseSchedule,
        rng: &mut impl Rng,
    ) -> Result<StepOutcome> {
        let n = z0.shape().first().copied().unwrap_or(0);
        let ts: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        self.check(z0, &ts, None, cond)?;
        let eps = Tensor::randn(z0.shape(), 1.0, rng);
        let z_t = schedule.forward_sample_batch(z0, &ts, &eps)?;
        let self_cond = self.config.self_condition && !rng.random_bool(self.config.p_zero_sc);
        let (loss, grads) = {
            let mut g = Graph::new(&self.params);
            let loss = self.loss(&mut g, z0, &z_t, &ts, self_cond, cond);
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                log::error!("non-finite denoiser loss at t = {ts:?}");
                return Err(Error::NonFinite(format!("denoiser loss at t = {ts:?}")));
            }
            (lv, g.backward(loss)?)
        };
        let stats = opt.step(&mut self.params, grads)?;
        self.ema.assign(opt.ema())?;
        Ok(StepOutcome {
            loss,
            self_cond,
            grad_norm: stats.grad_norm,
        })
    }

    pub fn to_checkpoint(&self, opt: Option<&AdamW>) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        let config = toml::to_string(&self.config)?;
        ck.set_meta("kind", "denoiser");
        ck.set_meta("config_hash", format!("{:016x}", fnv1a(config.as_bytes())));
        ck.set_meta("config", config);
        ck.set_meta("dim", self.dim.to_string());
        ck.set_meta("seq_len", self.seq_len.to_string());
        if let (Some(enc), Some(len)) = (&self.cond, self.cond_len) {
            let vocab = self.params.get(enc.token_emb).rows();
            ck.set_meta("cond", format!("{vocab},{len}"));
        }
        ck.add_store("param.", &self.params);
        ck.add_store("ema.", &self.ema);
        if let Some(opt) = opt {
            ck.add_optimizer("opt.", opt, &self.params);
        }
        Ok(ck)
    }

    /// Restores the model and, when saved, its optimizer.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamW>)> {
        if ck.meta("kind") != Some("denoiser") {
            return Err(Error::Config("not a denoiser checkpoint".into()));
        }
        let config: DenoiserConfig = toml::from_str(ck.meta("config").unwrap_or_default())?;
        let num = |k: &str| {
            ck.meta(k)
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| Error::Config(format!("denoiser checkpoint lacks `{k}`")))
        };
        let cond = match ck.meta("cond") {
            None => None,
            Some(v) => {
                let parts: Vec<usize> = v.split(',').filter_map(|x| x.parse().ok()).collect();
                match parts[..] {
                    [vocab, len] => Some((vocab, len)),
                    _ => return Err(Error::Config(format!("bad condition spec `{v}`"))),
                }
            }
        };
        let mut model = Self::new(config, num("dim")?, num("seq_len")?, cond, 0)?;
        ck.load_store("param.", &mut model.params)?;
        ck.load_store("ema.", &mut model.ema)?;
        let opt = if ck.meta("opt.step").is_some() {
            Some(ck.load_optimizer("opt.", model.config.train.adamw(), &model.params)?)
        } else {
            None
        };
        Ok((model, opt))
    }
}

impl Denoise for DenoiserModel {
    fn denoise(&self, z_t: &Tensor, ts: &[f64], sc: Option<&Tensor>, cond: Option<&[TokenSeq]>) -> Result<Tensor> {
        self.denoise_with(self.weights(), z_t, ts, sc, cond)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Trains a fresh denoiser on normalized latents `[n, seq, dim]`.
/// `cond` pairs each latent with its source sequence.
pub fn train_denoiser(
    latents: &Tensor,
    cond: Option<(&[TokenSeq], usize)>,
    schedule: &NoiseSchedule,
    config: DenoiserConfig,
    seed: u64,
) -> Result<(DenoiserModel, AdamW, Vec<CurvePoint>)> {
    config.train.validate()?;
    let shape = latents.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::Shape(format!("training latents must be [n, seq, dim], got {shape:?}")));
    }
    let cond_spec = cond.map(|(src, vocab)| (vocab, src.first().map_or(0, |s| s.len())));
    if let Some((src, _)) = cond {
        if src.len() != shape[0] {
            return Err(Error::Shape(format!("{} sources for {} latents", src.len(), shape[0])));
        }
    }
    let tc = config.train.clone();
    let mut model = DenoiserModel::new(config, shape[2], shape[1], cond_spec, seed)?;
    let mut opt = AdamW::new(tc.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut curve = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let idx = sample_indices(&mut rng, shape[0], tc.batch);
        let z0 = select(latents, &idx);
        let src: Option<Vec<TokenSeq>> = cond.map(|(s, _)| idx.iter().map(|&i| s[i].clone()).collect());
        let out = model.train_step(&mut opt, &z0, src.as_deref(), schedule, &mut rng)?;
        curve.push(CurvePoint {
            step,
            loss: out.loss,
            self_cond: out.self_cond,
        });
        if step % 250 == 0 {
            let recent = &curve[curve.len().saturating_sub(250)..];
            let mean = recent.iter().map(|c| c.loss).sum::<f64>() / recent.len() as f64;
            log::info!("diffusion step {step}: mean loss {mean:.4}");
        }
    }
    Ok((model, opt, curve))
}
