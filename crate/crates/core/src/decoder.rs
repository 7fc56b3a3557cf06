//! Decoder heads mapping latents back to tokens.
//!
//! The learned variants (MLP and transformer) are trained on corrupted
//! latents so they tolerate the residual error of generated latents. The
//! rounding variant has no parameters and snaps each latent vector to the
//! nearest token embedding, so it only makes sense for embedding-mode
//! latent spaces.
//!
//! Decoders take latents in the normalized diffusion space unless a method
//! says otherwise; [`DecoderModel::decode_latent`] accepts raw encoder
//! output.

use autograd::{AdamW, Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenSeq;
use crate::encoder::{argmax, Normalizer};
use crate::error::{Error, Result};
use crate::nn::{padding_bias, position_ids, Block, LayerNorm, Linear, Memory, TokenEncoder};
use crate::schedule::NoiseSchedule;
use crate::trainer::{sample_indices, select, Plateau, TrainerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderVariant {
    Mlp,
    Transformer,
    Rounding,
}

/// How decoder training inputs are perturbed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Corruption {
    None,
    /// Forward-process sample at `t ~ U[0, t_max]` under the diffusion
    /// schedule.
    Zt { t_max: f64 },
    /// `z₀ + σε`
    Gauss { sigma: f64 },
}

impl Default for Corruption {
    fn default() -> Self {
        Corruption::Zt { t_max: 0.15 }
    }
}

impl Corruption {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Corruption::Zt { t_max } if !(t_max > 0.0 && t_max <= 1.0) => {
                Err(Error::Config(format!("corruption t_max {t_max} outside (0, 1]")))
            }
            Corruption::Gauss { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                Err(Error::Config(format!("corruption sigma {sigma} must be non-negative")))
            }
            _ => Ok(()),
        }
    }
}

/// Corrupts a `[n, ..]` latent batch; `zt` draws one timestep per example.
pub fn corrupt(z0: &Tensor, spec: Corruption, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Tensor> {
    spec.validate()?;
    match spec {
        Corruption::None => Ok(z0.clone()),
        Corruption::Zt { t_max } => {
            let ts: Vec<f64> = (0..z0.shape()[0]).map(|_| rng.random_range(0.0..=t_max)).collect();
            let eps = Tensor::randn(z0.shape(), 1.0, rng);
            schedule.forward_sample_batch(z0, &ts, &eps)
        }
        Corruption::Gauss { sigma } => {
            let eps = Tensor::randn(z0.shape(), 1.0, rng);
            Ok(z0.zip_map(&eps, |z, e| z + sigma * e)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub variant: DecoderVariant,
    pub corruption: Corruption,
    /// Transformer depth.
    pub layers: usize,
    pub heads: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// Depth of the condition encoder in sequence-to-sequence mode.
    pub cond_layers: usize,
    pub train: TrainerConfig,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            variant: DecoderVariant::Transformer,
            corruption: Corruption::default(),
            layers: 3,
            heads: 4,
            hidden: 256,
            cond_layers: 2,
            train: TrainerConfig {
                steps: 1500,
                ..TrainerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
enum Net {
    Mlp {
        up: Linear,
        down: Linear,
    },
    Transformer {
        pos_emb: ParamId,
        blocks: Vec<Block>,
        norm: LayerNorm,
        out: Linear,
        cond: Option<TokenEncoder>,
    },
    Rounding {
        embeddings: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: DecoderConfig,
    pub params: ParamStore,
    vocab_size: usize,
    seq_len: usize,
    cond_len: Option<usize>,
    normalizer: Normalizer,
    net: Net,
}

/// Latents with their tokens (and sources, in sequence-to-sequence mode).
#[derive(Clone, Copy, Debug)]
pub struct DecoderData<'a> {
    /// Normalized latents `[n, seq, dim]`.
    pub latents: &'a Tensor,
    pub tokens: &'a [TokenSeq],
    pub cond: Option<&'a [TokenSeq]>,
}

impl DecoderData<'_> {
    fn check(&self) -> Result<()> {
        let n = self.latents.shape().first().copied().unwrap_or(0);
        if n == 0 {
            return Err(Error::Empty("decoder data"));
        }
        if self.tokens.len() != n || self.cond.is_some_and(|c| c.len() != n) {
            return Err(Error::Shape(format!(
                "{n} latents but {} token sequences",
                self.tokens.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecoderReport {
    pub steps: usize,
    pub best_val_accuracy: f64,
    /// `(step, mean train loss since last eval, val accuracy)`
    pub history: Vec<(usize, f64, f64)>,
}

impl DecoderModel {
    /// A freshly initialized learned decoder. `cond_len` enables
    /// cross-attention on source sequences of that length (transformer
    /// only).
    pub fn new(
        config: DecoderConfig,
        vocab_size: usize,
        seq_len: usize,
        normalizer: Normalizer,
        cond_len: Option<usize>,
        seed: u64,
    ) -> Result<Self> {
        config.corruption.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = normalizer.dim();
        let net = match config.variant {
            DecoderVariant::Mlp => Net::Mlp {
                up: Linear::new(&mut p, "up", d, config.hidden, &mut rng)?,
                down: Linear::new(&mut p, "down", config.hidden, vocab_size, &mut rng)?,
            },
            DecoderVariant::Transformer => {
                let cond = cond_len
                    .map(|len| {
                        TokenEncoder::new(&mut p, "cond", vocab_size, len, d, config.cond_layers, config.heads, &mut rng)
                    })
                    .transpose()?;
                let pos_emb = p.add("pos_emb", Tensor::randn(&[seq_len, d], 0.1, &mut rng))?;
                let blocks = (0..config.layers)
                    .map(|l| Block::new(&mut p, &format!("block{l}"), d, config.heads, 4 * d, cond.is_some(), &mut rng))
                    .collect::<Result<_>>()?;
                Net::Transformer {
                    pos_emb,
                    blocks,
                    norm: LayerNorm::new(&mut p, "final_norm", d)?,
                    out: Linear::new(&mut p, "out", d, vocab_size, &mut rng)?,
                    cond,
                }
            }
            DecoderVariant::Rounding => {
                return Err(Error::Config("build rounding decoders with DecoderModel::rounding".into()))
            }
        };
        Ok(Self {
            config,
            params: p,
            vocab_size,
            seq_len,
            cond_len: if matches!(net, Net::Transformer { .. }) { cond_len } else { None },
            normalizer,
            net,
        })
    }

    /// Nearest-embedding decoder over a raw `[vocab, dim]` embedding table.
    pub fn rounding(embeddings: Tensor, normalizer: Normalizer, seq_len: usize) -> Result<Self> {
        if embeddings.ndim() != 2 || embeddings.last_dim() != normalizer.dim() {
            return Err(Error::Shape(format!(
                "embedding table {:?} vs latent width {}",
                embeddings.shape(),
                normalizer.dim()
            )));
        }
        Ok(Self {
            config: DecoderConfig {
                variant: DecoderVariant::Rounding,
                corruption: Corruption::None,
                ..DecoderConfig::default()
            },
            params: ParamStore::new(),
            vocab_size: embeddings.rows(),
            seq_len,
            cond_len: None,
            normalizer,
            net: Net::Rounding { embeddings },
        })
    }

    pub fn variant(&self) -> DecoderVariant {
        self.config.variant
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    pub fn is_conditional(&self) -> bool {
        self.cond_len.is_some()
    }

    fn check(&self, z: &Tensor, cond: Option<&[TokenSeq]>) -> Result<()> {
        let expect = [z.shape().first().copied().unwrap_or(0), self.seq_len, self.normalizer.dim()];
        if z.shape() != expect || expect[0] == 0 {
            return Err(Error::Shape(format!("decoder expects latents {expect:?}, got {:?}", z.shape())));
        }
        match (self.cond_len, cond) {
            (Some(len), Some(c)) => {
                if c.len() != expect[0] || c.iter().any(|s| s.len() != len) {
                    return Err(Error::Shape("condition batch does not match latents".into()));
                }
            }
            (Some(_), None) => return Err(Error::Config("conditional decoder needs a source sequence".into())),
            _ => {}
        }
        Ok(())
    }

    fn forward(&self, g: &mut Graph<'_>, z: Var, n: usize, cond: Option<&[TokenSeq]>) -> Var {
        match &self.net {
            Net::Mlp { up, down } => {
                let h = up.forward(g, z);
                let h = g.gelu(h);
                down.forward(g, h)
            }
            Net::Transformer {
                pos_emb,
                blocks,
                norm,
                out,
                cond: cond_enc,
            } => {
                let table = g.param(*pos_emb);
                let pos = g.gather(table, &position_ids(n, self.seq_len));
                let mut h = g.add(z, pos);
                let memory = match (cond_enc, cond) {
                    (Some(enc), Some(src)) => Some((enc.forward(g, src), padding_bias(src), enc.seq_len)),
                    _ => None,
                };
                for block in blocks {
                    let mem = memory.as_ref().map(|(states, bias, len)| Memory {
                        states: *states,
                        len: *len,
                        key_bias: Some(bias),
                    });
                    h = block.forward(g, h, self.seq_len, None, mem);
                }
                let h = norm.forward(g, h);
                out.forward(g, h)
            }
            Net::Rounding { .. } => unreachable!("rounding has no graph"),
        }
    }

    /// Per-position scores `[n·seq, vocab]` for normalized latents. For the
    /// rounding variant these are negative squared distances.
    pub fn logits(&self, z: &Tensor, cond: Option<&[TokenSeq]>) -> Result<Tensor> {
        self.check(z, cond)?;
        let (n, m, d) = (z.shape()[0], self.seq_len, self.normalizer.dim());
        if let Net::Rounding { embeddings } = &self.net {
            let raw = self.normalizer.denormalize(z)?;
            let v = embeddings.rows();
            return Ok(Tensor::from_fn(&[n * m, v], |i| {
                let (r, k) = (i / v, i % v);
                -raw.row(r).iter().zip(embeddings.row(k)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }));
        }
        let mut parts = Vec::new();
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let mut g = Graph::inference(&self.params);
            let x = g.constant(z.slice_outer(start, end)?.reshape(&[(end - start) * m, d])?);
            let out = self.forward(&mut g, x, end - start, cond.map(|c| &c[start..end]));
            parts.push(g.value(out).clone());
        }
        Ok(Tensor::cat_outer(&parts)?)
    }

    /// Argmax decoding of normalized latents; ties go to the lowest id.
    pub fn decode_normalized(&self, z: &Tensor, cond: Option<&[TokenSeq]>) -> Result<Vec<TokenSeq>> {
        let logits = self.logits(z, cond)?;
        let m = self.seq_len;
        Ok((0..z.shape()[0])
            .map(|i| TokenSeq::from_ids((0..m).map(|p| argmax(logits.row(i * m + p))).collect()))
            .collect())
    }

    /// Decodes raw (unnormalized) latents.
    pub fn decode_latent(&self, z: &Tensor, cond: Option<&[TokenSeq]>) -> Result<Vec<TokenSeq>> {
        self.decode_normalized(&self.normalizer.normalize(z)?, cond)
    }

    /// Share of positions before trailing padding decoded correctly.
    pub fn token_accuracy(&self, z: &Tensor, targets: &[TokenSeq], cond: Option<&[TokenSeq]>) -> Result<f64> {
        let decoded = self.decode_normalized(z, cond)?;
        if decoded.len() != targets.len() {
            return Err(Error::Shape(format!("{} latents, {} targets", decoded.len(), targets.len())));
        }
        Ok(token_accuracy(&decoded, targets))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "decoder");
        ck.set_meta("config", toml::to_string(&self.config)?);
        ck.set_meta("vocab_size", self.vocab_size.to_string());
        ck.set_meta("seq_len", self.seq_len.to_string());
        if let Some(len) = self.cond_len {
            ck.set_meta("cond_len", len.to_string());
        }
        self.normalizer.write(&mut ck, "norm.")?;
        match &self.net {
            Net::Rounding { embeddings } => ck.push("embeddings", embeddings.clone()),
            _ => ck.add_store("param.", &self.params),
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta("kind") != Some("decoder") {
            return Err(Error::Config("not a decoder checkpoint".into()));
        }
        let config: DecoderConfig = toml::from_str(ck.meta("config").unwrap_or_default())?;
        let num = |k: &str| ck.meta(k).and_then(|v| v.parse::<usize>().ok());
        let seq_len = num("seq_len").ok_or_else(|| Error::Config("decoder checkpoint lacks seq_len".into()))?;
        let normalizer = Normalizer::read(ck, "norm.")?;
        if config.variant == DecoderVariant::Rounding {
            let emb = ck
                .get("embeddings")
                .ok_or_else(|| Error::Config("rounding checkpoint lacks embeddings".into()))?;
            return Self::rounding(emb.clone(), normalizer, seq_len);
        }
        let vocab = num("vocab_size").ok_or_else(|| Error::Config("decoder checkpoint lacks vocab_size".into()))?;
        let mut model = Self::new(config, vocab, seq_len, normalizer, num("cond_len"), 0)?;
        ck.load_store("param.", &mut model.params)?;
        Ok(model)
    }
}

/// Share of matching ids over each target's positions before trailing
/// padding.
pub fn token_accuracy(decoded: &[TokenSeq], targets: &[TokenSeq]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for (d, t) in decoded.iter().zip(targets) {
        for p in 0..t.true_length {
            total += 1;
            hits += usize::from(d.ids.get(p) == Some(&t.ids[p]));
        }
    }
    hits as f64 / total.max(1) as f64
}

/// Trains a learned decoder with cross-entropy over every position,
/// keeping the weights with the best validation accuracy. Validation
/// latents get the same corruption as training (fixed seed), so with
/// `Corruption::None` this is clean accuracy.
pub fn train_decoder(
    train: DecoderData<'_>,
    val: DecoderData<'_>,
    vocab_size: usize,
    normalizer: Normalizer,
    schedule: &NoiseSchedule,
    config: DecoderConfig,
    seed: u64,
) -> Result<(DecoderModel, DecoderReport)> {
    train.check()?;
    val.check()?;
    config.train.validate()?;
    let seq_len = train.latents.shape()[1];
    let cond_len = train.cond.map(|c| c[0].len());
    let tc = config.train.clone();
    let spec = config.corruption;
    let mut model = DecoderModel::new(config, vocab_size, seq_len, normalizer, cond_len, seed)?;
    let report = fit(&mut model, train, val, schedule, &tc, spec, seed)?;
    Ok((model, report))
}

fn fit(
    model: &mut DecoderModel,
    train: DecoderData<'_>,
    val: DecoderData<'_>,
    schedule: &NoiseSchedule,
    tc: &TrainerConfig,
    spec: Corruption,
    seed: u64,
) -> Result<DecoderReport> {
    if matches!(model.net, Net::Rounding { .. }) {
        return Err(Error::Config("the rounding decoder has nothing to train".into()));
    }
    let val_z = corrupt(val.latents, spec, schedule, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x00de_c0de))?;
    let evaluate = |model: &DecoderModel| model.token_accuracy(&val_z, val.tokens, val.cond);
    let mut opt = AdamW::new(tc.adamw(), &model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut plateau = Plateau::new(evaluate(model)?, model.params.clone(), tc.patience);
    let mut report = DecoderReport::default();
    let (m, d) = (model.seq_len, model.normalizer.dim());
    let n = train.tokens.len();
    let mut loss_acc = 0.0;
    let mut since = 0;
    for step in 1..=tc.steps {
        let idx = sample_indices(&mut rng, n, tc.batch);
        let z = corrupt(&select(train.latents, &idx), spec, schedule, &mut rng)?;
        let targets: Vec<usize> = idx.iter().flat_map(|&i| train.tokens[i].ids.iter().copied()).collect();
        let cond: Option<Vec<TokenSeq>> = train.cond.map(|c| idx.iter().map(|&i| c[i].clone()).collect());
        model.check(&z, cond.as_deref())?;
        let grads = {
            let mut g = Graph::new(&model.params);
            let x = g.constant(z.reshape(&[idx.len() * m, d])?);
            let logits = model.forward(&mut g, x, idx.len(), cond.as_deref());
            let loss = g.cross_entropy(logits, &targets, None);
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("decoder loss at step {step}")));
            }
            loss_acc += lv;
            since += 1;
            g.backward(loss)?
        };
        opt.step(&mut model.params, grads)?;
        report.steps = step;
        let eval_now = tc.eval_every > 0 && step % tc.eval_every == 0;
        if eval_now || step == tc.steps {
            let acc = evaluate(model)?;
            report.history.push((step, loss_acc / since as f64, acc));
            log::info!("decoder step {step}: val accuracy {acc:.4}");
            loss_acc = 0.0;
            since = 0;
            if plateau.update(acc, || model.params.clone()) {
                break;
            }
        }
    }
    report.best_val_accuracy = plateau.best;
    model.params = plateau.best_state;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_ties_go_to_lower_id() {
        let emb = Tensor::new(&[3, 2], vec![5.0, 5.0, 1.0, 0.0, -1.0, 0.0]).unwrap();
        let dec = DecoderModel::rounding(emb, Normalizer::identity(2), 1).unwrap();
        let z = Tensor::new(&[1, 1, 2], vec![0.0, 0.0]).unwrap();
        assert_eq!(dec.decode_normalized(&z, None).unwrap()[0].ids, vec![1]);
    }

    #[test]
    fn none_corruption_is_identity() {
        let z = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = corrupt(&z, Corruption::None, &NoiseSchedule::tan(9.0), &mut rng).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn invalid_corruption_is_rejected() {
        assert!(Corruption::Zt { t_max: 0.0 }.validate().is_err());
        assert!(Corruption::Gauss { sigma: -1.0 }.validate().is_err());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = DecoderConfig {
            corruption: Corruption::Gauss { sigma: 0.3 },
            ..DecoderConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<DecoderConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trip_keeps_logits() {
        let cfg = DecoderConfig {
            layers: 1,
            heads: 2,
            ..DecoderConfig::default()
        };
        let dec = DecoderModel::new(cfg, 11, 4, Normalizer::identity(6), None, 2).unwrap();
        let back = DecoderModel::from_checkpoint(&Checkpoint::from_bytes(&dec.to_checkpoint().unwrap().to_bytes()).unwrap())
            .unwrap();
        let z = Tensor::from_fn(&[2, 4, 6], |i| (i as f64).cos());
        assert_eq!(dec.logits(&z, None).unwrap(), back.logits(&z, None).unwrap());
    }
}
