//! The diffusion latent space: a frozen token encoder plus coordinate-wise
//! normalization.
//!
//! In contextual mode the encoder is a small bidirectional transformer
//! pretrained by masked-token prediction. After encoding, the vectors at
//! PAD/BOS/EOS positions are overwritten with those tokens' raw embeddings,
//! so special positions carry a fixed, context-free value. Embedding mode
//! skips the transformer and returns the embedding lookup directly.

use autograd::{AdamW, AdamWConfig, Checkpoint, Graph, ParamId, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, MASK};
use crate::error::{Error, Result};
use crate::nn::{padding_bias, position_ids, Block, LayerNorm, Linear};

/// Lower bound applied to every fitted standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderMode {
    Embedding,
    Contextual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub mode: EncoderMode,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            mode: EncoderMode::Contextual,
            dim: 64,
            layers: 2,
            heads: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub params: ParamStore,
    token_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNorm,
    mlm_head: Linear,
}

impl EncoderModel {
    pub fn new(config: EncoderConfig, vocab_size: usize, seq_len: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.dim;
        let token_emb = p.add("token_emb", Tensor::randn(&[vocab_size, d], 1.0, &mut rng))?;
        let pos_emb = p.add("pos_emb", Tensor::randn(&[seq_len, d], 0.1, &mut rng))?;
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut p, &format!("block{l}"), d, config.heads, 4 * d, false, &mut rng))
            .collect::<Result<_>>()?;
        let final_norm = LayerNorm::new(&mut p, "final_norm", d)?;
        let mlm_head = Linear::new(&mut p, "mlm_head", d, vocab_size, &mut rng)?;
        Ok(Self {
            config,
            vocab_size,
            seq_len,
            params: p,
            token_emb,
            pos_emb,
            blocks,
            final_norm,
            mlm_head,
        })
    }

    /// Same weights, different latent mode.
    pub fn with_mode(mut self, mode: EncoderMode) -> Self {
        self.config.mode = mode;
        self
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// Token embedding table `[vocab, dim]`.
    pub fn embeddings(&self) -> &Tensor {
        self.params.get(self.token_emb)
    }

    fn check(&self, seqs: &[TokenSeq]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Empty("token sequences"));
        }
        for s in seqs {
            if s.len() != self.seq_len {
                return Err(Error::Shape(format!(
                    "sequence length {} but encoder expects {}",
                    s.len(),
                    self.seq_len
                )));
            }
            if let Some(&bad) = s.ids.iter().find(|&&i| i >= self.vocab_size) {
                return Err(Error::OutOfRange(format!("token id {bad}")));
            }
        }
        Ok(())
    }

    /// Final-layer states `[n·seq, dim]`, PAD keys hidden.
    fn hidden(&self, g: &mut Graph<'_>, seqs: &[TokenSeq]) -> autograd::Var {
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.ids.iter().copied()).collect();
        let table = g.param(self.token_emb);
        let tok = g.gather(table, &ids);
        let pos_table = g.param(self.pos_emb);
        let pos = g.gather(pos_table, &position_ids(seqs.len(), self.seq_len));
        let mut h = g.add(tok, pos);
        let bias = padding_bias(seqs);
        for block in &self.blocks {
            h = block.forward(g, h, self.seq_len, Some(&bias), None);
        }
        self.final_norm.forward(g, h)
    }

    fn mlm_logits(&self, g: &mut Graph<'_>, seqs: &[TokenSeq]) -> autograd::Var {
        let h = self.hidden(g, seqs);
        self.mlm_head.forward(g, h)
    }

    /// Unnormalized latents `[n, seq, dim]`.
    pub fn raw_latents(&self, seqs: &[TokenSeq]) -> Result<Tensor> {
        self.check(seqs)?;
        let (m, d) = (self.seq_len, self.dim());
        let emb = self.embeddings();
        let mut chunks = Vec::new();
        for chunk in seqs.chunks(256) {
            let mut data = match self.config.mode {
                EncoderMode::Embedding => {
                    let mut out = Vec::with_capacity(chunk.len() * m * d);
                    for s in chunk {
                        for &id in &s.ids {
                            out.extend_from_slice(emb.row(id));
                        }
                    }
                    out
                }
                EncoderMode::Contextual => {
                    let mut g = Graph::inference(&self.params);
                    let h = self.hidden(&mut g, chunk);
                    g.value(h).data().to_vec()
                }
            };
            for (i, s) in chunk.iter().enumerate() {
                for (p, &id) in s.ids.iter().enumerate() {
                    if s.is_special(p) {
                        let at = (i * m + p) * d;
                        data[at..at + d].copy_from_slice(emb.row(id));
                    }
                }
            }
            chunks.push(Tensor::new(&[chunk.len(), m, d], data)?);
        }
        Ok(Tensor::cat_outer(&chunks)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "encoder");
        ck.set_meta("mode", format!("{:?}", self.config.mode).to_lowercase());
        ck.set_meta("dim", self.config.dim.to_string());
        ck.set_meta("layers", self.config.layers.to_string());
        ck.set_meta("heads", self.config.heads.to_string());
        ck.set_meta("vocab_size", self.vocab_size.to_string());
        ck.set_meta("seq_len", self.seq_len.to_string());
        ck.add_store("", &self.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let num = |k: &str| -> Result<usize> {
            ck.meta(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("encoder checkpoint lacks `{k}`")))
        };
        let mode = match ck.meta("mode") {
            Some("embedding") => EncoderMode::Embedding,
            Some("contextual") => EncoderMode::Contextual,
            other => return Err(Error::Config(format!("bad encoder mode {other:?}"))),
        };
        let config = EncoderConfig {
            mode,
            dim: num("dim")?,
            layers: num("layers")?,
            heads: num("heads")?,
        };
        let mut model = Self::new(config, num("vocab_size")?, num("seq_len")?, 0)?;
        ck.load_store("", &mut model.params)?;
        Ok(model)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub mask_prob: f64,
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    pub min_delta: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            max_steps: 1500,
            batch: 32,
            lr: 1e-3,
            warmup: 100,
            mask_prob: 0.15,
            eval_every: 100,
            patience: 3,
            min_delta: 0.002,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub best_val_accuracy: f64,
    /// `(step, mean train loss since last eval, val masked accuracy)`
    pub history: Vec<(usize, f64, f64)>,
}

/// Masks a `prob` share of content positions (at least one per sequence)
/// with MASK. Returns inputs, targets and per-position loss weights.
fn mask_batch(seqs: &[TokenSeq], prob: f64, rng: &mut impl Rng) -> (Vec<TokenSeq>, Vec<usize>, Vec<f64>) {
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for s in seqs {
        let content: Vec<usize> = (0..s.len()).filter(|&p| !s.is_special(p)).collect();
        let mut chosen: Vec<bool> = vec![false; s.len()];
        for &p in &content {
            chosen[p] = rng.random_bool(prob);
        }
        if !content.is_empty() && !chosen.iter().any(|&c| c) {
            chosen[content[rng.random_range(0..content.len())]] = true;
        }
        let mut masked = s.clone();
        for (p, &pick) in chosen.iter().enumerate() {
            targets.push(s.ids[p]);
            weights.push(if pick { 1.0 } else { 0.0 });
            if pick {
                masked.ids[p] = MASK;
            }
        }
        inputs.push(masked);
    }
    (inputs, targets, weights)
}

/// Accuracy of predicting masked tokens, with masks drawn from `seed`.
pub fn masked_accuracy(model: &EncoderModel, seqs: &[TokenSeq], mask_prob: f64, seed: u64) -> Result<f64> {
    model.check(seqs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for chunk in seqs.chunks(256) {
        let (inputs, targets, weights) = mask_batch(chunk, mask_prob, &mut rng);
        let mut g = Graph::inference(&model.params);
        let logits = model.mlm_logits(&mut g, &inputs);
        let lv = g.value(logits);
        for (r, (&t, &w)) in targets.iter().zip(&weights).enumerate() {
            if w > 0.0 {
                total += 1;
                if argmax(lv.row(r)) == t {
                    hits += 1;
                }
            }
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    // first maximum wins, so ties go to the lowest id
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked-token pretraining with early stopping on validation accuracy.
/// Returns the best weights seen.
pub fn pretrain_encoder(
    train: &[TokenSeq],
    val: &[TokenSeq],
    config: EncoderConfig,
    vocab_size: usize,
    pretrain: &PretrainConfig,
    seed: u64,
) -> Result<(EncoderModel, PretrainReport)> {
    if config.mode != EncoderMode::Contextual {
        return Err(Error::Config("only contextual encoders are pretrained".into()));
    }
    let seq_len = train.first().ok_or(Error::Empty("training corpus"))?.len();
    let mut model = EncoderModel::new(config, vocab_size, seq_len, seed)?;
    model.check(train)?;
    model.check(val)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: pretrain.lr,
            warmup_steps: pretrain.warmup,
            ..AdamWConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e4c0);
    let mut report = PretrainReport::default();
    let mut best = (masked_accuracy(&model, val, pretrain.mask_prob, seed)?, model.params.clone());
    let mut stale = 0;
    let mut loss_acc = 0.0;
    for step in 1..=pretrain.max_steps {
        let batch: Vec<TokenSeq> = (0..pretrain.batch)
            .map(|_| train[rng.random_range(0..train.len())].clone())
            .collect();
        let (inputs, targets, weights) = mask_batch(&batch, pretrain.mask_prob, &mut rng);
        let grads = {
            let mut g = Graph::new(&model.params);
            let logits = model.mlm_logits(&mut g, &inputs);
            let loss = g.cross_entropy(logits, &targets, Some(&weights));
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::NonFinite(format!("encoder pretraining loss at step {step}")));
            }
            loss_acc += lv;
            g.backward(loss)?
        };
        opt.step(&mut model.params, grads)?;
        report.steps = step;
        if step % pretrain.eval_every == 0 || step == pretrain.max_steps {
            let acc = masked_accuracy(&model, val, pretrain.mask_prob, seed)?;
            report.history.push((step, loss_acc / pretrain.eval_every as f64, acc));
            loss_acc = 0.0;
            log::info!("encoder step {step}: val masked accuracy {acc:.4}");
            if acc > best.0 + pretrain.min_delta {
                best = (acc, model.params.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= pretrain.patience {
                    break;
                }
            }
        }
    }
    model.params = best.1;
    report.best_val_accuracy = best.0;
    Ok((model, report))
}

/// Per-coordinate mean and standard deviation of training latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on `[.., dim]` latents, pooling every position.
    pub fn fit(latents: &Tensor) -> Result<Self> {
        let d = latents.last_dim();
        let rows = latents.rows();
        if latents.numel() == 0 || rows == 0 {
            return Err(Error::Empty("latents"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(latents.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; d];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(latents.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s / rows as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, z: &Tensor) -> Result<()> {
        if z.last_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "latent width {} vs normalizer width {}",
                z.last_dim(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.dim();
        Ok(Tensor::from_fn(z.shape(), |i| {
            (z.data()[i] - self.mean[i % d]) / self.std[i % d]
        }))
    }

    pub fn denormalize(&self, z: &Tensor) -> Result<Tensor> {
        self.check(z)?;
        let d = self.dim();
        Ok(Tensor::from_fn(z.shape(), |i| {
            z.data()[i] * self.std[i % d] + self.mean[i % d]
        }))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.set_meta("kind", "normalizer");
        self.write(&mut ck, "")?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::read(ck, "")
    }

    /// Stores `{prefix}mean` and `{prefix}std` in `ck`.
    pub fn write(&self, ck: &mut Checkpoint, prefix: &str) -> Result<()> {
        ck.push(format!("{prefix}mean"), Tensor::new(&[self.dim()], self.mean.clone())?);
        ck.push(format!("{prefix}std"), Tensor::new(&[self.dim()], self.std.clone())?);
        Ok(())
    }

    pub fn read(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let get = |k: &str| {
            ck.get(&format!("{prefix}{k}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::Config(format!("checkpoint lacks normalizer `{prefix}{k}`")))
        };
        let (mean, std) = (get("mean")?, get("std")?);
        if mean.len() != std.len() || std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::Config("corrupt normalizer statistics".into()));
        }
        Ok(Self { mean, std })
    }

    /// Identity transform of width `dim`.
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

/// Frozen encoder plus its (optional until fitted) normalizer.
#[derive(Clone, Debug)]
pub struct LatentSpace {
    pub encoder: EncoderModel,
    pub normalizer: Option<Normalizer>,
}

impl LatentSpace {
    pub fn new(encoder: EncoderModel) -> Self {
        Self {
            encoder,
            normalizer: None,
        }
    }

    /// Fits the normalizer on training sequences (every position counts,
    /// special tokens included).
    pub fn fit(&mut self, train: &[TokenSeq]) -> Result<&Normalizer> {
        let raw = self.encoder.raw_latents(train)?;
        Ok(self.normalizer.insert(Normalizer::fit(&raw)?))
    }

    pub fn normalizer(&self) -> Result<&Normalizer> {
        self.normalizer.as_ref().ok_or(Error::UnfittedNormalizer)
    }

    /// Normalized latents `[n, seq, dim]`.
    pub fn encode(&self, seqs: &[TokenSeq]) -> Result<Tensor> {
        let norm = self.normalizer()?;
        norm.normalize(&self.encoder.raw_latents(seqs)?)
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn seq_len(&self) -> usize {
        self.encoder.seq_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{tokenize, Vocab};

    fn tiny(mode: EncoderMode) -> EncoderModel {
        let cfg = EncoderConfig {
            mode,
            dim: 8,
            layers: 1,
            heads: 2,
        };
        EncoderModel::new(cfg, Vocab::synthetic().len(), 10, 3).unwrap()
    }

    #[test]
    fn special_positions_hold_raw_embeddings() {
        let v = Vocab::synthetic();
        let enc = tiny(EncoderMode::Contextual);
        let seqs = vec![tokenize("tom ate the pie .", 10, &v).unwrap()];
        let z = enc.raw_latents(&seqs).unwrap();
        let d = 8;
        for (p, &id) in seqs[0].ids.iter().enumerate() {
            let got = &z.data()[p * d..(p + 1) * d];
            if seqs[0].is_special(p) {
                assert_eq!(got, enc.embeddings().row(id));
            } else {
                assert_ne!(got, enc.embeddings().row(id));
            }
        }
    }

    #[test]
    fn single_latent_normalizer_floors_std() {
        let z = Tensor::new(&[1, 1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let n = Normalizer::fit(&z).unwrap();
        assert_eq!(n.mean, vec![1.0, -2.0, 0.5]);
        assert_eq!(n.std, vec![STD_FLOOR; 3]);
    }

    #[test]
    fn encode_requires_fitted_normalizer() {
        let v = Vocab::synthetic();
        let space = LatentSpace::new(tiny(EncoderMode::Embedding));
        let seqs = vec![tokenize("tom ran .", 10, &v).unwrap()];
        assert!(matches!(space.encode(&seqs), Err(Error::UnfittedNormalizer)));
    }

    #[test]
    fn denormalize_inverts_normalize() {
        let z = Tensor::from_fn(&[4, 2, 3], |i| (i as f64 * 1.3).sin() * 4.0 + 1.0);
        let n = Normalizer::fit(&z).unwrap();
        let back = n.denormalize(&n.normalize(&z).unwrap()).unwrap();
        for (a, b) in back.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_length_is_rejected() {
        let v = Vocab::synthetic();
        let enc = tiny(EncoderMode::Contextual);
        let seqs = vec![tokenize("tom ran .", 12, &v).unwrap()];
        assert!(matches!(enc.raw_latents(&seqs), Err(Error::Shape(_))));
    }
}
