//! Transformer building blocks over a [`Graph`].
//!
//! Activations are 2-d `[batch·seq, width]` tensors; attention reshapes to
//! `[batch·heads, seq, head_dim]` internally. Blocks are pre-LayerNorm.

use autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Additive bias that hides a key from attention.
pub const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::with_std(store, name, in_dim, out_dim, 1.0 / (in_dim as f64).sqrt(), rng)
    }

    /// `x·W` with no bias term, so a zero input maps to zero.
    pub fn no_bias(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng))?;
        Ok(Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[in_dim, out_dim], std, rng))?;
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?);
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        let y = g.mul_row(n, gain);
        g.add_row(y, bias)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        assert!(dim.is_multiple_of(heads), "width {dim} not divisible by {heads} heads");
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, rng)?,
            heads,
        })
    }

    /// `x` is `[n·q_len, dim]`, `memory` is `[n·k_len, dim]` (pass `x` for
    /// self-attention). `key_bias` is an optional `[n, k_len]` additive mask.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Var,
        q_len: usize,
        k_len: usize,
        key_bias: Option<&Tensor>,
    ) -> Var {
        let dim = self.query.out_dim;
        let head_dim = dim / self.heads;
        let q = self.query.forward(g, x);
        let k = self.key.forward(g, memory);
        let v = self.value.forward(g, memory);
        let q = g.split_heads(q, q_len, self.heads);
        let k = g.split_heads(k, k_len, self.heads);
        let v = g.split_heads(v, k_len, self.heads);
        let scores = g.bmm(q, k, true);
        let mut scores = g.scale(scores, 1.0 / (head_dim as f64).sqrt());
        if let Some(bias) = key_bias {
            scores = g.mask_keys(scores, bias, self.heads);
        }
        let weights = g.softmax(scores);
        let ctx = g.bmm(weights, v, false);
        let ctx = g.merge_heads(ctx, self.heads);
        self.output.forward(g, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng)?,
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Conditioning memory for cross-attention.
#[derive(Clone, Copy, Debug)]
pub struct Memory<'a> {
    pub states: Var,
    pub len: usize,
    pub key_bias: Option<&'a Tensor>,
}

/// Pre-LN transformer block: self-attention, optional cross-attention,
/// feed-forward, each with a residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub attn_norm: LayerNorm,
    pub attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        cross_attention: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let cross = if cross_attention {
            Some((
                LayerNorm::new(store, &format!("{name}.cross_norm"), dim)?,
                Attention::new(store, &format!("{name}.cross"), dim, heads, rng)?,
            ))
        } else {
            None
        };
        Ok(Self {
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim)?,
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            cross,
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), dim)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        seq: usize,
        self_bias: Option<&Tensor>,
        memory: Option<Memory<'_>>,
    ) -> Var {
        let n = self.attn_norm.forward(g, h);
        let a = self.attn.forward(g, n, n, seq, seq, self_bias);
        let mut h = g.add(h, a);
        if let (Some((norm, cross)), Some(mem)) = (&self.cross, memory) {
            let n = norm.forward(g, h);
            let c = cross.forward(g, n, mem.states, seq, mem.len, mem.key_bias);
            h = g.add(h, c);
        }
        let n = self.ff_norm.forward(g, h);
        let f = self.ff.forward(g, n);
        g.add(h, f)
    }
}

/// Key bias hiding PAD positions: `[n, seq]` with 0 for real tokens and
/// [`MASKED`] for padding.
pub fn padding_bias(seqs: &[crate::corpus::TokenSeq]) -> Tensor {
    let m = seqs.first().map_or(1, |s| s.len());
    Tensor::from_fn(&[seqs.len(), m], |i| {
        if seqs[i / m].ids[i % m] == crate::corpus::PAD {
            MASKED
        } else {
            0.0
        }
    })
}

/// Position ids `0..seq` repeated for each of `n` sequences.
pub fn position_ids(n: usize, seq: usize) -> Vec<usize> {
    (0..n).flat_map(|_| 0..seq).collect()
}

/// Sinusoidal features of continuous timesteps, `[ts.len(), dim]`.
/// Half the columns are sines, half cosines, at geometrically spaced
/// frequencies of `1000·t`.
pub fn timestep_features(ts: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[ts.len(), dim], |i| {
        let (row, col) = (i / dim, i % dim);
        let k = col % half;
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let angle = 1000.0 * ts[row] * freq;
        if col < half {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Small bidirectional transformer over token ids. Used as the condition
/// encoder in sequence-to-sequence mode.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNorm,
    pub seq_len: usize,
}

impl TokenEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        vocab: usize,
        seq_len: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let token_emb = store.add(format!("{name}.token_emb"), Tensor::randn(&[vocab, dim], 1.0, rng))?;
        let pos_emb = store.add(format!("{name}.pos_emb"), Tensor::randn(&[seq_len, dim], 0.1, rng))?;
        let blocks = (0..layers)
            .map(|l| Block::new(store, &format!("{name}.block{l}"), dim, heads, 4 * dim, false, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            token_emb,
            pos_emb,
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), dim)?,
            seq_len,
        })
    }

    /// Encodes `seqs` into `[n·seq_len, dim]`, PAD keys hidden.
    pub fn forward(&self, g: &mut Graph<'_>, seqs: &[crate::corpus::TokenSeq]) -> Var {
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use autograd::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let block = Block::new(&mut store, "b", 4, 2, 8, true, &mut rng).unwrap();
        let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let mem = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let bias = Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, MASKED]).unwrap();
        let target = Tensor::randn(&[6, 4], 1.0, &mut rng);
        let report = GradCheck::default()
            .check_params(&store, |g| {
                let xv = g.constant(x.clone());
                let mv = g.constant(mem.clone());
                let memory = Memory {
                    states: mv,
                    len: 2,
                    key_bias: Some(&bias),
                };
                let y = block.forward(g, xv, 3, None, Some(memory));
                let t = g.constant(target.clone());
                g.mse(y, t)
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-4, "{}", report.max_rel_error);
    }

    #[test]
    fn masked_keys_get_no_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 4, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mut x2 = x.clone();
        // change the hidden key/value position only
        for v in &mut x2.data_mut()[8..12] {
            *v += 5.0;
        }
        let bias = Tensor::new(&[1, 3], vec![0.0, 0.0, MASKED]).unwrap();
        let run = |input: &Tensor| {
            let mut g = Graph::inference(&store);
            let xv = g.constant(input.clone());
            let y = attn.forward(&mut g, xv, xv, 3, 3, Some(&bias));
            g.value(y).clone()
        };
        let (a, b) = (run(&x), run(&x2));
        // rows 0 and 1 only see keys 0 and 1, which did not change
        for i in 0..8 {
            assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn timestep_features_are_bounded_and_distinct() {
        let f = timestep_features(&[0.0, 0.5], 8);
        assert_eq!(f.shape(), &[2, 8]);
        assert!(f.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(f.row(0), f.row(1));
    }
}
