//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended
//! in evaluation order, so reverse insertion order is a valid topological
//! order for [`Graph::backward`].
//!
//! Shape mismatches inside graph ops are programming errors and panic.
//! Public model APIs validate their inputs before building a graph.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Bmm { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    MulRow(usize, usize),
    RepeatRows(usize, usize),
    MaskKeys(usize),
    Softmax(usize),
    LayerNorm { x: usize, rstd: Vec<f64> },
    Gelu(usize),
    Gather { table: usize, ids: Vec<usize> },
    Mse(usize, usize),
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Sum(usize),
    Mean(usize),
    StopGrad,
    SplitHeads { x: usize, seq: usize, heads: usize },
    MergeHeads { x: usize, seq: usize, heads: usize },
    Reshape(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::RepeatRows(..) => "repeat_rows",
            Op::MaskKeys(..) => "mask_keys",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Gather { .. } => "gather",
            Op::Mse(..) => "mse",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::StopGrad => "stop_gradient",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// A tape of tensor operations.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    track: bool,
}

impl<'s> Graph<'s> {
    /// Graph whose parameters require gradients.
    pub fn new(store: &'s ParamStore) -> Self {
        Self::with_store(Some(store), true)
    }

    /// Graph that records no gradient information; parameters enter as
    /// constants.
    pub fn inference(store: &'s ParamStore) -> Self {
        Self::with_store(Some(store), false)
    }

    /// Graph without a parameter store, for free-standing computations.
    pub fn standalone() -> Graph<'static> {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            track: true,
        }
    }

    fn with_store(store: Option<&'s ParamStore>, track: bool) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            param_vars: HashMap::new(),
            track,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// Input leaf. With `requires_grad` its gradient is reported through
    /// [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a parameter. Repeated calls with the same id return the same
    /// node, so gradients from several uses accumulate.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no parameter store");
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul wants 2-d operands");
        assert_eq!(sa[1], sb[0], "matmul inner dims {sa:?} x {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a.0, b.0), rg)
    }

    /// Batched product of 3-d tensors: `a[B×m×k] · b[B×k×n]`, or with
    /// `trans_b`, `a[B×m×k] · b[B×n×k]ᵀ`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm wants 3-d operands");
        assert_eq!(sa[0], sb[0], "bmm batch dims");
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = vec![0.0; bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..bs {
            let ab = &ad[bi * m * k..(bi + 1) * m * k];
            let bb = &bd[bi * k * n..(bi + 1) * k * n];
            let cb = &mut out[bi * m * n..(bi + 1) * m * n];
            if trans_b {
                gemm_nt(ab, bb, cb, m, k, n);
            } else {
                gemm_nn(ab, bb, cb, m, k, n);
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(
            Tensor::from_parts(vec![bs, m, n], out),
            Op::Bmm {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        )
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = self
            .value(a)
            .zip_map(self.value(b), f)
            .unwrap_or_else(|e| panic!("{}: {e}", op.name()));
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a.0);
        self.push(out, Op::Scale(a.0, factor), rg)
    }

    /// Adds a `[c]` row vector to every row of `x[.., c]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        let c = xv.last_dim();
        assert_eq!(rv.numel(), c, "add_row width");
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o += r;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(row.0);
        self.push(Tensor::from_parts(shape, out), Op::AddRow(x.0, row.0), rg)
    }

    /// Multiplies every row of `x[.., c]` elementwise by a `[c]` vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        let c = xv.last_dim();
        assert_eq!(rv.numel(), c, "mul_row width");
        let mut out = xv.data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(rv.data()) {
                *o *= r;
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x.0) || self.rg(row.0);
        self.push(Tensor::from_parts(shape, out), Op::MulRow(x.0, row.0), rg)
    }

    /// `[n, c] → [n·times, c]`, each row repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "repeat_rows wants 2-d input");
        let (n, c) = (xv.shape()[0], xv.shape()[1]);
        let mut out = Vec::with_capacity(n * times * c);
        for i in 0..n {
            for _ in 0..times {
                out.extend_from_slice(xv.row(i));
            }
        }
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(vec![n * times, c], out),
            Op::RepeatRows(x.0, times),
            rg,
        )
    }

    /// Adds a key bias to attention scores `x[N·heads, q, k]` from a
    /// `[N, k]` table (typically 0 for visible keys and a large negative
    /// number for hidden ones). The bias is a constant.
    pub fn mask_keys(&mut self, x: Var, key_bias: &Tensor, heads: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape();
        assert_eq!(s.len(), 3, "mask_keys wants 3-d scores");
        let (bh, q, k) = (s[0], s[1], s[2]);
        assert_eq!(key_bias.shape(), &[bh / heads, k], "mask_keys bias shape");
        let mut out = xv.data().to_vec();
        for b in 0..bh {
            let bias = key_bias.row(b / heads);
            for r in 0..q {
                let row = &mut out[(b * q + r) * k..(b * q + r + 1) * k];
                for (o, m) in row.iter_mut().zip(bias) {
                    *o += m;
                }
            }
        }
        let shape = s.to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, out), Op::MaskKeys(x.0), rg)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(Tensor::from_parts(shape, out), Op::Softmax(x.0), rg)
    }

    /// Normalizes each row of the last dimension to zero mean and unit
    /// variance. No affine part; compose with [`Graph::mul_row`] and
    /// [`Graph::add_row`].
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.data().to_vec();
        let mut rstd = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x: x.0, rstd },
            rg,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        // 0.5·(1 + tanh(u)) = σ(2u)
        let out = self.value(x).map(|v| {
            let u = GELU_C * (v + GELU_A * v * v * v);
            v / (1.0 + (-2.0 * u).exp())
        });
        let rg = self.rg(x.0);
        self.push(out, Op::Gelu(x.0), rg)
    }

    /// Row lookup: `table[V, c]` indexed by `ids` gives `[ids.len(), c]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        assert_eq!(tv.ndim(), 2, "gather wants a 2-d table");
        let (v, c) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < v, "gather id {id} out of range {v}");
            out.extend_from_slice(tv.row(id));
        }
        let rg = self.rg(table.0);
        self.push(
            Tensor::from_parts(vec![ids.len(), c], out),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self
            .value(a)
            .zip_map(self.value(b), |x, y| (x - y) * (x - y))
            .unwrap_or_else(|e| panic!("mse: {e}"));
        let loss = d.sum() / d.numel() as f64;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(Tensor::scalar(loss), Op::Mse(a.0, b.0), rg)
    }

    /// Weighted mean cross-entropy of `logits[rows, V]` against `targets`.
    /// Rows with weight 0 are ignored. Weights must not all be zero.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Var {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.last_dim());
        assert_eq!(targets.len(), rows, "cross_entropy targets");
        let weights: Vec<f64> = match weights {
            Some(w) => {
                assert_eq!(w.len(), rows, "cross_entropy weights");
                w.to_vec()
            }
            None => vec![1.0; rows],
        };
        let total_w: f64 = weights.iter().sum();
        assert!(total_w > 0.0, "cross_entropy weights sum to zero");
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if weights[r] != 0.0 {
                assert!(targets[r] < c, "cross_entropy target out of range");
                loss -= weights[r] * row[targets[r]].max(1e-300).ln();
            }
        }
        loss /= total_w;
        let rg = self.rg(logits.0);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.numel() as f64;
        let rg = self.rg(x.0);
        self.push(Tensor::scalar(s), Op::Mean(x.0), rg)
    }

    /// Identity in the forward pass; blocks gradient flow in the backward
    /// pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGrad, false)
    }

    /// `[N·seq, heads·dh] → [N·heads, seq, dh]`
    pub fn split_heads(&mut self, x: Var, seq: usize, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 2, "split_heads wants 2-d input");
        let (rows, d) = (xv.shape()[0], xv.shape()[1]);
        assert!(rows % seq == 0 && d % heads == 0, "split_heads dims");
        let (n, dh) = (rows / seq, d / heads);
        let mut out = vec![0.0; rows * d];
        permute_heads(xv.data(), &mut out, n, seq, heads, dh, false);
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(vec![n * heads, seq, dh], out),
            Op::SplitHeads { x: x.0, seq, heads },
            rg,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 3, "merge_heads wants 3-d input");
        let (bh, seq, dh) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let n = bh / heads;
        let mut out = vec![0.0; xv.numel()];
        permute_heads(xv.data(), &mut out, n, seq, heads, dh, true);
        let rg = self.rg(x.0);
        self.push(
            Tensor::from_parts(vec![n * seq, heads * dh], out),
            Op::MergeHeads { x: x.0, seq, heads },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("{e}"));
        let rg = self.rg(x.0);
        self.push(v, Op::Reshape(x.0), rg)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NotScalar(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Tensor::from_parts(rv.shape().to_vec(), vec![1.0]));
        let mut pending = Vec::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            // contributions were checked when produced; only a sum can overflow
            if node.param.is_some() && !g.is_finite() {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: i,
                });
            }
            if let Op::Leaf = node.op {
                match node.param {
                    Some(id) => {
                        out.params.insert(id, g);
                    }
                    None => {
                        out.leaves.insert(i, g);
                    }
                }
                continue;
            }
            pending.clear();
            self.backprop_node(i, &g, &mut pending);
            for (idx, contribution) in pending.drain(..) {
                if !contribution.is_finite() {
                    return Err(Error::NonFinite {
                        op: node.op.name(),
                        node: i,
                    });
                }
                match &mut grads[idx] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut Vec<(usize, Tensor)>, idx: usize, g: Tensor) {
        if self.nodes[idx].requires_grad {
            grads.push((idx, g));
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut Vec<(usize, Tensor)>) {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let shaped = |j: usize, data: Vec<f64>| Tensor::from_parts(val(j).shape().to_vec(), data);
        match &node.op {
            Op::Leaf | Op::StopGrad => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
                let n = val(b).shape()[1];
                if self.rg(a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), val(b).data(), &mut ga, m, n, k);
                    self.accumulate(grads, a, shaped(a, ga));
                }
                if self.rg(b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(val(a).data(), g.data(), &mut gb, m, k, n);
                    self.accumulate(grads, b, shaped(b, gb));
                }
            }
            &Op::Bmm { a, b, trans_b } => {
                let sa = val(a).shape();
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = g.shape()[2];
                let (ad, bd, gd) = (val(a).data(), val(b).data(), g.data());
                if self.rg(a) {
                    let mut ga = vec![0.0; bs * m * k];
                    for bi in 0..bs {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let bb = &bd[bi * k * n..(bi + 1) * k * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if trans_b {
                            // C = A·Bᵀ, B is [n×k]: dA = dC·B
                            gemm_nn(gb, bb, out, m, n, k);
                        } else {
                            // B is [k×n]: dA = dC·Bᵀ
                            gemm_nt(gb, bb, out, m, n, k);
                        }
                    }
                    self.accumulate(grads, a, shaped(a, ga));
                }
                if self.rg(b) {
                    let mut gbv = vec![0.0; bs * k * n];
                    for bi in 0..bs {
                        let gb = &gd[bi * m * n..(bi + 1) * m * n];
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let out = &mut gbv[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            // dB[n×k] = dCᵀ·A
                            gemm_tn(gb, ab, out, m, n, k);
                        } else {
                            // dB[k×n] = Aᵀ·dC
                            gemm_tn(ab, gb, out, m, k, n);
                        }
                    }
                    self.accumulate(grads, b, shaped(b, gbv));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, g.zip_map(val(b), |x, y| x * y).unwrap());
                }
                if self.rg(b) {
                    self.accumulate(grads, b, g.zip_map(val(a), |x, y| x * y).unwrap());
                }
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.map(|v| v * f)),
            &Op::AddRow(x, row) => {
                self.accumulate(grads, x, g.clone());
                if self.rg(row) {
                    let c = g.last_dim();
                    let mut gr = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, row, shaped(row, gr));
                }
            }
            &Op::MulRow(x, row) => {
                let c = g.last_dim();
                if self.rg(x) {
                    let mut gx = g.data().to_vec();
                    for chunk in gx.chunks_mut(c) {
                        for (o, r) in chunk.iter_mut().zip(val(row).data()) {
                            *o *= r;
                        }
                    }
                    self.accumulate(grads, x, shaped(x, gx));
                }
                if self.rg(row) {
                    let mut gr = vec![0.0; c];
                    for (gc, xc) in g.data().chunks(c).zip(val(x).data().chunks(c)) {
                        for ((o, gv), xv) in gr.iter_mut().zip(gc).zip(xc) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, row, shaped(row, gr));
                }
            }
            &Op::RepeatRows(x, times) => {
                let c = g.last_dim();
                let n = val(x).shape()[0];
                let mut gx = vec![0.0; n * c];
                for (r, chunk) in g.data().chunks(c).enumerate() {
                    let dst = &mut gx[(r / times) * c..(r / times + 1) * c];
                    for (o, v) in dst.iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                self.accumulate(grads, x, shaped(x, gx));
            }
            &Op::MaskKeys(x) => self.accumulate(grads, x, g.clone()),
            &Op::Softmax(x) => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for ((o, yr), gr) in gx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, x, shaped(x, gx));
            }
            Op::LayerNorm { x, rstd } => {
                let y = &node.value;
                let c = y.last_dim();
                let mut gx = vec![0.0; y.numel()];
                for (r, ((o, yr), gr)) in gx
                    .chunks_mut(c)
                    .zip(y.data().chunks(c))
                    .zip(g.data().chunks(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((ov, yv), gv) in o.iter_mut().zip(yr).zip(gr) {
                        *ov = rstd[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, shaped(*x, gx));
            }
            &Op::Gelu(x) => {
                let gx = val(x)
                    .zip_map(g, |v, gv| {
                        let u = GELU_C * (v + GELU_A * v * v * v);
                        let sig = 1.0 / (1.0 + (-2.0 * u).exp());
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gv * (sig + 2.0 * v * sig * (1.0 - sig) * du)
                    })
                    .unwrap();
                self.accumulate(grads, x, gx);
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let c = tv.last_dim();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * c..(r + 1) * c];
                    for (o, v) in gt[id * c..(id + 1) * c].iter_mut().zip(src) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, shaped(*table, gt));
            }
            &Op::Mse(a, b) => {
                let n = val(a).numel() as f64;
                let s = 2.0 * g.data()[0] / n;
                let diff = val(a).zip_map(val(b), |x, y| s * (x - y)).unwrap();
                if self.rg(b) {
                    self.accumulate(grads, b, diff.map(|v| -v));
                }
                self.accumulate(grads, a, diff);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let c = val(*logits).last_dim();
                let total_w: f64 = weights.iter().sum();
                let s = g.data()[0] / total_w;
                let mut gl = probs.clone();
                for (r, row) in gl.chunks_mut(c).enumerate() {
                    let w = weights[r] * s;
                    if weights[r] == 0.0 {
                        row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    row[targets[r]] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= w);
                }
                self.accumulate(grads, *logits, shaped(*logits, gl));
            }
            &Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, x, Tensor::full(val(x).shape(), s));
            }
            &Op::Mean(x) => {
                let s = g.data()[0] / val(x).numel() as f64;
                self.accumulate(grads, x, Tensor::full(val(x).shape(), s));
            }
            &Op::SplitHeads { x, seq, heads } => {
                let d = val(x).shape()[1];
                let n = val(x).shape()[0] / seq;
                let mut gx = vec![0.0; g.numel()];
                permute_heads(g.data(), &mut gx, n, seq, heads, d / heads, true);
                self.accumulate(grads, x, shaped(x, gx));
            }
            &Op::MergeHeads { x, seq, heads } => {
                let s = val(x).shape();
                let (n, dh) = (s[0] / heads, s[2]);
                let mut gx = vec![0.0; g.numel()];
                permute_heads(g.data(), &mut gx, n, seq, heads, dh, false);
                self.accumulate(grads, x, shaped(x, gx));
            }
            &Op::Reshape(x) => {
                let gx = g.clone().reshape(val(x).shape()).unwrap();
                self.accumulate(grads, x, gx);
            }
        }
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Moves data between `[N·seq, heads·dh]` (merged) and `[N·heads, seq, dh]`
/// (split) layouts. `inverse == false` goes merged → split.
fn permute_heads(src: &[f64], dst: &mut [f64], n: usize, seq: usize, heads: usize, dh: usize, inverse: bool) {
    let d = heads * dh;
    for b in 0..n {
        for s in 0..seq {
            for h in 0..heads {
                let merged = (b * seq + s) * d + h * dh;
                let split = ((b * heads + h) * seq + s) * dh;
                let (from, to) = if inverse { (split, merged) } else { (merged, split) };
                dst[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
}
