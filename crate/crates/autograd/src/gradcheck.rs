//! Finite-difference gradient checking with the five-point central
//! stencil, whose truncation error is O(h⁴).
//!
//! The check only evaluates forward passes, so it is independent of the
//! backward rules it validates.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Finite-difference step.
    pub step: f64,
    /// Lower bound on the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly spaced).
    pub max_coords: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.max_rel_error = self.max_rel_error.max(rel);
        self.checked += 1;
    }
}

impl GradCheck {
    /// Derivative at 0 of `f(dx)` from `f(±h)` and `f(±2h)`.
    fn stencil(&self, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
        let h = self.step;
        let (p1, m1) = (f(h)?, f(-h)?);
        let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
        Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
    }

    fn coords(&self, numel: usize) -> Vec<usize> {
        match self.max_coords {
            Some(k) if k < numel => (0..k).map(|i| i * numel / k).collect(),
            _ => (0..numel).collect(),
        }
    }

    /// Checks gradients w.r.t. free-standing inputs. `f` receives the input
    /// leaves and returns a scalar.
    pub fn check_inputs(
        &self,
        inputs: &[Tensor],
        f: impl Fn(&mut Graph<'static>, &[Var]) -> Var,
    ) -> Result<GradCheckReport> {
        let eval = |inputs: &[Tensor], track: bool| -> Result<(f64, Option<Vec<Tensor>>)> {
            let mut g = Graph::standalone();
            let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), track)).collect();
            let root = f(&mut g, &vars);
            let value = g.value(root).item()?;
            if !track {
                return Ok((value, None));
            }
            let grads = g.backward(root)?;
            let gs = vars
                .iter()
                .zip(inputs)
                .map(|(v, t)| {
                    grads
                        .leaf(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
            Ok((value, Some(gs)))
        };

        let (_, analytic) = eval(inputs, true)?;
        let analytic = analytic.expect("tracked evaluation returns gradients");
        let mut report = GradCheckReport::default();
        let mut work = inputs.to_vec();
        for (ti, grad) in analytic.iter().enumerate() {
            for j in self.coords(inputs[ti].numel()) {
                let orig = work[ti].data()[j];
                let numeric = self.stencil(|dx| {
                    work[ti].data_mut()[j] = orig + dx;
                    Ok(eval(&work, false)?.0)
                })?;
                work[ti].data_mut()[j] = orig;
                report.record(grad.data()[j], numeric, self.floor);
            }
        }
        Ok(report)
    }

    /// Checks gradients w.r.t. every parameter of `store`. `f` builds the
    /// scalar loss on the given graph.
    pub fn check_params(
        &self,
        store: &ParamStore,
        f: impl Fn(&mut Graph<'_>) -> Var,
    ) -> Result<GradCheckReport> {
        let analytic = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root)?
        };
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::inference(s);
            let root = f(&mut g);
            g.value(root).item()
        };
        let mut report = GradCheckReport::default();
        let mut work = store.clone();
        for id in store.ids() {
            let numel = store.get(id).numel();
            for j in self.coords(numel) {
                let orig = work.get(id).data()[j];
                let numeric = self.stencil(|dx| {
                    work.get_mut(id).data_mut()[j] = orig + dx;
                    eval(&work)
                })?;
                work.get_mut(id).data_mut()[j] = orig;
                let a = analytic.param(id).map_or(0.0, |g| g.data()[j]);
                report.record(a, numeric, self.floor);
            }
        }
        Ok(report)
    }
}

/// A single-op check: input shapes and a scalar-valued graph over them.
pub type OpCase = (&'static str, Vec<Vec<usize>>, fn(&mut Graph<'static>, &[Var]) -> Var);

/// Reduce any tensor to a scalar with non-uniform weights so every output
/// coordinate contributes a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<'static>, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| ((i as f64) * 0.731).sin() + 0.3));
    let p = g.mul(x, w);
    g.sum(p)
}

/// One case per differentiable operation of [`Graph`].
pub fn op_cases() -> Vec<OpCase> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |g, v| {
            let y = g.matmul(v[0], v[1]);
            weighted_sum(g, y)
        }),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], |g, v| {
            let y = g.bmm(v[0], v[1], false);
            weighted_sum(g, y)
        }),
        ("bmm_transposed", vec![vec![2, 3, 4], vec![2, 5, 4]], |g, v| {
            let y = g.bmm(v[0], v[1], true);
            weighted_sum(g, y)
        }),
        ("add_sub_mul", vec![vec![3, 3], vec![3, 3]], |g, v| {
            let a = g.add(v[0], v[1]);
            let b = g.sub(v[0], v[1]);
            let y = g.mul(a, b);
            let y = g.scale(y, 0.7);
            weighted_sum(g, y)
        }),
        ("add_row_mul_row", vec![vec![4, 3], vec![3], vec![3]], |g, v| {
            let y = g.mul_row(v[0], v[1]);
            let y = g.add_row(y, v[2]);
            weighted_sum(g, y)
        }),
        ("repeat_rows", vec![vec![2, 3]], |g, v| {
            let y = g.repeat_rows(v[0], 3);
            weighted_sum(g, y)
        }),
        ("softmax", vec![vec![3, 5]], |g, v| {
            let y = g.softmax(v[0]);
            weighted_sum(g, y)
        }),
        ("mask_keys_softmax", vec![vec![4, 2, 3]], |g, v| {
            let bias = Tensor::new(&[2, 3], vec![0.0, 0.0, -1e9, 0.0, -1e9, 0.0]).unwrap();
            let y = g.mask_keys(v[0], &bias, 2);
            let y = g.softmax(y);
            weighted_sum(g, y)
        }),
        ("layer_norm", vec![vec![3, 6]], |g, v| {
            let y = g.layer_norm(v[0]);
            weighted_sum(g, y)
        }),
        ("gelu", vec![vec![10]], |g, v| {
            let y = g.gelu(v[0]);
            weighted_sum(g, y)
        }),
        ("gather", vec![vec![5, 3]], |g, v| {
            let y = g.gather(v[0], &[4, 0, 4, 2]);
            weighted_sum(g, y)
        }),
        ("mse", vec![vec![2, 3], vec![2, 3]], |g, v| g.mse(v[0], v[1])),
        ("cross_entropy", vec![vec![4, 5]], |g, v| {
            g.cross_entropy(v[0], &[1, 0, 4, 2], Some(&[1.0, 0.0, 2.0, 0.5]))
        }),
        ("mean", vec![vec![3, 2]], |g, v| {
            let sq = g.mul(v[0], v[0]);
            g.mean(sq)
        }),
        ("split_merge_heads", vec![vec![6, 4]], |g, v| {
            let s = g.split_heads(v[0], 3, 2);
            let sq = g.mul(s, s);
            let m = g.merge_heads(sq, 2);
            weighted_sum(g, m)
        }),
        ("reshape", vec![vec![2, 6]], |g, v| {
            let r = g.reshape(v[0], &[3, 4]);
            let y = g.softmax(r);
            weighted_sum(g, y)
        }),
    ]
}
