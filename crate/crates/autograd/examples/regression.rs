//! Fits a two-layer network to a noisy sine with AdamW, after checking its
//! gradients against finite differences.

use autograd::{AdamW, AdamWConfig, Graph, GradCheck, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph<'_>, p: &ParamStore, x: &Tensor, y: &Tensor) -> Var {
    let ids = ["w1", "b1", "w2", "b2"].map(|n| p.id(n).expect("parameter exists"));
    let [w1, b1, w2, b2] = ids.map(|id| g.param(id));
    let x = g.leaf(x.clone(), false);
    let y = g.leaf(y.clone(), false);
    let h = g.matmul(x, w1);
    let h = g.add_row(h, b1);
    let h = g.gelu(h);
    let out = g.matmul(h, w2);
    let out = g.add_row(out, b2);
    g.mse(out, y)
}

fn main() -> autograd::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 128;
    let x = Tensor::from_fn(&[n, 1], |i| -3.0 + 6.0 * i as f64 / (n - 1) as f64);
    let noise = Tensor::randn(&[n, 1], 0.05, &mut rng);
    let y = x.zip_map(&noise, |a, e| a.sin() + e)?;

    let mut store = ParamStore::new();
    store.add("w1", Tensor::randn(&[1, 32], 1.0, &mut rng))?;
    store.add("b1", Tensor::zeros(&[32]))?;
    store.add("w2", Tensor::randn(&[32, 1], 0.2, &mut rng))?;
    store.add("b2", Tensor::zeros(&[1]))?;

    let check = GradCheck::default().check_params(&store, |g| loss(g, &store, &x, &y))?;
    println!("gradient check: {} coordinates, max relative error {:.2e}", check.checked, check.max_rel_error);

    let config = AdamWConfig { lr: 1e-2, warmup_steps: 50, ema_decay: 0.99, ..Default::default() };
    let mut opt = AdamW::new(config, &store);
    for step in 0..=2000 {
        let grads = {
            let mut g = Graph::new(&store);
            let l = loss(&mut g, &store, &x, &y);
            if step % 400 == 0 {
                println!("step {step:>4}  mse {:.5}", g.value(l).item()?);
            }
            g.backward(l)?
        };
        opt.step(&mut store, grads)?;
    }
    let ema = opt.ema_store(&store)?;
    let mut g = Graph::inference(&ema);
    let l = loss(&mut g, &ema, &x, &y);
    println!("EMA weights mse {:.5}", g.value(l).item()?);
    Ok(())
}
