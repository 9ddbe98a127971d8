//! Reverse-mode gradients of a key-value feed-forward block, checked against
//! central finite differences.

use calilab::model::key_value_ffn;
use calilab::numerics::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(g: &mut Graph<f64>, h: Var, k: Var, v: Var, weights: &Tensor<f64>) -> anyhow::Result<Var> {
    let out = key_value_ffn(g, h, k, v)?;
    Ok(g.weighted_sum(out, weights)?)
}

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hidden = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);
    let keys = Tensor::<f64>::randn([6, 4], 0.5, &mut rng);
    let values = Tensor::<f64>::randn([6, 4], 0.5, &mut rng);
    let weights = Tensor::<f64>::randn([3, 4], 1.0, &mut rng);

    let mut g = Graph::new();
    let h = g.leaf(hidden.clone(), true);
    let k = g.leaf(keys.clone(), true);
    let v = g.leaf(values.clone(), true);
    let out = loss(&mut g, h, k, v, &weights)?;
    let grads = g.backward(out)?;
    println!("loss {:.6}", g.value(out).item());

    let eval = |keys: &Tensor<f64>| -> anyhow::Result<f64> {
        let mut g = Graph::new();
        let h = g.leaf(hidden.clone(), false);
        let k = g.leaf(keys.clone(), false);
        let v = g.leaf(values.clone(), false);
        let out = loss(&mut g, h, k, v, &weights)?;
        Ok(g.value(out).item())
    };
    let analytic = grads.get(k).expect("keys receive a gradient");
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..keys.len() {
        let mut plus = keys.clone();
        plus.data_mut()[i] += step;
        let mut minus = keys.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4));
        if i < 4 {
            println!("dL/dK[{i}]  tape {a:+.8}  finite difference {numeric:+.8}");
        }
    }
    println!("max relative error over {} key entries: {worst:.2e}", keys.len());
    Ok(())
}
