//! Central finite-difference oracle for the tape. Independent of the backward
//! rules: it only ever calls forward ops and reads scalar losses.

use calilab::numerics::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Builds a scalar loss from leaf vars.
pub trait LossBuilder: Fn(&mut Graph<f64>, &[Var]) -> Var {}
impl<F: Fn(&mut Graph<f64>, &[Var]) -> Var> LossBuilder for F {}

fn eval(inputs: &[Tensor<f64>], build: &dyn LossBuilder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Max relative error between analytic and central-difference gradients over
/// every coordinate of every input.
pub fn max_gradient_error(inputs: &[Tensor<f64>], build: &dyn LossBuilder) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &vars);
    let grads = g.backward(loss).expect("backward");

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    worst
}

pub struct Probe {
    pub op: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub build: Box<dyn LossBuilder>,
}

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// `count` random probes cycling through every differentiable primitive.
/// Non-scalar outputs are reduced with fixed random weights.
pub fn probes(count: usize, seed: u64) -> Vec<Probe> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let m = rng.gen_range(1..4);
        let k = rng.gen_range(1..5);
        let n = rng.gen_range(1..4);
        let probe = match i % 11 {
            0 => {
                let w = randn(&mut rng, &[m, n]);
                Probe {
                    op: "matmul",
                    inputs: vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k, n])],
                    build: Box::new(move |g, v| {
                        let y = g.matmul(v[0], v[1]).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            1 => {
                let w = randn(&mut rng, &[m, n]);
                Probe {
                    op: "matmul_t",
                    inputs: vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[n, k])],
                    build: Box::new(move |g, v| {
                        let y = g.matmul_t(v[0], v[1]).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            2 => {
                let w = randn(&mut rng, &[m, k]);
                Probe {
                    op: "add",
                    inputs: vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[m, k])],
                    build: Box::new(move |g, v| {
                        let y = g.add(v[0], v[1]).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            3 => {
                let w = randn(&mut rng, &[m, k]);
                Probe {
                    op: "gelu",
                    inputs: vec![Tensor::randn(vec![m, k], 2.0, &mut rng)],
                    build: Box::new(move |g, v| {
                        let y = g.gelu(v[0]);
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            4 => {
                let w = randn(&mut rng, &[m, k + 1]);
                Probe {
                    op: "rms_norm",
                    inputs: vec![randn(&mut rng, &[m, k + 1]), randn(&mut rng, &[k + 1])],
                    build: Box::new(move |g, v| {
                        let y = g.rms_norm(v[0], v[1]).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            5 | 6 => {
                let axis = i % 2;
                let w = randn(&mut rng, &[m, k]);
                Probe {
                    op: "softmax",
                    inputs: vec![randn(&mut rng, &[m, k])],
                    build: Box::new(move |g, v| {
                        let y = g.softmax(v[0], axis).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            7 => {
                let rows = k + 1;
                let ids: Vec<usize> = (0..m + 2).map(|_| rng.gen_range(0..rows)).collect();
                let w = randn(&mut rng, &[ids.len(), n]);
                Probe {
                    op: "gather",
                    inputs: vec![randn(&mut rng, &[rows, n])],
                    build: Box::new(move |g, v| {
                        let y = g.gather(v[0], &ids).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            8 => {
                let heads = rng.gen_range(1..3);
                let d = heads * rng.gen_range(1..3);
                let a = rng.gen_range(1..4);
                let b = rng.gen_range(1..4);
                let rows = a + b;
                let w = randn(&mut rng, &[rows, d]);
                let segs = vec![0..a, a..rows];
                Probe {
                    op: "attention",
                    inputs: vec![
                        randn(&mut rng, &[rows, d]),
                        randn(&mut rng, &[rows, d]),
                        randn(&mut rng, &[rows, d]),
                    ],
                    build: Box::new(move |g, v| {
                        let y = g.attention(v[0], v[1], v[2], &segs, heads).unwrap();
                        g.weighted_sum(y, &w).unwrap()
                    }),
                }
            }
            9 => {
                let vocab = k + 2;
                let targets: Vec<usize> = (0..m + 1).map(|_| rng.gen_range(0..vocab)).collect();
                let mut mask: Vec<bool> = (0..m + 1).map(|_| rng.gen_bool(0.6)).collect();
                mask[0] = true;
                Probe {
                    op: "cross_entropy",
                    inputs: vec![Tensor::randn(vec![m + 1, vocab], 2.0, &mut rng)],
                    build: Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask).unwrap()),
                }
            }
            _ => {
                let w = randn(&mut rng, &[m, n]);
                Probe {
                    op: "weighted_sum",
                    inputs: vec![randn(&mut rng, &[m, n])],
                    build: Box::new(move |g, v| g.weighted_sum(v[0], &w).unwrap()),
                }
            }
        };
        out.push(probe);
    }
    out
}

use calilab::model::{Batch, EncodedExample, GradMode, Model};

fn model_loss(model: &Model<f64>, examples: &[EncodedExample], mode: GradMode) -> (Graph<f64>, Var, Vec<(String, Var)>) {
    let refs: Vec<&EncodedExample> = examples.iter().collect();
    let (batch, rows) = Batch::from_examples(&refs);
    let mut g = Graph::new();
    let fp = model.record(&mut g, &batch, mode, false).unwrap();
    let picked = g.gather(fp.final_hidden, &rows).unwrap();
    let logits = g.matmul_t(picked, fp.embed).unwrap();
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let loss = g.cross_entropy(logits, &targets, &vec![true; targets.len()]).unwrap();
    (g, loss, fp.params)
}

/// Max relative error over `probes` random parameter coordinates of an
/// end-to-end masked-LM loss. Only trainable (non-frozen) tensors are probed.
pub fn model_gradient_error(model: &Model<f64>, examples: &[EncodedExample], probes: usize, seed: u64) -> f64 {
    let (g, loss, params) = model_loss(model, examples, GradMode::Train);
    let grads = g.backward(loss).unwrap();
    let trainable: Vec<(String, Var)> = params
        .into_iter()
        .filter(|(n, _)| !model.state.get(n).unwrap().frozen)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (name, var) = &trainable[rng.gen_range(0..trainable.len())];
        let len = model.state.get(name).unwrap().tensor.len();
        let j = rng.gen_range(0..len);
        let analytic = grads.get(*var).map(|t| t.data()[j]).unwrap_or(0.0);
        let eval_at = |delta: f64| {
            let mut m = model.clone();
            m.state.get_mut(name).unwrap().tensor.data_mut()[j] += delta;
            let (g, loss, _) = model_loss(&m, examples, GradMode::Inference);
            g.value(loss).item()
        };
        let numeric = (eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}
