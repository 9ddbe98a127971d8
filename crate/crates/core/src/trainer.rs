//! Optimisation loops (pretraining, adapter calibration, continued
//! pretraining) and perplexity evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assess::em_f1;
use crate::calinet::{adapter_state, set_adapter_state, AdapterState};
use crate::error::{Error, Result};
use crate::model::{names, Batch, EncodedExample, GradMode, Model, ModelState};
use crate::numerics::{log_sum_exp, Graph, Gradients, Scalar, Tensor, Var};
use crate::worldgen::{CalibrationExample, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub seed: u64,
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            learning_rate: 1e-3,
            warmup_steps: 100,
            seed: 0,
            eval_every: 100,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        Self {
            steps: 6_000,
            learning_rate: 1e-3,
            warmup_steps: 200,
            eval_every: 500,
            ..Self::default()
        }
    }

    pub fn calibrate_default() -> Self {
        Self {
            steps: 5_000,
            learning_rate: 3e-3,
            warmup_steps: 100,
            eval_every: 100,
            ..Self::default()
        }
    }

    /// Zero steps is allowed and means "no update".
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "batch_size, eval_every and learning_rate must be positive: {self:?}"
            )));
        }
        if self.warmup_steps > self.steps.max(1) && self.steps > 0 {
            return Err(Error::Config(format!(
                "warmup_steps {} exceeds steps {}",
                self.warmup_steps, self.steps
            )));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.learning_rate
        } else {
            self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

/// Adam with bias correction; moments kept per parameter name.
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: BTreeMap<String, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<S: Scalar> Adam<S> {
    /// Applies one update to every (name, param, grad) triple.
    pub fn step<'a>(&mut self, lr: f64, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor<S>, &'a Tensor<S>)>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let (one, eps) = (S::one(), S::from_f64_lossy(self.eps));
        let step = S::from_f64_lossy(lr / c1);
        let c2s = S::from_f64_lossy(c2);
        for (name, param, grad) in updates {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![S::zero(); param.len()], vec![S::zero(); param.len()]));
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= step * *m / ((*v / c2s).sqrt() + eps);
            }
        }
    }
}

/// Fails if any frozen tensor received a gradient.
pub fn check_frozen<S: Scalar>(state: &ModelState<S>, params: &[(String, Var)], grads: &Gradients<S>) -> Result<()> {
    for (name, var) in params {
        let frozen = state.get(name).map(|p| p.frozen).unwrap_or(false);
        if frozen && grads.get(*var).is_some() {
            return Err(Error::Invariant(format!("gradient reached frozen tensor {name}")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub split: String,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Step whose parameters were kept (the last step when there is no
    /// validation set).
    pub best_step: usize,
    pub best_valid_loss: Option<f64>,
    pub initial_valid_loss: Option<f64>,
}

impl TrainOutcome {
    pub fn curve_csv(&self, run_hash: &str) -> String {
        let mut out = String::from("run_hash,step,split,loss\n");
        for p in &self.curve {
            writeln!(out, "{run_hash},{},{},{}", p.step, p.split, p.loss).unwrap();
        }
        out
    }

    pub fn losses(&self, split: &str) -> Vec<(usize, f64)> {
        self.curve
            .iter()
            .filter(|p| p.split == split)
            .map(|p| (p.step, p.loss))
            .collect()
    }
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
struct Sampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Sampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Mean cross-entropy at the mask rows of `examples` through the full model.
fn full_loss<S: Scalar>(
    model: &Model<S>,
    examples: &[&EncodedExample],
    mode: GradMode,
) -> Result<(Graph<S>, Var, Vec<(String, Var)>)> {
    let (batch, rows) = Batch::from_examples(examples);
    let mut g = Graph::new();
    let fp = model.record(&mut g, &batch, mode, false)?;
    let picked = g.gather(fp.final_hidden, &rows)?;
    let logits = g.matmul_t(picked, fp.embed)?;
    let targets: Vec<usize> = examples.iter().map(|e| e.target).collect();
    let loss = g.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
    Ok((g, loss, fp.params))
}

fn mean_loss<S: Scalar>(model: &Model<S>, examples: &[EncodedExample], chunk: usize) -> Result<f64> {
    let mut total = 0.0;
    for part in examples.chunks(chunk) {
        let refs: Vec<&EncodedExample> = part.iter().collect();
        let (g, loss, _) = full_loss(model, &refs, GradMode::Inference)?;
        total += g.value(loss).item().to_f64().unwrap_or(f64::NAN) * part.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

fn apply<S: Scalar>(model: &mut Model<S>, adam: &mut Adam<S>, lr: f64, params: &[(String, Var)], grads: &mut Gradients<S>) {
    let mut pending: Vec<(String, Tensor<S>)> = Vec::new();
    for (name, var) in params {
        if let Some(g) = grads.take(*var) {
            pending.push((name.clone(), g));
        }
    }
    let mut targets: Vec<(&str, &mut Tensor<S>, &Tensor<S>)> = Vec::with_capacity(pending.len());
    let mut by_name: BTreeMap<&str, &Tensor<S>> = pending.iter().map(|(n, g)| (n.as_str(), g)).collect();
    for (name, p) in model.state.iter_mut() {
        if let Some(g) = by_name.remove(name.as_str()) {
            targets.push((name.as_str(), &mut p.tensor, g));
        }
    }
    adam.step(lr, targets);
}

/// Trains every non-frozen tensor of `model` on the masked-LM objective.
///
/// With a validation set, the parameters with the lowest validation loss
/// (evaluated at step 0 and every `eval_every` steps) are kept. Without one,
/// the final parameters are kept and the curve records the running train loss.
pub fn train_full<S: Scalar>(
    model: &mut Model<S>,
    train: &[EncodedExample],
    valid: Option<&[EncodedExample]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut sampler = Sampler::new(train.len(), config.seed);
    let mut adam = Adam::default();
    let mut outcome = TrainOutcome::default();
    let mut best: Option<(f64, Model<S>)> = None;
    let mut window = Vec::new();

    let record_valid = |model: &Model<S>, step: usize, outcome: &mut TrainOutcome, best: &mut Option<(f64, Model<S>)>| -> Result<()> {
        if let Some(valid) = valid {
            let loss = mean_loss(model, valid, 256)?;
            outcome.curve.push(CurvePoint {
                step,
                split: "valid".into(),
                loss,
            });
            if step == 0 {
                outcome.initial_valid_loss = Some(loss);
            }
            if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                *best = Some((loss, model.clone()));
                outcome.best_step = step;
                outcome.best_valid_loss = Some(loss);
            }
        }
        Ok(())
    };
    record_valid(model, 0, &mut outcome, &mut best)?;

    for step in 0..config.steps {
        let idx = sampler.next_batch(config.batch_size);
        let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &train[i]).collect();
        let (g, loss, params) = full_loss(model, &refs, GradMode::Train)?;
        let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if step == 0 {
            outcome.curve.push(CurvePoint {
                step: 0,
                split: "train".into(),
                loss: value,
            });
        }
        let mut grads = g.backward(loss)?;
        check_frozen(&model.state, &params, &grads)?;
        apply(model, &mut adam, config.lr_at(step), &params, &mut grads);
        window.push(value);
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            outcome.curve.push(CurvePoint {
                step: done,
                split: "train".into(),
                loss: window.iter().sum::<f64>() / window.len() as f64,
            });
            window.clear();
            record_valid(model, done, &mut outcome, &mut best)?;
        }
    }
    match best {
        Some((_, kept)) => *model = kept,
        None => outcome.best_step = config.steps,
    }
    Ok(outcome)
}

/// Base-model pretraining on the masked-LM corpus.
pub fn pretrain<S: Scalar>(model: &mut Model<S>, corpus: &[EncodedExample], config: &TrainConfig) -> Result<TrainOutcome> {
    if model.adapter.is_some() {
        return Err(Error::InvalidArgument("pretraining expects a model without adapter".into()));
    }
    train_full(model, corpus, None, config)
}

/// All-parameter training on the calibration data, on a copy of the base.
pub fn continue_pretrain<S: Scalar>(
    base: &Model<S>,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<(Model<S>, TrainOutcome)> {
    let mut model = base.clone();
    crate::calinet::detach(&mut model);
    model.state.set_frozen(|_| true, false);
    let outcome = train_full(&mut model, train, Some(valid), config)?;
    Ok((model, outcome))
}

/// Frozen activations at the adapter layer for a fixed example set: the
/// block output without the adapter term and the adapter's input. When the
/// adapter sits on the last layer only the mask rows are kept.
struct AdapterCache<S> {
    base_out: Tensor<S>,
    adapter_in: Tensor<S>,
    /// Row range of each example inside the cached tensors.
    spans: Vec<Range<usize>>,
    /// Mask row of each example inside the cached tensors.
    mask_rows: Vec<usize>,
    targets: Vec<usize>,
}

impl<S: Scalar> AdapterCache<S> {
    fn build(model: &Model<S>, examples: &[EncodedExample], only_mask: bool) -> Result<Self> {
        let d = model.config.d;
        let mut base_out = Vec::new();
        let mut adapter_in = Vec::new();
        let mut spans = Vec::with_capacity(examples.len());
        let mut mask_rows = Vec::with_capacity(examples.len());
        let mut rows = 0usize;
        for part in examples.chunks(256) {
            let refs: Vec<&EncodedExample> = part.iter().collect();
            let (batch, masks) = Batch::from_examples(&refs);
            let mut g = Graph::new();
            let fp = model.record(&mut g, &batch, GradMode::Inference, true)?;
            let (pre, inp) = fp
                .pre_adapter
                .zip(fp.adapter_input)
                .ok_or_else(|| Error::InvalidArgument("calibration needs an attached adapter".into()))?;
            let (pre, inp) = (g.value(pre), g.value(inp));
            for (seg, &mrow) in batch.segments.iter().zip(&masks) {
                let keep: Range<usize> = if only_mask { mrow..mrow + 1 } else { seg.clone() };
                let start = rows;
                for r in keep.clone() {
                    base_out.extend_from_slice(pre.row(r));
                    adapter_in.extend_from_slice(inp.row(r));
                }
                rows += keep.len();
                spans.push(start..rows);
                mask_rows.push(start + (mrow - keep.start));
            }
        }
        Ok(Self {
            base_out: Tensor::new([rows, d], base_out)?,
            adapter_in: Tensor::new([rows, d], adapter_in)?,
            spans,
            mask_rows,
            targets: examples.iter().map(|e| e.target).collect(),
        })
    }

    /// Loss over the selected examples, replaying only the layers above the
    /// adapter.
    fn loss(&self, model: &Model<S>, idx: &[usize], mode: GradMode) -> Result<(Graph<S>, Var, Vec<(String, Var)>)> {
        let adapter = model
            .adapter
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("calibration needs an attached adapter".into()))?;
        let mut rows = Vec::new();
        let mut segments = Vec::with_capacity(idx.len());
        let mut mask = Vec::with_capacity(idx.len());
        for &i in idx {
            let span = &self.spans[i];
            let start = rows.len();
            mask.push(start + self.mask_rows[i] - span.start);
            rows.extend(span.clone());
            segments.push(start..rows.len());
        }
        let mut g = Graph::new();
        let base_out = g.constant(gather_rows(&self.base_out, &rows));
        let adapter_in = g.constant(gather_rows(&self.adapter_in, &rows));
        let mut params = Vec::new();
        let mut leaf = |g: &mut Graph<S>, name: &str| -> Result<Var> {
            let p = model.state.expect(name)?;
            let v = g.leaf(p.tensor.clone(), mode == GradMode::Train && !p.frozen);
            params.push((name.to_string(), v));
            Ok(v)
        };
        let ak = leaf(&mut g, names::ADAPTER_K)?;
        let av = leaf(&mut g, names::ADAPTER_V)?;
        let delta = crate::model::key_value_ffn(&mut g, adapter_in, ak, av)?;
        let x = g.add(base_out, delta)?;
        let fp = model.record_from(&mut g, x, &segments, adapter.attach_layer + 1, mode)?;
        params.extend(fp.params);
        let picked = g.gather(fp.final_hidden, &mask)?;
        let logits = g.matmul_t(picked, fp.embed)?;
        let targets: Vec<usize> = idx.iter().map(|&i| self.targets[i]).collect();
        let loss = g.cross_entropy(logits, &targets, &vec![true; targets.len()])?;
        Ok((g, loss, params))
    }

    fn mean_loss(&self, model: &Model<S>) -> Result<f64> {
        let n = self.targets.len();
        let mut total = 0.0;
        let all: Vec<usize> = (0..n).collect();
        for part in all.chunks(256) {
            let (g, loss, _) = self.loss(model, part, GradMode::Inference)?;
            total += g.value(loss).item().to_f64().unwrap_or(f64::NAN) * part.len() as f64;
        }
        Ok(total / n as f64)
    }
}

fn gather_rows<S: Scalar>(t: &Tensor<S>, rows: &[usize]) -> Tensor<S> {
    let d = t.shape()[1];
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(t.row(r));
    }
    Tensor::new([rows.len(), d], data).expect("row gather keeps width")
}

/// Trains only the adapter of `model` (base tensors must be frozen) and
/// leaves it set to the state with the lowest validation loss.
pub fn calibrate<S: Scalar>(
    model: &mut Model<S>,
    train: &[EncodedExample],
    valid: &[EncodedExample],
    config: &TrainConfig,
) -> Result<(AdapterState<S>, TrainOutcome)> {
    config.validate()?;
    let attach = model
        .adapter
        .as_ref()
        .map(|a| a.attach_layer)
        .ok_or_else(|| Error::InvalidArgument("calibration needs an attached adapter".into()))?;
    if let Some((name, _)) = model.state.base().find(|(_, p)| !p.frozen) {
        return Err(Error::Invariant(format!("base tensor {name} is not frozen")));
    }
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let only_mask = attach + 1 == model.config.n_layers;
    let train_cache = AdapterCache::build(model, train, only_mask)?;
    let valid_cache = AdapterCache::build(model, valid, only_mask)?;

    let mut sampler = Sampler::new(train.len(), config.seed);
    let mut adam = Adam::default();
    let mut outcome = TrainOutcome::default();
    let mut best = adapter_state(model)?;
    let initial = valid_cache.mean_loss(model)?;
    outcome.initial_valid_loss = Some(initial);
    outcome.best_valid_loss = Some(initial);
    outcome.curve.push(CurvePoint {
        step: 0,
        split: "valid".into(),
        loss: initial,
    });
    let mut window = Vec::new();
    for step in 0..config.steps {
        let idx = sampler.next_batch(config.batch_size);
        let (g, loss, params) = train_cache.loss(model, &idx, GradMode::Train)?;
        let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
        if step == 0 {
            outcome.curve.push(CurvePoint {
                step: 0,
                split: "train".into(),
                loss: value,
            });
        }
        let mut grads = g.backward(loss)?;
        check_frozen(&model.state, &params, &grads)?;
        apply(model, &mut adam, config.lr_at(step), &params, &mut grads);
        window.push(value);
        let done = step + 1;
        if done % config.eval_every == 0 || done == config.steps {
            outcome.curve.push(CurvePoint {
                step: done,
                split: "train".into(),
                loss: window.iter().sum::<f64>() / window.len() as f64,
            });
            window.clear();
            let v = valid_cache.mean_loss(model)?;
            outcome.curve.push(CurvePoint {
                step: done,
                split: "valid".into(),
                loss: v,
            });
            if v < outcome.best_valid_loss.unwrap_or(f64::INFINITY) {
                outcome.best_valid_loss = Some(v);
                outcome.best_step = done;
                best = adapter_state(model)?;
            }
        }
    }
    set_adapter_state(model, &best)?;
    Ok((best, outcome))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub set_name: String,
    pub perplexity: f64,
    pub count: usize,
    pub em: f64,
    pub f1: f64,
}

/// Per-example evaluation record; the raw layer behind every [`EvalResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleScore {
    pub index: usize,
    pub fact_id: usize,
    pub template_id: String,
    pub target: String,
    pub prediction: String,
    pub nll: f64,
    pub em: f64,
    pub f1: f64,
}

impl EvalResult {
    /// Aggregates scores in index order.
    pub fn from_scores(set_name: &str, scores: &[ExampleScore]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("evaluation set"));
        }
        let mut sorted: Vec<&ExampleScore> = scores.iter().collect();
        sorted.sort_by_key(|s| s.index);
        let n = sorted.len() as f64;
        let nll = sorted.iter().map(|s| s.nll).sum::<f64>() / n;
        Ok(Self {
            set_name: set_name.to_string(),
            perplexity: nll.exp(),
            count: sorted.len(),
            em: sorted.iter().map(|s| s.em).sum::<f64>() / n,
            f1: sorted.iter().map(|s| s.f1).sum::<f64>() / n,
        })
    }
}

/// Scores every example: NLL of the target at the mask and top-1 prediction
/// over the full vocabulary.
pub fn score_examples<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    examples: &[CalibrationExample],
) -> Result<Vec<ExampleScore>> {
    let encoded = vocab.encode_all(examples)?;
    let mut out = Vec::with_capacity(examples.len());
    for (c, part) in encoded.chunks(256).enumerate() {
        let refs: Vec<&EncodedExample> = part.iter().collect();
        let logits = model.mask_logits(&refs)?;
        for (j, enc) in part.iter().enumerate() {
            let index = c * 256 + j;
            let row: Vec<f64> = logits.row(j).iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
            let nll = log_sum_exp(&row) - row[enc.target];
            let top = crate::model::rank_desc(logits.row(j))[0];
            let prediction = vocab.token(top)?.to_string();
            let ex = &examples[index];
            let (em, f1) = em_f1(&prediction, &ex.target);
            out.push(ExampleScore {
                index,
                fact_id: ex.fact_id,
                template_id: ex.template_id.clone(),
                target: ex.target.clone(),
                prediction,
                nll,
                em,
                f1,
            });
        }
    }
    Ok(out)
}

/// `exp(mean NLL)` over the set, with the per-example scores it came from.
pub fn evaluate_perplexity<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    examples: &[CalibrationExample],
    set_name: &str,
) -> Result<(EvalResult, Vec<ExampleScore>)> {
    if examples.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let scores = score_examples(model, vocab, examples)?;
    Ok((EvalResult::from_scores(set_name, &scores)?, scores))
}

#[cfg(test)]
mod tests;
