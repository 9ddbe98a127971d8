//! Encoder-style masked language model with key-value FFN layers and an
//! output projection tied to the token embedding matrix.

mod checkpoint;
mod state;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointFile, TensorEntry};
pub use state::{names, Param, ModelState};

use crate::calinet::AdapterConfig;
use crate::error::{Error, Result};
use crate::numerics::{softmax_in_place, Graph, Precision, Scalar, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// FFN intermediate size (number of key-value memories per layer).
    pub d_m: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub precision: Precision,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_m: 256,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 0,
            max_seq_len: 32,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("d_m", self.d_m),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} is not divisible by n_heads = {}",
                self.d, self.n_heads
            )));
        }
        if self.d_m < self.d {
            return Err(Error::Config(format!(
                "d_m = {} must be at least d = {}",
                self.d_m, self.d
            )));
        }
        Ok(())
    }

    /// Parameter count of the base transformer (adapter excluded).
    pub fn parameter_count(&self) -> usize {
        let per_layer = 2 * self.d + 4 * self.d * self.d + 2 * self.d_m * self.d;
        self.vocab_size * self.d + self.max_seq_len * self.d + self.d + self.n_layers * per_layer
    }
}

/// A masked sentence ready for the model: token ids, the position of the
/// single `[MASK]`, and the id the mask should be filled with.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EncodedExample {
    pub tokens: Vec<usize>,
    pub mask_pos: usize,
    pub target: usize,
}

/// Several sequences laid end to end for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Range<usize>>,
}

impl Batch {
    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let mut b = Batch::default();
        for seq in seqs {
            let start = b.tokens.len();
            b.tokens.extend_from_slice(seq);
            b.positions.extend(0..seq.len());
            b.segments.push(start..b.tokens.len());
        }
        b
    }

    /// Batch plus the flat row index of each example's mask.
    pub fn from_examples(examples: &[&EncodedExample]) -> (Self, Vec<usize>) {
        let batch = Self::from_sequences(examples.iter().map(|e| e.tokens.as_slice()));
        let rows = examples
            .iter()
            .zip(&batch.segments)
            .map(|(e, seg)| seg.start + e.mask_pos)
            .collect();
        (batch, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// No tensor requires a gradient.
    Inference,
    /// Every non-frozen parameter requires a gradient.
    Train,
}

/// Vars recorded by one forward pass.
#[derive(Debug)]
pub struct ForwardPass {
    /// Parameter leaves, by name.
    pub params: Vec<(String, Var)>,
    pub embed: Var,
    /// Residual stream after each block (`h + FFN′(norm(h))`).
    pub layer_outputs: Vec<Var>,
    /// At the adapter layer, the residual stream without the adapter term.
    pub pre_adapter: Option<Var>,
    /// At the adapter layer, the normalised input shared by FFN and adapter.
    pub adapter_input: Option<Var>,
    /// Final-layernormed hidden states.
    pub final_hidden: Var,
}

/// Masked-language model: configuration, named parameters, optional adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub state: ModelState<S>,
    pub adapter: Option<AdapterConfig>,
}

impl<S: Scalar> Model<S> {
    /// Freshly initialised model; all tensors trainable.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.precision != S::PRECISION {
            return Err(Error::Config(format!(
                "model precision {:?} does not match scalar type {:?}",
                config.precision,
                S::PRECISION
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d;
        let inv_d = 1.0 / (d as f64).sqrt();
        let out_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        let mut state = ModelState::default();
        state.insert(names::EMBED, Tensor::randn([config.vocab_size, d], inv_d, &mut rng), false);
        state.insert(names::POS, Tensor::randn([config.max_seq_len, d], inv_d, &mut rng), false);
        for l in 0..config.n_layers {
            state.insert(names::attn_norm(l), Tensor::full([d], S::one()), false);
            state.insert(names::attn_q(l), Tensor::randn([d, d], inv_d, &mut rng), false);
            state.insert(names::attn_k(l), Tensor::randn([d, d], inv_d, &mut rng), false);
            state.insert(names::attn_v(l), Tensor::randn([d, d], inv_d, &mut rng), false);
            state.insert(names::attn_o(l), Tensor::randn([d, d], inv_d * out_scale, &mut rng), false);
            state.insert(names::ffn_norm(l), Tensor::full([d], S::one()), false);
            state.insert(names::ffn_k(l), Tensor::randn([config.d_m, d], inv_d, &mut rng), false);
            let inv_dm = 1.0 / (config.d_m as f64).sqrt();
            state.insert(names::ffn_v(l), Tensor::randn([config.d_m, d], inv_dm * out_scale, &mut rng), false);
        }
        state.insert(names::FINAL_NORM, Tensor::full([d], S::one()), false);
        Ok(Model {
            config,
            state,
            adapter: None,
        })
    }

    pub fn from_state(config: ModelConfig, state: ModelState<S>, adapter: Option<AdapterConfig>) -> Result<Self> {
        config.validate()?;
        let expected = Model::<S>::new(config.clone())?;
        for (name, p) in expected.state.iter() {
            let got = state
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape("from_state", got.tensor.shape(), p.tensor.shape()));
            }
        }
        Ok(Model {
            config,
            state,
            adapter,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    fn check_tokens(&self, ids: &[usize]) -> Result<()> {
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        if ids.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenId {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Records the full stack on `g`.
    pub fn record(&self, g: &mut Graph<S>, batch: &Batch, mode: GradMode, trace: bool) -> Result<ForwardPass> {
        for seg in &batch.segments {
            self.check_tokens(&batch.tokens[seg.clone()])?;
        }
        let mut rec = Recorder::new(self, mode);
        let embed = rec.leaf(g, names::EMBED)?;
        let pos = rec.leaf(g, names::POS)?;
        let tok = g.gather(embed, &batch.tokens)?;
        let pe = g.gather(pos, &batch.positions)?;
        let x = g.add(tok, pe)?;
        rec.finish(g, x, embed, &batch.segments, 0, trace)
    }

    /// Records layers `first_layer..` on top of a given residual stream `x`,
    /// then the final norm. Used to replay only the layers above cached
    /// activations.
    pub fn record_from(
        &self,
        g: &mut Graph<S>,
        x: Var,
        segments: &[Range<usize>],
        first_layer: usize,
        mode: GradMode,
    ) -> Result<ForwardPass> {
        let mut rec = Recorder::new(self, mode);
        let embed = rec.leaf(g, names::EMBED)?;
        rec.finish(g, x, embed, segments, first_layer, false)
    }

    /// Logits for every position of one sequence, `len × V`.
    pub fn forward(&self, token_ids: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let batch = Batch::from_sequences([token_ids]);
        let fp = self.record(&mut g, &batch, GradMode::Inference, false)?;
        let logits = g.matmul_t(fp.final_hidden, fp.embed)?;
        Ok(g.value(logits).clone())
    }

    /// `GELU(H Kᵀ) V` for the given layer's memories, no bias.
    pub fn ffn_forward(&self, hidden: &Tensor<S>, layer: usize) -> Result<Tensor<S>> {
        if layer >= self.config.n_layers {
            return Err(Error::LayerIndex {
                index: layer,
                n_layers: self.config.n_layers,
            });
        }
        let k = &self.state.expect(&names::ffn_k(layer))?.tensor;
        let v = &self.state.expect(&names::ffn_v(layer))?.tensor;
        key_value_ffn_tensor(hidden, k, v)
    }

    /// Logit rows at the mask position of each example, `examples.len() × V`.
    pub fn mask_logits(&self, examples: &[&EncodedExample]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let (batch, rows) = Batch::from_examples(examples);
        let fp = self.record(&mut g, &batch, GradMode::Inference, false)?;
        let picked = g.gather(fp.final_hidden, &rows)?;
        let logits = g.matmul_t(picked, fp.embed)?;
        Ok(g.value(logits).clone())
    }

    /// Output distribution at the mask of every example, processed in chunks.
    pub fn mask_distributions(&self, examples: &[EncodedExample], chunk: usize) -> Result<Vec<Vec<S>>> {
        let mut out = Vec::with_capacity(examples.len());
        for part in examples.chunks(chunk.max(1)) {
            let refs: Vec<&EncodedExample> = part.iter().collect();
            let logits = self.mask_logits(&refs)?;
            for i in 0..part.len() {
                let mut row = logits.row(i).to_vec();
                softmax_in_place(&mut row);
                out.push(row);
            }
        }
        Ok(out)
    }

    /// Ranked fill-in predictions for a sentence with exactly one mask.
    pub fn predict_masked(&self, token_ids: &[usize], mask_id: usize) -> Result<Prediction<S>> {
        let mask_pos = single_mask(token_ids, mask_id)?;
        let example = EncodedExample {
            tokens: token_ids.to_vec(),
            mask_pos,
            target: 0,
        };
        let logits = self.mask_logits(&[&example])?;
        let mut probs = logits.row(0).to_vec();
        softmax_in_place(&mut probs);
        Ok(Prediction::new(probs))
    }
}

struct Recorder<'a, S> {
    model: &'a Model<S>,
    mode: GradMode,
    params: Vec<(String, Var)>,
}

impl<'a, S: Scalar> Recorder<'a, S> {
    fn new(model: &'a Model<S>, mode: GradMode) -> Self {
        Self {
            model,
            mode,
            params: Vec::with_capacity(model.state.len()),
        }
    }

    fn leaf(&mut self, g: &mut Graph<S>, name: &str) -> Result<Var> {
        let p = self
            .model
            .state
            .get(name)
            .ok_or_else(|| Error::Invariant(format!("missing parameter {name}")))?;
        let rg = self.mode == GradMode::Train && !p.frozen;
        let v = g.leaf(p.tensor.clone(), rg);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    fn finish(
        mut self,
        g: &mut Graph<S>,
        mut x: Var,
        embed: Var,
        segments: &[Range<usize>],
        first_layer: usize,
        trace: bool,
    ) -> Result<ForwardPass> {
        let config = &self.model.config;
        let mut layer_outputs = Vec::with_capacity(config.n_layers);
        let mut pre_adapter = None;
        let mut adapter_input = None;
        for l in first_layer..config.n_layers {
            let an = self.leaf(g, &names::attn_norm(l))?;
            let wq = self.leaf(g, &names::attn_q(l))?;
            let wk = self.leaf(g, &names::attn_k(l))?;
            let wv = self.leaf(g, &names::attn_v(l))?;
            let wo = self.leaf(g, &names::attn_o(l))?;
            let xn = g.rms_norm(x, an)?;
            let q = g.matmul(xn, wq)?;
            let k = g.matmul(xn, wk)?;
            let v = g.matmul(xn, wv)?;
            let att = g.attention(q, k, v, segments, config.n_heads)?;
            let att = g.matmul(att, wo)?;
            let h = g.add(x, att)?;

            let fnorm = self.leaf(g, &names::ffn_norm(l))?;
            let fk = self.leaf(g, &names::ffn_k(l))?;
            let fv = self.leaf(g, &names::ffn_v(l))?;
            let hn = g.rms_norm(h, fnorm)?;
            let mut ffn = key_value_ffn(g, hn, fk, fv)?;
            if self.model.adapter.as_ref().is_some_and(|a| a.attach_layer == l) {
                let ak = self.leaf(g, names::ADAPTER_K)?;
                let av = self.leaf(g, names::ADAPTER_V)?;
                if trace {
                    pre_adapter = Some(g.add(h, ffn)?);
                    adapter_input = Some(hn);
                }
                let delta = key_value_ffn(g, hn, ak, av)?;
                ffn = g.add(ffn, delta)?;
            }
            x = g.add(h, ffn)?;
            layer_outputs.push(x);
        }
        let fnorm = self.leaf(g, names::FINAL_NORM)?;
        let final_hidden = g.rms_norm(x, fnorm)?;
        Ok(ForwardPass {
            params: self.params,
            embed,
            layer_outputs,
            pre_adapter,
            adapter_input,
            final_hidden,
        })
    }
}

pub const BASE_NAMESPACE: &str = "base";

impl<S: Scalar> Model<S> {
    /// Writes every base tensor (adapter excluded) to `path`.
    pub fn save_base(&self, path: &std::path::Path, meta: serde_json::Value) -> Result<()> {
        let tensors: Vec<(&str, &Tensor<S>, bool)> = self
            .state
            .base()
            .map(|(n, p)| (n.as_str(), &p.tensor, p.frozen))
            .collect();
        write_checkpoint(path, BASE_NAMESPACE, serde_json::to_value(&self.config)?, meta, &tensors)
    }

    /// Reads a base checkpoint written by [`Model::save_base`].
    pub fn load_base(path: &std::path::Path) -> Result<(Self, serde_json::Value)> {
        let file = read_checkpoint(path)?;
        if file.namespace != BASE_NAMESPACE {
            return Err(Error::Checkpoint(format!(
                "{} holds namespace {:?}, expected {BASE_NAMESPACE:?}",
                path.display(),
                file.namespace
            )));
        }
        let config: ModelConfig = serde_json::from_value(file.config.clone())?;
        let mut state = ModelState::default();
        for (entry, t) in file.tensors::<S>()? {
            state.insert(entry.name, t, entry.frozen);
        }
        let model = Model::from_state(config, state, None)?;
        Ok((model, file.meta))
    }
}

/// Position of the only `[MASK]` in `ids`.
pub fn single_mask(ids: &[usize], mask_id: usize) -> Result<usize> {
    let positions: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, &t)| t == mask_id)
        .map(|(i, _)| i)
        .collect();
    match positions.as_slice() {
        [p] => Ok(*p),
        other => Err(Error::MaskCount(other.len())),
    }
}

/// Full output distribution at a mask with the vocabulary ranked by probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S> {
    pub probs: Vec<S>,
    /// Token ids sorted by descending probability, ties by ascending id.
    pub ranked: Vec<usize>,
}

impl<S: Scalar> Prediction<S> {
    pub fn new(probs: Vec<S>) -> Self {
        let ranked = rank_desc(&probs);
        Prediction { probs, ranked }
    }

    pub fn top(&self, k: usize) -> Vec<(usize, S)> {
        self.ranked.iter().take(k).map(|&i| (i, self.probs[i])).collect()
    }

    pub fn top1(&self) -> usize {
        self.ranked[0]
    }
}

pub fn rank_desc<S: Scalar>(probs: &[S]) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..probs.len()).collect();
    ids.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    ids
}

/// Records `GELU(H Kᵀ) V`.
pub fn key_value_ffn<S: Scalar>(g: &mut Graph<S>, hidden: Var, keys: Var, values: Var) -> Result<Var> {
    let scores = g.matmul_t(hidden, keys)?;
    let act = g.gelu(scores);
    g.matmul(act, values)
}

/// `GELU(H Kᵀ) V` on plain tensors.
pub fn key_value_ffn_tensor<S: Scalar>(hidden: &Tensor<S>, keys: &Tensor<S>, values: &Tensor<S>) -> Result<Tensor<S>> {
    let mut g = Graph::new();
    let h = g.constant(hidden.clone());
    let k = g.constant(keys.clone());
    let v = g.constant(values.clone());
    let out = key_value_ffn(&mut g, h, k, v)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests;
