//! Calibration adapter: a small bank of key-value memory slots whose output is
//! added to one base FFN layer, trained while every base tensor is frozen.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{key_value_ffn_tensor, names, read_checkpoint, write_checkpoint, Model};
use crate::numerics::{Scalar, Tensor};

pub const ADAPTER_NAMESPACE: &str = "adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Number of calibration memory slots. Keep well below `d_m`.
    pub d_c: usize,
    pub attach_layer: usize,
    /// Standard deviation of the initial keys.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    /// 64 slots on the last layer of the default 4-layer model.
    fn default() -> Self {
        Self::new(64, 3)
    }
}

impl AdapterConfig {
    pub fn new(d_c: usize, attach_layer: usize) -> Self {
        AdapterConfig {
            d_c,
            attach_layer,
            init_scale: 0.02,
            seed: 0,
        }
    }

    /// Trainable parameters the adapter adds: `2 · d_c · d`.
    pub fn parameter_count(&self, d: usize) -> usize {
        2 * self.d_c * d
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.d_c == 0 {
            return Err(Error::Config("adapter needs at least one slot".into()));
        }
        if self.attach_layer >= n_layers {
            return Err(Error::LayerIndex {
                index: self.attach_layer,
                n_layers,
            });
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config("init_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adapter keys `K̃` and values `Ṽ`, both `d_c × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterState<S> {
    pub keys: Tensor<S>,
    pub values: Tensor<S>,
}

impl<S: Scalar> AdapterState<S> {
    pub fn slots(&self) -> usize {
        self.keys.shape()[0]
    }
}

/// Keys drawn from `N(0, init_scale²)`; values exactly zero, so the adapter
/// contributes nothing until its first update.
pub fn init_adapter<S: Scalar>(config: &AdapterConfig, d: usize) -> AdapterState<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    AdapterState {
        keys: Tensor::randn([config.d_c, d], config.init_scale, &mut rng),
        values: Tensor::zeros([config.d_c, d]),
    }
}

/// `GELU(H K̃ᵀ) Ṽ`.
pub fn delta_ffn<S: Scalar>(hidden: &Tensor<S>, adapter: &AdapterState<S>) -> Result<Tensor<S>> {
    let (_, d) = hidden.dims2()?;
    if adapter.keys.shape()[1] != d || adapter.values.shape() != adapter.keys.shape() {
        return Err(Error::shape("delta_ffn", hidden.shape(), adapter.keys.shape()));
    }
    key_value_ffn_tensor(hidden, &adapter.keys, &adapter.values)
}

/// `FFN(H) + ΔFFN(H)` at the model's adapter layer.
pub fn calibrated_ffn<S: Scalar>(model: &Model<S>, hidden: &Tensor<S>, layer: usize) -> Result<Tensor<S>> {
    let cfg = model
        .adapter
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no adapter attached".into()))?;
    if cfg.attach_layer != layer {
        return Err(Error::InvalidArgument(format!(
            "adapter is attached at layer {}, not layer {layer}",
            cfg.attach_layer
        )));
    }
    let base = model.ffn_forward(hidden, layer)?;
    let delta = delta_ffn(hidden, &adapter_state(model)?)?;
    base.add(&delta)
}

/// Freezes every base tensor and adds a fresh adapter at `config.attach_layer`.
pub fn attach<S: Scalar>(model: &mut Model<S>, config: AdapterConfig) -> Result<()> {
    let init = init_adapter(&config, model.config.d);
    attach_with(model, config, init)
}

/// As [`attach`], with given adapter tensors.
pub fn attach_with<S: Scalar>(model: &mut Model<S>, config: AdapterConfig, state: AdapterState<S>) -> Result<()> {
    if let Some(existing) = &model.adapter {
        return Err(Error::InvalidArgument(format!(
            "an adapter is already attached at layer {}",
            existing.attach_layer
        )));
    }
    config.validate(model.config.n_layers)?;
    let want = [config.d_c, model.config.d];
    if state.keys.shape() != want || state.values.shape() != want {
        return Err(Error::shape("attach", state.keys.shape(), &want));
    }
    model.state.set_frozen(|n| !names::is_adapter(n), true);
    model.state.insert(names::ADAPTER_K, state.keys, false);
    model.state.insert(names::ADAPTER_V, state.values, false);
    model.adapter = Some(config);
    Ok(())
}

/// Removes the adapter and returns the base model with its tensors unfrozen.
pub fn detach<S: Scalar>(model: &mut Model<S>) -> Option<(AdapterConfig, AdapterState<S>)> {
    let cfg = model.adapter.take()?;
    let keys = model.state.remove(names::ADAPTER_K)?.tensor;
    let values = model.state.remove(names::ADAPTER_V)?.tensor;
    model.state.set_frozen(|_| true, false);
    Some((cfg, AdapterState { keys, values }))
}

pub fn adapter_state<S: Scalar>(model: &Model<S>) -> Result<AdapterState<S>> {
    Ok(AdapterState {
        keys: model.state.expect(names::ADAPTER_K)?.tensor.clone(),
        values: model.state.expect(names::ADAPTER_V)?.tensor.clone(),
    })
}

pub fn set_adapter_state<S: Scalar>(model: &mut Model<S>, state: &AdapterState<S>) -> Result<()> {
    for (name, t) in [(names::ADAPTER_K, &state.keys), (names::ADAPTER_V, &state.values)] {
        let p = model
            .state
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument("model has no adapter attached".into()))?;
        if p.tensor.shape() != t.shape() {
            return Err(Error::shape("set_adapter_state", p.tensor.shape(), t.shape()));
        }
        p.tensor = t.clone();
    }
    Ok(())
}

/// Writes the adapter tensors in the shared container format.
pub fn save_adapter<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let cfg = model
        .adapter
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model has no adapter attached".into()))?;
    let state = adapter_state(model)?;
    let meta = serde_json::json!({ "attach_layer": cfg.attach_layer, "d": model.config.d });
    write_checkpoint(
        path,
        ADAPTER_NAMESPACE,
        serde_json::to_value(cfg)?,
        meta,
        &[(names::ADAPTER_K, &state.keys, false), (names::ADAPTER_V, &state.values, false)],
    )
}

pub fn load_adapter<S: Scalar>(path: &Path) -> Result<(AdapterConfig, AdapterState<S>)> {
    let file = read_checkpoint(path)?;
    if file.namespace != ADAPTER_NAMESPACE {
        return Err(Error::Checkpoint(format!(
            "{} holds namespace {:?}, expected {ADAPTER_NAMESPACE:?}",
            path.display(),
            file.namespace
        )));
    }
    let cfg: AdapterConfig = serde_json::from_value(file.config.clone())?;
    let mut keys = None;
    let mut values = None;
    for (entry, t) in file.tensors::<S>()? {
        match entry.name.as_str() {
            names::ADAPTER_K => keys = Some(t),
            names::ADAPTER_V => values = Some(t),
            other => return Err(Error::Checkpoint(format!("unexpected tensor {other}"))),
        }
    }
    match (keys, values) {
        (Some(keys), Some(values)) => Ok((cfg, AdapterState { keys, values })),
        _ => Err(Error::Checkpoint("adapter tensors missing".into())),
    }
}
