//! Run configuration, on-disk artifact layout, manifests and the stage
//! commands that chain everything into an end-to-end experiment.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assess::CkaConfig;
use crate::calinet::AdapterConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::Precision;
use crate::trainer::TrainConfig;
use crate::worldgen::{WorldDefinition, WorldSpec};

mod stages;
mod sweep;

pub use stages::{
    cmd_assess, cmd_calibrate, cmd_continue_pretrain, cmd_eval, cmd_interpret, cmd_pipeline, cmd_pretrain,
    cmd_worldgen, EvalTable, LoadedWorld, MethodRow,
};
pub use sweep::{cmd_sweep, render_svg, SweepAxis, SweepRow, SweepSpec};

/// Prefix of the environment variables that override config values:
/// `CALILAB_SEED`, `CALILAB_OUT`, `CALILAB_PRECISION`.
pub const ENV_PREFIX: &str = "CALILAB_";

/// Which facts a calibration run targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactsSource {
    /// Facts the assessment classified as false knowledge.
    Detected,
    /// Facts the world generator corrupted (ground-truth labels).
    Corrupted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed, copied into every component seed by [`RunConfig::resolved`].
    pub seed: u64,
    pub out_dir: PathBuf,
    /// World-definition JSON; the bundled definition when absent.
    pub definition: Option<PathBuf>,
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub adapter: AdapterConfig,
    pub pretrain: TrainConfig,
    pub calibrate: TrainConfig,
    pub continue_pretrain: TrainConfig,
    pub cka: CkaConfig,
    /// Upper bound on the number of facts calibrated, taken in id order.
    pub max_facts: usize,
    pub facts_source: FactsSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            definition: None,
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            adapter: AdapterConfig::default(),
            pretrain: TrainConfig::pretrain_default(),
            calibrate: TrainConfig::calibrate_default(),
            continue_pretrain: TrainConfig {
                steps: 2000,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            cka: CkaConfig::default(),
            max_facts: 100,
            facts_source: FactsSource::Detected,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Applies `CALILAB_*` variables from `vars` on top of the file values.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<()> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else { continue };
            match name {
                "SEED" => {
                    self.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}={value:?} is not a seed")))?
                }
                "OUT" => self.out_dir = PathBuf::from(value),
                "PRECISION" => self.model.precision = parse_precision(&value)?,
                _ => {}
            }
        }
        Ok(())
    }

    /// Copies the master seed into every component and checks the values.
    pub fn resolved(&self) -> Result<Self> {
        let mut cfg = self.clone();
        let seed = cfg.seed;
        cfg.world.seed = seed;
        cfg.model.seed = seed;
        cfg.adapter.seed = seed;
        cfg.pretrain.seed = seed;
        cfg.calibrate.seed = seed;
        cfg.continue_pretrain.seed = seed;
        cfg.world.validate()?;
        cfg.adapter.validate(cfg.model.n_layers)?;
        cfg.pretrain.validate()?;
        cfg.calibrate.validate()?;
        cfg.continue_pretrain.validate()?;
        cfg.cka.validate()?;
        if cfg.max_facts == 0 {
            return Err(Error::Config("max_facts must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn definition(&self) -> Result<WorldDefinition> {
        match &self.definition {
            Some(path) => WorldDefinition::load(path),
            None => Ok(WorldDefinition::builtin()),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }
}

pub fn parse_precision(value: &str) -> Result<Precision> {
    value
        .trim_start_matches('f')
        .parse()
        .ok()
        .and_then(Precision::from_bits)
        .ok_or_else(|| Error::Config(format!("precision must be 32 or 64, got {value:?}")))
}

/// Process exit code for an error: 2 configuration, 3 missing artifact,
/// 4 invariant breach, 1 anything else.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Invariant(_) => 4,
        _ => 1,
    }
}

/// Where every stage reads and writes under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn stage(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn world(&self, file: &str) -> PathBuf {
        self.stage("world").join(file)
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.stage("pretrain").join("base.ckpt")
    }

    pub fn adapter_checkpoint(&self) -> PathBuf {
        self.stage("calibrate").join("adapter.ckpt")
    }

    pub fn continued_checkpoint(&self) -> PathBuf {
        self.stage("continue").join("model.ckpt")
    }

    pub fn assessment(&self) -> PathBuf {
        self.stage("assess").join("assessment.json")
    }
}

/// Fails with [`Error::MissingArtifact`] naming `stage` when `path` is absent.
pub fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            stage,
            path: path.to_path_buf(),
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Record of one stage run. The run hash covers the stage name, its config
/// and the hashes of its inputs, so identical inputs give identical hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub run_hash: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub metrics: serde_json::Value,
}

impl Manifest {
    /// Hashes every input file (keyed by its path relative to `root`).
    pub fn begin(stage: &str, seed: u64, config: serde_json::Value, root: &Path, inputs: &[PathBuf]) -> Result<Self> {
        let mut hashed = BTreeMap::new();
        for path in inputs {
            hashed.insert(relative(root, path), file_hash(path)?);
        }
        let mut h = Sha256::new();
        h.update(stage.as_bytes());
        h.update([0]);
        h.update(serde_json::to_vec(&config)?);
        for (name, hash) in &hashed {
            h.update([0]);
            h.update(name.as_bytes());
            h.update(hash.as_bytes());
        }
        Ok(Self {
            stage: stage.to_string(),
            run_hash: hex::encode(h.finalize()),
            seed,
            config,
            inputs: hashed,
            outputs: BTreeMap::new(),
            metrics: serde_json::Value::Null,
        })
    }

    /// Hashes the outputs and writes `manifest.json` into `dir`.
    pub fn finish(mut self, root: &Path, dir: &Path, outputs: &[PathBuf], metrics: serde_json::Value) -> Result<Self> {
        for path in outputs {
            self.outputs.insert(relative(root, path), file_hash(path)?);
        }
        self.metrics = metrics;
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_keeps_defaults() {
        let cfg = RunConfig::from_json(r#"{"seed": 7, "adapter": {"d_c": 16}, "world": {"facts": 200}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.adapter.d_c, 16);
        assert_eq!(cfg.adapter.attach_layer, 3);
        assert_eq!(cfg.world.facts, 200);
        assert_eq!(cfg.world.entities_per_type, 100);
        assert_eq!(cfg.calibrate, TrainConfig::calibrate_default());
    }

    #[test]
    fn unknown_json_is_a_config_error() {
        let err = RunConfig::from_json("{ not json").unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn env_overrides_apply() {
        let mut cfg = RunConfig::default();
        cfg.apply_env([
            ("CALILAB_SEED".to_string(), "11".to_string()),
            ("CALILAB_OUT".to_string(), "/tmp/x".to_string()),
            ("CALILAB_PRECISION".to_string(), "64".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ])
        .unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.model.precision, Precision::F64);
        let err = cfg
            .apply_env([("CALILAB_SEED".to_string(), "x".to_string())])
            .unwrap_err();
        assert_eq!(exit_code(&err), 2);
    }

    #[test]
    fn resolved_propagates_seed() {
        let cfg = RunConfig { seed: 5, ..RunConfig::default() }.resolved().unwrap();
        assert_eq!(cfg.world.seed, 5);
        assert_eq!(cfg.model.seed, 5);
        assert_eq!(cfg.adapter.seed, 5);
        assert_eq!(cfg.calibrate.seed, 5);
    }

    #[test]
    fn resolved_rejects_bad_layer() {
        let mut cfg = RunConfig::default();
        cfg.adapter.attach_layer = 9;
        assert!(cfg.resolved().is_err());
    }

    #[test]
    fn exit_codes_are_distinct() {
        let missing = Error::MissingArtifact {
            stage: "pretrain",
            path: PathBuf::from("x"),
        };
        let codes = [
            exit_code(&Error::Config("x".into())),
            exit_code(&missing),
            exit_code(&Error::Invariant("x".into())),
            exit_code(&Error::Empty("x")),
        ];
        assert_eq!(codes, [2, 3, 4, 1]);
    }

    #[test]
    fn run_hash_depends_on_config_and_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "one").unwrap();
        let cfg = serde_json::json!({"k": 1});
        let h1 = Manifest::begin("s", 0, cfg.clone(), dir.path(), &[a.clone()]).unwrap();
        let h2 = Manifest::begin("s", 0, cfg.clone(), dir.path(), &[a.clone()]).unwrap();
        assert_eq!(h1.run_hash, h2.run_hash);
        assert_eq!(h1.inputs.keys().next().unwrap(), "a.txt");
        let h3 = Manifest::begin("s", 0, serde_json::json!({"k": 2}), dir.path(), &[a.clone()]).unwrap();
        assert_ne!(h1.run_hash, h3.run_hash);
        std::fs::write(&a, "two").unwrap();
        let h4 = Manifest::begin("s", 0, cfg, dir.path(), &[a]).unwrap();
        assert_ne!(h1.run_hash, h4.run_hash);
    }

    #[test]
    fn missing_artifact_names_stage() {
        let err = require(Path::new("/nonexistent/base.ckpt"), "pretrain").unwrap_err();
        assert_eq!(exit_code(&err), 3);
        assert!(err.to_string().contains("pretrain"));
    }
}
