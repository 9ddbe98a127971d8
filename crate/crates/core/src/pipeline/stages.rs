use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{require, sha256_hex, FactsSource, Layout, Manifest, RunConfig};
use crate::assess::{assess_model, detection_quality, AssessmentReport, CkaConfig};
use crate::calinet::{attach, attach_with, load_adapter, save_adapter};
use crate::error::{Error, Result};
use crate::interpret::{slot_report, slot_table, trace_output_distribution};
use crate::model::{Model, ModelConfig};
use crate::numerics::{Precision, Scalar};
use crate::trainer::{calibrate, continue_pretrain, evaluate_perplexity, pretrain, EvalResult, ExampleScore, TrainOutcome};
use crate::worldgen::{
    build_calibration_sets, build_eval_sets, build_pretrain_corpus, build_probe_sets, generate_world, read_jsonl,
    read_kb_tsv, tokenize, write_jsonl, write_kb_tsv, CalibrationExample, EvalSets, Fact, ProbeSet, Vocab,
    WorldDefinition, DEFAULT_WORLD,
};

/// Calls `$f::<S>` with `S` the scalar type of `$precision`.
macro_rules! with_precision {
    ($precision:expr, $f:ident($($arg:expr),*)) => {
        match $precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

/// The world as written by `worldgen`.
#[derive(Debug, Clone)]
pub struct LoadedWorld {
    pub definition: WorldDefinition,
    pub vocab: Vocab,
    pub gold: Vec<Fact>,
    pub corrupted: Vec<Fact>,
    pub labels: Vec<bool>,
}

impl LoadedWorld {
    pub fn files(layout: &Layout) -> Vec<PathBuf> {
        ["definition.json", "kb_gold.tsv", "kb_corrupted.tsv"]
            .iter()
            .map(|f| layout.world(f))
            .collect()
    }

    pub fn load(layout: &Layout) -> Result<Self> {
        for path in Self::files(layout) {
            require(&path, "worldgen")?;
        }
        let definition = WorldDefinition::load(&layout.world("definition.json"))?;
        let vocab = Vocab::from_definition(&definition)?;
        let (gold, _) = read_kb_tsv(&layout.world("kb_gold.tsv"), &definition)?;
        let (corrupted, labels) = read_kb_tsv(&layout.world("kb_corrupted.tsv"), &definition)?;
        Ok(Self {
            definition,
            vocab,
            gold,
            corrupted,
            labels,
        })
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, stage: &'static str) -> Result<T> {
    require(path, stage)?;
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Generates the world and writes the definition, both knowledge bases, the
/// pretraining corpus and the CKA probes.
pub fn cmd_worldgen(config: &RunConfig) -> Result<Manifest> {
    let cfg = config.resolved()?;
    let layout = cfg.layout();
    let dir = layout.stage("world");
    let definition = cfg.definition()?;
    let definition_hash = match &cfg.definition {
        Some(path) => super::file_hash(path)?,
        None => sha256_hex(DEFAULT_WORLD.as_bytes()),
    };
    let stage_cfg = json!({"world": cfg.world, "k_neg": cfg.cka.k_neg, "definition_sha256": definition_hash});
    let manifest = Manifest::begin("worldgen", cfg.seed, stage_cfg, &layout.root, &[])?;

    let world = generate_world(&definition, &cfg.world)?;
    let corpus = build_pretrain_corpus(&world.definition, &world.corrupted, cfg.world.renders_per_fact, cfg.seed)?;
    let probes = build_probe_sets(&world.definition, &world.gold, cfg.cka.k_neg)?;

    let files = [
        "definition.json",
        "kb_gold.tsv",
        "kb_corrupted.tsv",
        "pretrain.jsonl",
        "probes.jsonl",
    ]
    .map(|f| dir.join(f));
    write_json(&files[0], &world.definition)?;
    write_kb_tsv(&files[1], &world.gold, &world.labels)?;
    write_kb_tsv(&files[2], &world.corrupted, &world.labels)?;
    write_jsonl(&files[3], &corpus)?;
    write_jsonl(&files[4], &probes)?;
    let metrics = json!({
        "facts": world.gold.len(),
        "corrupted": world.corrupted_ids().len(),
        "vocab_size": world.vocab.len(),
        "pretrain_examples": corpus.len(),
    });
    manifest.finish(&layout.root, &dir, &files, metrics)
}

fn load_base<S: Scalar>(layout: &Layout) -> Result<Model<S>> {
    let path = layout.base_checkpoint();
    require(&path, "pretrain")?;
    Ok(Model::load_base(&path)?.0)
}

/// Pretrains the base model on the corrupted corpus.
pub fn cmd_pretrain(config: &RunConfig) -> Result<Manifest> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, pretrain_stage(&cfg))
}

fn pretrain_stage<S: Scalar>(cfg: &RunConfig) -> Result<Manifest> {
    let layout = cfg.layout();
    let dir = layout.stage("pretrain");
    let world = LoadedWorld::load(&layout)?;
    let corpus_path = layout.world("pretrain.jsonl");
    require(&corpus_path, "worldgen")?;
    let mut inputs = LoadedWorld::files(&layout);
    inputs.push(corpus_path.clone());
    let model_cfg = ModelConfig {
        vocab_size: world.vocab.len(),
        ..cfg.model.clone()
    };
    let stage_cfg = json!({"model": model_cfg, "train": cfg.pretrain});
    let manifest = Manifest::begin("pretrain", cfg.seed, stage_cfg, &layout.root, &inputs)?;

    let corpus: Vec<CalibrationExample> = read_jsonl(&corpus_path)?;
    let encoded = world.vocab.encode_all(&corpus)?;
    let mut model = Model::<S>::new(model_cfg)?;
    let outcome = pretrain(&mut model, &encoded, &cfg.pretrain)?;
    let (train_eval, _) = evaluate_perplexity(&model, &world.vocab, &corpus, "pretrain")?;

    let ckpt = layout.base_checkpoint();
    model.save_base(&ckpt, json!({"run_hash": manifest.run_hash}))?;
    let curve = dir.join("curve.csv");
    std::fs::write(&curve, outcome.curve_csv(&manifest.run_hash))?;
    let summary = dir.join("summary.json");
    let metrics = json!({
        "train_perplexity": train_eval.perplexity,
        "train_em": train_eval.em,
        "final_train_loss": outcome.losses("train").last().map(|p| p.1),
        "parameters": model.config.parameter_count(),
    });
    write_json(&summary, &json!({"run_hash": manifest.run_hash, "train": train_eval, "outcome": outcome}))?;
    manifest.finish(&layout.root, &dir, &[ckpt, curve, summary], metrics)
}

/// Scores every gold fact with CKA and compares the verdicts with the
/// corruption labels.
pub fn cmd_assess(config: &RunConfig) -> Result<Manifest> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, assess_stage(&cfg))
}

fn assess_stage<S: Scalar>(cfg: &RunConfig) -> Result<Manifest> {
    let layout = cfg.layout();
    let dir = layout.stage("assess");
    let world = LoadedWorld::load(&layout)?;
    let probes_path = layout.world("probes.jsonl");
    require(&probes_path, "worldgen")?;
    let mut inputs = LoadedWorld::files(&layout);
    inputs.extend([probes_path.clone(), layout.base_checkpoint()]);
    require(&layout.base_checkpoint(), "pretrain")?;
    let manifest = Manifest::begin("assess", cfg.seed, json!({"cka": cfg.cka}), &layout.root, &inputs)?;

    let model = load_base::<S>(&layout)?;
    let probes: Vec<ProbeSet> = read_jsonl(&probes_path)?;
    let (report, dump) = assess_model(&model, &world.vocab, &probes, &cfg.cka)?;
    report.write(&dir, &dump, &manifest.run_hash)?;
    let (precision, recall) = detection_quality(&report, &world.labels);
    let detection = dir.join("detection.json");
    let metrics = json!({
        "false_rate": report.false_rate,
        "detected": report.false_facts().len(),
        "corrupted": world.labels.iter().filter(|&&l| l).count(),
        "precision": precision,
        "recall": recall,
        "mean_em": report.mean_em,
    });
    write_json(&detection, &json!({"run_hash": manifest.run_hash, "detection": metrics}))?;
    let outputs = ["assessment.json", "assessment.csv", "probabilities.jsonl"]
        .iter()
        .map(|f| dir.join(f))
        .chain([detection])
        .collect::<Vec<_>>();
    manifest.finish(&layout.root, &dir, &outputs, metrics)
}

/// Fact ids to calibrate, ascending, at most `max_facts` of them.
pub(crate) fn select_targets(
    layout: &Layout,
    world: &LoadedWorld,
    source: FactsSource,
    max_facts: usize,
) -> Result<Vec<usize>> {
    let mut ids = match source {
        FactsSource::Detected => {
            let wrapped: serde_json::Value = read_json(&layout.assessment(), "assess")?;
            let report: AssessmentReport = serde_json::from_value(wrapped["report"].clone())?;
            report.false_facts()
        }
        FactsSource::Corrupted => (0..world.labels.len()).filter(|&i| world.labels[i]).collect(),
    };
    ids.sort_unstable();
    ids.truncate(max_facts);
    if ids.is_empty() {
        return Err(Error::Empty("calibration targets"));
    }
    Ok(ids)
}

/// Datasets of one calibration run.
#[derive(Debug, Clone)]
pub(crate) struct CalibrationData {
    pub targets: Vec<usize>,
    pub train: Vec<CalibrationExample>,
    pub valid: Vec<CalibrationExample>,
    pub eval: EvalSets,
    pub probes: Vec<ProbeSet>,
}

impl CalibrationData {
    /// Gold facts for `targets`; the rest of the corrupted knowledge base is
    /// the background for the LM set.
    pub fn build(world: &LoadedWorld, targets: &[usize], k_neg: usize, seed: u64) -> Result<Self> {
        let chosen: BTreeSet<usize> = targets.iter().copied().collect();
        let facts: Vec<Fact> = targets.iter().map(|&i| world.gold[i].clone()).collect();
        let background: Vec<Fact> = world
            .corrupted
            .iter()
            .filter(|f| !chosen.contains(&f.id))
            .cloned()
            .collect();
        let sets = build_calibration_sets(&world.definition, &facts)?;
        let eval = build_eval_sets(&world.definition, &facts, &background, seed)?;
        let probes = build_probe_sets(&world.definition, &facts, k_neg)?;
        Ok(Self {
            targets: targets.to_vec(),
            train: sets.train,
            valid: sets.valid,
            eval,
            probes,
        })
    }

    const FILES: [&'static str; 6] = [
        "targets.json",
        "calib_train.jsonl",
        "calib_valid.jsonl",
        "test_original.jsonl",
        "test_adversarial.jsonl",
        "test_lm.jsonl",
    ];

    pub fn paths(dir: &Path) -> Vec<PathBuf> {
        Self::FILES.iter().map(|f| dir.join(f)).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let paths = Self::paths(dir);
        write_json(&paths[0], &self.targets)?;
        write_jsonl(&paths[1], &self.train)?;
        write_jsonl(&paths[2], &self.valid)?;
        write_jsonl(&paths[3], &self.eval.original)?;
        write_jsonl(&paths[4], &self.eval.adversarial)?;
        write_jsonl(&paths[5], &self.eval.lm)?;
        Ok(paths)
    }

    pub fn read(dir: &Path, world: &LoadedWorld, k_neg: usize) -> Result<Self> {
        let paths = Self::paths(dir);
        for p in &paths {
            require(p, "calibrate")?;
        }
        let targets: Vec<usize> = read_json(&paths[0], "calibrate")?;
        let facts: Vec<Fact> = targets.iter().map(|&i| world.gold[i].clone()).collect();
        Ok(Self {
            probes: build_probe_sets(&world.definition, &facts, k_neg)?,
            targets,
            train: read_jsonl(&paths[1])?,
            valid: read_jsonl(&paths[2])?,
            eval: EvalSets {
                original: read_jsonl(&paths[3])?,
                adversarial: read_jsonl(&paths[4])?,
                lm: read_jsonl(&paths[5])?,
            },
        })
    }

    /// (name, examples) for the three test sets.
    pub fn test_sets(&self) -> [(&'static str, &[CalibrationExample]); 3] {
        [
            ("original", &self.eval.original),
            ("adversarial", &self.eval.adversarial),
            ("lm", &self.eval.lm),
        ]
    }
}

/// Attaches a fresh adapter to a copy of `base` and calibrates it.
pub(crate) fn run_calibration<S: Scalar>(
    base: &Model<S>,
    vocab: &Vocab,
    data: &CalibrationData,
    cfg: &RunConfig,
) -> Result<(Model<S>, TrainOutcome)> {
    let mut model = base.clone();
    attach(&mut model, cfg.adapter.clone())?;
    let train = vocab.encode_all(&data.train)?;
    let valid = vocab.encode_all(&data.valid)?;
    let (_, outcome) = calibrate(&mut model, &train, &valid, &cfg.calibrate)?;
    Ok((model, outcome))
}

/// Metrics of one model on one calibration run's test sets and probes.
#[derive(Debug, Clone)]
pub(crate) struct MethodEval {
    pub results: Vec<EvalResult>,
    pub scores: Vec<Vec<ExampleScore>>,
    pub assessment: AssessmentReport,
    pub dump: Vec<crate::assess::ProbabilityRecord>,
}

impl MethodEval {
    pub fn run<S: Scalar>(model: &Model<S>, vocab: &Vocab, data: &CalibrationData, cka: &CkaConfig) -> Result<Self> {
        let mut results = Vec::new();
        let mut scores = Vec::new();
        for (name, set) in data.test_sets() {
            let (r, s) = evaluate_perplexity(model, vocab, set, name)?;
            results.push(r);
            scores.push(s);
        }
        let (assessment, dump) = assess_model(model, vocab, &data.probes, cka)?;
        Ok(Self {
            results,
            scores,
            assessment,
            dump,
        })
    }

    pub fn row(&self, method: &str, calibration_params: usize) -> MethodRow {
        MethodRow {
            method: method.to_string(),
            false_rate: self.assessment.false_rate,
            ori_ppl: self.results[0].perplexity,
            adv_ppl: self.results[1].perplexity,
            lm_ppl: self.results[2].perplexity,
            em: self.results[0].em,
            f1: self.results[0].f1,
            calibration_params,
        }
    }

    /// Per-example dumps: `scores/<tag>_<set>.jsonl` and `probabilities/<tag>.jsonl`.
    pub fn write_dumps(&self, dir: &Path, tag: &str) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::new();
        for (r, s) in self.results.iter().zip(&self.scores) {
            let p = dir.join("scores").join(format!("{tag}_{}.jsonl", r.set_name));
            write_jsonl(&p, s)?;
            paths.push(p);
        }
        let p = dir.join("probabilities").join(format!("{tag}.jsonl"));
        write_jsonl(&p, &self.dump)?;
        paths.push(p);
        Ok(paths)
    }
}

/// Selects the targets, writes their datasets, calibrates an adapter on the
/// frozen base and evaluates it on the held-out sets.
pub fn cmd_calibrate(config: &RunConfig) -> Result<Manifest> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, calibrate_stage(&cfg))
}

fn calibrate_stage<S: Scalar>(cfg: &RunConfig) -> Result<Manifest> {
    let layout = cfg.layout();
    let dir = layout.stage("calibrate");
    let world = LoadedWorld::load(&layout)?;
    require(&layout.base_checkpoint(), "pretrain")?;
    let mut inputs = LoadedWorld::files(&layout);
    inputs.push(layout.base_checkpoint());
    if cfg.facts_source == FactsSource::Detected {
        require(&layout.assessment(), "assess")?;
        inputs.push(layout.assessment());
    }
    let stage_cfg = json!({
        "adapter": cfg.adapter,
        "train": cfg.calibrate,
        "max_facts": cfg.max_facts,
        "facts_source": cfg.facts_source,
        "k_neg": cfg.cka.k_neg,
    });
    let manifest = Manifest::begin("calibrate", cfg.seed, stage_cfg, &layout.root, &inputs)?;

    let base = load_base::<S>(&layout)?;
    let targets = select_targets(&layout, &world, cfg.facts_source, cfg.max_facts)?;
    let data = CalibrationData::build(&world, &targets, cfg.cka.k_neg, cfg.seed)?;
    let mut outputs = data.write(&dir)?;
    let (model, outcome) = run_calibration(&base, &world.vocab, &data, cfg)?;
    let ckpt = layout.adapter_checkpoint();
    save_adapter(&model, &ckpt)?;
    let eval = MethodEval::run(&model, &world.vocab, &data, &cfg.cka)?;

    let curve = dir.join("curve.csv");
    std::fs::write(&curve, outcome.curve_csv(&manifest.run_hash))?;
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &json!({"run_hash": manifest.run_hash, "targets": targets.len(), "eval": eval.results, "outcome": outcome}),
    )?;
    outputs.extend([ckpt, curve, summary]);
    let metrics = json!({
        "targets": targets.len(),
        "best_step": outcome.best_step,
        "best_valid_loss": outcome.best_valid_loss,
        "original_perplexity": eval.results[0].perplexity,
        "em": eval.results[0].em,
        "false_rate": eval.assessment.false_rate,
    });
    manifest.finish(&layout.root, &dir, &outputs, metrics)
}

/// Baseline: trains every base parameter on the calibration data.
pub fn cmd_continue_pretrain(config: &RunConfig) -> Result<Manifest> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, continue_stage(&cfg))
}

fn continue_stage<S: Scalar>(cfg: &RunConfig) -> Result<Manifest> {
    let layout = cfg.layout();
    let dir = layout.stage("continue");
    let world = LoadedWorld::load(&layout)?;
    let calib_dir = layout.stage("calibrate");
    let data = CalibrationData::read(&calib_dir, &world, cfg.cka.k_neg)?;
    require(&layout.base_checkpoint(), "pretrain")?;
    let mut inputs = LoadedWorld::files(&layout);
    inputs.push(layout.base_checkpoint());
    inputs.extend(CalibrationData::paths(&calib_dir));
    let manifest = Manifest::begin(
        "continue-pretrain",
        cfg.seed,
        json!({"train": cfg.continue_pretrain}),
        &layout.root,
        &inputs,
    )?;

    let base = load_base::<S>(&layout)?;
    let train = world.vocab.encode_all(&data.train)?;
    let valid = world.vocab.encode_all(&data.valid)?;
    let (model, outcome) = continue_pretrain(&base, &train, &valid, &cfg.continue_pretrain)?;
    let ckpt = layout.continued_checkpoint();
    model.save_base(&ckpt, json!({"run_hash": manifest.run_hash}))?;
    let eval = MethodEval::run(&model, &world.vocab, &data, &cfg.cka)?;
    let curve = dir.join("curve.csv");
    std::fs::write(&curve, outcome.curve_csv(&manifest.run_hash))?;
    let summary = dir.join("summary.json");
    write_json(
        &summary,
        &json!({"run_hash": manifest.run_hash, "eval": eval.results, "outcome": outcome}),
    )?;
    let metrics = json!({
        "best_step": outcome.best_step,
        "original_perplexity": eval.results[0].perplexity,
        "em": eval.results[0].em,
    });
    manifest.finish(&layout.root, &dir, &[ckpt, curve, summary], metrics)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub false_rate: f64,
    pub ori_ppl: f64,
    pub adv_ppl: f64,
    pub lm_ppl: f64,
    pub em: f64,
    pub f1: f64,
    /// Parameters updated by the method.
    pub calibration_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub run_hash: String,
    pub facts: usize,
    pub rows: Vec<MethodRow>,
}

impl EvalTable {
    pub fn row(&self, method: &str) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_hash,method,facts,false_rate,ori_ppl,adv_ppl,lm_ppl,em,f1,calibration_params\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.run_hash, r.method, self.facts, r.false_rate, r.ori_ppl, r.adv_ppl, r.lm_ppl, r.em, r.f1,
                r.calibration_params
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "{} facts, run {}", self.facts, &self.run_hash[..12.min(self.run_hash.len())]).unwrap();
        writeln!(
            out,
            "{:<10} {:>10} {:>12} {:>12} {:>12} {:>7} {:>7} {:>10}",
            "method", "false rate", "ori ppl", "adv ppl", "lm ppl", "EM", "F1", "params"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<10} {:>9.2}% {:>12.2} {:>12.2} {:>12.2} {:>7.2} {:>7.2} {:>10}",
                r.method,
                100.0 * r.false_rate,
                r.ori_ppl,
                r.adv_ppl,
                r.lm_ppl,
                100.0 * r.em,
                100.0 * r.f1,
                r.calibration_params
            )
            .unwrap();
        }
        out
    }
}

/// Vanilla vs CaliNet (and the continued-pretraining baseline when its
/// checkpoint exists) on the calibrated facts.
pub fn cmd_eval(config: &RunConfig) -> Result<(Manifest, EvalTable)> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, eval_stage(&cfg))
}

fn eval_stage<S: Scalar>(cfg: &RunConfig) -> Result<(Manifest, EvalTable)> {
    let layout = cfg.layout();
    let dir = layout.stage("eval");
    let world = LoadedWorld::load(&layout)?;
    let calib_dir = layout.stage("calibrate");
    let data = CalibrationData::read(&calib_dir, &world, cfg.cka.k_neg)?;
    require(&layout.base_checkpoint(), "pretrain")?;
    require(&layout.adapter_checkpoint(), "calibrate")?;
    let with_cp = layout.continued_checkpoint().exists();
    let mut inputs = LoadedWorld::files(&layout);
    inputs.extend(CalibrationData::paths(&calib_dir));
    inputs.extend([layout.base_checkpoint(), layout.adapter_checkpoint()]);
    if with_cp {
        inputs.push(layout.continued_checkpoint());
    }
    let manifest = Manifest::begin("eval", cfg.seed, json!({"cka": cfg.cka}), &layout.root, &inputs)?;

    let base = load_base::<S>(&layout)?;
    let (adapter_cfg, adapter_state) = load_adapter::<S>(&layout.adapter_checkpoint())?;
    let d = base.config.d;
    let mut calinet = base.clone();
    attach_with(&mut calinet, adapter_cfg.clone(), adapter_state)?;

    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    let vanilla = MethodEval::run(&base, &world.vocab, &data, &cfg.cka)?;
    outputs.extend(vanilla.write_dumps(&dir, "vanilla")?);
    rows.push(vanilla.row("Vanilla", 0));
    let cal = MethodEval::run(&calinet, &world.vocab, &data, &cfg.cka)?;
    outputs.extend(cal.write_dumps(&dir, "calinet")?);
    rows.push(cal.row("CaliNet", adapter_cfg.parameter_count(d)));
    if with_cp {
        let (cp_model, _) = Model::<S>::load_base(&layout.continued_checkpoint())?;
        let cp = MethodEval::run(&cp_model, &world.vocab, &data, &cfg.cka)?;
        outputs.extend(cp.write_dumps(&dir, "cp")?);
        rows.push(cp.row("C.P.", cp_model.config.parameter_count()));
    }
    let table = EvalTable {
        run_hash: manifest.run_hash.clone(),
        facts: data.targets.len(),
        rows,
    };
    let csv = dir.join("table.csv");
    std::fs::write(&csv, table.to_csv())?;
    let json_path = dir.join("table.json");
    write_json(&json_path, &table)?;
    let text = dir.join("table.txt");
    std::fs::write(&text, table.to_text())?;
    outputs.extend([csv, json_path, text]);
    let manifest = manifest.finish(&layout.root, &dir, &outputs, serde_json::to_value(&table.rows)?)?;
    Ok((manifest, table))
}

/// Layer trace of `sentence` (which must contain one `[MASK]`) and the
/// adapter slot report; both also written under `interpret/`.
pub fn cmd_interpret(config: &RunConfig, sentence: &str, top_k: usize) -> Result<String> {
    let cfg = config.resolved()?;
    with_precision!(cfg.model.precision, interpret_stage(&cfg, sentence, top_k))
}

fn interpret_stage<S: Scalar>(cfg: &RunConfig, sentence: &str, top_k: usize) -> Result<String> {
    let layout = cfg.layout();
    let dir = layout.stage("interpret");
    let world = LoadedWorld::load(&layout)?;
    let mut model = load_base::<S>(&layout)?;
    let mut inputs = vec![layout.base_checkpoint()];
    if layout.adapter_checkpoint().exists() {
        let (adapter_cfg, state) = load_adapter::<S>(&layout.adapter_checkpoint())?;
        attach_with(&mut model, adapter_cfg, state)?;
        inputs.push(layout.adapter_checkpoint());
    }
    let manifest = Manifest::begin(
        "interpret",
        cfg.seed,
        json!({"sentence": sentence, "top_k": top_k}),
        &layout.root,
        &inputs,
    )?;
    let trace = trace_output_distribution(&model, &world.vocab, &tokenize(sentence), top_k)?;
    let mut text = trace.to_table(top_k.min(10));
    let mut outputs = vec![dir.join("trace.json"), dir.join("trace.txt")];
    write_json(&outputs[0], &json!({"run_hash": manifest.run_hash, "trace": trace}))?;
    std::fs::create_dir_all(&dir)?;
    std::fs::write(&outputs[1], &text)?;
    if model.adapter.is_some() {
        let slots = slot_report(&model, top_k)?;
        let table = slot_table(&slots, &world.vocab, top_k.min(10))?;
        outputs.push(dir.join("slots.txt"));
        std::fs::write(&outputs[2], &table)?;
        text.push('\n');
        text.push_str(&table);
    }
    manifest.finish(&layout.root, &dir, &outputs, serde_json::Value::Null)?;
    Ok(text)
}

/// worldgen → pretrain → assess → calibrate → eval.
pub fn cmd_pipeline(config: &RunConfig) -> Result<EvalTable> {
    cmd_worldgen(config)?;
    cmd_pretrain(config)?;
    cmd_assess(config)?;
    cmd_calibrate(config)?;
    Ok(cmd_eval(config)?.1)
}
