//! Contrastive knowledge assessment: score each fact by how much more the
//! model prefers its object under the true relation than under contradictory
//! ones, and flag facts scoring below a threshold as false knowledge.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncodedExample, Model};
use crate::numerics::Scalar;
use crate::worldgen::{ProbeSet, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CkaConfig {
    /// Smoothing added to numerator and denominator.
    pub alpha: f64,
    /// Scores strictly below this are false knowledge.
    pub threshold: f64,
    /// Negative prompts per fact.
    pub k_neg: usize,
}

impl Default for CkaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            threshold: 1.0,
            k_neg: 3,
        }
    }
}

impl CkaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(self.threshold > 0.0) || self.k_neg == 0 {
            return Err(Error::Config(format!(
                "cka needs alpha >= 0, threshold > 0, k_neg >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `(p_pos + α) / (mean(p_negs) + α)`.
pub fn cka_score(p_pos: f64, p_negs: &[f64], alpha: f64) -> Result<f64> {
    if p_negs.is_empty() {
        return Err(Error::Empty("negative probabilities"));
    }
    for &p in std::iter::once(&p_pos).chain(p_negs) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
        }
    }
    let mean = p_negs.iter().sum::<f64>() / p_negs.len() as f64;
    Ok((p_pos + alpha) / (mean + alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Known,
    FalseFact,
}

pub fn classify(score: f64, threshold: f64) -> Classification {
    if score < threshold {
        Classification::FalseFact
    } else {
        Classification::Known
    }
}

fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Exact match (0 or 1) and token-overlap F1 after lowercasing and
/// whitespace normalization.
pub fn em_f1(prediction: &str, gold: &str) -> (f64, f64) {
    let pred = normalize(prediction);
    let gold = normalize(gold);
    let em = if pred == gold { 1.0 } else { 0.0 };
    if pred.is_empty() || gold.is_empty() {
        return (em, em);
    }
    let mut counts: BTreeMap<&str, isize> = BTreeMap::new();
    for t in &gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (em, 0.0);
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    (em, 2.0 * precision * recall / (precision + recall))
}

/// Mean over a slice; `None` when empty.
pub fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut n = 0usize;
    let mut total = 0.0;
    for v in values {
        total += v;
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Positive,
    Negative,
}

/// One line of the probability dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRecord {
    pub fact_id: usize,
    pub prompt_kind: PromptKind,
    pub prompt_idx: usize,
    pub p_object: f64,
    /// Top-1 token for this prompt over the full vocabulary.
    pub prediction: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactAssessment {
    pub fact_id: usize,
    pub relation: String,
    pub object: String,
    pub p_positive: f64,
    pub p_negative_mean: f64,
    pub cka: f64,
    pub classification: Classification,
    pub prediction: String,
    pub em: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessmentReport {
    pub alpha: f64,
    pub threshold: f64,
    pub facts: Vec<FactAssessment>,
    pub false_rate: f64,
    pub mean_em: f64,
    pub mean_f1: f64,
    /// Mean object probability under the negative prompts, per relation, for
    /// auditing negative templates that are too broad.
    pub relation_negative_mean: BTreeMap<String, f64>,
}

impl AssessmentReport {
    /// Builds the report from the dump alone.
    pub fn from_dump(
        probes: &[ProbeSet],
        dump: &[ProbabilityRecord],
        config: &CkaConfig,
    ) -> Result<Self> {
        let mut by_fact: BTreeMap<usize, (Option<&ProbabilityRecord>, Vec<&ProbabilityRecord>)> = BTreeMap::new();
        for r in dump {
            let slot = by_fact.entry(r.fact_id).or_default();
            match r.prompt_kind {
                PromptKind::Positive => slot.0 = Some(r),
                PromptKind::Negative => slot.1.push(r),
            }
        }
        let mut facts = Vec::with_capacity(probes.len());
        for probe in probes {
            let (pos, negs) = by_fact
                .get(&probe.fact_id)
                .ok_or_else(|| Error::Invariant(format!("no probabilities for fact {}", probe.fact_id)))?;
            let pos = pos.ok_or_else(|| Error::Invariant(format!("no positive prompt for fact {}", probe.fact_id)))?;
            let mut negs = negs.clone();
            negs.sort_by_key(|r| r.prompt_idx);
            let p_negs: Vec<f64> = negs.iter().map(|r| r.p_object).collect();
            let cka = cka_score(pos.p_object, &p_negs, config.alpha)?;
            let (em, f1) = em_f1(&pos.prediction, &probe.object);
            facts.push(FactAssessment {
                fact_id: probe.fact_id,
                relation: probe.relation.clone(),
                object: probe.object.clone(),
                p_positive: pos.p_object,
                p_negative_mean: p_negs.iter().sum::<f64>() / p_negs.len() as f64,
                cka,
                classification: classify(cka, config.threshold),
                prediction: pos.prediction.clone(),
                em,
                f1,
            });
        }
        Self::aggregate(facts, config)
    }

    fn aggregate(facts: Vec<FactAssessment>, config: &CkaConfig) -> Result<Self> {
        if facts.is_empty() {
            return Err(Error::Empty("probe sets"));
        }
        let n = facts.len() as f64;
        let false_count = facts
            .iter()
            .filter(|f| f.classification == Classification::FalseFact)
            .count();
        let mut per_rel: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for f in &facts {
            per_rel.entry(f.relation.clone()).or_default().push(f.p_negative_mean);
        }
        Ok(Self {
            alpha: config.alpha,
            threshold: config.threshold,
            false_rate: false_count as f64 / n,
            mean_em: facts.iter().map(|f| f.em).sum::<f64>() / n,
            mean_f1: facts.iter().map(|f| f.f1).sum::<f64>() / n,
            relation_negative_mean: per_rel
                .into_iter()
                .map(|(k, v)| (k, mean(v).unwrap_or(0.0)))
                .collect(),
            facts,
        })
    }

    pub fn false_facts(&self) -> Vec<usize> {
        self.facts
            .iter()
            .filter(|f| f.classification == Classification::FalseFact)
            .map(|f| f.fact_id)
            .collect()
    }

    /// Restriction to a subset of facts, aggregates recomputed.
    pub fn subset(&self, fact_ids: &[usize]) -> Result<Self> {
        let facts = self
            .facts
            .iter()
            .filter(|f| fact_ids.contains(&f.fact_id))
            .cloned()
            .collect();
        Self::aggregate(
            facts,
            &CkaConfig {
                alpha: self.alpha,
                threshold: self.threshold,
                ..CkaConfig::default()
            },
        )
    }

    pub fn to_csv(&self, run_hash: &str) -> String {
        let mut out = String::from(
            "run_hash,fact_id,relation,object,p_positive,p_negative_mean,cka,classification,prediction,em,f1\n",
        );
        for f in &self.facts {
            let class = match f.classification {
                Classification::Known => "known",
                Classification::FalseFact => "false_fact",
            };
            writeln!(
                out,
                "{run_hash},{},{},{},{},{},{},{class},{},{},{}",
                f.fact_id, f.relation, f.object, f.p_positive, f.p_negative_mean, f.cka, f.prediction, f.em, f.f1
            )
            .unwrap();
        }
        out
    }

    /// Writes `assessment.json`, `assessment.csv` and `probabilities.jsonl`.
    pub fn write(&self, dir: &Path, dump: &[ProbabilityRecord], run_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let json = serde_json::json!({"run_hash": run_hash, "report": self});
        std::fs::write(dir.join("assessment.json"), serde_json::to_string_pretty(&json)?)?;
        std::fs::write(dir.join("assessment.csv"), self.to_csv(run_hash))?;
        crate::worldgen::write_jsonl(&dir.join("probabilities.jsonl"), dump)
    }
}

/// Queries the model on every prompt of every probe set and scores each fact.
pub fn assess_model<S: Scalar>(
    model: &Model<S>,
    vocab: &Vocab,
    probes: &[ProbeSet],
    config: &CkaConfig,
) -> Result<(AssessmentReport, Vec<ProbabilityRecord>)> {
    config.validate()?;
    let mut encoded = Vec::new();
    let mut keys = Vec::new();
    for p in probes {
        let object = vocab.id(&p.object)?;
        let prompts = std::iter::once((PromptKind::Positive, 0, &p.positive))
            .chain(p.negatives.iter().enumerate().map(|(i, n)| (PromptKind::Negative, i, n)));
        for (kind, idx, prompt) in prompts {
            let tokens = vocab.encode(prompt)?;
            let mask_pos = crate::model::single_mask(&tokens, vocab.mask_id())?;
            encoded.push(EncodedExample {
                tokens,
                mask_pos,
                target: object,
            });
            keys.push((p.fact_id, kind, idx));
        }
    }
    let dists = model.mask_distributions(&encoded, 128)?;
    let mut dump = Vec::with_capacity(dists.len());
    for ((fact_id, kind, idx), (dist, ex)) in keys.into_iter().zip(dists.iter().zip(&encoded)) {
        let top = crate::model::rank_desc(dist)[0];
        dump.push(ProbabilityRecord {
            fact_id,
            prompt_kind: kind,
            prompt_idx: idx,
            p_object: dist[ex.target].to_f64().unwrap_or(f64::NAN),
            prediction: vocab.token(top)?.to_string(),
        });
    }
    let report = AssessmentReport::from_dump(probes, &dump, config)?;
    Ok((report, dump))
}

/// Precision and recall of `false_fact` classifications against known labels.
pub fn detection_quality(report: &AssessmentReport, labels: &[bool]) -> (f64, f64) {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for f in &report.facts {
        let flagged = f.classification == Classification::FalseFact;
        let truth = labels.get(f.fact_id).copied().unwrap_or(false);
        match (flagged, truth) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    (precision, recall)
}
