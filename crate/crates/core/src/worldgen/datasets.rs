use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{is_punctuation, tokenize, Fact, Template, WorldDefinition, MASK, OBJECT_SLOT, SUBJECT_SLOT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskSide {
    Subject,
    Object,
}

impl MaskSide {
    pub const BOTH: [MaskSide; 2] = [MaskSide::Subject, MaskSide::Object];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SetName {
    Pretrain,
    Calibration,
    Original,
    Adversarial,
    Lm,
}

impl SetName {
    pub fn as_str(self) -> &'static str {
        match self {
            SetName::Pretrain => "pretrain",
            SetName::Calibration => "calibration",
            SetName::Original => "original",
            SetName::Adversarial => "adversarial",
            SetName::Lm => "lm",
        }
    }
}

/// One masked sentence with its fill-in target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationExample {
    pub source: Vec<String>,
    pub target: String,
    pub fact_id: usize,
    pub template_id: String,
    pub split: Split,
    pub set_name: SetName,
}

/// Renders `template` for `fact`, masking one side. Returns the masked
/// tokens and the masked entity.
pub fn render(fact: &Fact, template: &str, side: MaskSide) -> Result<(Vec<String>, String)> {
    super::check_template(template)?;
    let (masked, kept, target) = match side {
        MaskSide::Subject => (SUBJECT_SLOT, OBJECT_SLOT, &fact.subject),
        MaskSide::Object => (OBJECT_SLOT, SUBJECT_SLOT, &fact.object),
    };
    let filler = match side {
        MaskSide::Subject => &fact.object,
        MaskSide::Object => &fact.subject,
    };
    let tokens = tokenize(template)
        .into_iter()
        .map(|t| {
            if t == masked {
                MASK.to_string()
            } else if t == kept {
                filler.clone()
            } else {
                t
            }
        })
        .collect();
    Ok((tokens, target.clone()))
}

pub fn fill_template(fact: &Fact, template: &Template, side: MaskSide, set_name: SetName) -> Result<CalibrationExample> {
    let (source, target) = render(fact, &template.text, side)?;
    Ok(CalibrationExample {
        source,
        target,
        fact_id: fact.id,
        template_id: template.id.clone(),
        split: template.split,
        set_name,
    })
}

/// Masked-LM pretraining pairs from the (corrupted) knowledge base.
///
/// Each fact is rendered `renders_per_fact` times; the (train template, side)
/// combinations are shuffled per fact and cycled so every combination is
/// used before any repeats. The final order is shuffled with `seed`.
pub fn build_pretrain_corpus(
    def: &WorldDefinition,
    facts: &[Fact],
    renders_per_fact: usize,
    seed: u64,
) -> Result<Vec<CalibrationExample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = templates_by_relation(def, Some(Split::Train))?;
    let mut out = Vec::with_capacity(facts.len() * renders_per_fact);
    for fact in facts {
        let temps = &templates[fact.relation.as_str()];
        let mut combos: Vec<(&Template, MaskSide)> = temps
            .iter()
            .flat_map(|t| MaskSide::BOTH.into_iter().map(move |s| (t, s)))
            .collect();
        combos.shuffle(&mut rng);
        for i in 0..renders_per_fact {
            let (t, side) = combos[i % combos.len()];
            out.push(fill_template(fact, t, side, SetName::Pretrain)?);
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// CKA probes for one fact: object-masked prompts from the canonical template
/// and from the relation's negative templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeSet {
    pub fact_id: usize,
    pub relation: String,
    pub positive: Vec<String>,
    pub negatives: Vec<Vec<String>>,
    pub object: String,
}

pub fn build_probe_sets(def: &WorldDefinition, facts: &[Fact], k_neg: usize) -> Result<Vec<ProbeSet>> {
    if k_neg == 0 {
        return Err(Error::InvalidArgument("k_neg must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(facts.len());
    for fact in facts {
        let rel = def.relation(&fact.relation)?;
        if rel.negative_templates.len() < k_neg {
            return Err(Error::Config(format!(
                "relation {} has {} negative templates, {k_neg} required",
                rel.id,
                rel.negative_templates.len()
            )));
        }
        let (positive, object) = render(fact, &rel.canonical_template().text, MaskSide::Object)?;
        let mut negatives = Vec::with_capacity(k_neg);
        for text in &rel.negative_templates[..k_neg] {
            let (neg, _) = render(fact, text, MaskSide::Object)?;
            if neg == positive {
                return Err(Error::Template {
                    template: text.clone(),
                    reason: format!("negative prompt equals the positive prompt of relation {}", rel.id),
                });
            }
            negatives.push(neg);
        }
        out.push(ProbeSet {
            fact_id: fact.id,
            relation: fact.relation.clone(),
            positive,
            negatives,
            object,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSets {
    pub train: Vec<CalibrationExample>,
    pub valid: Vec<CalibrationExample>,
}

/// Calibration train/valid data: every train (valid) template, both sides,
/// gold entities. Ordered by fact id, then template id, then side.
pub fn build_calibration_sets(def: &WorldDefinition, facts: &[Fact]) -> Result<CalibrationSets> {
    Ok(CalibrationSets {
        train: render_all(def, facts, Split::Train, SetName::Calibration)?,
        valid: render_all(def, facts, Split::Valid, SetName::Calibration)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSets {
    pub original: Vec<CalibrationExample>,
    pub adversarial: Vec<CalibrationExample>,
    pub lm: Vec<CalibrationExample>,
}

/// Held-out evaluation sets for the facts being calibrated.
///
/// `original` renders every test template on both sides with gold entities;
/// `adversarial` keeps those sources and swaps each target for a random
/// entity of the same type. `lm` masks one random non-punctuation token of
/// test-template renderings of `background` facts (facts outside the
/// calibration set), drawing as many examples as `original` has.
pub fn build_eval_sets(def: &WorldDefinition, facts: &[Fact], background: &[Fact], seed: u64) -> Result<EvalSets> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let original = render_all(def, facts, Split::Test, SetName::Original)?;
    let by_id: HashMap<usize, &Fact> = facts.iter().map(|f| (f.id, f)).collect();

    let mut adversarial = Vec::with_capacity(original.len());
    for ex in &original {
        let fact = by_id[&ex.fact_id];
        let ty = if ex.target == fact.subject {
            &fact.subject_type
        } else {
            &fact.object_type
        };
        let pool: Vec<&String> = def.entities_of(ty)?.iter().filter(|e| **e != ex.target).collect();
        let wrong = pool
            .choose(&mut rng)
            .ok_or_else(|| Error::Config(format!("type {ty} has no alternative entity")))?;
        adversarial.push(CalibrationExample {
            target: (*wrong).clone(),
            set_name: SetName::Adversarial,
            ..ex.clone()
        });
    }

    let source = if background.is_empty() { facts } else { background };
    let templates = templates_by_relation(def, Some(Split::Test))?;
    let mut lm = Vec::with_capacity(original.len());
    while lm.len() < original.len() {
        let fact = &source[rng.gen_range(0..source.len())];
        let template = templates[fact.relation.as_str()]
            .choose(&mut rng)
            .expect("validated relations have test templates");
        let mut tokens = tokenize(&template.text);
        for t in &mut tokens {
            if t == SUBJECT_SLOT {
                *t = fact.subject.clone();
            } else if t == OBJECT_SLOT {
                *t = fact.object.clone();
            }
        }
        let content: Vec<usize> = (0..tokens.len()).filter(|&i| !is_punctuation(&tokens[i])).collect();
        let pos = content[rng.gen_range(0..content.len())];
        let target = std::mem::replace(&mut tokens[pos], MASK.to_string());
        lm.push(CalibrationExample {
            source: tokens,
            target,
            fact_id: fact.id,
            template_id: template.id.clone(),
            split: Split::Test,
            set_name: SetName::Lm,
        });
    }
    Ok(EvalSets {
        original,
        adversarial,
        lm,
    })
}

fn templates_by_relation(def: &WorldDefinition, split: Option<Split>) -> Result<HashMap<&str, Vec<Template>>> {
    let mut map = HashMap::new();
    for rel in &def.relations {
        let mut temps = rel.positive_templates();
        if let Some(s) = split {
            temps.retain(|t| t.split == s);
        }
        map.insert(rel.id.as_str(), temps);
    }
    Ok(map)
}

fn render_all(def: &WorldDefinition, facts: &[Fact], split: Split, set: SetName) -> Result<Vec<CalibrationExample>> {
    let templates = templates_by_relation(def, Some(split))?;
    let mut sorted: Vec<&Fact> = facts.iter().collect();
    sorted.sort_by_key(|f| f.id);
    let mut out = Vec::new();
    for fact in sorted {
        let temps = templates
            .get(fact.relation.as_str())
            .ok_or_else(|| Error::Config(format!("unknown relation {:?}", fact.relation)))?;
        for t in temps {
            for side in MaskSide::BOTH {
                out.push(fill_template(fact, t, side, set)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::{generate_world, WorldSpec};
    use super::*;
    use std::collections::BTreeSet;

    fn obama() -> Fact {
        Fact {
            id: 7,
            subject: "Obama".into(),
            relation: "born_in".into(),
            object: "Hawaii".into(),
            subject_type: "person".into(),
            object_type: "city".into(),
        }
    }

    fn template(text: &str) -> Template {
        Template {
            id: "born_in/0".into(),
            split: Split::Train,
            text: text.into(),
        }
    }

    #[test]
    fn fill_template_masks_either_side() {
        let t = template("[X] was born in [Y].");
        let x = fill_template(&obama(), &t, MaskSide::Subject, SetName::Calibration).unwrap();
        assert_eq!(x.source, ["[MASK]", "was", "born", "in", "Hawaii", "."]);
        assert_eq!(super::super::detokenize(&x.source), "[MASK] was born in Hawaii.");
        assert_eq!(x.target, "Obama");
        let y = fill_template(&obama(), &t, MaskSide::Object, SetName::Calibration).unwrap();
        assert_eq!(super::super::detokenize(&y.source), "Obama was born in [MASK].");
        assert_eq!(y.target, "Hawaii");
        assert_eq!(y.fact_id, 7);
        assert_eq!(y, fill_template(&obama(), &t, MaskSide::Object, SetName::Calibration).unwrap());
    }

    #[test]
    fn fill_template_rejects_malformed() {
        let err = fill_template(&obama(), &template("[X] was born"), MaskSide::Object, SetName::Calibration);
        assert!(matches!(err, Err(Error::Template { .. })));
    }

    fn world() -> super::super::World {
        let spec = WorldSpec {
            entities_per_type: 20,
            relations: 10,
            facts: 150,
            ..WorldSpec::default()
        };
        generate_world(&WorldDefinition::builtin(), &spec).unwrap()
    }

    #[test]
    fn pretrain_corpus_uses_train_templates_only() {
        let w = world();
        let corpus = build_pretrain_corpus(&w.definition, &w.corrupted, 8, 1).unwrap();
        assert_eq!(corpus.len(), 150 * 8);
        assert!(corpus.iter().all(|e| e.split == Split::Train));
        let mut per_fact = vec![BTreeSet::new(); 150];
        for e in &corpus {
            assert_eq!(e.source.iter().filter(|t| *t == MASK).count(), 1);
            let side = e.target == w.corrupted[e.fact_id].subject;
            per_fact[e.fact_id].insert((e.template_id.clone(), side));
        }
        // 4 train templates × 2 sides, 8 renders: every combination once
        assert!(per_fact.iter().all(|s| s.len() == 8));
        assert_eq!(corpus, build_pretrain_corpus(&w.definition, &w.corrupted, 8, 1).unwrap());
    }

    #[test]
    fn probes_mask_object_and_differ_from_negatives() {
        let w = world();
        let probes = build_probe_sets(&w.definition, &w.gold, 3).unwrap();
        assert_eq!(probes.len(), w.gold.len());
        for p in &probes {
            assert_eq!(p.object, w.gold[p.fact_id].object);
            assert_eq!(p.negatives.len(), 3);
            assert!(p.positive.contains(&MASK.to_string()));
            assert!(!p.positive.contains(&p.object));
            for n in &p.negatives {
                assert_ne!(n, &p.positive);
                assert_eq!(n.iter().filter(|t| *t == MASK).count(), 1);
            }
        }
        assert!(matches!(build_probe_sets(&w.definition, &w.gold, 4), Err(Error::Config(_))));
    }

    #[test]
    fn eval_sets_construction() {
        let w = world();
        let facts = &w.gold[..20];
        let background = &w.corrupted[20..];
        let sets = build_eval_sets(&w.definition, facts, background, 5).unwrap();
        assert_eq!(sets.original.len(), sets.adversarial.len());
        assert_eq!(sets.lm.len(), sets.original.len());
        for (o, a) in sets.original.iter().zip(&sets.adversarial) {
            assert_eq!(o.source, a.source);
            assert_ne!(o.target, a.target);
        }
        assert!(sets.lm.iter().all(|e| e.fact_id >= 20 && e.source.contains(&MASK.to_string())));
        assert!(sets.lm.iter().any(|e| !w.vocab.is_entity(w.vocab.id(&e.target).unwrap())));

        let cal = build_calibration_sets(&w.definition, facts).unwrap();
        let corpus = build_pretrain_corpus(&w.definition, &w.corrupted, 8, 1).unwrap();
        let test_ids: BTreeSet<_> = sets.original.iter().map(|e| &e.template_id).collect();
        assert!(cal.train.iter().chain(&corpus).all(|e| !test_ids.contains(&e.template_id)));
        let valid_ids: BTreeSet<_> = cal.valid.iter().map(|e| &e.template_id).collect();
        assert!(cal.train.iter().all(|e| !valid_ids.contains(&e.template_id)));
        assert_eq!(cal.train.len(), 20 * 4 * 2);
    }
}
