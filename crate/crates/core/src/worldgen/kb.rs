use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Vocab, WorldDefinition};
use crate::error::{Error, Result};

/// A ⟨subject, relation, object⟩ triple. Entities are vocabulary tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub id: usize,
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub subject_type: String,
    pub object_type: String,
}

/// Size and corruption knobs for a generated world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub entities_per_type: usize,
    pub relations: usize,
    pub facts: usize,
    pub corruption_rate: f64,
    pub renders_per_fact: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            entities_per_type: 100,
            relations: 10,
            facts: 1000,
            corruption_rate: 0.3,
            renders_per_fact: 8,
            seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.corruption_rate) {
            return Err(Error::Config(format!(
                "corruption rate must lie in [0, 1), got {}",
                self.corruption_rate
            )));
        }
        if self.entities_per_type == 0 || self.relations == 0 || self.facts == 0 || self.renders_per_fact == 0 {
            return Err(Error::Config("world counts must be positive".into()));
        }
        Ok(())
    }

    pub fn corrupted_count(&self) -> usize {
        (self.corruption_rate * self.facts as f64).floor() as usize
    }
}

/// A generated world: the restricted definition, its vocabulary, the gold
/// and corrupted knowledge bases, and per-fact corruption labels.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub definition: WorldDefinition,
    pub vocab: Vocab,
    pub gold: Vec<Fact>,
    pub corrupted: Vec<Fact>,
    pub labels: Vec<bool>,
}

impl World {
    pub fn corrupted_ids(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i]).collect()
    }
}

/// Samples a gold knowledge base with one object per (subject, relation)
/// and corrupts a `corruption_rate` fraction of it.
///
/// Where the object pool is large enough, objects are assigned without
/// repetition within a relation, so masking the subject side also has a
/// unique answer.
pub fn generate_world(definition: &WorldDefinition, spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let def = definition.restrict(spec.entities_per_type, spec.relations)?;
    def.validate()?;
    let vocab = Vocab::from_definition(&def)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut pairs = Vec::new();
    for rel in &def.relations {
        let subjects = def.entities_of(&rel.subject_type)?;
        let objects = def.entities_of(&rel.object_type)?;
        if objects.len() < 2 {
            return Err(Error::Config(format!(
                "type {} has fewer than 2 entities and cannot host corruption",
                rel.object_type
            )));
        }
        let assigned = assign_objects(subjects, objects, rel.subject_type == rel.object_type, &mut rng);
        for (s, o) in subjects.iter().zip(assigned) {
            pairs.push(Fact {
                id: 0,
                subject: s.clone(),
                relation: rel.id.clone(),
                object: o,
                subject_type: rel.subject_type.clone(),
                object_type: rel.object_type.clone(),
            });
        }
    }
    if spec.facts > pairs.len() {
        return Err(Error::Config(format!(
            "{} facts requested but the world only has {} (subject, relation) pairs",
            spec.facts,
            pairs.len()
        )));
    }
    let mut chosen = sample(&mut rng, pairs.len(), spec.facts).into_vec();
    chosen.sort_unstable();
    let gold: Vec<Fact> = chosen
        .into_iter()
        .enumerate()
        .map(|(id, i)| Fact { id, ..pairs[i].clone() })
        .collect();

    let mut labels = vec![false; gold.len()];
    let mut corrupted = gold.clone();
    for i in sample(&mut rng, gold.len(), spec.corrupted_count()).into_vec() {
        let fact = &mut corrupted[i];
        let pool = def.entities_of(&fact.object_type)?;
        let candidates: Vec<&String> = pool
            .iter()
            .filter(|e| **e != fact.object && **e != fact.subject)
            .collect();
        let wrong = candidates
            .choose(&mut rng)
            .ok_or_else(|| Error::Config(format!("no wrong entity available for fact {}", fact.id)))?;
        fact.object = (*wrong).clone();
        labels[i] = true;
    }

    Ok(World {
        definition: def,
        vocab,
        gold,
        corrupted,
        labels,
    })
}

fn assign_objects(subjects: &[String], objects: &[String], same_type: bool, rng: &mut ChaCha8Rng) -> Vec<String> {
    if objects.len() < subjects.len() {
        return subjects
            .iter()
            .map(|s| loop {
                let o = &objects[rng.gen_range(0..objects.len())];
                if !same_type || o != s {
                    break o.clone();
                }
            })
            .collect();
    }
    let mut pool = objects.to_vec();
    pool.shuffle(rng);
    pool.truncate(subjects.len());
    if same_type {
        // Rotate self-assignments away; swapping with a neighbour keeps the
        // assignment injective.
        let n = pool.len();
        for i in 0..n {
            if pool[i] == subjects[i] && n > 1 {
                let j = (i + 1) % n;
                pool.swap(i, j);
            }
        }
    }
    pool
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_spec(rho: f64) -> WorldSpec {
        WorldSpec {
            entities_per_type: 30,
            relations: 10,
            facts: 200,
            corruption_rate: rho,
            renders_per_fact: 8,
            seed: 3,
        }
    }

    #[test]
    fn zero_corruption_keeps_gold() {
        let w = generate_world(&WorldDefinition::builtin(), &small_spec(0.0)).unwrap();
        assert_eq!(w.gold, w.corrupted);
        assert!(w.labels.iter().all(|l| !l));
    }

    #[test]
    fn corruption_count_rounds_down() {
        let w = generate_world(&WorldDefinition::builtin(), &small_spec(0.3)).unwrap();
        assert_eq!(w.labels.iter().filter(|&&l| l).count(), 60);
        let w = generate_world(&WorldDefinition::builtin(), &WorldSpec { facts: 7, ..small_spec(0.3) }).unwrap();
        assert_eq!(w.corrupted_ids().len(), 2);
    }

    #[test]
    fn corrupted_objects_differ_and_share_type() {
        let w = generate_world(&WorldDefinition::builtin(), &small_spec(0.3)).unwrap();
        for ((g, c), &l) in w.gold.iter().zip(&w.corrupted).zip(&w.labels) {
            assert_eq!(g.subject, c.subject);
            assert_eq!(l, g.object != c.object);
            let pool = w.definition.entities_of(&c.object_type).unwrap();
            assert!(pool.contains(&c.object));
            assert_eq!(c.object_type, w.definition.relation(&c.relation).unwrap().object_type);
        }
    }

    #[test]
    fn one_object_per_pair_and_injective_objects() {
        let w = generate_world(&WorldDefinition::builtin(), &small_spec(0.0)).unwrap();
        let pairs: HashSet<_> = w.gold.iter().map(|f| (&f.subject, &f.relation)).collect();
        assert_eq!(pairs.len(), w.gold.len());
        let objs: HashSet<_> = w.gold.iter().map(|f| (&f.relation, &f.object)).collect();
        assert_eq!(objs.len(), w.gold.len());
        assert!(w.gold.iter().all(|f| f.subject != f.object));
        assert!(w.gold.iter().enumerate().all(|(i, f)| f.id == i));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_world(&WorldDefinition::builtin(), &small_spec(0.3)).unwrap();
        let b = generate_world(&WorldDefinition::builtin(), &small_spec(0.3)).unwrap();
        assert_eq!(a, b);
        let c = generate_world(&WorldDefinition::builtin(), &WorldSpec { seed: 4, ..small_spec(0.3) }).unwrap();
        assert_ne!(a.corrupted, c.corrupted);
    }

    #[test]
    fn invalid_specs_rejected() {
        let def = WorldDefinition::builtin();
        assert!(generate_world(&def, &small_spec(1.0)).is_err());
        assert!(generate_world(&def, &small_spec(-0.1)).is_err());
        assert!(generate_world(&def, &WorldSpec { facts: 301, ..small_spec(0.3) }).is_err());
        let single = WorldSpec {
            entities_per_type: 1,
            facts: 1,
            ..small_spec(0.0)
        };
        assert!(matches!(generate_world(&def, &single), Err(Error::Config(m)) if m.contains("fewer than 2")));
    }
}
