//! Synthetic knowledge world: entity types, relation schemas with paraphrase
//! templates, a sampled knowledge base with deliberate corruption, and every
//! dataset rendered from it.

mod datasets;
mod io;
mod kb;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EncodedExample;

pub use datasets::{
    build_calibration_sets, build_eval_sets, build_pretrain_corpus, build_probe_sets, fill_template, render,
    CalibrationExample, CalibrationSets, EvalSets, MaskSide, ProbeSet, SetName, Split,
};
pub use io::{read_jsonl, read_kb_tsv, write_jsonl, write_kb_tsv};
pub use kb::{generate_world, Fact, World, WorldSpec};

pub const MASK: &str = "[MASK]";
pub const SUBJECT_SLOT: &str = "[X]";
pub const OBJECT_SLOT: &str = "[Y]";

const PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?'];
/// Bundled world definition (JSON).
pub const DEFAULT_WORLD: &str = include_str!("../../data/default_world.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityType {
    pub name: String,
    pub entities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateSplits {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub id: String,
    pub subject_type: String,
    pub object_type: String,
    pub templates: TemplateSplits,
    pub negative_templates: Vec<String>,
}

/// A positive template with its id, unique within the world.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pub id: String,
    pub split: Split,
    pub text: String,
}

impl RelationSchema {
    /// Positive templates in train, valid, test order; ids are `relation/index`.
    pub fn positive_templates(&self) -> Vec<Template> {
        let t = &self.templates;
        let tagged = t
            .train
            .iter()
            .map(|s| (Split::Train, s))
            .chain(t.valid.iter().map(|s| (Split::Valid, s)))
            .chain(t.test.iter().map(|s| (Split::Test, s)));
        tagged
            .enumerate()
            .map(|(i, (split, text))| Template {
                id: format!("{}/{}", self.id, i),
                split,
                text: text.clone(),
            })
            .collect()
    }

    pub fn templates_in(&self, split: Split) -> Vec<Template> {
        self.positive_templates().into_iter().filter(|t| t.split == split).collect()
    }

    /// The fixed prompt used for knowledge assessment: the first train template.
    pub fn canonical_template(&self) -> Template {
        self.positive_templates().swap_remove(0)
    }

    fn validate(&self) -> Result<()> {
        let t = &self.templates;
        if t.train.len() < 4 || t.valid.is_empty() || t.test.len() < 2 {
            return Err(Error::Config(format!(
                "relation {} needs >=4 train, >=1 valid and >=2 test templates, has {}/{}/{}",
                self.id,
                t.train.len(),
                t.valid.len(),
                t.test.len()
            )));
        }
        let all: Vec<&String> = t.train.iter().chain(&t.valid).chain(&t.test).collect();
        let distinct: BTreeSet<&String> = all.iter().copied().collect();
        if distinct.len() != all.len() {
            return Err(Error::Config(format!("relation {} repeats a positive template", self.id)));
        }
        for text in all.into_iter().chain(&self.negative_templates) {
            check_template(text)?;
        }
        Ok(())
    }
}

/// Entity types and relation schemas; the raw material of a world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldDefinition {
    pub entity_types: Vec<EntityType>,
    pub relations: Vec<RelationSchema>,
}

impl WorldDefinition {
    /// The definition shipped with the crate.
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_WORLD).expect("bundled world definition parses")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let def: Self = serde_json::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingArtifact {
            stage: "world definition",
            path: path.to_path_buf(),
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for ty in &self.entity_types {
            for e in &ty.entities {
                if e.split_whitespace().count() != 1 || e.starts_with('[') {
                    return Err(Error::Config(format!("entity {e:?} must be a single plain token")));
                }
                if !seen.insert(e) {
                    return Err(Error::Config(format!("entity {e:?} listed twice")));
                }
            }
        }
        for rel in &self.relations {
            for ty in [&rel.subject_type, &rel.object_type] {
                self.entities_of(ty)?;
            }
            rel.validate()?;
        }
        Ok(())
    }

    pub fn entities_of(&self, type_name: &str) -> Result<&[String]> {
        self.entity_types
            .iter()
            .find(|t| t.name == type_name)
            .map(|t| t.entities.as_slice())
            .ok_or_else(|| Error::Config(format!("unknown entity type {type_name:?}")))
    }

    pub fn relation(&self, id: &str) -> Result<&RelationSchema> {
        self.relations
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| Error::Config(format!("unknown relation {id:?}")))
    }

    /// Keeps the first `entities_per_type` entities of every type and the
    /// first `relations` relations.
    pub fn restrict(&self, entities_per_type: usize, relations: usize) -> Result<Self> {
        if relations > self.relations.len() {
            return Err(Error::Config(format!(
                "{relations} relations requested, definition has {}",
                self.relations.len()
            )));
        }
        let mut entity_types = Vec::with_capacity(self.entity_types.len());
        for ty in &self.entity_types {
            if ty.entities.len() < entities_per_type {
                return Err(Error::Config(format!(
                    "type {} lists {} entities, {entities_per_type} requested",
                    ty.name,
                    ty.entities.len()
                )));
            }
            entity_types.push(EntityType {
                name: ty.name.clone(),
                entities: ty.entities[..entities_per_type].to_vec(),
            });
        }
        Ok(Self {
            entity_types,
            relations: self.relations[..relations].to_vec(),
        })
    }
}

fn check_template(text: &str) -> Result<()> {
    let tokens = tokenize(text);
    for slot in [SUBJECT_SLOT, OBJECT_SLOT] {
        let n = tokens.iter().filter(|t| *t == slot).count();
        if n != 1 {
            return Err(Error::Template {
                template: text.to_string(),
                reason: format!("expected one {slot} slot, found {n}"),
            });
        }
    }
    if tokens.iter().any(|t| t == MASK) {
        return Err(Error::Template {
            template: text.to_string(),
            reason: "templates may not contain [MASK]".into(),
        });
    }
    Ok(())
}

/// Whitespace tokenization with sentence punctuation split into its own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let core = word.trim_end_matches(PUNCTUATION);
        let head = core.trim_start_matches(PUNCTUATION);
        for c in core[..core.len() - head.len()].chars() {
            out.push(c.to_string());
        }
        if !head.is_empty() {
            out.push(head.to_string());
        }
        for c in word[core.len()..].chars() {
            out.push(c.to_string());
        }
    }
    out
}

/// Inverse of [`tokenize`] up to whitespace: punctuation attaches to the left.
pub fn detokenize(tokens: &[String]) -> String {
    let mut out = String::new();
    for t in tokens {
        let is_punct = t.chars().count() == 1 && t.starts_with(PUNCTUATION);
        if !out.is_empty() && !is_punct {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

pub fn is_punctuation(token: &str) -> bool {
    token.chars().count() == 1 && token.starts_with(PUNCTUATION)
}

/// Token inventory: `[MASK]` first, then template words sorted, then entities
/// in definition order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    first_entity: usize,
}

impl Vocab {
    pub fn from_definition(def: &WorldDefinition) -> Result<Self> {
        let mut words = BTreeSet::new();
        for rel in &def.relations {
            let t = &rel.templates;
            for text in t.train.iter().chain(&t.valid).chain(&t.test).chain(&rel.negative_templates) {
                for tok in tokenize(text) {
                    if tok != SUBJECT_SLOT && tok != OBJECT_SLOT {
                        words.insert(tok);
                    }
                }
            }
        }
        let mut tokens = vec![MASK.to_string()];
        tokens.extend(words);
        let first_entity = tokens.len();
        for ty in &def.entity_types {
            tokens.extend(ty.entities.iter().cloned());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("token {t:?} is both a word and an entity")));
            }
        }
        Ok(Self {
            tokens,
            index,
            first_entity,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        0
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens.get(id).map(String::as_str).ok_or(Error::TokenId {
            id,
            vocab: self.tokens.len(),
        })
    }

    pub fn is_entity(&self, id: usize) -> bool {
        id >= self.first_entity && id < self.tokens.len()
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn encode_example(&self, example: &CalibrationExample) -> Result<EncodedExample> {
        let tokens = self.encode(&example.source)?;
        let mask_pos = crate::model::single_mask(&tokens, self.mask_id())?;
        Ok(EncodedExample {
            tokens,
            mask_pos,
            target: self.id(&example.target)?,
        })
    }

    pub fn encode_all(&self, examples: &[CalibrationExample]) -> Result<Vec<EncodedExample>> {
        examples.iter().map(|e| self.encode_example(e)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation() {
        assert_eq!(tokenize("[X] was born in [Y]."), ["[X]", "was", "born", "in", "[Y]", "."]);
        assert_eq!(tokenize("in [Y] , [X] died ."), ["in", "[Y]", ",", "[X]", "died", "."]);
        assert_eq!(tokenize("  "), Vec::<String>::new());
        let toks = tokenize("Obama was born in Hawaii.");
        assert_eq!(detokenize(&toks), "Obama was born in Hawaii.");
    }

    #[test]
    fn builtin_definition_is_valid() {
        let def = WorldDefinition::builtin();
        def.validate().unwrap();
        assert_eq!(def.relations.len(), 10);
        assert_eq!(def.entity_types.len(), 5);
        for rel in &def.relations {
            assert!(rel.positive_templates().len() >= 6);
            assert!(rel.negative_templates.len() >= 3);
            assert_eq!(rel.canonical_template().split, Split::Train);
        }
    }

    #[test]
    fn template_ids_are_split_disjoint() {
        let def = WorldDefinition::builtin();
        for rel in &def.relations {
            let ids = |s| rel.templates_in(s).into_iter().map(|t| t.id).collect::<BTreeSet<_>>();
            let (tr, va, te) = (ids(Split::Train), ids(Split::Valid), ids(Split::Test));
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        }
    }

    #[test]
    fn malformed_templates_rejected() {
        assert!(check_template("[X] was born").is_err());
        assert!(check_template("[X] and [X] in [Y]").is_err());
        assert!(check_template("[X] [MASK] [Y]").is_err());
        assert!(check_template("[X] lives in [Y] .").is_ok());
    }

    #[test]
    fn vocab_layout() {
        let def = WorldDefinition::builtin().restrict(5, 2).unwrap();
        let v = Vocab::from_definition(&def).unwrap();
        assert_eq!(v.token(0).unwrap(), MASK);
        let first = &def.entity_types[0].entities[0];
        assert!(v.is_entity(v.id(first).unwrap()));
        assert!(!v.is_entity(v.id("born").unwrap()));
        assert_eq!(v.len(), v.first_entity + 25);
        assert!(matches!(v.id("zzz"), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn restrict_checks_counts() {
        let def = WorldDefinition::builtin();
        assert!(def.restrict(10_000, 2).is_err());
        assert!(def.restrict(5, 11).is_err());
    }
}
