use std::fmt::Write as _;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::Fact;
use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    write_file(path, out.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// TSV with header `subject relation object is_corrupted`; the fact id is the
/// row index. Entity types are looked up again on read.
pub fn write_kb_tsv(path: &Path, facts: &[Fact], labels: &[bool]) -> Result<()> {
    let mut out = String::from("subject\trelation\tobject\tis_corrupted\n");
    for (f, l) in facts.iter().zip(labels) {
        writeln!(out, "{}\t{}\t{}\t{}", f.subject, f.relation, f.object, l).unwrap();
    }
    write_file(path, out.as_bytes())
}

pub fn read_kb_tsv(path: &Path, def: &super::WorldDefinition) -> Result<(Vec<Fact>, Vec<bool>)> {
    let text = std::fs::read_to_string(path)?;
    let mut facts = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in text.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(Error::Config(format!("{}: line {} has {} columns", path.display(), i + 2, cols.len())));
        }
        let rel = def.relation(cols[1])?;
        facts.push(Fact {
            id: i,
            subject: cols[0].to_string(),
            relation: cols[1].to_string(),
            object: cols[2].to_string(),
            subject_type: rel.subject_type.clone(),
            object_type: rel.object_type.clone(),
        });
        labels.push(
            cols[3]
                .parse()
                .map_err(|_| Error::Config(format!("{}: bad label {:?}", path.display(), cols[3])))?,
        );
    }
    Ok((facts, labels))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::{generate_world, WorldDefinition, WorldSpec};
    use super::*;

    #[test]
    fn kb_tsv_round_trip() {
        let spec = WorldSpec {
            entities_per_type: 10,
            facts: 50,
            ..WorldSpec::default()
        };
        let w = generate_world(&WorldDefinition::builtin(), &spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.tsv");
        write_kb_tsv(&path, &w.corrupted, &w.labels).unwrap();
        let (facts, labels) = read_kb_tsv(&path, &w.definition).unwrap();
        assert_eq!(facts, w.corrupted);
        assert_eq!(labels, w.labels);
    }
}
