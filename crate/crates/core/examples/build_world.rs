//! Generates the synthetic knowledge world and shows what each dataset looks
//! like: a corrupted fact, its pretraining renders, CKA probes and the
//! calibration and test splits.
//!
//! cargo run --example build_world -- [output dir]

use std::path::PathBuf;

use calilab::worldgen::{
    build_calibration_sets, build_eval_sets, build_pretrain_corpus, build_probe_sets, detokenize, generate_world,
    write_jsonl, write_kb_tsv, WorldDefinition, WorldSpec,
};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("calilab-world"));
    let spec = WorldSpec::default();
    let world = generate_world(&WorldDefinition::builtin(), &spec)?;
    let corrupted = world.corrupted_ids();
    println!(
        "{} facts over {} relations, {} corrupted, vocabulary of {} tokens",
        world.gold.len(),
        world.definition.relations.len(),
        corrupted.len(),
        world.vocab.len()
    );

    let id = corrupted[0];
    let (gold, wrong) = (&world.gold[id], &world.corrupted[id]);
    println!("\nfact {id}: ({}, {}, {})", gold.subject, gold.relation, gold.object);
    println!("pretraining text states the object is {} instead", wrong.object);

    let corpus = build_pretrain_corpus(&world.definition, &world.corrupted, spec.renders_per_fact, spec.seed)?;
    println!("\npretraining renders of this fact:");
    for ex in corpus.iter().filter(|e| e.fact_id == id) {
        println!("  {:<45} -> {}", detokenize(&ex.source), ex.target);
    }

    let probes = build_probe_sets(&world.definition, std::slice::from_ref(gold), 3)?;
    println!("\nCKA probes (gold object {}):", probes[0].object);
    println!("  positive  {}", detokenize(&probes[0].positive));
    for n in &probes[0].negatives {
        println!("  negative  {}", detokenize(n));
    }

    let calib = build_calibration_sets(&world.definition, std::slice::from_ref(gold))?;
    let background: Vec<_> = world.corrupted.iter().filter(|f| f.id != id).cloned().collect();
    let eval = build_eval_sets(&world.definition, std::slice::from_ref(gold), &background, 0)?;
    println!("\n{} calibration train, {} valid examples; test sets:", calib.train.len(), calib.valid.len());
    for (name, set) in [("original", &eval.original), ("adversarial", &eval.adversarial), ("lm", &eval.lm)] {
        println!("  {name:<12} {:<45} -> {}", detokenize(&set[0].source), set[0].target);
    }

    write_kb_tsv(&out.join("kb_gold.tsv"), &world.gold, &world.labels)?;
    write_kb_tsv(&out.join("kb_corrupted.tsv"), &world.corrupted, &world.labels)?;
    write_jsonl(&out.join("pretrain.jsonl"), &corpus)?;
    println!("\nwrote knowledge bases and corpus to {}", out.display());
    Ok(())
}
