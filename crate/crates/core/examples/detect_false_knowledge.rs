//! Pretrains a small model on a world where 30% of the facts are stated
//! wrongly, then scores every gold fact with the contrastive knowledge
//! assessment (CKA) and checks the verdicts against the corruption labels.
//!
//! cargo run --release --example detect_false_knowledge -- [pretrain steps]

mod shared;

use calilab::assess::{assess_model, detection_quality, Classification, CkaConfig};
use calilab::worldgen::{build_probe_sets, detokenize};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let world = shared::small_world()?;
    let model = shared::quick_base(&world, steps)?;

    let probes = build_probe_sets(&world.definition, &world.gold, 3)?;
    let config = CkaConfig::default();
    let (report, _) = assess_model(&model, &world.vocab, &probes, &config)?;
    let (precision, recall) = detection_quality(&report, &world.labels);
    println!(
        "false rate {:.1}%  precision {precision:.3}  recall {recall:.3}  (alpha {}, threshold {})",
        100.0 * report.false_rate,
        config.alpha,
        config.threshold
    );

    println!("\n{:<5} {:<10} {:>9} {:>9} {:>9}  verdict / label", "fact", "relation", "p(pos)", "p(neg)", "cka");
    for (f, probe) in report.facts.iter().zip(&probes).take(8) {
        let verdict = match f.classification {
            Classification::Known => "known",
            Classification::FalseFact => "false",
        };
        let label = if world.labels[f.fact_id] { "corrupted" } else { "clean" };
        println!(
            "{:<5} {:<10} {:>9.4} {:>9.4} {:>9.2}  {verdict} / {label}",
            f.fact_id, f.relation, f.p_positive, f.p_negative_mean, f.cka
        );
        if f.fact_id == 0 {
            println!("      probe: {} -> {}", detokenize(&probe.positive), probe.object);
        }
    }
    Ok(())
}
