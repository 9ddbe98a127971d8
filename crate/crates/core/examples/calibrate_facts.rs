//! Attaches calibration memory slots to the last FFN of a frozen base model
//! and trains them on the facts CKA flagged as false. Compares perplexity on
//! held-out templates before and after and confirms the base is untouched.
//!
//! cargo run --release --example calibrate_facts -- [pretrain steps] [slots]

mod shared;

use calilab::assess::{assess_model, CkaConfig};
use calilab::calinet::{attach, detach, AdapterConfig};
use calilab::trainer::{calibrate, evaluate_perplexity, TrainConfig};
use calilab::worldgen::{build_calibration_sets, build_eval_sets, build_probe_sets, Fact};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let slots = args.next().map(|s| s.parse()).transpose()?.unwrap_or(32);
    let world = shared::small_world()?;
    let base = shared::quick_base(&world, steps)?;

    let probes = build_probe_sets(&world.definition, &world.gold, 3)?;
    let (report, _) = assess_model(&base, &world.vocab, &probes, &CkaConfig::default())?;
    let targets = report.false_facts();
    println!("{} facts flagged as false", targets.len());
    let facts: Vec<Fact> = targets.iter().map(|&i| world.gold[i].clone()).collect();
    let background: Vec<Fact> = world
        .corrupted
        .iter()
        .filter(|f| !targets.contains(&f.id))
        .cloned()
        .collect();
    let calib = build_calibration_sets(&world.definition, &facts)?;
    let eval = build_eval_sets(&world.definition, &facts, &background, 0)?;

    let mut model = base.clone();
    let last = model.config.n_layers - 1;
    attach(&mut model, AdapterConfig::new(slots, last))?;
    let train = world.vocab.encode_all(&calib.train)?;
    let valid = world.vocab.encode_all(&calib.valid)?;
    let (_, outcome) = calibrate(&mut model, &train, &valid, &TrainConfig::calibrate_default())?;
    println!(
        "calibrated {} slots at layer {last}: valid loss {:.3} -> {:.3} (kept step {})",
        slots,
        outcome.initial_valid_loss.unwrap_or(f64::NAN),
        outcome.best_valid_loss.unwrap_or(f64::NAN),
        outcome.best_step
    );

    println!("\n{:<12} {:>12} {:>12} {:>10} {:>10}", "set", "vanilla ppl", "calinet ppl", "vanilla EM", "calinet EM");
    for (name, set) in [("original", &eval.original), ("adversarial", &eval.adversarial), ("lm", &eval.lm)] {
        let (before, _) = evaluate_perplexity(&base, &world.vocab, set, name)?;
        let (after, _) = evaluate_perplexity(&model, &world.vocab, set, name)?;
        println!(
            "{name:<12} {:>12.2} {:>12.2} {:>10.3} {:>10.3}",
            before.perplexity, after.perplexity, before.em, after.em
        );
    }

    let flagged = probes.iter().filter(|p| targets.contains(&p.fact_id)).cloned().collect::<Vec<_>>();
    let (after, _) = assess_model(&model, &world.vocab, &flagged, &CkaConfig::default())?;
    println!("\nfalse rate on calibrated facts: 100.0% -> {:.1}%", 100.0 * after.false_rate);

    detach(&mut model);
    let untouched = model.state.iter().all(|(name, p)| base.state.get(name).map(|b| b.tensor == p.tensor) == Some(true));
    println!("base tensors unchanged: {untouched}");
    Ok(())
}
