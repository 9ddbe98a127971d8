//! Looks inside a calibrated model: the output distribution read off the
//! residual stream after every layer (with and without the adapter term) and
//! the tokens each calibration slot's value vector promotes.
//!
//! cargo run --release --example inspect_memory -- [pretrain steps]

mod shared;

use calilab::assess::{assess_model, CkaConfig};
use calilab::calinet::{attach, AdapterConfig};
use calilab::interpret::{slot_report, slot_table, trace_output_distribution};
use calilab::trainer::{calibrate, TrainConfig};
use calilab::worldgen::{build_calibration_sets, build_probe_sets, Fact};

fn main() -> anyhow::Result<()> {
    let steps = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(3000);
    let world = shared::small_world()?;
    let base = shared::quick_base(&world, steps)?;
    let probes = build_probe_sets(&world.definition, &world.gold, 3)?;
    let (report, _) = assess_model(&base, &world.vocab, &probes, &CkaConfig::default())?;
    let targets: Vec<usize> = report.false_facts().into_iter().take(10).collect();
    let facts: Vec<Fact> = targets.iter().map(|&i| world.gold[i].clone()).collect();
    let calib = build_calibration_sets(&world.definition, &facts)?;

    let mut model = base.clone();
    let last = model.config.n_layers - 1;
    attach(&mut model, AdapterConfig::new(8, last))?;
    let train = world.vocab.encode_all(&calib.train)?;
    let valid = world.vocab.encode_all(&calib.valid)?;
    let config = TrainConfig {
        steps: 1500,
        ..TrainConfig::calibrate_default()
    };
    calibrate(&mut model, &train, &valid, &config)?;

    let probe = probes.iter().find(|p| p.fact_id == targets[0]).expect("probe for every fact");
    println!("gold object: {}\n", probe.object);
    println!("vanilla\n{}", trace_output_distribution(&base, &world.vocab, &probe.positive, 5)?.to_table(5));
    println!("calibrated\n{}", trace_output_distribution(&model, &world.vocab, &probe.positive, 5)?.to_table(5));

    let slots = slot_report(&model, 10)?;
    println!("slot value vectors projected onto the vocabulary:\n{}", slot_table(&slots, &world.vocab, 5)?);
    Ok(())
}
