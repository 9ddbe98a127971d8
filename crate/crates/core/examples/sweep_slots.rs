//! Runs the staged pipeline on a small configuration, then sweeps the number
//! of calibration slots and writes the CSV and SVG chart.
//!
//! cargo run --release --example sweep_slots -- [output dir]

use std::path::PathBuf;

use calilab::model::ModelConfig;
use calilab::pipeline::{cmd_assess, cmd_pretrain, cmd_sweep, cmd_worldgen, FactsSource, RunConfig, SweepAxis, SweepSpec};
use calilab::trainer::TrainConfig;
use calilab::worldgen::WorldSpec;

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("calilab-sweep"));
    let mut config = RunConfig {
        out_dir: out.clone(),
        world: WorldSpec {
            entities_per_type: 40,
            relations: 5,
            facts: 200,
            ..WorldSpec::default()
        },
        model: ModelConfig {
            d: 48,
            d_m: 192,
            n_layers: 2,
            ..ModelConfig::default()
        },
        pretrain: TrainConfig {
            steps: 3000,
            ..TrainConfig::pretrain_default()
        },
        max_facts: 40,
        ..RunConfig::default()
    };
    config.adapter.attach_layer = 1;
    config.calibrate.steps = 2000;

    for manifest in [cmd_worldgen(&config)?, cmd_pretrain(&config)?, cmd_assess(&config)?] {
        println!("{:<9} {}", manifest.stage, &manifest.run_hash[..16]);
    }
    let spec = SweepSpec {
        axis: SweepAxis::SlotCount,
        values: vec![2, 8, 32],
        facts_source: FactsSource::Detected,
        parallel: false,
    };
    let (_, rows) = cmd_sweep(&config, &spec)?;
    println!("\n{:>6} {:>6} {:>7} {:>7} {:>11}", "slots", "facts", "EM", "F1", "false rate");
    for r in &rows {
        println!("{:>6} {:>6} {:>7.3} {:>7.3} {:>11.3}", r.slots, r.facts, r.em, r.f1, r.false_rate);
    }
    println!("\nchart: {}", out.join("sweep/slot_count/sweep.svg").display());
    Ok(())
}
