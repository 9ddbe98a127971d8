//! The desk-scale experiment end to end: world generation, pretraining,
//! assessment, calibration, the continued-pretraining baseline and the
//! comparison table. Takes several minutes with the default configuration.
//!
//! cargo run --release --example full_pipeline -- [config.json]

use calilab::pipeline::{
    cmd_assess, cmd_calibrate, cmd_continue_pretrain, cmd_eval, cmd_pretrain, cmd_worldgen, RunConfig,
};

fn main() -> anyhow::Result<()> {
    let mut config = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    config.apply_env(std::env::vars())?;
    println!("writing to {}", config.out_dir.display());

    let stages = [cmd_worldgen, cmd_pretrain, cmd_assess, cmd_calibrate, cmd_continue_pretrain];
    for stage in stages {
        let manifest = stage(&config)?;
        println!("{:<17} {}  {}", manifest.stage, &manifest.run_hash[..12], manifest.metrics);
    }
    let (_, table) = cmd_eval(&config)?;
    println!("\n{}", table.to_text());
    Ok(())
}
