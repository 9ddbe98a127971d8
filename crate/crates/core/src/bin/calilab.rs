use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use calilab::pipeline::{self, FactsSource, RunConfig, SweepAxis, SweepSpec};

/// Detect and calibrate false knowledge in a small masked language model.
///
/// Settings come from the JSON config, then `CALILAB_SEED`, `CALILAB_OUT` and
/// `CALILAB_PRECISION`, then the flags below.
#[derive(Parser)]
#[command(version)]
struct Cli {
    /// JSON run config; defaults apply for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// 32 or 64.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    Worldgen,
    Pretrain,
    Assess,
    Calibrate,
    ContinuePretrain,
    Eval,
    Sweep {
        /// fact_count, slot_count or attach_layer.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        /// Calibrate corrupted facts by label instead of detected ones.
        #[arg(long)]
        corrupted: bool,
        #[arg(long)]
        parallel: bool,
    },
    Interpret {
        /// Sentence with one [MASK].
        sentence: String,
        #[arg(long, default_value_t = calilab::interpret::DEFAULT_TOP_K)]
        top_k: usize,
    },
    Pipeline,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    if let Some(p) = &cli.precision {
        cfg.model.precision = pipeline::parse_precision(p)?;
    }
    let show = |m: pipeline::Manifest| {
        println!("{} {}", m.stage, m.run_hash);
        println!("{}", serde_json::to_string_pretty(&m.metrics).unwrap_or_default());
    };
    match cli.command {
        Command::Worldgen => show(pipeline::cmd_worldgen(&cfg)?),
        Command::Pretrain => show(pipeline::cmd_pretrain(&cfg)?),
        Command::Assess => show(pipeline::cmd_assess(&cfg)?),
        Command::Calibrate => show(pipeline::cmd_calibrate(&cfg)?),
        Command::ContinuePretrain => show(pipeline::cmd_continue_pretrain(&cfg)?),
        Command::Eval => print!("{}", pipeline::cmd_eval(&cfg)?.1.to_text()),
        Command::Sweep {
            axis,
            values,
            corrupted,
            parallel,
        } => {
            let spec = SweepSpec {
                axis,
                values,
                facts_source: if corrupted { FactsSource::Corrupted } else { FactsSource::Detected },
                parallel,
            };
            let (_, rows) = pipeline::cmd_sweep(&cfg, &spec)?;
            for r in rows {
                println!(
                    "{}={:<5} facts {:<4} slots {:<4} layer {} EM {:.3} F1 {:.3} false rate {:.3}",
                    axis.as_str(),
                    r.value,
                    r.facts,
                    r.slots,
                    r.layer,
                    r.em,
                    r.f1,
                    r.false_rate
                );
            }
        }
        Command::Interpret { sentence, top_k } => print!("{}", pipeline::cmd_interpret(&cfg, &sentence, top_k)?),
        Command::Pipeline => print!("{}", pipeline::cmd_pipeline(&cfg)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<calilab::Error>().map_or(1, pipeline::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
