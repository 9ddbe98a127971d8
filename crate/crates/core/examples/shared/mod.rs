//! A small world and a quickly pretrained base model shared by the examples.

use calilab::model::{Model, ModelConfig};
use calilab::trainer::{pretrain, TrainConfig};
use calilab::worldgen::{build_pretrain_corpus, generate_world, World, WorldDefinition, WorldSpec};

pub fn small_world() -> anyhow::Result<World> {
    let spec = WorldSpec {
        entities_per_type: 40,
        relations: 5,
        facts: 200,
        ..WorldSpec::default()
    };
    Ok(generate_world(&WorldDefinition::builtin(), &spec)?)
}

/// Pretrains a 2-layer model on the corrupted corpus of `world`.
pub fn quick_base(world: &World, steps: usize) -> anyhow::Result<Model<f32>> {
    let corpus = build_pretrain_corpus(&world.definition, &world.corrupted, 8, 0)?;
    let encoded = world.vocab.encode_all(&corpus)?;
    let mut model = Model::new(ModelConfig {
        d: 48,
        d_m: 192,
        n_layers: 2,
        n_heads: 4,
        vocab_size: world.vocab.len(),
        ..ModelConfig::default()
    })?;
    let config = TrainConfig {
        steps,
        warmup_steps: 100,
        eval_every: steps.max(1),
        ..TrainConfig::default()
    };
    let outcome = pretrain(&mut model, &encoded, &config)?;
    if let Some((_, loss)) = outcome.losses("train").last() {
        println!("pretrained {steps} steps, final train loss {loss:.3}");
    }
    Ok(model)
}
