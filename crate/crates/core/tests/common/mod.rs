#![allow(dead_code)]

pub mod fd;

use calilab::model::{EncodedExample, Model, ModelConfig};
use calilab::numerics::Precision;

/// Tiny f64 model for finite-difference checks.
pub fn two_layer() -> Model<f64> {
    Model::new(ModelConfig {
        d: 8,
        d_m: 16,
        n_layers: 2,
        n_heads: 2,
        vocab_size: 15,
        max_seq_len: 6,
        precision: Precision::F64,
        seed: 3,
    })
    .unwrap()
}

pub fn examples() -> Vec<EncodedExample> {
    vec![
        EncodedExample { tokens: vec![1, 0, 4, 5], mask_pos: 1, target: 7 },
        EncodedExample { tokens: vec![0, 9, 2], mask_pos: 0, target: 3 },
        EncodedExample { tokens: vec![6, 8, 0, 11, 12], mask_pos: 2, target: 14 },
    ]
}
