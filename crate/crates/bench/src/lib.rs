//! Shared fixtures for the benchmarks.

use csmn_core::data::{generate, schema_for, GenConfig, PerScenario};
use csmn_core::harness::Dataset;
use csmn_core::model::ModelConfig;

/// A few thousand encoded impressions with desk-like shapes.
pub fn small_dataset(embedding_dim: usize) -> Dataset {
    let cfg = GenConfig {
        users: 2_000,
        items: 500,
        days: 3,
        impressions_per_day: 400,
        cold_start_ratio: PerScenario::Uniform(0.3),
        ..GenConfig::default()
    };
    let g = generate(&cfg).expect("valid generator config");
    Dataset::from_records(schema_for(&cfg, embedding_dim).expect("schema"), &g.train, &g.test).expect("encodes")
}

pub fn desk_model() -> ModelConfig {
    ModelConfig {
        batch_size: 256,
        dropout: 0.1,
        ..ModelConfig::desk()
    }
}
