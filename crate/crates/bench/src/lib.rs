//! Fixtures shared by the criterion benches: a synthetic corpus and a
//! default-sized model, both fully seeded.

use compat_reason_core::compatnet::{init_model, CompatModel, ModelConfig};
use compat_reason_core::record::OutfitRecord;
use compat_reason_core::synthdata::{generate_dataset, GenConfig};

pub fn corpus(n: usize) -> Vec<OutfitRecord> {
    let config = GenConfig { train: n, val: 0, test: 0, echo_ratio: 0.5, ..GenConfig::default() };
    generate_dataset(&config, 11).expect("default ratios are valid").train
}

pub fn model() -> CompatModel {
    init_model(&ModelConfig::default(), 11).expect("default config is valid")
}
