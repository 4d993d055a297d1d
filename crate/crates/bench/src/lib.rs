//! Shared fixtures for the benchmarks.

use sigfl::config::{parse_config, ExperimentConfig};
use sigfl::neural::{init_model, ArchSpec, Init, ModelParams};
use sigfl::rng::{stream, Domain};
use sigfl::sigsyn::{build_dataset, Channel, LabeledDataset, Modulation};

/// Desk-sized network: 32-sample windows, one hidden layer of 64 units.
pub fn desk_model() -> ModelParams {
    init_model(
        ArchSpec::mlp(32, vec![64], 8),
        Init::He,
        &mut stream(1, Domain::Init, 0),
    )
    .expect("valid arch")
}

pub fn desk_data(per_class: usize) -> LabeledDataset {
    build_dataset(
        &Modulation::ALL,
        per_class,
        &[8.0, 10.0],
        32,
        Channel::Rayleigh,
        &mut stream(1, Domain::Dataset, 0),
    )
    .expect("valid dataset settings")
}

/// Small PGD scenario for whole-round timings.
pub fn round_config() -> ExperimentConfig {
    parse_config(
        r#"{"dataset": {"per_class": 100, "length": 32}, "devices": 10, "rounds": 1, "t0": 0,
            "model": {"hidden": [64]}, "training": {"lr": 0.3, "batch_size": 8},
            "attack": {"kind": "pgd", "pnr_db": 8, "pgd_iters": 10}, "defense": {"kind": "usdfl"}}"#,
    )
    .expect("valid config")
}
