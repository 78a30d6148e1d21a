//! Shared fixtures for the benchmark targets.

use trajdistill::toy::{
    sample_dataset, DenoiserMlp, GaussianOracle, MlpConfig, OracleDenoiser, ToyDataset,
};
use trajdistill::NoiseSchedule;

pub fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(1000, 1e-4, 0.02).expect("stock schedule")
}

pub fn oracle() -> OracleDenoiser {
    let ds = ToyDataset::two_mode_benchmark();
    OracleDenoiser::new(
        GaussianOracle::from_dataset(&ds).expect("valid dataset"),
        schedule(),
    )
}

pub fn network() -> DenoiserMlp {
    DenoiserMlp::new(2, 2, 1000, MlpConfig::default(), 0).expect("valid network")
}

/// `count` draws from class `class` of the benchmark dataset.
pub fn samples(class: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_dataset(&ToyDataset::two_mode_benchmark(), class, count, seed).expect("valid class")
}
