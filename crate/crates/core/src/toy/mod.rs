//! Toy conditional denoisers: a synthetic 2-D class-conditional dataset, a
//! trainable MLP noise predictor, and the exact Gaussian oracle it is tested
//! against.

pub mod checkpoint;
pub mod dataset;
pub mod mlp;
pub mod oracle;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{sample_dataset, ClassMixture, ToyDataset};
pub use mlp::{DenoiserMlp, MlpConfig, NoiseBatch};
pub use oracle::{oracle_eps, GaussianOracle, OracleDenoiser};
pub use train::{
    held_out_batch, mlp_gradient_check, oracle_loss, train_denoiser, TrainConfig, TrainedDenoiser,
};
