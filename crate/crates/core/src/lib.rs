//! Trajectory-consistent score distillation on low-dimensional toy problems.

// negated float comparisons are how inputs reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod denoiser;
pub mod distill;
pub mod error;
pub mod lab;
pub mod metrics;
pub mod optim;
pub mod schedule;
pub mod toy;
pub mod trajectory;

pub use denoiser::{guided_noise, CountingDenoiser, Denoiser, EmbeddingDenoiser};
pub use distill::{
    run_distillation, DBCSchedule, DistillConfig, DistillParams, GradientReport, Method, RunHistory,
};
pub use error::{Error, Result};
pub use metrics::{Evaluator, MetricConfig, MetricReport};
pub use optim::{Adam, Optimizer, OptimizerConfig, OptimizerKind};
pub use schedule::{
    cfg_combine, ddim_delta, ddim_step, q_sample, Condition, DeltaFn, GuidanceConfig, Latent,
    NoiseSchedule, ScheduleSpec,
};
pub use trajectory::{
    build_timestep_trajectory, denoise_cfg, invert_ddim, invert_with_embedding_optimization,
    sample_trajectory, EmbeddingInversion, TimestepTrajectory, TrajectoryPair, TrajectoryRecord,
};
