//! Distillation gradients (SDS, ISM, trajectory alignment), their
//! weighting, the alignment identities behind them, and the outer loop.

mod dbc;
mod gradient;
mod identity;
mod run;

pub use dbc::{uniform_weights, DBCSchedule};
pub use gradient::{
    ge3d_gradient, ge3d_iteration, ism_gradient, sds_gradient, DistillParams, GradientReport,
    ResidualScaling, Weighting,
};
pub use identity::{
    rescaled_form_gap, verify_ism_identity, verify_ism_identity_with, verify_sds_identity,
    IdentityReport,
};
pub use run::{run_distillation, DistillConfig, HistoryRecord, Method, RunHistory};
