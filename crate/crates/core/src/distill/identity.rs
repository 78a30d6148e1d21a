use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_noise, Denoiser};
use crate::error::{param, Result};
use crate::schedule::{
    ddim_delta, ddim_step, q_sample, rescaled_move, Condition, DeltaFn, GuidanceConfig,
    NoiseSchedule,
};

use super::gradient::ism_parts;

/// Both sides of an algebraic identity and their largest componentwise gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub max_residual: f64,
}

impl IdentityReport {
    fn new(lhs: Vec<f64>, rhs: Vec<f64>) -> Self {
        let max_residual = lhs
            .iter()
            .zip(&rhs)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Self {
            lhs,
            rhs,
            max_residual,
        }
    }
}

/// Single-step alignment form of SDS:
/// `sqrt(ab_t / (1 - ab_t)) (x0 - x~0) = eps~(x_t, t) - eps`, where `x~0` is
/// the one-step guided denoise of `x_t = q_sample(x0, t, eps)`.
pub fn verify_sds_identity<D: Denoiser + ?Sized>(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<IdentityReport> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let guided = guided_noise(den, &x_t.value, t, cond, g)?;
    let x0_hat = ddim_step(&x_t, 0, &guided, sched)?;
    let a = sched.alpha_bar(t)?;
    let scale = (a / (1.0 - a)).sqrt();
    let lhs = x0
        .iter()
        .zip(&x0_hat.value)
        .map(|(x, y)| scale * (x - y))
        .collect();
    let rhs = guided.iter().zip(eps).map(|(a, b)| a - b).collect();
    Ok(IdentityReport::new(lhs, rhs))
}

/// Two-node alignment form of ISM:
/// `(x_s - x~_s) / (sqrt(ab_s) delta(s, t)) = eps~(x_t, t) - eps(x_s, s, null)`.
pub fn verify_ism_identity<D: Denoiser + ?Sized>(
    x0: &[f64],
    s: usize,
    t: usize,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<IdentityReport> {
    verify_ism_identity_with(x0, s, t, den, cond, g, sched, ddim_delta)
}

/// [`verify_ism_identity`] with a substitute transition coefficient.
#[allow(clippy::too_many_arguments)]
pub fn verify_ism_identity_with<D: Denoiser + ?Sized>(
    x0: &[f64],
    s: usize,
    t: usize,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
    delta_fn: DeltaFn,
) -> Result<IdentityReport> {
    let parts = ism_parts(x0, s, t, den, cond, g, sched, delta_fn)?;
    // denoising path starts at the shared anchor x~_t = x_t
    let x_s_tilde = rescaled_move(&parts.x_t, t, s, &parts.guided_t, parts.delta, sched)?;
    let denom = sched.alpha_bar(s)?.sqrt() * parts.delta;
    if denom == 0.0 {
        return Err(param("zero transition coefficient"));
    }
    let lhs = parts
        .x_s
        .iter()
        .zip(&x_s_tilde)
        .map(|(a, b)| (a - b) / denom)
        .collect();
    Ok(IdentityReport::new(lhs, parts.residual()))
}

/// Largest relative gap between the rescaled move built from `delta_fn` and
/// [`ddim_step`] for the same noise estimate, over both directions.
pub fn rescaled_form_gap(
    x: &[f64],
    lo: usize,
    hi: usize,
    eps: &[f64],
    sched: &NoiseSchedule,
    delta_fn: DeltaFn,
) -> Result<f64> {
    let delta = delta_fn(lo, hi, sched)?;
    let mut worst = 0.0f64;
    for (from, to) in [(lo, hi), (hi, lo)] {
        let fast = rescaled_move(x, from, to, eps, delta, sched)?;
        let slow = ddim_step(
            &crate::schedule::Latent::new(x.to_vec(), from)?,
            to,
            eps,
            sched,
        )?;
        for (a, b) in fast.iter().zip(&slow.value) {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    Ok(worst)
}
