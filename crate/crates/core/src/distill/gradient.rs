use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_noise, CountingDenoiser, Denoiser};
use crate::error::{ensure_finite, param, Error, Result};
use crate::schedule::Latent;
use crate::schedule::{
    ddim_delta, q_sample, rescaled_move, Condition, GuidanceConfig, NoiseSchedule,
};
use crate::trajectory::{norm, TimestepTrajectory, TrajectoryPair};

use super::dbc::{uniform_weights, DBCSchedule};

/// `f_t (eps~(x_t, t) - eps)` with `x_t = q_sample(x0, t, eps)`. Two calls.
#[allow(clippy::too_many_arguments)]
pub fn sds_gradient<D: Denoiser + ?Sized>(
    x0: &[f64],
    t: usize,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    eps: &[f64],
    sched: &NoiseSchedule,
    weight: f64,
) -> Result<Vec<f64>> {
    let x_t = q_sample(x0, t, eps, sched)?;
    let guided = guided_noise(den, &x_t.value, t, cond, g)?;
    let out: Vec<f64> = guided
        .iter()
        .zip(eps)
        .map(|(a, b)| weight * (a - b))
        .collect();
    ensure_finite(&out, "SDS gradient")?;
    Ok(out)
}

/// `eps~(x_t, t) - eps(x_s, s, null)`, where `x_s` is the one-step null
/// inversion of `x0` to `s` (`x0` itself when `s = 0`) and `x_t` one further
/// inversion step from `s`. Three calls when `s = 0`, four otherwise.
pub fn ism_gradient<D: Denoiser + ?Sized>(
    x0: &[f64],
    s: usize,
    t: usize,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    Ok(ism_parts(x0, s, t, den, cond, g, sched, ddim_delta)?.residual())
}

/// Latents and noise estimates along the two-node interval used by ISM.
pub(crate) struct IsmParts {
    pub x_s: Vec<f64>,
    pub x_t: Vec<f64>,
    pub eps_s: Vec<f64>,
    pub guided_t: Vec<f64>,
    pub delta: f64,
}

impl IsmParts {
    pub fn residual(&self) -> Vec<f64> {
        self.guided_t
            .iter()
            .zip(&self.eps_s)
            .map(|(a, b)| a - b)
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn ism_parts<D: Denoiser + ?Sized>(
    x0: &[f64],
    s: usize,
    t: usize,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
    delta_fn: crate::schedule::DeltaFn,
) -> Result<IsmParts> {
    if s >= t {
        return Err(param(format!("ISM needs s < t, got s = {s}, t = {t}")));
    }
    if t > sched.steps() {
        return Err(param(format!(
            "t = {t} beyond schedule length {}",
            sched.steps()
        )));
    }
    let x_s = if s == 0 {
        x0.to_vec()
    } else {
        let e0 = den.predict_noise(x0, 0, Condition::Null)?;
        rescaled_move(x0, 0, s, &e0, delta_fn(0, s, sched)?, sched)?
    };
    let eps_s = den.predict_noise(&x_s, s, Condition::Null)?;
    let delta = delta_fn(s, t, sched)?;
    let x_t = rescaled_move(&x_s, s, t, &eps_s, delta, sched)?;
    let guided_t = guided_noise(den, &x_t, t, cond, g)?;
    Ok(IsmParts {
        x_s,
        x_t,
        eps_s,
        guided_t,
        delta,
    })
}

/// How residuals are combined across trajectory steps.
#[derive(Debug, Clone, PartialEq)]
pub enum Weighting {
    Dbc(DBCSchedule),
    Uniform,
}

impl Weighting {
    pub fn weights(&self, k: usize, steps: usize) -> Result<Vec<f64>> {
        match self {
            Weighting::Dbc(d) => {
                if d.steps() != steps {
                    return Err(param(format!(
                        "DBC built for {} steps, trajectory has {steps}",
                        d.steps()
                    )));
                }
                d.weights(k)
            }
            Weighting::Uniform => Ok(uniform_weights(steps)),
        }
    }
}

/// Optional per-step rescaling of residuals before weighting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualScaling {
    /// Residuals in latent units, summed as they are.
    #[default]
    None,
    /// Residual `i` divided by `sqrt(ab_{t_i}) delta(t_i, t_{i+1})`, which
    /// expresses each step's misalignment as a noise-prediction difference.
    NoiseUnits,
}

/// Distillable particle set and the outer iteration it has reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillParams {
    pub particles: Vec<Vec<f64>>,
    pub iteration: usize,
}

impl DistillParams {
    pub fn new(particles: Vec<Vec<f64>>) -> Result<Self> {
        if particles.is_empty() {
            return Err(param("need at least one particle"));
        }
        let d = particles[0].len();
        if d == 0 || particles.iter().any(|p| p.len() != d) {
            return Err(param("particles must share one positive dimension"));
        }
        for p in &particles {
            ensure_finite(p, "particle")?;
        }
        Ok(Self {
            particles,
            iteration: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.particles[0].len()
    }
}

/// Residuals, weights, and the combined gradient from one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub nodes: Vec<usize>,
    /// `x_{t_i} - x~_{t_i}` for `i = 0..n-1`, after any scaling.
    pub residuals: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub total: Vec<f64>,
    pub calls: u64,
}

impl GradientReport {
    pub fn residual_norms(&self) -> Vec<f64> {
        self.residuals.iter().map(|r| norm(r)).collect()
    }
}

/// Weighted residual sum for one rendered sample `x0`. Exactly `3 n` calls.
#[allow(clippy::too_many_arguments)]
pub fn ge3d_gradient<D: Denoiser + ?Sized>(
    x0: &[f64],
    traj: &TimestepTrajectory,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    weights: &[f64],
    scaling: ResidualScaling,
    sched: &NoiseSchedule,
) -> Result<GradientReport> {
    let n = traj.steps();
    if weights.len() != n {
        return Err(param(format!("{} weights for {n} steps", weights.len())));
    }
    let counted = CountingDenoiser::new(den);
    let pair = TrajectoryPair::build(&Latent::clean(x0.to_vec())?, traj, &counted, cond, g, sched)?;
    let nodes = traj.nodes();
    let mut residuals = pair.residuals();
    if scaling == ResidualScaling::NoiseUnits {
        for (i, r) in residuals.iter_mut().enumerate() {
            let f = sched.alpha_bar(nodes[i])?.sqrt() * ddim_delta(nodes[i], nodes[i + 1], sched)?;
            r.iter_mut().for_each(|v| *v /= f);
        }
    }
    let mut total = vec![0.0; x0.len()];
    for (w, r) in weights.iter().zip(&residuals) {
        for (t, v) in total.iter_mut().zip(r) {
            *t += w * v;
        }
    }
    if total.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("trajectory residual".into()));
    }
    Ok(GradientReport {
        nodes: nodes.to_vec(),
        residuals,
        weights: weights.to_vec(),
        total,
        calls: counted.calls(),
    })
}

/// One outer iteration for particle `particle` at iteration `p.iteration`.
#[allow(clippy::too_many_arguments)]
pub fn ge3d_iteration<D: Denoiser + ?Sized>(
    p: &DistillParams,
    particle: usize,
    traj: &TimestepTrajectory,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    weighting: &Weighting,
    scaling: ResidualScaling,
    sched: &NoiseSchedule,
) -> Result<GradientReport> {
    let x0 = p
        .particles
        .get(particle)
        .ok_or_else(|| param(format!("particle {particle} out of range")))?;
    let w = weighting.weights(p.iteration, traj.steps())?;
    ge3d_gradient(x0, traj, den, cond, g, &w, scaling, sched)
}
