//! Noise schedules and the deterministic DDIM algebra shared by every
//! other module: forward noising, the two-point DDIM transition, the
//! rescaled transition coefficient, and classifier-free guidance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure_finite, param, Error, Result};

/// Discrete variance schedule with the `alpha_bar[0] = 1` convention, so that
/// timestep 0 denotes the clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over `t = 1..=steps`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(param("schedule needs at least one timestep"));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(param(format!(
                "beta range must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut beta = Vec::with_capacity(steps + 1);
        beta.push(0.0);
        for t in 1..=steps {
            let frac = if steps == 1 {
                0.0
            } else {
                (t - 1) as f64 / (steps - 1) as f64
            };
            beta.push(beta_start + frac * (beta_end - beta_start));
        }
        Self::from_betas(beta)
    }

    /// Builds the cumulative products from an explicit beta table whose
    /// first entry must be zero.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.len() < 2 || beta[0] != 0.0 {
            return Err(param(
                "beta table must start with beta[0] = 0 and cover t >= 1",
            ));
        }
        if beta[1..].iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(param("every beta[t], t >= 1, must lie in (0, 1)"));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        alpha_bar.push(acc);
        for &b in &beta[1..] {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        if alpha_bar.iter().any(|&a| a <= 0.0) {
            return Err(param("alpha_bar underflowed to zero"));
        }
        Ok(Self { beta, alpha_bar })
    }

    /// Number of noising timesteps `T`.
    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| param(format!("timestep {t} outside [0, {}]", self.steps())))
    }

    /// `sqrt((1 - alpha_bar) / alpha_bar)`, the noise-to-signal ratio along
    /// which DDIM transitions are linear.
    pub fn noise_to_signal(&self, t: usize) -> Result<f64> {
        let a = self.alpha_bar(t)?;
        Ok(((1.0 - a) / a).sqrt())
    }

    /// SHA-256 over the little-endian bit patterns of the beta table.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for b in &self.beta {
            h.update(b.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of a linear schedule, as stored in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

/// A point in data space tagged with its diffusion timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub value: Vec<f64>,
    pub timestep: usize,
}

impl Latent {
    pub fn new(value: Vec<f64>, timestep: usize) -> Result<Self> {
        ensure_finite(&value, "latent components")?;
        Ok(Self { value, timestep })
    }

    /// A clean sample at `t = 0`.
    pub fn clean(value: Vec<f64>) -> Result<Self> {
        Self::new(value, 0)
    }

    pub fn dim(&self) -> usize {
        self.value.len()
    }
}

/// Conditioning signal: the null (unconditional) condition or a class label.
///
/// The embedding vector each condition maps to belongs to the denoiser; see
/// [`crate::toy::DenoiserMlp::embedding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Null,
    Class(usize),
}

/// Classifier-free guidance coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub lambda: f64,
}

impl GuidanceConfig {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(param(format!(
                "guidance lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }
}

/// Forward noising `sqrt(ab_t) x0 + sqrt(1 - ab_t) eps`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Latent> {
    if t == 0 || t > sched.steps() {
        return Err(param(format!(
            "q_sample timestep {t} outside [1, {}]",
            sched.steps()
        )));
    }
    if eps.len() != x0.len() {
        return Err(param("noise and sample dimensions differ"));
    }
    let a = sched.alpha_bar(t)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    let value = x0.iter().zip(eps).map(|(x, e)| sa * x + sn * e).collect();
    Latent::new(value, t)
}

/// `eps_uncond + lambda (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], g: GuidanceConfig) -> Result<Vec<f64>> {
    if eps_uncond.len() != eps_cond.len() {
        return Err(param(format!(
            "guidance inputs differ in dimension: {} vs {}",
            eps_uncond.len(),
            eps_cond.len()
        )));
    }
    Ok(eps_uncond
        .iter()
        .zip(eps_cond)
        .map(|(u, c)| u + g.lambda * (c - u))
        .collect())
}

/// Deterministic DDIM transition from timestep `m` (the latent's tag) to `k`,
/// in either direction, given the noise estimate at `(x_m, m)`.
pub fn ddim_step(x_m: &Latent, k: usize, eps_hat: &[f64], sched: &NoiseSchedule) -> Result<Latent> {
    let m = x_m.timestep;
    if eps_hat.len() != x_m.dim() {
        return Err(param("noise estimate and latent dimensions differ"));
    }
    let a_m = sched.alpha_bar(m)?;
    let a_k = sched.alpha_bar(k)?;
    if a_m <= 0.0 {
        return Err(Error::Singularity(format!("alpha_bar[{m}] = 0")));
    }
    if k == m {
        return Ok(x_m.clone());
    }
    let (sm, nm) = (a_m.sqrt(), (1.0 - a_m).sqrt());
    let (sk, nk) = (a_k.sqrt(), (1.0 - a_k).sqrt());
    let value: Vec<f64> = x_m
        .value
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| sk * (x - nm * e) / sm + nk * e)
        .collect();
    ensure_finite(&value, "ddim_step output")?;
    Ok(Latent { value, timestep: k })
}

/// Transition coefficient between two nodes:
/// `sqrt((1 - ab_hi) / ab_hi) - sqrt((1 - ab_lo) / ab_lo)`.
pub fn ddim_delta(t_lo: usize, t_hi: usize, sched: &NoiseSchedule) -> Result<f64> {
    if t_lo >= t_hi {
        return Err(param(format!(
            "ddim_delta needs t_lo < t_hi, got {t_lo} >= {t_hi}"
        )));
    }
    Ok(sched.noise_to_signal(t_hi)? - sched.noise_to_signal(t_lo)?)
}

/// Signature of a transition-coefficient function; the verification suite
/// accepts a substitute so mutated coefficients can be checked for detection.
pub type DeltaFn = fn(usize, usize, &NoiseSchedule) -> Result<f64>;

/// One rescaled DDIM move between adjacent nodes `t_lo < t_hi`.
///
/// Upward (`to = t_hi`): `x_hi = sqrt(ab_hi) (x_lo / sqrt(ab_lo) + delta eps)`.
/// Downward (`to = t_lo`): `x_lo = sqrt(ab_lo) (x_hi / sqrt(ab_hi) - delta eps)`.
pub(crate) fn rescaled_move(
    x: &[f64],
    from: usize,
    to: usize,
    eps: &[f64],
    delta: f64,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let a_from = sched.alpha_bar(from)?;
    let a_to = sched.alpha_bar(to)?;
    let sign = if to > from { 1.0 } else { -1.0 };
    let (s_from, s_to) = (a_from.sqrt(), a_to.sqrt());
    let out: Vec<f64> = x
        .iter()
        .zip(eps)
        .map(|(xi, ei)| s_to * (xi / s_from + sign * delta * ei))
        .collect();
    ensure_finite(&out, "rescaled DDIM move")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn schedule_conventions() {
        let s = default_sched();
        assert_eq!(s.alpha_bar(0).unwrap(), 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        let one = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(one.alpha_bar(1).unwrap(), 0.5);
    }

    #[test]
    fn schedule_matches_term_by_term_product() {
        // Independent route: log-sum of the increments, exponentiated.
        let s = default_sched();
        let log_sum: f64 = (1..=1000)
            .map(|t| (1.0 - (1e-4 + (t - 1) as f64 / 999.0 * (0.02 - 1e-4))).ln())
            .sum();
        let oracle = log_sum.exp();
        let got = s.alpha_bar(1000).unwrap();
        assert!(((got - oracle) / oracle).abs() < 1e-12, "{got} vs {oracle}");
        // Frozen from the product computed outside the crate.
        assert!((got - 4.035_829_765_375_683e-5).abs() / got < 1e-9, "{got}");
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
    }

    #[test]
    fn q_sample_cases() {
        let s = default_sched();
        let out = q_sample(&[0.0, 0.0], 300, &[0.3, -1.2], &s).unwrap();
        let sn = (1.0 - s.alpha_bar(300).unwrap()).sqrt();
        assert!((out.value[0] - sn * 0.3).abs() < 1e-15);
        assert!((out.value[1] + sn * 1.2).abs() < 1e-15);
        assert_eq!(out.timestep, 300);

        let quarter = NoiseSchedule::from_betas(vec![0.0, 0.75]).unwrap();
        let out = q_sample(&[1.0, 1.0], 1, &[0.0, 0.0], &quarter).unwrap();
        assert_eq!(out.value, vec![0.5, 0.5]);

        assert!(q_sample(&[1.0], 0, &[0.0], &s).is_err());
        assert!(q_sample(&[1.0], 1001, &[0.0], &s).is_err());
    }

    #[test]
    fn cfg_cases() {
        let u = [0.1, -0.4];
        let c = [0.7, 0.2];
        assert_eq!(
            cfg_combine(&u, &c, GuidanceConfig { lambda: 0.0 }).unwrap(),
            u.to_vec()
        );
        let one = cfg_combine(&u, &c, GuidanceConfig { lambda: 1.0 }).unwrap();
        assert!(one.iter().zip(&c).all(|(a, b)| (a - b).abs() < 1e-15));
        let out = cfg_combine(&[0.0, 0.0], &[1.0, 2.0], GuidanceConfig { lambda: 7.5 }).unwrap();
        assert_eq!(out, vec![7.5, 15.0]);
        assert!(cfg_combine(&[0.0], &[1.0, 2.0], GuidanceConfig { lambda: 1.0 }).is_err());
        assert!(GuidanceConfig::new(-1.0).is_err());
    }

    #[test]
    fn ddim_step_cases() {
        let s = default_sched();
        let x = Latent::new(vec![0.4, -1.3], 250).unwrap();
        let e = [0.2, 0.9];
        assert_eq!(ddim_step(&x, 250, &e, &s).unwrap(), x);

        let clean = ddim_step(&x, 0, &e, &s).unwrap();
        let a = s.alpha_bar(250).unwrap();
        for i in 0..2 {
            let expect = (x.value[i] - (1.0 - a).sqrt() * e[i]) / a.sqrt();
            assert!((clean.value[i] - expect).abs() < 1e-14);
        }

        let up = ddim_step(&x, 700, &e, &s).unwrap();
        let back = ddim_step(&up, 250, &e, &s).unwrap();
        for i in 0..2 {
            assert!((back.value[i] - x.value[i]).abs() <= 1e-10 * x.value[i].abs());
        }
    }

    #[test]
    fn delta_cases() {
        let s = default_sched();
        let d = ddim_delta(0, 400, &s).unwrap();
        assert_eq!(d, s.noise_to_signal(400).unwrap());
        assert!(ddim_delta(5, 5, &s).is_err());
        assert!(ddim_delta(6, 5, &s).is_err());

        let pair = NoiseSchedule::from_betas(vec![0.0, 0.2, 0.375]).unwrap();
        // alpha_bar = [1, 0.8, 0.5]
        let d = ddim_delta(1, 2, &pair).unwrap();
        assert!((d - 0.5).abs() < 1e-15, "{d}");
    }

    #[test]
    fn rescaled_form_agrees_with_ddim_step() {
        let s = default_sched();
        let x = vec![0.8, -0.25];
        let e = vec![-0.6, 1.1];
        let d = ddim_delta(120, 480, &s).unwrap();
        let up = rescaled_move(&x, 120, 480, &e, d, &s).unwrap();
        let direct = ddim_step(&Latent::new(x.clone(), 120).unwrap(), 480, &e, &s).unwrap();
        for i in 0..2 {
            assert!((up[i] - direct.value[i]).abs() <= 1e-10 * direct.value[i].abs());
        }
        let down = rescaled_move(&x, 480, 120, &e, d, &s).unwrap();
        let direct = ddim_step(&Latent::new(x, 480).unwrap(), 120, &e, &s).unwrap();
        for i in 0..2 {
            assert!((down[i] - direct.value[i]).abs() <= 1e-10 * direct.value[i].abs());
        }
    }
}
