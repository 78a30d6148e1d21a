use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{param, Error, Result};
use crate::metrics::{Evaluator, MetricReport};
use crate::optim::{OptimizerConfig, OptimizerKind};
use crate::schedule::{Condition, GuidanceConfig, NoiseSchedule};
use crate::trajectory::{norm, sample_trajectory, TimestepTrajectory};

use super::dbc::{uniform_weights, DBCSchedule};
use super::gradient::{ge3d_gradient, ism_gradient, sds_gradient, ResidualScaling};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sds,
    Ism,
    Ge3d,
    /// Trajectory alignment with uniform step weights.
    Ge3dNoDbc,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sds, Method::Ism, Method::Ge3d, Method::Ge3dNoDbc];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sds => "sds",
            Method::Ism => "ism",
            Method::Ge3d => "ge3d",
            Method::Ge3dNoDbc => "ge3d_no_dbc",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| param(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSettings {
    /// Guidance scale for trajectory alignment and ISM.
    pub lambda: f64,
    /// Guidance scale for SDS.
    pub sds_lambda: f64,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        Self {
            lambda: 7.5,
            sds_lambda: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySettings {
    pub steps: usize,
    pub gap_min: usize,
    pub gap_max: usize,
    /// Sample one trajectory per run instead of one per iteration.
    pub freeze: bool,
    /// DBC width as a fraction of the iteration count.
    pub sigma_fraction: f64,
    pub scaling: ResidualScaling,
}

impl Default for TrajectorySettings {
    fn default() -> Self {
        Self {
            steps: 6,
            gap_min: 60,
            gap_max: 80,
            freeze: false,
            sigma_fraction: 1.0 / 3.0,
            scaling: ResidualScaling::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SingleStepSettings {
    /// Timesteps are drawn uniformly from `[t_min, t_max]`.
    pub t_min: usize,
    pub t_max: usize,
    /// ISM uses `s = max(t - interval, 0)`.
    pub ism_interval: usize,
    /// Constant SDS weight `f_t`.
    pub sds_weight: f64,
}

impl Default for SingleStepSettings {
    fn default() -> Self {
        Self {
            t_min: 200,
            t_max: 980,
            ism_interval: 50,
            sds_weight: 1.0,
        }
    }
}

/// Everything that determines a distillation run besides the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub method: Method,
    /// Outer iterations; replaced by `call_budget / calls-per-iteration`
    /// when a budget is set.
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub call_budget: Option<u64>,
    pub particles: usize,
    /// Particles start i.i.d. `N(0, init_std^2 I)`.
    pub init_std: f64,
    pub seed: u64,
    pub target_class: usize,
    /// Iterations between metric snapshots; 0 keeps only the final one.
    pub snapshot_every: usize,
    pub guidance: GuidanceSettings,
    pub trajectory: TrajectorySettings,
    pub single_step: SingleStepSettings,
    pub optimizer: OptimizerConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            method: Method::Ge3d,
            iterations: 2000,
            call_budget: None,
            particles: 32,
            init_std: 0.5,
            seed: 0,
            target_class: 0,
            snapshot_every: 100,
            guidance: GuidanceSettings::default(),
            trajectory: TrajectorySettings::default(),
            single_step: SingleStepSettings::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-2,
                final_lr_ratio: 0.1,
            },
        }
    }
}

impl DistillConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.particles == 0 {
            return Err(param("need at least one particle"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(param("init_std must be finite and >= 0"));
        }
        GuidanceConfig::new(self.guidance.lambda)?;
        GuidanceConfig::new(self.guidance.sds_lambda)?;
        self.optimizer.validate()?;
        let s = &self.single_step;
        if s.t_min == 0 || s.t_min > s.t_max || s.t_max > sched.steps() {
            return Err(param(format!(
                "single-step range [{}, {}] must lie in [1, {}]",
                s.t_min,
                s.t_max,
                sched.steps()
            )));
        }
        if !s.sds_weight.is_finite() {
            return Err(param("sds_weight must be finite"));
        }
        let tr = &self.trajectory;
        if matches!(self.method, Method::Ge3d | Method::Ge3dNoDbc) {
            if tr.steps == 0 || tr.gap_min == 0 || tr.gap_min > tr.gap_max {
                return Err(param(
                    "trajectory needs steps >= 1 and 1 <= gap_min <= gap_max",
                ));
            }
            if tr.steps * tr.gap_max > sched.steps() {
                return Err(param(format!(
                    "steps * gap_max = {} exceeds the schedule length {}",
                    tr.steps * tr.gap_max,
                    sched.steps()
                )));
            }
            if !(tr.sigma_fraction > 0.0 && tr.sigma_fraction.is_finite()) {
                return Err(param("sigma_fraction must be positive"));
            }
        }
        Ok(())
    }

    /// Largest number of denoiser calls one iteration can make.
    pub fn calls_per_iteration(&self) -> u64 {
        match self.method {
            Method::Sds => 2,
            Method::Ism if self.single_step.t_max <= self.single_step.ism_interval => 3,
            Method::Ism => 4,
            Method::Ge3d | Method::Ge3dNoDbc => 3 * self.trajectory.steps as u64,
        }
    }

    pub fn planned_iterations(&self) -> usize {
        match self.call_budget {
            Some(b) => (b / self.calls_per_iteration()) as usize,
            None => self.iterations,
        }
    }
}

/// One outer iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub k: usize,
    pub particle: usize,
    /// Cumulative denoiser calls after this iteration.
    pub calls: u64,
    pub grad_norm: f64,
    /// Per-step residual norms, finest first; single-step methods report one.
    pub residual_norms: Vec<f64>,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: Method,
    pub planned_iterations: usize,
    pub records: Vec<HistoryRecord>,
    /// Metrics of the initial particles.
    pub initial_metrics: Option<MetricReport>,
    pub initial_particles: Vec<Vec<f64>>,
    pub final_particles: Vec<Vec<f64>>,
    pub total_calls: u64,
    /// Set when the run stopped on a numeric failure.
    pub failure: Option<String>,
}

impl RunHistory {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    /// Latest recorded metrics, falling back to the initial ones.
    pub fn final_metrics(&self) -> Option<&MetricReport> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.metrics.as_ref())
            .or(self.initial_metrics.as_ref())
    }

    /// Writes one JSON record per iteration.
    pub fn write_jsonl<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Gradient, residual norms, weights and denoiser calls of one iteration.
type StepOutcome = (Vec<f64>, Vec<f64>, Vec<f64>, u64);

/// Runs the outer optimization loop. Numeric failures end the run early and
/// are reported in [`RunHistory::failure`]; configuration errors are returned.
pub fn run_distillation<D: Denoiser + ?Sized>(
    cfg: &DistillConfig,
    den: &D,
    sched: &NoiseSchedule,
    evaluator: Option<&Evaluator>,
) -> Result<RunHistory> {
    cfg.validate(sched)?;
    let dim = den.dim();
    let total = cfg.planned_iterations();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut particles: Vec<Vec<f64>> = (0..cfg.particles)
        .map(|_| {
            (0..dim)
                .map(|_| cfg.init_std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let initial_particles = particles.clone();
    let initial_metrics = evaluator.map(|e| e.report(&particles)).transpose()?;

    let cond = Condition::Class(cfg.target_class);
    let tr = &cfg.trajectory;
    let weighting = match cfg.method {
        Method::Ge3d if total > 0 => Some(DBCSchedule::new(
            total,
            tr.steps,
            tr.sigma_fraction * total as f64,
        )?),
        _ => None,
    };
    let frozen = match cfg.method {
        Method::Ge3d | Method::Ge3dNoDbc if tr.freeze => Some(sample_trajectory(
            tr.steps,
            tr.gap_min,
            tr.gap_max,
            sched.steps(),
            &mut rng,
        )?),
        _ => None,
    };

    let mut opt = cfg.optimizer.build(cfg.particles * dim);
    let mut flat_grad = vec![0.0; cfg.particles * dim];
    let mut flat: Vec<f64> = particles.concat();
    let mut records = Vec::with_capacity(total);
    let mut calls = 0u64;
    let mut failure = None;
    let ss = &cfg.single_step;

    for k in 0..total {
        if let Some(b) = cfg.call_budget {
            if calls + cfg.calls_per_iteration() > b {
                break;
            }
        }
        let j = rng.random_range(0..cfg.particles);
        let x0 = &particles[j];
        let step: Result<StepOutcome> = match cfg.method {
            Method::Sds => {
                let t = rng.random_range(ss.t_min..=ss.t_max);
                let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                let g = GuidanceConfig::new(cfg.guidance.sds_lambda)?;
                sds_gradient(x0, t, den, cond, g, &eps, sched, ss.sds_weight).map(|gr| {
                    let n = norm(&gr);
                    (gr, vec![n], vec![1.0], 2)
                })
            }
            Method::Ism => {
                let t = rng.random_range(ss.t_min..=ss.t_max);
                let s = t.saturating_sub(ss.ism_interval);
                let g = GuidanceConfig::new(cfg.guidance.lambda)?;
                ism_gradient(x0, s, t, den, cond, g, sched).map(|gr| {
                    let n = norm(&gr);
                    (gr, vec![n], vec![1.0], if s == 0 { 3 } else { 4 })
                })
            }
            Method::Ge3d | Method::Ge3dNoDbc => {
                let traj: TimestepTrajectory = match &frozen {
                    Some(t) => t.clone(),
                    None => sample_trajectory(
                        tr.steps,
                        tr.gap_min,
                        tr.gap_max,
                        sched.steps(),
                        &mut rng,
                    )?,
                };
                let w = match &weighting {
                    Some(d) => d.weights(k)?,
                    None => uniform_weights(tr.steps),
                };
                let g = GuidanceConfig::new(cfg.guidance.lambda)?;
                ge3d_gradient(x0, &traj, den, cond, g, &w, tr.scaling, sched).map(|rep| {
                    let norms = rep.residual_norms();
                    (rep.total, norms, rep.weights, rep.calls)
                })
            }
        };
        let (grad, residual_norms, weights, used) = match step {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                failure = Some(format!("iteration {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        calls += used;
        flat_grad.iter_mut().for_each(|v| *v = 0.0);
        flat_grad[j * dim..(j + 1) * dim].copy_from_slice(&grad);
        opt.set_lr(cfg.optimizer.lr_at(k, total));
        opt.step(&mut flat, &flat_grad);
        if flat.iter().any(|v| !v.is_finite()) {
            failure = Some(format!("iteration {k}: particle update became non-finite"));
            break;
        }
        for (p, chunk) in particles.iter_mut().zip(flat.chunks(dim)) {
            p.copy_from_slice(chunk);
        }
        let snapshot =
            k + 1 == total || (cfg.snapshot_every > 0 && (k + 1) % cfg.snapshot_every == 0);
        let metrics = match evaluator {
            Some(e) if snapshot => Some(e.report(&particles)?),
            _ => None,
        };
        records.push(HistoryRecord {
            k,
            particle: j,
            calls,
            grad_norm: norm(&grad),
            residual_norms,
            weights,
            metrics,
        });
    }

    // a budget stop or failure still leaves a final snapshot
    if let (Some(e), Some(last)) = (evaluator, records.last_mut()) {
        if last.metrics.is_none() {
            last.metrics = Some(e.report(&particles)?);
        }
    }

    Ok(RunHistory {
        method: cfg.method,
        planned_iterations: total,
        records,
        initial_metrics,
        initial_particles,
        final_particles: particles,
        total_calls: calls,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::fixtures::{Constant, Wobbly};
    use crate::toy::{GaussianOracle, OracleDenoiser, ToyDataset};

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    fn small(method: Method) -> DistillConfig {
        DistillConfig {
            method,
            iterations: 40,
            particles: 4,
            snapshot_every: 10,
            ..DistillConfig::default()
        }
    }

    #[test]
    fn zero_iterations_leave_particles() {
        let s = sched();
        for m in Method::ALL {
            let cfg = DistillConfig {
                iterations: 0,
                ..small(m)
            };
            let h = run_distillation(&cfg, &Wobbly { dim: 2, phase: 0.0 }, &s, None).unwrap();
            assert!(h.records.is_empty());
            assert_eq!(h.initial_particles, h.final_particles);
        }
    }

    #[test]
    fn deterministic_and_counted() {
        let s = sched();
        let den = Wobbly { dim: 2, phase: 0.4 };
        for m in Method::ALL {
            let a = run_distillation(&small(m), &den, &s, None).unwrap();
            let b = run_distillation(&small(m), &den, &s, None).unwrap();
            assert_eq!(a, b);
            let per = small(m).calls_per_iteration();
            assert_eq!(a.total_calls, 40 * per, "{m}");
            assert_eq!(a.records.last().unwrap().calls, a.total_calls);
        }
    }

    #[test]
    fn budget_sets_iterations() {
        let s = sched();
        let den = Wobbly { dim: 2, phase: 0.4 };
        for m in Method::ALL {
            let cfg = DistillConfig {
                call_budget: Some(360),
                ..small(m)
            };
            let h = run_distillation(&cfg, &den, &s, None).unwrap();
            assert!(h.total_calls <= 360);
            let expect = match m {
                Method::Sds => 180,
                Method::Ism => 90,
                _ => 20,
            };
            assert_eq!(h.records.len(), expect, "{m}");
        }
    }

    #[test]
    fn numeric_failure_keeps_partial_history() {
        let s = sched();
        let cfg = DistillConfig {
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Sgd,
                lr: 1e300,
                final_lr_ratio: 1.0,
            },
            ..small(Method::Sds)
        };
        let h = run_distillation(&cfg, &Constant(vec![1e10, 1e10]), &s, None).unwrap();
        assert!(h.failed());
        assert!(h.records.len() < 40);
    }

    #[test]
    fn snapshots_follow_schedule() {
        let s = sched();
        let ds = ToyDataset::two_mode_benchmark();
        let o = GaussianOracle::from_dataset(&ds).unwrap();
        let den = OracleDenoiser::new(o, s.clone());
        let ev = Evaluator {
            target: crate::toy::sample_dataset(&ds, 0, 200, 1).unwrap(),
            modes: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            mean: vec![0.0, 0.0],
            config: crate::metrics::MetricConfig::default(),
        };
        let h = run_distillation(&small(Method::Ge3d), &den, &s, Some(&ev)).unwrap();
        let with: Vec<usize> = h
            .records
            .iter()
            .filter(|r| r.metrics.is_some())
            .map(|r| r.k)
            .collect();
        assert_eq!(with, vec![9, 19, 29, 39]);
        assert!(h.initial_metrics.is_some());
        assert_eq!(h.records[0].weights.len(), 6);
    }

    #[test]
    fn config_validation() {
        let s = sched();
        let den = Wobbly { dim: 2, phase: 0.0 };
        let mut cfg = small(Method::Ge3d);
        cfg.trajectory.steps = 20;
        cfg.trajectory.gap_max = 60;
        assert!(run_distillation(&cfg, &den, &s, None).is_err());
        let mut cfg = small(Method::Sds);
        cfg.single_step.t_min = 0;
        assert!(run_distillation(&cfg, &den, &s, None).is_err());
        assert!("ge3d_no_dbc".parse::<Method>().unwrap() == Method::Ge3dNoDbc);
        assert!("vsd".parse::<Method>().is_err());
    }
}
