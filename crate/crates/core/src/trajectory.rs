//! Paired noising/denoising trajectories: null-conditioned DDIM inversion up
//! a node list, guided DDIM denoising back down from the shared anchor, and
//! optimized-embedding inversion that aligns the two node by node.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{guided_noise, Denoiser, EmbeddingDenoiser};
use crate::error::{ensure_finite, param, Error, Result};
use crate::schedule::{
    ddim_delta, rescaled_move, Condition, GuidanceConfig, Latent, NoiseSchedule,
};

/// Strictly increasing timestep nodes `0 = t_0 < t_1 < ... < t_n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepTrajectory {
    nodes: Vec<usize>,
}

impl TimestepTrajectory {
    pub fn new(nodes: Vec<usize>) -> Result<Self> {
        if nodes.len() < 2 {
            return Err(param("trajectory needs at least two nodes"));
        }
        if nodes[0] != 0 {
            return Err(param("trajectory must start at t = 0"));
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(param("trajectory nodes must be strictly increasing"));
        }
        Ok(Self { nodes })
    }

    /// Equally spaced nodes `0, gap, 2 gap, ..., n gap`.
    pub fn uniform(n: usize, gap: usize) -> Result<Self> {
        if gap == 0 {
            return Err(param("gap must be positive"));
        }
        Self::new((0..=n).map(|i| i * gap).collect())
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    /// Number of steps `n`.
    pub fn steps(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Farthest timestep `t_n`.
    pub fn farthest(&self) -> usize {
        *self.nodes.last().expect("nonempty")
    }

    fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        if self.farthest() > sched.steps() {
            return Err(param(format!(
                "trajectory reaches t = {} beyond schedule length {}",
                self.farthest(),
                sched.steps()
            )));
        }
        Ok(())
    }
}

fn check_gaps(n: usize, gap_min: usize, gap_max: usize, t_max: usize) -> Result<()> {
    if n == 0 {
        return Err(param("trajectory needs n >= 1"));
    }
    if gap_min == 0 || gap_min > gap_max {
        return Err(param(format!(
            "gap range [{gap_min}, {gap_max}] is empty or starts at 0"
        )));
    }
    if n * gap_max > t_max {
        return Err(param(format!(
            "n * gap_max = {} exceeds the schedule length {t_max}",
            n * gap_max
        )));
    }
    Ok(())
}

/// Draws node spacings uniformly from `[gap_min, gap_max]` using `rng`.
pub fn sample_trajectory<R: Rng>(
    n: usize,
    gap_min: usize,
    gap_max: usize,
    t_max: usize,
    rng: &mut R,
) -> Result<TimestepTrajectory> {
    check_gaps(n, gap_min, gap_max, t_max)?;
    let mut nodes = Vec::with_capacity(n + 1);
    nodes.push(0);
    let mut t = 0;
    for _ in 0..n {
        t += rng.random_range(gap_min..=gap_max);
        nodes.push(t);
    }
    TimestepTrajectory::new(nodes)
}

/// Seeded variant of [`sample_trajectory`].
pub fn build_timestep_trajectory(
    n: usize,
    gap_min: usize,
    gap_max: usize,
    t_max: usize,
    seed: u64,
) -> Result<TimestepTrajectory> {
    sample_trajectory(
        n,
        gap_min,
        gap_max,
        t_max,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
}

/// Null-conditioned DDIM inversion of a clean sample along the trajectory.
/// Returns `[x_{t_0}, ..., x_{t_n}]`; evaluates the denoiser exactly `n` times.
pub fn invert_ddim<D: Denoiser + ?Sized>(
    x0: &Latent,
    traj: &TimestepTrajectory,
    den: &D,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    if x0.timestep != 0 {
        return Err(param("inversion starts from a clean latent at t = 0"));
    }
    traj.check_schedule(sched)?;
    let nodes = traj.nodes();
    let mut out = Vec::with_capacity(nodes.len());
    out.push(x0.clone());
    for w in nodes.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let prev = out.last().expect("seeded");
        let eps = den.predict_noise(&prev.value, lo, Condition::Null)?;
        ensure_finite(&eps, "inversion noise estimate")?;
        let delta = ddim_delta(lo, hi, sched)?;
        let next = rescaled_move(&prev.value, lo, hi, &eps, delta, sched)?;
        out.push(Latent {
            value: next,
            timestep: hi,
        });
    }
    Ok(out)
}

/// Guided DDIM denoising from the anchor `x_{t_n}` back to `t_0`. Returns
/// `[x~_{t_0}, ..., x~_{t_n}]` with the anchor as the last entry; makes
/// `2 n` denoiser calls.
pub fn denoise_cfg<D: Denoiser + ?Sized>(
    x_tn: &Latent,
    traj: &TimestepTrajectory,
    den: &D,
    cond: Condition,
    g: GuidanceConfig,
    sched: &NoiseSchedule,
) -> Result<Vec<Latent>> {
    traj.check_schedule(sched)?;
    if x_tn.timestep != traj.farthest() {
        return Err(param(format!(
            "anchor is tagged t = {} but the trajectory ends at {}",
            x_tn.timestep,
            traj.farthest()
        )));
    }
    let nodes = traj.nodes();
    let mut rev = Vec::with_capacity(nodes.len());
    rev.push(x_tn.clone());
    for w in nodes.windows(2).rev() {
        let (lo, hi) = (w[0], w[1]);
        let cur = rev.last().expect("seeded");
        let eps = guided_noise(den, &cur.value, hi, cond, g)?;
        let delta = ddim_delta(lo, hi, sched)?;
        let next = rescaled_move(&cur.value, hi, lo, &eps, delta, sched)?;
        rev.push(Latent {
            value: next,
            timestep: lo,
        });
    }
    rev.reverse();
    Ok(rev)
}

/// Noising and denoising latents at matching nodes, sharing the anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPair {
    pub nodes: Vec<usize>,
    pub noising: Vec<Latent>,
    pub denoising: Vec<Latent>,
}

impl TrajectoryPair {
    pub fn build<D: Denoiser + ?Sized>(
        x0: &Latent,
        traj: &TimestepTrajectory,
        den: &D,
        cond: Condition,
        g: GuidanceConfig,
        sched: &NoiseSchedule,
    ) -> Result<Self> {
        let noising = invert_ddim(x0, traj, den, sched)?;
        let anchor = noising.last().expect("n >= 1").clone();
        let denoising = denoise_cfg(&anchor, traj, den, cond, g, sched)?;
        Ok(Self {
            nodes: traj.nodes().to_vec(),
            noising,
            denoising,
        })
    }

    /// `x_{t_i} - x~_{t_i}` for `i = 0..n-1`.
    pub fn residuals(&self) -> Vec<Vec<f64>> {
        let n = self.nodes.len() - 1;
        (0..n)
            .map(|i| {
                self.noising[i]
                    .value
                    .iter()
                    .zip(&self.denoising[i].value)
                    .map(|(a, b)| a - b)
                    .collect()
            })
            .collect()
    }

    /// Largest Euclidean misalignment over all nodes.
    pub fn max_misalignment(&self) -> f64 {
        self.residuals().iter().map(|r| norm(r)).fold(0.0, f64::max)
    }

    pub fn records(&self) -> Vec<TrajectoryRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, &t)| TrajectoryRecord {
                i,
                t,
                x: self.noising[i].value.clone(),
                x_tilde: self.denoising[i].value.clone(),
            })
            .collect()
    }

    /// Writes one JSON record per node.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in self.records() {
            serde_json::to_writer(&mut out, &r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One node of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub i: usize,
    pub t: usize,
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Result of [`invert_with_embedding_optimization`].
#[derive(Debug, Clone)]
pub struct EmbeddingInversion {
    /// Optimized embedding for each denoising step, indexed by the upper node
    /// `i = 1..=n` (entry `i - 1`).
    pub embeddings: Vec<Vec<f64>>,
    pub pair: TrajectoryPair,
    /// Per-step alignment loss before and after optimization, same indexing.
    pub initial_losses: Vec<f64>,
    pub final_losses: Vec<f64>,
}

impl EmbeddingInversion {
    /// True when every step reduced its loss to at most `ratio` of the start.
    pub fn converged(&self, ratio: f64) -> bool {
        self.initial_losses
            .iter()
            .zip(&self.final_losses)
            .all(|(a, b)| *b <= ratio * a || *b == 0.0)
    }
}

/// Aligns the denoising path to the null inversion path by optimizing one free
/// embedding per step with plain gradient descent (network frozen),
/// processing steps from `t_n` down to `t_1`. Each embedding starts at the
/// null embedding.
pub fn invert_with_embedding_optimization<D: EmbeddingDenoiser + ?Sized>(
    x0: &Latent,
    traj: &TimestepTrajectory,
    den: &D,
    inner_steps: usize,
    lr: f64,
    sched: &NoiseSchedule,
) -> Result<EmbeddingInversion> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(param("embedding learning rate must be finite and >= 0"));
    }
    let noising = invert_ddim(x0, traj, den, sched)?;
    let nodes = traj.nodes();
    let n = traj.steps();
    let null = den.embedding(Condition::Null)?;
    let mut denoising = vec![noising[n].clone(); n + 1];
    let mut embeddings = vec![Vec::new(); n];
    let mut initial_losses = vec![0.0; n];
    let mut final_losses = vec![0.0; n];

    for i in (1..=n).rev() {
        let (lo, hi) = (nodes[i - 1], nodes[i]);
        let delta = ddim_delta(lo, hi, sched)?;
        let scale = sched.alpha_bar(lo)?.sqrt() * delta;
        let cur = denoising[i].value.clone();
        let target = &noising[i - 1].value;
        let step = |emb: &[f64]| -> Result<(Vec<f64>, f64)> {
            let eps = den.predict_noise_embedded(&cur, hi, emb)?;
            let next = rescaled_move(&cur, hi, lo, &eps, delta, sched)?;
            let loss = target.iter().zip(&next).map(|(a, b)| (a - b).powi(2)).sum();
            Ok((next, loss))
        };
        let mut emb = null.clone();
        let (_, loss0) = step(&emb)?;
        initial_losses[i - 1] = loss0;
        for _ in 0..inner_steps {
            let (next, _) = step(&emb)?;
            // d loss / d eps = 2 (x - x~) sqrt(ab_lo) delta
            let upstream: Vec<f64> = target
                .iter()
                .zip(&next)
                .map(|(a, b)| 2.0 * (a - b) * scale)
                .collect();
            let (_, grad) = den.embedding_vjp(&cur, hi, &emb, &upstream)?;
            for (e, g) in emb.iter_mut().zip(&grad) {
                *e -= lr * g;
            }
            if emb.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("embedding diverged at node {i}")));
            }
        }
        let (next, loss) = step(&emb)?;
        final_losses[i - 1] = loss;
        denoising[i - 1] = Latent {
            value: next,
            timestep: lo,
        };
        embeddings[i - 1] = emb;
    }

    Ok(EmbeddingInversion {
        embeddings,
        pair: TrajectoryPair {
            nodes: nodes.to_vec(),
            noising,
            denoising,
        },
        initial_losses,
        final_losses,
    })
}
