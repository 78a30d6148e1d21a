use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::optim::Adam;
use crate::schedule::{Condition, NoiseSchedule};
use crate::toy::dataset::ToyDataset;
use crate::toy::mlp::{rows_to_array, DenoiserMlp, MlpConfig, NoiseBatch};
use crate::toy::oracle::GaussianOracle;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability that a whole batch is trained with the null condition.
    pub cond_dropout: f64,
    pub seed: u64,
    /// Size of the fixed evaluation batch.
    pub held_out: usize,
    pub network: MlpConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 256,
            lr: 1e-3,
            cond_dropout: 0.1,
            seed: 0,
            held_out: 2048,
            network: MlpConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.held_out == 0 {
            return Err(param("batch and held-out sizes must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(param("learning rate must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(param("cond_dropout must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Draws a noised batch: uniform class, `t ~ U{1..T}`, `eps ~ N(0, I)`.
/// When `null` is set every example carries the null condition.
pub fn make_batch<R: Rng>(
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    size: usize,
    null: bool,
    rng: &mut R,
) -> NoiseBatch {
    let dim = ds.dim();
    let mut xs = Vec::with_capacity(size);
    let mut eps = Vec::with_capacity(size);
    let mut ts = Vec::with_capacity(size);
    let mut conds = Vec::with_capacity(size);
    let mut x0 = Vec::with_capacity(dim);
    for _ in 0..size {
        let class = rng.random_range(0..ds.num_classes());
        ds.classes[class].sample_into(rng, &mut x0);
        let t = rng.random_range(1..=sched.steps());
        let a = sched.alpha_bars()[t];
        let e: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        xs.push(
            x0.iter()
                .zip(&e)
                .map(|(x, n)| a.sqrt() * x + (1.0 - a).sqrt() * n)
                .collect::<Vec<_>>(),
        );
        eps.push(e);
        ts.push(t);
        conds.push(if null {
            Condition::Null
        } else {
            Condition::Class(class)
        });
    }
    NoiseBatch {
        x_t: rows_to_array(&xs, dim),
        t: ts,
        cond: conds,
        eps: rows_to_array(&eps, dim),
    }
}

/// Fixed evaluation batch drawn from its own seed stream.
pub fn held_out_batch(
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    size: usize,
    seed: u64,
) -> NoiseBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0005_eed4_e1d0_u64);
    make_batch(ds, sched, size, false, &mut rng)
}

/// Noise-prediction loss of the closed-form oracle on a batch.
pub fn oracle_loss(o: &GaussianOracle, sched: &NoiseSchedule, batch: &NoiseBatch) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..batch.len() {
        let x = batch.x_t.row(i).to_vec();
        let pred = o.noise(&x, batch.t[i], batch.cond[i], sched)?;
        total += pred
            .iter()
            .zip(batch.eps.row(i).iter())
            .map(|(p, e)| (p - e).powi(2))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Outcome of [`train_denoiser`].
#[derive(Debug, Clone)]
pub struct TrainedDenoiser {
    pub net: DenoiserMlp,
    /// Held-out loss before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Fits the noise-prediction loss with Adam. Deterministic under `cfg.seed`.
pub fn train_denoiser(
    ds: &ToyDataset,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainedDenoiser> {
    ds.validate()?;
    cfg.validate()?;
    let mut net = DenoiserMlp::new(
        ds.dim(),
        ds.num_classes(),
        sched.steps(),
        cfg.network.clone(),
        cfg.seed,
    )?;
    let held = held_out_batch(ds, sched, cfg.held_out, cfg.seed);
    let initial_loss = net.loss(&held)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut opt = Adam::new(net.params().len(), cfg.lr);
    for step in 0..cfg.steps {
        let null = rng.random::<f64>() < cfg.cond_dropout;
        let batch = make_batch(ds, sched, cfg.batch, null, &mut rng);
        let (loss, grads) = net.loss_and_grad(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        opt.step(net.params_mut(), &grads);
    }
    let final_loss = net.loss(&held)?;
    if !final_loss.is_finite() {
        return Err(Error::Training {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok(TrainedDenoiser {
        net,
        initial_loss,
        final_loss,
    })
}

/// Maximum relative error between backprop gradients and central finite
/// differences (step `1e-5`) over `samples` randomly chosen parameters.
pub fn mlp_gradient_check(
    net: &DenoiserMlp,
    batch: &NoiseBatch,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(param("gradient check needs a nonempty batch"));
    }
    let (_, grads) = net.loss_and_grad(batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    // Embedding rows not referenced by the batch have zero gradient on both
    // routes; sample among parameters the loss actually depends on.
    let candidates: Vec<usize> = (0..grads.len()).filter(|&i| grads[i] != 0.0).collect();
    if candidates.is_empty() {
        return Ok(0.0);
    }
    for _ in 0..samples {
        let i = candidates[rng.random_range(0..candidates.len())];
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = probe.loss(batch)?;
        probe.params_mut()[i] = orig - h;
        let down = probe.loss(batch)?;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let denom = grads[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max((grads[i] - fd).abs() / denom);
    }
    Ok(worst)
}
