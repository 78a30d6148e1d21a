use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Isotropic Gaussian mixture describing one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMixture {
    pub means: Vec<Vec<f64>>,
    /// Shared per-coordinate standard deviation of every component.
    pub std: f64,
    pub weights: Vec<f64>,
}

impl ClassMixture {
    pub fn gaussian(mean: Vec<f64>, std: f64) -> Self {
        Self {
            means: vec![mean],
            std,
            weights: vec![1.0],
        }
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Mixture mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (m, w) in self.means.iter().zip(&self.weights) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.means.is_empty() {
            return Err(param("class mixture needs at least one component"));
        }
        if self.means.iter().any(|m| m.len() != dim) {
            return Err(param("mixture component dimensions differ"));
        }
        if self.weights.len() != self.means.len() {
            return Err(param("one weight per mixture component required"));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(param("mixture weights must be non-negative"));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(param(format!("mixture weights sum to {total}, expected 1")));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(param("mixture stddev must be positive"));
        }
        Ok(())
    }

    pub(crate) fn sample_into<R: Rng>(&self, rng: &mut R, out: &mut Vec<f64>) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.means.len() - 1;
        for (j, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = j;
                break;
            }
        }
        out.clear();
        for &m in &self.means[pick] {
            let z: f64 = rng.sample(StandardNormal);
            out.push(m + self.std * z);
        }
    }
}

/// Class-conditional synthetic distribution standing in for the data a
/// pretrained diffusion model was fitted to. Classes are equally likely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyDataset {
    pub classes: Vec<ClassMixture>,
}

impl ToyDataset {
    pub fn new(classes: Vec<ClassMixture>) -> Result<Self> {
        let ds = Self { classes };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .classes
            .first()
            .ok_or_else(|| param("dataset needs at least one class"))?;
        let dim = first.dim();
        if dim == 0 {
            return Err(param("dataset dimension must be positive"));
        }
        self.classes.iter().try_for_each(|c| c.validate(dim))
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    pub fn class(&self, class: usize) -> Result<&ClassMixture> {
        self.classes.get(class).ok_or_else(|| {
            param(format!(
                "unknown class {class} (dataset has {})",
                self.classes.len()
            ))
        })
    }

    /// Two well-separated unit-variance-scale Gaussians, one per class.
    pub fn separated_two_class() -> Self {
        Self {
            classes: vec![
                ClassMixture::gaussian(vec![-2.0, 0.0], 0.5),
                ClassMixture::gaussian(vec![2.0, 0.0], 0.5),
            ],
        }
    }

    /// Class 0 is a symmetric pair of narrow modes at `(+-1, 0)`; class 1 is a
    /// broad background blob centred on the same origin. The conditional
    /// mean of class 0 sits between its modes where it has almost no mass.
    pub fn two_mode_benchmark() -> Self {
        Self {
            classes: vec![
                ClassMixture {
                    means: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
                    std: 0.1,
                    weights: vec![0.5, 0.5],
                },
                ClassMixture::gaussian(vec![0.0, 0.0], 1.5),
            ],
        }
    }
}

/// Draws `count` samples of one class; deterministic under `seed`.
pub fn sample_dataset(
    ds: &ToyDataset,
    class: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mix = ds.class(class)?;
    if count == 0 {
        return Err(param("sample count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = Vec::with_capacity(mix.dim());
    Ok((0..count)
        .map(|_| {
            mix.sample_into(&mut rng, &mut buf);
            buf.clone()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vanishing_stddev_returns_the_mean() {
        let ds = ToyDataset::new(vec![ClassMixture::gaussian(vec![0.3, -2.0], 1e-15)]).unwrap();
        for p in sample_dataset(&ds, 0, 50, 4).unwrap() {
            assert!((p[0] - 0.3).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empirical_mean_within_clt_bound() {
        let sigma = 0.7;
        let ds = ToyDataset::new(vec![ClassMixture::gaussian(vec![1.5, -0.5], sigma)]).unwrap();
        let n = 100_000;
        let pts = sample_dataset(&ds, 0, n, 11).unwrap();
        let bound = 4.0 * sigma / (n as f64).sqrt();
        for (d, mu) in [1.5, -0.5].iter().enumerate() {
            let m: f64 = pts.iter().map(|p| p[d]).sum::<f64>() / n as f64;
            assert!((m - mu).abs() < bound, "coord {d}: {m} vs {mu}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let ds = ToyDataset::two_mode_benchmark();
        assert_eq!(
            sample_dataset(&ds, 0, 64, 9).unwrap(),
            sample_dataset(&ds, 0, 64, 9).unwrap()
        );
        assert_ne!(
            sample_dataset(&ds, 0, 64, 9).unwrap(),
            sample_dataset(&ds, 0, 64, 10).unwrap()
        );
    }

    #[test]
    fn rejects_bad_inputs() {
        let ds = ToyDataset::separated_two_class();
        assert!(sample_dataset(&ds, 2, 10, 0).is_err());
        assert!(sample_dataset(&ds, 0, 0, 0).is_err());
        let bad = ClassMixture {
            means: vec![vec![0.0], vec![1.0]],
            std: 1.0,
            weights: vec![0.5, 0.6],
        };
        assert!(ToyDataset::new(vec![bad]).is_err());
        assert!(ToyDataset::new(vec![]).is_err());
        let empty = ClassMixture {
            means: vec![],
            std: 1.0,
            weights: vec![],
        };
        assert!(ToyDataset::new(vec![empty]).is_err());
    }
}
