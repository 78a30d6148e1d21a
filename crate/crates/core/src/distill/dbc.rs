use serde::{Deserialize, Serialize};

use crate::error::{param, Result};

/// Iteration-dependent Gaussian weights over trajectory steps. Step `i` peaks
/// at iteration `centers[i] = (n - i - 1) K / (n - 1)`, so emphasis moves from
/// the farthest step at `k = 0` to the nearest step at `k = K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DBCSchedule {
    total_iterations: usize,
    sigma: f64,
    centers: Vec<f64>,
}

impl DBCSchedule {
    pub fn new(total_iterations: usize, steps: usize, sigma: f64) -> Result<Self> {
        if total_iterations == 0 {
            return Err(param("DBC needs at least one iteration"));
        }
        if steps == 0 {
            return Err(param("DBC needs at least one trajectory step"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(param("DBC sigma must be finite and positive"));
        }
        let k = total_iterations as f64;
        // A single step carries all the weight; its center is the final iteration.
        let centers = if steps == 1 {
            vec![0.0]
        } else {
            (0..steps)
                .map(|i| (steps - i - 1) as f64 * k / (steps - 1) as f64)
                .collect()
        };
        Ok(Self {
            total_iterations,
            sigma,
            centers,
        })
    }

    /// Width `K / 3`, which keeps the curve shape fixed as `K` changes.
    pub fn with_default_sigma(total_iterations: usize, steps: usize) -> Result<Self> {
        Self::new(total_iterations, steps, total_iterations as f64 / 3.0)
    }

    pub fn total_iterations(&self) -> usize {
        self.total_iterations
    }

    pub fn steps(&self) -> usize {
        self.centers.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Peak iteration for each step.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    /// Unnormalized weights `exp(-(k - center_i)^2 / (2 sigma^2))`.
    pub fn raw_weights(&self, k: usize) -> Vec<f64> {
        let s2 = 2.0 * self.sigma * self.sigma;
        self.centers
            .iter()
            .map(|c| (-(k as f64 - c).powi(2) / s2).exp())
            .collect()
    }

    /// Normalized weights at iteration `k < K`; positive, summing to 1.
    pub fn weights(&self, k: usize) -> Result<Vec<f64>> {
        if k >= self.total_iterations {
            return Err(param(format!(
                "iteration {k} outside [0, {})",
                self.total_iterations
            )));
        }
        let s2 = 2.0 * self.sigma * self.sigma;
        let logs: Vec<f64> = self
            .centers
            .iter()
            .map(|c| -(k as f64 - c).powi(2) / s2)
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let sum: f64 = w.iter().sum();
        Ok(w.into_iter().map(|x| x / sum).collect())
    }

    /// Step with the largest weight at iteration `k`; ties go to the lowest index.
    pub fn dominant_step(&self, k: usize) -> Result<usize> {
        let w = self.weights(k)?;
        Ok(argmax(&w))
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Uniform weights `1 / n`.
pub fn uniform_weights(steps: usize) -> Vec<f64> {
    vec![1.0 / steps as f64; steps]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centers_and_peak() {
        let d = DBCSchedule::new(3000, 6, 1000.0).unwrap();
        assert_eq!(d.centers(), &[3000.0, 2400.0, 1800.0, 1200.0, 600.0, 0.0]);
        assert_eq!(d.raw_weights(1800)[2], 1.0);
        let w = d.raw_weights(1800);
        assert!(w.iter().all(|x| *x <= w[2]));
    }

    #[test]
    fn two_step_frozen_values() {
        let d = DBCSchedule::new(3000, 2, 1000.0).unwrap();
        let raw = d.raw_weights(0);
        assert!((raw[0] - (-4.5f64).exp()).abs() < 1e-15);
        assert_eq!(raw[1], 1.0);
        let w = d.weights(0).unwrap();
        assert!((w[0] - 0.010_986_942_630_593_188).abs() < 1e-15, "{}", w[0]);
        assert!((w[1] - 0.989_013_057_369_406_8).abs() < 1e-15, "{}", w[1]);
    }

    #[test]
    fn default_handoff() {
        let d = DBCSchedule::new(3000, 6, 1000.0).unwrap();
        assert_eq!(d.dominant_step(0).unwrap(), 5);
        assert_eq!(d.dominant_step(2999).unwrap(), 0);
        let mut prev = usize::MAX;
        for k in 0..3000 {
            let a = d.dominant_step(k).unwrap();
            assert!(a <= prev);
            prev = a;
        }
    }

    #[test]
    fn single_step_and_errors() {
        let d = DBCSchedule::new(10, 1, 1.0).unwrap();
        assert_eq!(d.weights(3).unwrap(), vec![1.0]);
        assert!(d.weights(10).is_err());
        assert!(DBCSchedule::new(0, 3, 1.0).is_err());
        assert!(DBCSchedule::new(10, 0, 1.0).is_err());
        assert!(DBCSchedule::new(10, 3, 0.0).is_err());
        assert_eq!(
            DBCSchedule::with_default_sigma(300, 4).unwrap().sigma(),
            100.0
        );
    }

    #[test]
    fn narrow_sigma_stays_finite() {
        let d = DBCSchedule::new(3000, 6, 1.0).unwrap();
        let w = d.weights(1500).unwrap();
        assert!(w.iter().all(|x| x.is_finite()));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn weights_normalized(k_total in 1usize..5000, n in 1usize..30, sigma_frac in 0.03f64..2.0, frac in 0.0f64..1.0) {
            // widths above K / 37 keep every weight above the f64 underflow limit
            let d = DBCSchedule::new(k_total, n, sigma_frac * k_total as f64).unwrap();
            let k = ((k_total as f64 * frac) as usize).min(k_total - 1);
            let w = d.weights(k).unwrap();
            prop_assert_eq!(w.len(), n);
            prop_assert!(w.iter().all(|x| *x > 0.0));
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert_eq!(d.centers()[0], if n == 1 { 0.0 } else { k_total as f64 });
            prop_assert_eq!(*d.centers().last().unwrap(), 0.0);
        }

        #[test]
        fn dominant_step_non_increasing(k_total in 2usize..400, n in 2usize..12) {
            let d = DBCSchedule::with_default_sigma(k_total, n).unwrap();
            let mut prev = usize::MAX;
            for k in 0..k_total {
                let a = d.dominant_step(k).unwrap();
                prop_assert!(a <= prev);
                prev = a;
            }
        }
    }
}
