use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{ensure_finite, Result};
use crate::schedule::{cfg_combine, Condition, GuidanceConfig};

/// A conditional noise-prediction function `eps(x, t, cond)`.
pub trait Denoiser: Sync {
    /// Data dimension accepted and produced.
    fn dim(&self) -> usize;

    fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        (**self).predict_noise(x, t, cond)
    }
}

/// A denoiser whose condition enters through a real embedding vector, so the
/// embedding itself can be optimized.
pub trait EmbeddingDenoiser: Denoiser {
    fn embedding_dim(&self) -> usize;

    /// Embedding row used for a named condition.
    fn embedding(&self, cond: Condition) -> Result<Vec<f64>>;

    fn predict_noise_embedded(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Vec<f64>>;

    /// Prediction together with the vector-Jacobian product
    /// `(d eps / d embedding)^T upstream`.
    fn embedding_vjp(
        &self,
        x: &[f64],
        t: usize,
        embedding: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Wraps a denoiser, counts evaluations, and rejects non-finite outputs.
pub struct CountingDenoiser<D> {
    inner: D,
    calls: AtomicU64,
}

impl<D: Denoiser> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn inner(&self) -> &D {
        &self.inner
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let out = self.inner.predict_noise(x, t, cond)?;
        ensure_finite(&out, "denoiser output")?;
        Ok(out)
    }
}

/// Guided estimate from one unconditional and one conditional evaluation.
pub fn guided_noise<D: Denoiser + ?Sized>(
    den: &D,
    x: &[f64],
    t: usize,
    cond: Condition,
    g: GuidanceConfig,
) -> Result<Vec<f64>> {
    let uncond = den.predict_noise(x, t, Condition::Null)?;
    let c = den.predict_noise(x, t, cond)?;
    let out = cfg_combine(&uncond, &c, g)?;
    ensure_finite(&out, "guided noise estimate")?;
    Ok(out)
}

/// Stand-in denoisers used by tests and the verification suite.
pub mod fixtures {
    use super::*;

    /// Always predicts zero noise.
    pub struct Zero(pub usize);

    impl Denoiser for Zero {
        fn dim(&self) -> usize {
            self.0
        }

        fn predict_noise(&self, _x: &[f64], _t: usize, _cond: Condition) -> Result<Vec<f64>> {
            Ok(vec![0.0; self.0])
        }
    }

    /// Smooth nonlinear denoiser with arbitrary, condition- and
    /// time-dependent output. Used to check identities that must hold for
    /// any noise predictor.
    pub struct Wobbly {
        pub dim: usize,
        pub phase: f64,
    }

    impl Denoiser for Wobbly {
        fn dim(&self) -> usize {
            self.dim
        }

        fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
            let c = match cond {
                Condition::Null => 0.0,
                Condition::Class(k) => 1.0 + k as f64,
            };
            let tau = t as f64 / 1000.0;
            let s: f64 = x.iter().sum();
            Ok(x.iter()
                .enumerate()
                .map(|(i, xi)| {
                    (1.3 * xi + self.phase * (i as f64 + 1.0)).sin() * (1.0 + tau)
                        + 0.4 * c * (s * tau).cos()
                        - 0.2 * xi * tau
                })
                .collect())
        }
    }

    /// Ignores time and input entirely.
    pub struct Constant(pub Vec<f64>);

    impl Denoiser for Constant {
        fn dim(&self) -> usize {
            self.0.len()
        }

        fn predict_noise(&self, _x: &[f64], _t: usize, _cond: Condition) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }
}
