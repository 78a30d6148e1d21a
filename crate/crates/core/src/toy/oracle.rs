use crate::denoiser::Denoiser;
use crate::error::{param, Result};
use crate::schedule::{Condition, Latent, NoiseSchedule};
use crate::toy::dataset::{ClassMixture, ToyDataset};

/// Closed-form Bayes-optimal noise predictor for isotropic Gaussian (mixture)
/// classes. The null condition is the equal-weight mixture of all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    classes: Vec<ClassMixture>,
}

struct Component<'a> {
    mean: &'a [f64],
    var: f64,
    log_weight: f64,
}

impl GaussianOracle {
    /// One isotropic Gaussian per class.
    pub fn isotropic(means: Vec<Vec<f64>>, variances: Vec<f64>) -> Result<Self> {
        if means.len() != variances.len() {
            return Err(param("one variance per class mean required"));
        }
        if variances.iter().any(|&v| !(v > 0.0)) {
            return Err(param("oracle variances must be positive"));
        }
        let classes = means
            .into_iter()
            .zip(variances)
            .map(|(m, v)| ClassMixture::gaussian(m, v.sqrt()))
            .collect();
        Self::from_dataset(&ToyDataset::new(classes)?)
    }

    pub fn from_dataset(ds: &ToyDataset) -> Result<Self> {
        ds.validate()?;
        Ok(Self {
            classes: ds.classes.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    fn components(&self, cond: Condition) -> Result<Vec<Component<'_>>> {
        let mut out = Vec::new();
        let (classes, scale): (Vec<&ClassMixture>, f64) = match cond {
            Condition::Null => (
                self.classes.iter().collect(),
                1.0 / self.classes.len() as f64,
            ),
            Condition::Class(k) => (
                vec![self
                    .classes
                    .get(k)
                    .ok_or_else(|| param(format!("oracle has no class {k}")))?],
                1.0,
            ),
        };
        for c in classes {
            for (m, w) in c.means.iter().zip(&c.weights) {
                if *w > 0.0 {
                    out.push(Component {
                        mean: m,
                        var: c.std * c.std,
                        log_weight: (w * scale).ln(),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Posterior responsibilities of each component given `x_t`, paired with
    /// the per-component posterior-mean shrinkage `sqrt(a) var / (a var + 1 - a)`.
    fn responsibilities(&self, x: &[f64], a: f64, comps: &[Component<'_>]) -> Vec<f64> {
        let sa = a.sqrt();
        let d = x.len() as f64;
        let logs: Vec<f64> = comps
            .iter()
            .map(|c| {
                let v = a * c.var + 1.0 - a;
                let sq: f64 = x
                    .iter()
                    .zip(c.mean)
                    .map(|(xi, mi)| (xi - sa * mi).powi(2))
                    .sum();
                c.log_weight - 0.5 * sq / v - 0.5 * d * v.ln()
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut r: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = r.iter().sum();
        r.iter_mut().for_each(|v| *v /= total);
        r
    }

    /// `E[x0 | x_t]` under the conditional (or null) distribution.
    pub fn posterior_mean(
        &self,
        x: &[f64],
        t: usize,
        cond: Condition,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        let a = sched.alpha_bar(t)?;
        let comps = self.components(cond)?;
        let r = self.responsibilities(x, a, &comps);
        let sa = a.sqrt();
        let mut out = vec![0.0; x.len()];
        for (c, rj) in comps.iter().zip(&r) {
            let shrink = sa * c.var / (a * c.var + 1.0 - a);
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(c.mean) {
                *o += rj * (mi + shrink * (xi - sa * mi));
            }
        }
        Ok(out)
    }

    /// Noise estimate in the simplified per-component form
    /// `sqrt(1 - a) / (a var + 1 - a) (x - sqrt(a) mu)`, which stays finite
    /// at `t = 0` where it evaluates to zero.
    pub fn noise(
        &self,
        x: &[f64],
        t: usize,
        cond: Condition,
        sched: &NoiseSchedule,
    ) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(param("oracle input dimension mismatch"));
        }
        let a = sched.alpha_bar(t)?;
        let comps = self.components(cond)?;
        let r = self.responsibilities(x, a, &comps);
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        let mut out = vec![0.0; x.len()];
        for (c, rj) in comps.iter().zip(&r) {
            let k = sn / (a * c.var + 1.0 - a);
            for ((o, xi), mi) in out.iter_mut().zip(x).zip(c.mean) {
                *o += rj * k * (xi - sa * mi);
            }
        }
        Ok(out)
    }
}

/// Bayes-optimal `eps(x_t, t, class)` via the posterior mean:
/// `(x_t - sqrt(a) E[x0 | x_t]) / sqrt(1 - a)`. Undefined at `t = 0`.
pub fn oracle_eps(
    x_t: &Latent,
    class: usize,
    o: &GaussianOracle,
    sched: &NoiseSchedule,
) -> Result<Vec<f64>> {
    let t = x_t.timestep;
    if t == 0 {
        return Err(param("oracle_eps is undefined at t = 0 (zero noise level)"));
    }
    let a = sched.alpha_bar(t)?;
    let mean = o.posterior_mean(&x_t.value, t, Condition::Class(class), sched)?;
    let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
    Ok(x_t
        .value
        .iter()
        .zip(&mean)
        .map(|(x, m)| (x - sa * m) / sn)
        .collect())
}

/// [`GaussianOracle`] bound to a schedule, usable wherever a [`Denoiser`] is.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub oracle: GaussianOracle,
    pub sched: NoiseSchedule,
}

impl OracleDenoiser {
    pub fn new(oracle: GaussianOracle, sched: NoiseSchedule) -> Self {
        Self { oracle, sched }
    }
}

impl Denoiser for OracleDenoiser {
    fn dim(&self) -> usize {
        self.oracle.dim()
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        self.oracle.noise(x, t, cond, &self.sched)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::ddim_step;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn standard_normal_simplifies() {
        let s = sched();
        let o = GaussianOracle::isotropic(vec![vec![0.0, 0.0]], vec![1.0]).unwrap();
        let x = Latent::new(vec![0.8, -1.7], 333).unwrap();
        let got = oracle_eps(&x, 0, &o, &s).unwrap();
        let sn = (1.0 - s.alpha_bar(333).unwrap()).sqrt();
        for i in 0..2 {
            assert!((got[i] - sn * x.value[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn half_alpha_bar_substitution() {
        // alpha_bar_1 = 0.5
        let s = NoiseSchedule::from_betas(vec![0.0, 0.5]).unwrap();
        let o = GaussianOracle::isotropic(vec![vec![0.0]], vec![1.0]).unwrap();
        let got = oracle_eps(&Latent::new(vec![1.0], 1).unwrap(), 0, &o, &s).unwrap();
        assert!((got[0] - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((got[0] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn pure_noise_limit() {
        let s = NoiseSchedule::linear(4000, 1e-4, 0.02).unwrap();
        let a = s.alpha_bar(4000).unwrap();
        assert!(a < 1e-16);
        let o = GaussianOracle::isotropic(vec![vec![3.0, -1.0]], vec![0.4]).unwrap();
        let x = Latent::new(vec![0.25, 1.5], 4000).unwrap();
        let got = oracle_eps(&x, 0, &o, &s).unwrap();
        for i in 0..2 {
            assert!((got[i] - x.value[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_timestep_is_rejected_but_denoiser_is_continuous() {
        let s = sched();
        let o = GaussianOracle::from_dataset(&ToyDataset::two_mode_benchmark()).unwrap();
        assert!(oracle_eps(&Latent::new(vec![0.1, 0.2], 0).unwrap(), 0, &o, &s).is_err());
        let d = OracleDenoiser::new(o, s);
        assert_eq!(
            d.predict_noise(&[0.1, 0.2], 0, Condition::Null).unwrap(),
            vec![0.0, 0.0]
        );
    }

    #[test]
    fn simplified_and_posterior_routes_agree() {
        let s = sched();
        let o = GaussianOracle::from_dataset(&ToyDataset::two_mode_benchmark()).unwrap();
        for &t in &[1usize, 10, 150, 600, 999] {
            for x in [[0.3, -0.2], [1.1, 0.05], [-2.0, 1.0]] {
                let a = o.noise(&x, t, Condition::Class(0), &s).unwrap();
                let b = oracle_eps(&Latent::new(x.to_vec(), t).unwrap(), 0, &o, &s).unwrap();
                for i in 0..2 {
                    assert!(
                        (a[i] - b[i]).abs() < 1e-9 * (1.0 + b[i].abs()),
                        "t={t}: {a:?} vs {b:?}"
                    );
                }
            }
        }
    }

    #[test]
    fn ddim_to_zero_gives_posterior_mean() {
        let s = sched();
        let o = GaussianOracle::from_dataset(&ToyDataset::two_mode_benchmark()).unwrap();
        for &t in &[5usize, 200, 700] {
            let x = Latent::new(vec![0.4, -0.3], t).unwrap();
            let eps = o.noise(&x.value, t, Condition::Class(0), &s).unwrap();
            let x0 = ddim_step(&x, 0, &eps, &s).unwrap();
            let pm = o
                .posterior_mean(&x.value, t, Condition::Class(0), &s)
                .unwrap();
            for i in 0..2 {
                assert!((x0.value[i] - pm[i]).abs() <= 1e-10 * (1.0 + pm[i].abs()));
            }
        }
    }
}
