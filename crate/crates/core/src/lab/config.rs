use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::Denoiser;
use crate::distill::{DistillConfig, Method};
use crate::error::{Error, Result};
use crate::metrics::{Evaluator, MetricConfig};
use crate::schedule::{NoiseSchedule, ScheduleSpec};
use crate::toy::{
    sample_dataset, Checkpoint, ClassMixture, GaussianOracle, OracleDenoiser, ToyDataset,
    TrainConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetPreset {
    SeparatedTwoClass,
    TwoModeBenchmark,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub preset: DatasetPreset,
    /// Explicit classes; replaces the preset when nonempty.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub classes: Vec<ClassMixture>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            preset: DatasetPreset::TwoModeBenchmark,
            classes: Vec::new(),
        }
    }
}

impl DatasetConfig {
    pub fn build(&self) -> Result<ToyDataset> {
        if !self.classes.is_empty() {
            return ToyDataset::new(self.classes.clone());
        }
        Ok(match self.preset {
            DatasetPreset::SeparatedTwoClass => ToyDataset::separated_two_class(),
            DatasetPreset::TwoModeBenchmark => ToyDataset::two_mode_benchmark(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenoiserKind {
    /// Closed-form Bayes-optimal noise prediction for the dataset.
    Oracle,
    /// Trained network loaded from `checkpoint`.
    Checkpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub kind: DenoiserKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            kind: DenoiserKind::Oracle,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    /// Reference points drawn from the target class.
    pub target_samples: usize,
    pub target_seed: u64,
    /// Mode centers; empty selects the target class component means.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub modes: Vec<Vec<f64>>,
    pub metrics: MetricConfig,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            target_samples: 1000,
            target_seed: 7,
            modes: Vec::new(),
            metrics: MetricConfig::default(),
        }
    }
}

/// Farthest-timestep by step-size sweep; each cell runs the trajectory
/// method with `steps = farthest / step_size` and fixed spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub farthest: Vec<usize>,
    pub step_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Denoiser calls per run; every cell gets the same budget.
    pub call_budget: u64,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            farthest: vec![480],
            step_sizes: vec![480, 240, 80, 48, 20],
            seeds: (0..5).collect(),
            call_budget: 36_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub call_budget: u64,
    /// Metric evaluations along each curve, excluding the initial one.
    pub curve_points: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: (0..5).collect(),
            call_budget: 36_000,
            curve_points: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    /// Random configurations per identity check.
    pub draws: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            seed: 0,
        }
    }
}

/// One configuration file drives every subcommand; each reads its sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabConfig {
    /// Output directory. Nothing is written outside it.
    pub output: PathBuf,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleSpec,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub evaluation: EvaluationConfig,
    pub ablate: AblateConfig,
    pub compare: CompareConfig,
    pub verify: VerifyConfig,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            schedule: ScheduleSpec::default(),
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            evaluation: EvaluationConfig::default(),
            ablate: AblateConfig::default(),
            compare: CompareConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

impl LabConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies a seed override to every seeded section; multi-seed sweeps
    /// shrink to that one seed. Target samples keep their own seed so
    /// metrics stay comparable across run seeds.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.distill.seed = seed;
        self.verify.seed = seed;
        self.ablate.seeds = vec![seed];
        self.compare.seeds = vec![seed];
        self
    }

    /// SHA-256 of the canonical serialization, with the output directory
    /// excluded so relocated runs hash alike.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output = PathBuf::new();
        Ok(hex::encode(Sha256::digest(c.to_toml()?.as_bytes())))
    }

    /// Checks every section that does not need a denoiser.
    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule.build()?;
        let ds = self.dataset.build()?;
        self.train.validate()?;
        self.distill.validate(&sched)?;
        if self.distill.target_class >= ds.num_classes() {
            return Err(Error::Config(format!(
                "target_class {} but the dataset has {} classes",
                self.distill.target_class,
                ds.num_classes()
            )));
        }
        if self.evaluation.target_samples < 2 || self.evaluation.metrics.projections == 0 {
            return Err(Error::Config(
                "evaluation needs >= 2 target samples and >= 1 projection".into(),
            ));
        }
        if self.denoiser.kind == DenoiserKind::Checkpoint && self.denoiser.checkpoint.is_none() {
            return Err(Error::Config(
                "denoiser kind 'checkpoint' needs a checkpoint path".into(),
            ));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn build_denoiser(
        &self,
        ds: &ToyDataset,
        sched: &NoiseSchedule,
    ) -> Result<Box<dyn Denoiser>> {
        match self.denoiser.kind {
            DenoiserKind::Oracle => Ok(Box::new(OracleDenoiser::new(
                GaussianOracle::from_dataset(ds)?,
                sched.clone(),
            ))),
            DenoiserKind::Checkpoint => {
                let path = self.denoiser.checkpoint.as_ref().expect("validated");
                let ck = Checkpoint::load(path)?;
                if ck.schedule_fingerprint != sched.fingerprint() {
                    return Err(Error::Config(format!(
                        "checkpoint {} was trained under a different noise schedule",
                        path.display()
                    )));
                }
                if ck.dim != ds.dim() || ck.classes != ds.num_classes() {
                    return Err(Error::Config(
                        "checkpoint does not match the dataset shape".into(),
                    ));
                }
                Ok(Box::new(ck.into_net()?))
            }
        }
    }

    pub fn build_evaluator(&self, ds: &ToyDataset) -> Result<Evaluator> {
        let class = ds.class(self.distill.target_class)?;
        let target = sample_dataset(
            ds,
            self.distill.target_class,
            self.evaluation.target_samples,
            self.evaluation.target_seed,
        )?;
        let modes = if self.evaluation.modes.is_empty() {
            class.means.clone()
        } else {
            self.evaluation.modes.clone()
        };
        Ok(Evaluator {
            target,
            modes,
            mean: class.mean(),
            config: self.evaluation.metrics.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = LabConfig::default();
        let text = c.to_toml().unwrap();
        assert_eq!(LabConfig::from_toml(&text).unwrap(), c);
        assert_eq!(LabConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn hash_ignores_output_only() {
        let a = LabConfig::default();
        let mut b = a.clone();
        b.output = PathBuf::from("elsewhere");
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.distill.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn partial_sections_and_unknown_keys() {
        let c =
            LabConfig::from_toml("[distill]\nmethod = \"sds\"\n[distill.trajectory]\nsteps = 3\n")
                .unwrap();
        assert_eq!(c.distill.method, Method::Sds);
        assert_eq!(c.distill.trajectory.steps, 3);
        assert_eq!(c.distill.trajectory.gap_min, 60);
        assert!(matches!(
            LabConfig::from_toml("[distill]\nbogus = 1\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            LabConfig::load(Path::new("/nonexistent/x.toml")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn validation() {
        assert!(LabConfig::default().validate().is_ok());
        let mut c = LabConfig::default();
        c.distill.target_class = 5;
        assert!(c.validate().is_err());
        let mut c = LabConfig::default();
        c.denoiser.kind = DenoiserKind::Checkpoint;
        assert!(c.validate().is_err());
    }

    #[test]
    fn evaluator_uses_class_geometry() {
        let c = LabConfig::default();
        let ds = c.dataset.build().unwrap();
        let ev = c.build_evaluator(&ds).unwrap();
        assert_eq!(ev.modes, vec![vec![-1.0, 0.0], vec![1.0, 0.0]]);
        assert_eq!(ev.mean, vec![0.0, 0.0]);
        assert_eq!(ev.target.len(), 1000);
    }
}
