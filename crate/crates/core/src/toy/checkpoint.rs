//! Versioned JSON checkpoints for [`DenoiserMlp`]. Layout is documented in
//! `docs/checkpoint.md`. Floats are written in shortest round-trip form, so
//! save/load reproduces every parameter bit-exactly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::mlp::{DenoiserMlp, MlpConfig};

pub const CHECKPOINT_FORMAT: &str = "trajdistill-denoiser";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub classes: usize,
    pub t_max: usize,
    pub network: MlpConfig,
    pub schedule_fingerprint: String,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn from_net(net: &DenoiserMlp, schedule_fingerprint: &str) -> Self {
        use crate::denoiser::Denoiser;
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dim: net.dim(),
            classes: net.classes(),
            t_max: net.t_max(),
            network: net.config().clone(),
            schedule_fingerprint: schedule_fingerprint.to_string(),
            params: net.params().to_vec(),
        }
    }

    pub fn into_net(self) -> Result<DenoiserMlp> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!(
                "unexpected format tag {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {}",
                self.version
            )));
        }
        DenoiserMlp::from_params(
            self.dim,
            self.classes,
            self.t_max,
            self.network,
            self.params,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), scale in -300i32..300) {
            let mut net = DenoiserMlp::new(2, 3, 1000, MlpConfig { hidden: vec![5, 3], time_frequencies: 2, embed_dim: 3 }, seed).unwrap();
            let factor = 2f64.powi(scale / 10) * 1.000_000_1;
            net.params_mut().iter_mut().for_each(|p| *p *= factor);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ck.json");
            Checkpoint::from_net(&net, "abc").save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            prop_assert_eq!(&back.schedule_fingerprint, "abc");
            let back = back.into_net().unwrap();
            let a: Vec<u64> = net.params().iter().map(|p| p.to_bits()).collect();
            let b: Vec<u64> = back.params().iter().map(|p| p.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn rejects_foreign_format() {
        let net = DenoiserMlp::new(
            2,
            1,
            10,
            MlpConfig {
                hidden: vec![],
                time_frequencies: 1,
                embed_dim: 2,
            },
            0,
        )
        .unwrap();
        let mut ck = Checkpoint::from_net(&net, "x");
        ck.version = 99;
        assert!(ck.clone().into_net().is_err());
        ck.version = CHECKPOINT_VERSION;
        ck.format = "other".into();
        assert!(ck.into_net().is_err());
    }
}
