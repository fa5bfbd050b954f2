//! Self-describing model checkpoints: config echo, parameter blobs, the
//! training-county vocabulary, and a fingerprint of the training data's
//! scale parameters.

use std::path::Path;

use epicast_core::deeptcn::DeepTcn;
use epicast_core::params::ParamStore;
use epicast_core::tft::Tft;
use epicast_core::train::Forecaster;
use epicast_core::window::CountyVocab;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};
use crate::rawio::write_json;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelKind {
    Tft(Tft),
    DeepTcn(DeepTcn),
}

impl ModelKind {
    pub fn as_forecaster(&self) -> &dyn Forecaster {
        match self {
            ModelKind::Tft(m) => m,
            ModelKind::DeepTcn(m) => m,
        }
    }

    pub fn as_tft(&self) -> Option<&Tft> {
        match self {
            ModelKind::Tft(m) => Some(m),
            ModelKind::DeepTcn(_) => None,
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            ModelKind::Tft(_) => "tft",
            ModelKind::DeepTcn(_) => "deeptcn",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub seed: u64,
    /// Ablation variant key, e.g. `tft` or `deeptcn_no_viral`.
    pub variant: String,
    pub quantiles: Vec<f64>,
    /// Fingerprint of the training panels' scale parameters; inference
    /// refuses data that scales differently.
    pub scale_fingerprint: u64,
    pub vocab: CountyVocab,
    pub model: ModelKind,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| AppError::Json {
            path: path.into(),
            source: e,
        })
    }

    pub fn check_scale_fingerprint(&self, fingerprint: u64) -> Result<()> {
        if self.scale_fingerprint != fingerprint {
            return Err(AppError::Other(format!(
                "checkpoint was trained on data with scale fingerprint {:016x}, \
                 but the configured data fingerprints to {:016x}",
                self.scale_fingerprint, fingerprint
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use epicast_core::deeptcn::DeepTcnConfig;
    use epicast_core::rng_from_seed;
    use epicast_core::window::InputSpec;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(3);
        let model = DeepTcn::new(
            &mut store,
            DeepTcnConfig {
                kernel_size: 2,
                dilations: vec![1, 2],
                channels: 3,
                decoder_hidden: 4,
                position_embed_width: 2,
                quantiles: vec![0.05, 0.5, 0.95],
            },
            InputSpec {
                lookback: 4,
                horizon: 2,
                unknown_names: vec!["viral_load".into()],
                known_names: vec!["k0".into()],
            },
            &mut rng,
        )
        .unwrap();
        let ckpt = Checkpoint {
            config_hash: "abc".into(),
            seed: 9,
            variant: "deeptcn".into(),
            quantiles: vec![0.05, 0.5, 0.95],
            scale_fingerprint: 0xDEADBEEF,
            vocab: CountyVocab::default(),
            model: ModelKind::DeepTcn(model),
            params: store.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params.fingerprint(), store.fingerprint());
        assert_eq!(loaded.variant, "deeptcn");
        assert_eq!(loaded.model.family_name(), "deeptcn");
        assert!(loaded.check_scale_fingerprint(0xDEADBEEF).is_ok());
        assert!(loaded.check_scale_fingerprint(1).is_err());
    }
}
