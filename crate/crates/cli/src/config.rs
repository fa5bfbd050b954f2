//! Experiment configuration: one JSON document drives every subcommand.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use epicast_core::deeptcn::DeepTcnConfig;
use epicast_core::eval::{validate_quantiles, BacktestPlan};
use epicast_core::panel::SplitSpec;
use epicast_core::synth::SynthConfig;
use epicast_core::tft::TftConfig;
use epicast_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dates::parse_day;
use crate::error::{AppError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub cases: PathBuf,
    pub viral: PathBuf,
    pub oxford: PathBuf,
    pub county_map: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowConfig {
    pub lookback: usize,
    pub horizon: usize,
    /// Stride for training windows; evaluation stride lives in `backtest`.
    pub train_stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        WindowConfig {
            lookback: 30,
            horizon: 10,
            train_stride: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFamily {
    Tft,
    #[serde(rename = "deeptcn")]
    DeepTcn,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub family: ModelFamily,
    /// Feed the wastewater signal to the model (the ablation flag).
    pub use_viral: bool,
    /// Inject a pure-noise covariate (importance-ranking experiments).
    pub noise_covariate: bool,
    pub tft: TftConfig,
    pub deeptcn: DeepTcnConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            family: ModelFamily::Tft,
            use_viral: true,
            noise_covariate: false,
            tft: TftConfig::default(),
            deeptcn: DeepTcnConfig::default(),
        }
    }
}

fn default_quantiles() -> Vec<f64> {
    vec![0.05, 0.5, 0.95]
}

fn default_synth_start() -> String {
    "2021-01-01".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: Option<DataPaths>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    /// Calendar date of synthetic day 0.
    #[serde(default = "default_synth_start")]
    pub synth_start_date: String,
    /// Training counties; absent means every county found in the data
    /// except the holdout set.
    #[serde(default)]
    pub counties: Option<Vec<String>>,
    #[serde(default)]
    pub holdout_counties: Vec<String>,
    /// Per-county cut-off dates (inclusive) for ragged tails.
    #[serde(default)]
    pub trim_dates: BTreeMap<String, String>,
    #[serde(default)]
    pub window: WindowConfig,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub backtest: BacktestPlan,
    /// The quantile set shared by every model variant.
    #[serde(default = "default_quantiles")]
    pub quantiles: Vec<f64>,
    /// Existing checkpoint for backtest / explain / plot.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(|e| AppError::Json {
            path: path.into(),
            source: e,
        })?;
        Ok(cfg)
    }

    /// Apply command-line overrides; call before `validate` and `hash`.
    pub fn with_overrides(mut self, out_dir: Option<PathBuf>, seed: Option<u64>) -> Self {
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        if let Some(seed) = seed {
            self.seed = seed;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (None, None) => {
                return Err(AppError::config(
                    "data / synth",
                    "exactly one input source required, found neither",
                ))
            }
            (Some(_), Some(_)) => {
                return Err(AppError::config(
                    "data / synth",
                    "exactly one input source required, found both",
                ))
            }
            _ => {}
        }
        if let Some(paths) = &self.data {
            for (field, p) in [
                ("data.cases", &paths.cases),
                ("data.viral", &paths.viral),
                ("data.oxford", &paths.oxford),
                ("data.county_map", &paths.county_map),
            ] {
                if !p.exists() {
                    return Err(AppError::config(
                        field,
                        format!("path {} does not exist", p.display()),
                    ));
                }
            }
        }
        if let Some(synth) = &self.synth {
            synth.validate()?;
        }
        parse_day(&self.synth_start_date)
            .map_err(|e| AppError::config("synth_start_date", e.to_string()))?;
        if self.window.lookback == 0 || self.window.horizon == 0 || self.window.train_stride == 0 {
            return Err(AppError::config(
                "window",
                "lookback, horizon, and train_stride must be >= 1",
            ));
        }
        if self.backtest.horizon != self.window.horizon {
            return Err(AppError::config(
                "backtest.horizon",
                format!(
                    "must equal window.horizon ({} vs {})",
                    self.backtest.horizon, self.window.horizon
                ),
            ));
        }
        self.backtest.validate()?;
        self.train.validate()?;
        validate_quantiles(&self.quantiles)?;
        if let Some(filter) = &self.counties {
            if let Some(shared) = filter.iter().find(|c| self.holdout_counties.contains(c)) {
                return Err(AppError::config(
                    "holdout_counties",
                    format!("county `{shared}` appears in both counties and holdout_counties"),
                ));
            }
        }
        for (county, date) in &self.trim_dates {
            parse_day(date).map_err(|e| {
                AppError::config("trim_dates", format!("county `{county}`: {e}"))
            })?;
        }
        self.model.tft.validate()?;
        self.model.deeptcn.validate(self.window.lookback)?;
        Ok(())
    }

    /// Hash of the effective configuration (after overrides); stamped into
    /// every artifact.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for b in digest {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }

    /// The model configs with the shared quantile set applied.
    pub fn tft_config(&self) -> TftConfig {
        let mut cfg = self.model.tft.clone();
        cfg.quantiles = self.quantiles.clone();
        cfg
    }

    pub fn deeptcn_config(&self) -> DeepTcnConfig {
        let mut cfg = self.model.deeptcn.clone();
        cfg.quantiles = self.quantiles.clone();
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_synth_json(dir: &Path) -> String {
        format!(
            r#"{{
                "seed": 5,
                "out_dir": "{}",
                "synth": {{ "counties": 3, "days": 120 }},
                "train": {{ "max_epochs": 4, "patience": 2 }}
            }}"#,
            dir.display()
        )
    }

    #[test]
    fn defaults_fill_in_and_validate() {
        let dir = tempfile::tempdir().unwrap();
        let text = minimal_synth_json(dir.path());
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, &text).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.window.lookback, 30);
        assert_eq!(cfg.quantiles, vec![0.05, 0.5, 0.95]);
        cfg.validate().unwrap();
    }

    #[test]
    fn synth_defaults_come_from_core() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, minimal_synth_json(dir.path())).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        let synth = cfg.synth.unwrap();
        assert_eq!(synth.counties, 3);
        assert_eq!(synth.days, 120);
        assert_eq!(synth.reporting_delay, 7); // default preserved
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("config.json");
        std::fs::write(
            &cfg_path,
            r#"{"out_dir": "x", "synth": {}, "not_a_field": 1}"#,
        )
        .unwrap();
        assert!(ExperimentConfig::load(&cfg_path).is_err());
    }

    #[test]
    fn both_sources_or_neither_fail_validation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, r#"{"out_dir": "x"}"#).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("config.json");
        std::fs::write(&cfg_path, minimal_synth_json(dir.path())).unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        let h1 = cfg.hash();
        let h2 = cfg.clone().with_overrides(None, Some(99)).hash();
        assert_ne!(h1, h2);
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn holdout_overlap_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("config.json");
        std::fs::write(
            &cfg_path,
            format!(
                r#"{{
                    "out_dir": "{}",
                    "synth": {{}},
                    "counties": ["a", "b"],
                    "holdout_counties": ["b"]
                }}"#,
                dir.path().display()
            ),
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&cfg_path).unwrap();
        assert!(cfg.validate().is_err());
    }
}
