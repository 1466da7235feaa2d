//! Settings file handling: one TOML file covers every subcommand, split
//! into sections, and the handful of common flags override whatever the
//! file says. Unknown keys anywhere are errors — a typo should never
//! silently fall back to a default.

use std::path::Path;

use anyhow::{Context, Result};
use compat_reason_core::compatnet::ModelConfig;
use compat_reason_core::reasoning::RegularizerKind;
use compat_reason_core::synthdata::GenConfig;
use compat_reason_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

/// Grid and aggregation settings for the sweep subcommands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Regularizer weights to try, in run order.
    pub alphas: Vec<f64>,
    pub regularizers: Vec<RegularizerKind>,
    /// Training runs (distinct seeds) aggregated per setting.
    pub repetitions: usize,
    /// Seed for the generated corpus the whole sweep shares.
    pub data_seed: u64,
    pub eval_batch: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            alphas: vec![0.0, 0.1, 1.0, 10.0],
            regularizers: RegularizerKind::ALL.to_vec(),
            repetitions: 3,
            data_seed: 0,
            eval_batch: 256,
        }
    }
}

/// Everything the binary can be told through a file, by section. Each
/// subcommand reads the sections it needs and ignores the rest, so one
/// file can drive a whole workflow.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub data: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

/// Values of the shared flags; `None` means "keep the file's value".
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub reg: Option<RegularizerKind>,
}

impl CliConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("cannot read config {}", path.display()))?;
                // `message()` instead of Display: the parser's rendered
                // snippet spans several lines, and errors must stay on one.
                toml::from_str(&text).map_err(|err| {
                    anyhow::anyhow!(
                        "cannot parse config {}: {}",
                        path.display(),
                        err.message()
                    )
                })?
            }
            None => CliConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            config.train.seed = seed;
        }
        if let Some(alpha) = overrides.alpha {
            config.train.alpha = alpha;
        }
        if let Some(reg) = overrides.reg {
            config.train.regularizer = reg;
        }
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<()> {
        self.data.validate().context("data section")?;
        self.model.validate().context("model section")?;
        self.train.validate().context("train section")?;
        let sweep = &self.sweep;
        if sweep.alphas.is_empty() || sweep.regularizers.is_empty() {
            anyhow::bail!("sweep section: alphas and regularizers must be non-empty");
        }
        if sweep.alphas.iter().any(|a| *a < 0.0 || !a.is_finite()) {
            anyhow::bail!("sweep section: alphas must be non-negative and finite");
        }
        if sweep.repetitions == 0 {
            anyhow::bail!("sweep section: repetitions must be at least 1");
        }
        if sweep.eval_batch == 0 {
            anyhow::bail!("sweep section: eval_batch must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_pass_validation() {
        let config = CliConfig::load(None, &Overrides::default()).unwrap();
        assert_eq!(config.train.alpha, 1.0);
        assert_eq!(config.sweep.regularizers.len(), 3);
    }

    #[test]
    fn overrides_replace_file_values() {
        let overrides = Overrides {
            seed: Some(9),
            alpha: Some(0.5),
            reg: Some(RegularizerKind::Square),
        };
        let config = CliConfig::load(None, &overrides).unwrap();
        assert_eq!(config.train.seed, 9);
        assert_eq!(config.train.alpha, 0.5);
        assert_eq!(config.train.regularizer, RegularizerKind::Square);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("settings.toml");
        std::fs::write(&path, "[train]\nlr_zero = 0.1\n").unwrap();
        let err = CliConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("cannot parse config"));
    }

    #[test]
    fn sections_parse_with_short_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("settings.toml");
        std::fs::write(
            &path,
            "[train]\nregularizer = \"square\"\n[sweep]\nalphas = [0.0, 1.0]\nregularizers = [\"ce\", \"linear\"]\n",
        )
        .unwrap();
        let config = CliConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(config.train.regularizer, RegularizerKind::Square);
        assert_eq!(config.sweep.alphas, vec![0.0, 1.0]);
        assert_eq!(
            config.sweep.regularizers,
            vec![RegularizerKind::CrossEntropy, RegularizerKind::Linear]
        );
    }

    #[test]
    fn bad_sweep_grid_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("settings.toml");
        std::fs::write(&path, "[sweep]\nalphas = []\n").unwrap();
        let err = CliConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(format!("{err:#}").contains("non-empty"));
    }
}
