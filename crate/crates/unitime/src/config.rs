//! Run configuration: one TOML file describing the model, the training run,
//! evaluation knobs, and the domain registry.
//!
//! Unknown keys are hard errors; a typo in an experiment config should stop
//! the run, not silently fall back to a default. The resolved configuration
//! (after CLI overrides) is echoed into every artifact a run produces.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Tunability};
use crate::training::TrainConfig;

/// Zero-shot evaluation knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Fraction of unseen test windows consumed as selection probes.
    pub probe_fraction: f64,
    /// Fraction of a probe window fed as input; the rest is the probe target.
    pub split_ratio: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            probe_fraction: 0.005,
            split_ratio: 2.0 / 3.0,
        }
    }
}

/// The full run description parsed from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(rename = "domain")]
    pub domains: Vec<DomainSpec>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.to_string()))?;
        config.model.validate()?;
        config.train.validate()?;
        if config.domains.is_empty() {
            return Err(Error::Config("config lists no [[domain]] entries".into()));
        }
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Data {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    /// Effective master seed: CLI flag, then config, then UNITIME_SEED, then 0.
    /// The winner is written back so the echoed config is self-describing.
    pub fn resolve_seed(&mut self, cli: Option<u64>) -> u64 {
        let env = std::env::var("UNITIME_SEED")
            .ok()
            .and_then(|v| v.parse::<u64>().ok());
        let seed = cli.or(self.train.seed).or(env).unwrap_or(0);
        self.train.seed = Some(seed);
        seed
    }

    /// Applies a comma-separated ablation list, e.g.
    /// `no_instructions,no_masking,no_light_trans,no_reconstruction,ts_first`.
    pub fn apply_ablation(&mut self, flags: &str) -> Result<()> {
        for flag in flags.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match flag {
                "no_instructions" => self.model.ablation.use_instructions = false,
                "no_masking" => self.model.ablation.use_masking = false,
                "no_light_trans" => self.model.ablation.use_light_trans = false,
                "no_reconstruction" => self.model.ablation.use_reconstruction = false,
                "ts_first" => self.model.ablation.ts_first = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown ablation flag {other:?}; expected no_instructions, no_masking, \
                         no_light_trans, no_reconstruction, or ts_first"
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn apply_tunability(&mut self, mode: &str) -> Result<()> {
        self.model.tunability = match mode {
            "full" => Tunability::Full,
            "freeze" => Tunability::Freeze,
            "fpt" => Tunability::Fpt,
            other => {
                return Err(Error::Config(format!(
                    "unknown tunability {other:?}; expected full, freeze, or fpt"
                )))
            }
        };
        Ok(())
    }
}

/// A ready-to-train configuration for the default synthetic suite, with CSVs
/// expected under `data_dir`.
pub fn default_suite_config(data_dir: &Path) -> RunConfig {
    RunConfig {
        model: ModelConfig {
            hidden: 32,
            heads: 4,
            backbone_layers: 2,
            light_layers: 1,
            patch_len: 16,
            max_tokens: 20,
            max_horizon: 48,
            max_recon: 96,
            mask_ratio: 0.5,
            vocab_size: 0,
            tunability: Tunability::Full,
            ablation: Default::default(),
        },
        train: TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            oversampling_alpha: 0.5,
            seed: None,
            grad_clip: None,
        },
        eval: EvalConfig::default(),
        domains: crate::synth::default_suite_domains(data_dir),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_config_round_trips_through_toml() {
        let config = default_suite_config(Path::new("data"));
        let text = config.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_name() {
        let mut text = default_suite_config(Path::new("data")).to_toml();
        text.push_str("\n[extra_section]\nx = 1\n");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("extra_section"), "{err}");

        let text = default_suite_config(Path::new("data"))
            .to_toml()
            .replace("epochs = 10", "epochs = 10\nepochz = 3");
        let err = RunConfig::from_toml(&text).unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn seed_resolution_prefers_cli_then_config() {
        let mut config = default_suite_config(Path::new("data"));
        assert_eq!(config.resolve_seed(Some(7)), 7);
        assert_eq!(config.train.seed, Some(7));
        let mut config = default_suite_config(Path::new("data"));
        config.train.seed = Some(3);
        assert_eq!(config.resolve_seed(None), 3);
    }

    #[test]
    fn ablation_flags_parse_and_unknowns_fail() {
        let mut config = default_suite_config(Path::new("data"));
        config.apply_ablation("no_instructions, ts_first").unwrap();
        assert!(!config.model.ablation.use_instructions);
        assert!(config.model.ablation.ts_first);
        assert!(config.apply_ablation("no_such_flag").is_err());
    }
}
