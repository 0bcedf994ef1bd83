//! Experiment configuration files.
//!
//! One TOML document drives every command. Unknown keys are rejected so a
//! typo in an assumption parameter cannot silently fall back to a default.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::identify::{IdentifyGrid, DEFAULT_NOISE_CONST};
use crate::synthgrad::SynthConfig;
use crate::trainkit::{DataConfig, ModelConfig, OptimConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Grid axes. An absent axis holds the `[synth]` value; an explicitly
    /// empty one makes the grid empty.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_t: Option<Vec<usize>>,
    /// Surprise ratios `ᾱ / ‖μ_T‖_F`, applied with `ᾱ` fixed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ratio: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<Vec<f64>>,
    /// Seeds per grid point, numbered from the experiment seed.
    pub seeds: usize,
    pub noise_const: f64,
    /// Gradient samples averaged per selectivity point.
    pub samples: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n: None,
            r_t: None,
            ratio: None,
            tau: None,
            seeds: 5,
            noise_const: DEFAULT_NOISE_CONST,
            samples: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: String,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out_dir: "out".into(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            optim: OptimConfig::default(),
            synth: SynthConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// A parsed config plus what is derived from it at load time.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub fingerprint: String,
    pub surprise_valid: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<LoadedConfig> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.model.validate()?;
        config.optim.validate()?;
        config.synth.validate()?;
        config.loaded()
    }

    pub fn load(path: &Path) -> Result<LoadedConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn loaded(self) -> Result<LoadedConfig> {
        Ok(LoadedConfig {
            fingerprint: fingerprint(&self)?,
            surprise_valid: self.synth.surprise_valid(),
            config: self,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            model: self.model.clone(),
            data: self.data.clone(),
            optim: self.optim.clone(),
        }
    }

    pub fn identify_grid(&self) -> IdentifyGrid {
        let s = &self.synth;
        let w = &self.sweep;
        IdentifyGrid {
            base: *s,
            n: w.n.clone().unwrap_or(vec![s.n]),
            r_t: w.r_t.clone().unwrap_or(vec![s.r_t]),
            ratio: w.ratio.clone().unwrap_or(vec![s.alpha_mean / s.mu_frob]),
            tau: w.tau.clone().unwrap_or(vec![s.tau]),
            noise_const: w.noise_const,
        }
    }

    /// The `r_T` axis for selectivity sweeps.
    pub fn selectivity_r_t(&self) -> Vec<usize> {
        self.sweep.r_t.clone().unwrap_or(vec![self.synth.r_t])
    }

    /// `seed, seed + 1, …` for the configured seed count.
    pub fn sweep_seeds(&self) -> Vec<u64> {
        (0..self.sweep.seeds as u64)
            .map(|k| self.seed.wrapping_add(k))
            .collect()
    }
}

/// First 16 hex digits of the SHA-256 of the value's canonical TOML form.
pub fn fingerprint<T: Serialize>(value: &T) -> Result<String> {
    let text = toml::to_string(value).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(hex::encode(&digest[..8]))
}
