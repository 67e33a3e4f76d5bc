//! Run configuration: TOML file, then command-line overrides.

use std::path::{Path, PathBuf};

use dlic::codec::CodecConfig;
use dlic::{AdaptationConfig, GateMode, OneStepConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where images come from: a directory of PNGs or a seeded generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub images: Option<PathBuf>,
    /// `natural`, `pixel`, `vector` or `ood`.
    pub synthetic: String,
    pub count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            images: None,
            synthetic: "natural".into(),
            count: 64,
            size: 128,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub lambda: f64,
    pub steps: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub codec: CodecConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = dlic::codec::TrainConfig::default();
        Self {
            lambda: t.lambda,
            steps: t.steps,
            batch: t.batch,
            crop: t.crop,
            lr: t.lr,
            codec: t.codec,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Checkpoints, one per λ.
    pub checkpoints: Vec<PathBuf>,
    /// Method names: `fixed-m` or `dynamic`. The first is the BD anchor.
    pub modes: Vec<String>,
    /// Optional steps sweep grid (dynamic gating, `N₁ = N₂ = steps`).
    pub sweep: Vec<usize>,
    /// Regenerate tables and plots from an existing records CSV.
    pub from_records: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoints: Vec::new(),
            modes: vec!["fixed-0".into(), "dynamic".into()],
            sweep: Vec::new(),
            from_records: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Run directory name under the run root.
    pub run: Option<String>,
    pub seed: u64,
    /// Worker threads for per-image evaluation.
    pub jobs: usize,
    pub checkpoint: Option<PathBuf>,
    pub bank: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    /// Original image for PSNR reporting on decode.
    pub reference: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainSection,
    pub adapt: AdaptationConfig,
    pub eval: EvalSection,
    pub onestep: OneStepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run: None,
            seed: 0,
            jobs: 1,
            checkpoint: None,
            bank: None,
            input: None,
            output: None,
            reference: None,
            data: DataConfig::default(),
            train: TrainSection::default(),
            adapt: AdaptationConfig::default(),
            eval: EvalSection::default(),
            onestep: OneStepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    pub fn train_config(&self) -> dlic::codec::TrainConfig {
        dlic::codec::TrainConfig {
            lambda: self.train.lambda,
            steps: self.train.steps,
            batch: self.train.batch,
            crop: self.train.crop,
            lr: self.train.lr,
            seed: self.seed,
            codec: self.train.codec,
        }
    }

    pub fn adapt_config(&self) -> AdaptationConfig {
        AdaptationConfig {
            seed: self.seed,
            ..self.adapt.clone()
        }
    }

    pub fn onestep_config(&self) -> OneStepConfig {
        OneStepConfig {
            seed: self.seed,
            ..self.onestep.clone()
        }
    }
}

/// Parses `dynamic` or `fixed-m`.
pub fn parse_mode(name: &str) -> Result<GateMode, CliError> {
    if name == "dynamic" {
        return Ok(GateMode::Dynamic);
    }
    name.strip_prefix("fixed-")
        .and_then(|m| m.parse().ok())
        .map(GateMode::Fixed)
        .ok_or_else(|| CliError::Config(format!("unknown mode '{name}' (expected 'dynamic' or 'fixed-m')")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = toml::from_str("seed = 3\n[adapt]\nn1 = 5\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.adapt.n1, 5);
        assert_eq!(c.adapt.n2, AdaptationConfig::default().n2);
    }

    #[test]
    fn modes_parse() {
        assert_eq!(parse_mode("dynamic").unwrap(), GateMode::Dynamic);
        assert_eq!(parse_mode("fixed-3").unwrap(), GateMode::Fixed(3));
        assert!(parse_mode("fixed").is_err());
    }
}
