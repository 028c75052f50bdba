//! Experiment configuration, read from TOML.
//!
//! Every section and key is optional; missing values take the defaults
//! below and unknown keys are rejected. The effective configuration is
//! written back as `config.toml` in each output directory.

use std::path::Path;

use dq_core::dqae::{DqaeConfig, ReconLoss};
use dq_core::optim::AdamWConfig;
use dq_core::quantizer::DeadCodePolicy;
use dq_core::synth::SyntheticSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; data, initialization and shuffling derive from it.
    pub seed: u64,
    pub data: DataConfig,
    pub quantizer: QuantizerConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub posthoc: PosthocConfig,
    pub capacity: CapacityConfig,
    pub ablate: AblateConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Glob of DQT1 files, used when `source = "files"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub files: Option<String>,
    /// Samples held out for evaluation, taken from the end of the stream.
    pub test_count: usize,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantizerConfig {
    /// Books per level, `M`.
    pub num_books: usize,
    /// Codes per book, `K`. Listed top level first for the autoencoder;
    /// `posthoc` sweeps over every entry.
    pub num_codes: Vec<usize>,
    /// Code dimension `D` inside the autoencoder.
    pub code_dim: usize,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub ema: bool,
    pub dead_code_fraction: f64,
    /// Steps between dead-code checks; zero disables re-seeding.
    pub dead_code_interval: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_levels: usize,
    pub width: usize,
    pub loss: ReconLoss,
    pub top_to_output: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Metrics are appended to `metrics.jsonl` every this many steps.
    pub log_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosthocConfig {
    /// Per-sample axes to decompose along.
    pub axes: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    /// Independent repetitions with seeds `seed, seed + 1, ...`.
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    pub num_codes: Vec<usize>,
    pub num_books: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub num_codes: Vec<usize>,
    pub num_books: Vec<usize>,
    pub seeds: usize,
    /// Hold `M * D` at this width; otherwise `D` is `quantizer.code_dim`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_channels: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            files: None,
            test_count: 64,
            synthetic: SyntheticSpec::default(),
        }
    }
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        let dq = DqaeConfig::default();
        Self {
            num_books: 1,
            num_codes: vec![256, 128],
            code_dim: dq.code_dim,
            beta: dq.beta,
            gamma: dq.gamma,
            epsilon: dq.epsilon,
            ema: true,
            dead_code_fraction: dq.dead_code.fraction,
            dead_code_interval: dq.dead_code.interval,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_levels: 2,
            width: 32,
            loss: ReconLoss::Mse,
            top_to_output: false,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 128,
            lr: 2e-4,
            weight_decay: 0.0,
            log_every: 10,
        }
    }
}

impl Default for PosthocConfig {
    fn default() -> Self {
        Self {
            axes: vec![0, 1],
            epochs: 10,
            batch_size: 32,
            seeds: 1,
        }
    }
}

impl Default for CapacityConfig {
    fn default() -> Self {
        Self {
            num_codes: vec![32, 128, 512],
            num_books: vec![1, 3, 5, 10],
        }
    }
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            num_codes: vec![128],
            num_books: vec![1, 3, 5],
            seeds: 1,
            latent_channels: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: &str| Err(CliError::Config(m.to_string()));
        match self.data.source {
            DataSource::Synthetic => self
                .data
                .synthetic
                .validate()
                .map_err(|e| CliError::Config(format!("data.synthetic: {e}")))?,
            DataSource::Files if self.data.files.is_none() => {
                return bad("data.files is required when data.source = \"files\"")
            }
            DataSource::Files => {}
        }
        let q = &self.quantizer;
        if q.num_books == 0 || q.code_dim == 0 || q.num_codes.is_empty() || q.num_codes.contains(&0) {
            return bad("quantizer.num_books, quantizer.code_dim and every quantizer.num_codes entry must be positive");
        }
        if !(q.gamma > 0.0 && q.gamma < 1.0) {
            return bad("quantizer.gamma must lie in (0, 1)");
        }
        if !(q.epsilon > 0.0 && q.beta > 0.0) {
            return bad("quantizer.epsilon and quantizer.beta must be positive");
        }
        if !(0.0..=1.0).contains(&q.dead_code_fraction) {
            return bad("quantizer.dead_code_fraction must lie in [0, 1]");
        }
        if self.model.num_levels == 0 || self.model.width == 0 {
            return bad("model.num_levels and model.width must be positive");
        }
        let t = &self.train;
        if t.batch_size == 0 || t.log_every == 0 {
            return bad("train.batch_size and train.log_every must be positive");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || t.weight_decay < 0.0 {
            return bad("train.lr must be positive and train.weight_decay non-negative");
        }
        let p = &self.posthoc;
        if p.axes.is_empty() || p.epochs == 0 || p.batch_size == 0 || p.seeds == 0 {
            return bad("posthoc.axes must be non-empty and posthoc.epochs, batch_size, seeds positive");
        }
        let c = &self.capacity;
        if c.num_codes.is_empty() || c.num_books.is_empty() || c.num_codes.contains(&0) || c.num_books.contains(&0) {
            return bad("capacity.num_codes and capacity.num_books must be non-empty lists of positive integers");
        }
        let a = &self.ablate;
        if a.num_codes.is_empty()
            || a.num_books.is_empty()
            || a.num_codes.contains(&0)
            || a.num_books.contains(&0)
            || a.seeds == 0
        {
            return bad(
                "ablate.num_codes and ablate.num_books must be non-empty positive lists and ablate.seeds positive",
            );
        }
        if let Some(width) = a.latent_channels {
            if let Some(m) = a.num_books.iter().find(|&&m| width % m != 0) {
                return Err(CliError::Config(format!(
                    "ablate.latent_channels = {width} is not divisible by num_books = {m}"
                )));
            }
        }
        Ok(())
    }

    /// Autoencoder settings for samples of shape `input_shape`.
    pub fn dqae(&self, input_shape: &[usize], seed: u64) -> CliResult<DqaeConfig> {
        let q = &self.quantizer;
        let n = self.model.num_levels;
        let num_codes = match q.num_codes.len() {
            1 => vec![q.num_codes[0]; n],
            len if len == n => q.num_codes.clone(),
            len => {
                return Err(CliError::Config(format!(
                    "quantizer.num_codes lists {len} values but model.num_levels is {n}"
                )))
            }
        };
        let cfg = DqaeConfig {
            input_shape: input_shape.to_vec(),
            num_levels: n,
            num_codes,
            num_books: q.num_books,
            code_dim: q.code_dim,
            width: self.model.width,
            beta: q.beta,
            gamma: q.gamma,
            epsilon: q.epsilon,
            ema: q.ema,
            dead_code: self.dead_code(),
            loss: self.model.loss,
            top_to_output: self.model.top_to_output,
            optimizer: AdamWConfig {
                lr: self.train.lr,
                weight_decay: self.train.weight_decay,
                ..AdamWConfig::default()
            },
            seed,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn dead_code(&self) -> DeadCodePolicy {
        DeadCodePolicy {
            fraction: self.quantizer.dead_code_fraction,
            interval: self.quantizer.dead_code_interval,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.quantizer.beta, 0.25);
        assert_eq!(cfg.quantizer.code_dim, 64);
        assert_eq!(cfg.train.batch_size, 128);
        assert_eq!(cfg.train.lr, 2e-4);
    }

    #[test]
    fn echoed_config_parses_back_identically() {
        let mut cfg = ExperimentConfig {
            seed: 7,
            ..ExperimentConfig::default()
        };
        cfg.quantizer.num_codes = vec![64];
        cfg.ablate.latent_channels = Some(30);
        cfg.data.synthetic.rectify = true;
        let back = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            "sede = 1",
            "[train]\nstep = 5",
            "[data.synthetic]\nrho = 0.5",
            "[nonsense]",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}");
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::parse("[quantizer]\ngamma = 1.0").is_err());
        assert!(ExperimentConfig::parse("[data]\nsource = \"files\"").is_err());
        assert!(ExperimentConfig::parse("[ablate]\nnum_books = [1, 3]\nlatent_channels = 10").is_err());
    }

    #[test]
    fn single_code_count_applies_to_every_level() {
        let mut cfg = ExperimentConfig::default();
        cfg.quantizer.num_codes = vec![32];
        cfg.quantizer.code_dim = 4;
        let dq = cfg.dqae(&[3, 16, 16], 1).unwrap();
        assert_eq!(dq.num_codes, vec![32, 32]);
        cfg.quantizer.num_codes = vec![32, 16, 8];
        assert!(cfg.dqae(&[3, 16, 16], 1).is_err());
    }
}
