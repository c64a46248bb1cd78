//! Run configuration: one TOML file covering every module's knobs.
//!
//! Unknown keys are rejected at every level. Relative paths in `[data]` and
//! `[va_predictor]` are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsConfig;
use crate::midi::DEFAULT_STEPS_PER_BEAT;
use crate::model::{ModelConfig, Strategy, VaPredictorConfig};
use crate::training::{PretrainConfig, TrainConfig, VaLossMode};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error in {file}: {msg}")]
    Parse { file: String, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config I/O: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerSection {
    pub steps_per_beat: u32,
}

impl Default for TokenizerSection {
    fn default() -> Self {
        Self { steps_per_beat: DEFAULT_STEPS_PER_BEAT }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaPredictorSection {
    pub epochs: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub hidden: [usize; 2],
    /// Saved predictor weights; when absent, commands that need a predictor
    /// pretrain one on the MIDI catalog.
    pub weights: Option<PathBuf>,
}

impl Default for VaPredictorSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self { epochs: p.epochs, lr: p.lr, holdout_fraction: p.holdout_fraction, hidden: p.hidden, weights: None }
    }
}

impl VaPredictorSection {
    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig { epochs: self.epochs, lr: self.lr, holdout_fraction: self.holdout_fraction, hidden: self.hidden }
    }

    pub fn predictor(&self) -> VaPredictorConfig {
        VaPredictorConfig { hidden: self.hidden }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairingSection {
    /// `[train, test, val]`; unsplit manifests train on every pair.
    pub split: Option<[usize; 3]>,
    /// Range the catalogs' raw VA values are given on.
    pub source_range: [f64; 2],
}

impl Default for PairingSection {
    fn default() -> Self {
        Self { split: None, source_range: [1.0, 9.0] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub midi_catalog: Option<PathBuf>,
    pub image_catalog: Option<PathBuf>,
    pub dictionary: Option<PathBuf>,
    /// Existing pair manifest; when absent, pairs are built from the catalogs.
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    #[default]
    Greedy,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub max_len: usize,
    pub strategy: StrategyKind,
    pub temperature: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { max_len: ModelConfig::default().max_len, strategy: StrategyKind::Greedy, temperature: 1.0 }
    }
}

impl GenerateSection {
    pub fn strategy(&self) -> Strategy {
        match self.strategy {
            StrategyKind::Greedy => Strategy::Greedy,
            StrategyKind::Temperature => Strategy::Temperature(self.temperature),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub encoder_blocks: Vec<usize>,
    pub decoder_blocks: Vec<usize>,
    /// VA loss settings to sweep; `true` trains with `va_mode`.
    pub va_loss: Vec<bool>,
    pub va_mode: VaLossMode,
    /// Overrides `train.epochs` for every variant.
    pub epochs: Option<usize>,
    /// Images generated from per variant.
    pub eval_images: usize,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            encoder_blocks: vec![2, 3, 4],
            decoder_blocks: vec![0, 2, 3],
            va_loss: vec![true, false],
            va_mode: VaLossMode::Soft,
            epochs: None,
            eval_images: 4,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tokenizer: TokenizerSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub va_predictor: VaPredictorSection,
    pub metrics: MetricsConfig,
    pub pairing: PairingSection,
    pub data: DataSection,
    pub generate: GenerateSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, file: &str) -> Result<Self, ConfigError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ConfigError::Parse { file: file.to_string(), msg: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, validates and resolves relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text, &path.display().to_string())?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(x) = p {
                if x.is_relative() {
                    *x = base.join(&*x);
                }
            }
        };
        fix(&mut self.data.midi_catalog);
        fix(&mut self.data.image_catalog);
        fix(&mut self.data.dictionary);
        fix(&mut self.data.manifest);
        fix(&mut self.va_predictor.weights);
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.tokenizer.steps_per_beat == 0 {
            return bad("tokenizer.steps_per_beat must be positive".into());
        }
        if self.generate.max_len < 2 || self.generate.max_len > self.model.max_len {
            return bad(format!(
                "generate.max_len must lie in 2..={} (model.max_len), got {}",
                self.model.max_len, self.generate.max_len
            ));
        }
        if self.generate.strategy == StrategyKind::Temperature
            && !(self.generate.temperature > 0.0 && self.generate.temperature.is_finite())
        {
            return bad(format!("generate.temperature must be positive, got {}", self.generate.temperature));
        }
        let [lo, hi] = self.pairing.source_range;
        if !(lo < hi) {
            return bad(format!("pairing.source_range [{lo}, {hi}] is degenerate"));
        }
        if self.va_predictor.hidden.contains(&0) || !(self.va_predictor.lr > 0.0) || self.va_predictor.epochs == 0 {
            return bad("va_predictor needs positive hidden widths, lr and epochs".into());
        }
        if self.metrics.steps_per_beat == 0 || self.metrics.steps_per_measure == 0 {
            return bad("metrics grid sizes must be positive".into());
        }
        let a = &self.ablation;
        if a.encoder_blocks.is_empty() || a.decoder_blocks.is_empty() || a.va_loss.is_empty() {
            return bad("ablation lists must be non-empty".into());
        }
        if a.va_mode == VaLossMode::Off {
            return bad("ablation.va_mode must be hard or soft".into());
        }
        if a.epochs == Some(0) || a.eval_images == 0 {
            return bad("ablation.epochs and ablation.eval_images must be positive".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Writes the effective configuration to `dir/effective_config.toml`.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf, ConfigError> {
        std::fs::create_dir_all(dir).map_err(|e| ConfigError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join("effective_config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    pub fn source_range(&self) -> (f64, f64) {
        (self.pairing.source_range[0], self.pairing.source_range[1])
    }
}
