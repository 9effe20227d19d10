//! The JSON run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use somnus_core::dataset::{shhs_split_ratios, PreprocessConfig};
use somnus_core::dsp::FilterSpec;
use somnus_core::ingest::{ChannelAliases, ChannelRole, ConceptTable};
use somnus_core::model::{AggregatorConfig, ContextConfig, EncoderConfig, FeatureMode};
use somnus_core::synth::SynthConfig;
use somnus_core::train::TrainConfig;

use crate::error::CliError;

/// Environment variable that overrides `output_dir` (but not `--out`).
pub const OUTPUT_ROOT_ENV: &str = "SOMNUS_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub synth: SynthConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            synth: SynthConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Input locations and preprocessing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of `<id>.edf` / `<id>.xml` pairs. Defaults to `<output_dir>/raw`.
    pub raw_dir: Option<PathBuf>,
    /// Subject table. Defaults to `<raw_dir>/metadata.csv`.
    pub metadata: Option<PathBuf>,
    pub aliases: ChannelAliases,
    pub concepts: ConceptTable,
    pub common_rate_hz: f64,
    pub filters: BTreeMap<ChannelRole, FilterSpec>,
    pub max_edge_fraction: f64,
    pub overlap_min_s: f64,
    /// Train / val / test fractions.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let p = PreprocessConfig::default();
        Self {
            raw_dir: None,
            metadata: None,
            aliases: ChannelAliases::default(),
            concepts: ConceptTable::default(),
            common_rate_hz: p.common_rate_hz,
            filters: p.filters,
            max_edge_fraction: p.max_edge_fraction,
            overlap_min_s: p.overlap_min_s,
            split_ratios: shhs_split_ratios(),
            split_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            common_rate_hz: self.common_rate_hz,
            filters: self.filters.clone(),
            max_edge_fraction: self.max_edge_fraction,
            overlap_min_s: self.overlap_min_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub encoder: EncoderConfig,
    pub aggregator: AggregatorConfig,
    /// Context used by `train-aggregator` and `evaluate`.
    pub context: ContextConfig,
    pub feature_mode: FeatureMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            aggregator: AggregatorConfig::default(),
            context: ContextConfig::None,
            feature_mode: FeatureMode::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// The `stage` field of each section is ignored; subcommands set it.
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            stage1: TrainConfig::default(),
            stage2: TrainConfig {
                stage: 2,
                ..TrainConfig::default()
            },
        }
    }
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.data.split_seed = seed;
        self.train.stage1.seed = seed;
        self.train.stage2.seed = seed;
    }

    /// Applies `--out`, then the environment override, to `output_dir`.
    pub fn resolve_output(&mut self, out: Option<PathBuf>, env_root: Option<PathBuf>) {
        if let Some(p) = out.or(env_root) {
            self.output_dir = p;
        }
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.data.raw_dir.clone().unwrap_or_else(|| self.output_dir.join("raw"))
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.data.metadata.clone().unwrap_or_else(|| self.raw_dir().join("metadata.csv"))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg = |e: String| CliError::Config(e);
        let spe = self.data.preprocess().samples_per_epoch().map_err(|e| cfg(e.to_string()))?;
        let enc = &self.model.encoder;
        enc.validate().map_err(|e| cfg(e.to_string()))?;
        if enc.samples_per_epoch != spe {
            return Err(cfg(format!(
                "encoder.samples_per_epoch is {} but common_rate_hz {} gives {spe}",
                enc.samples_per_epoch, self.data.common_rate_hz
            )));
        }
        if enc.n_channels != somnus_core::dataset::N_CHANNELS {
            return Err(cfg(format!("encoder.n_channels must be {}", somnus_core::dataset::N_CHANNELS)));
        }
        self.model.aggregator.validate().map_err(|e| cfg(e.to_string()))?;
        for (name, t) in [("stage1", &self.train.stage1), ("stage2", &self.train.stage2)] {
            t.validate().map_err(|e| cfg(format!("train.{name}: {e}")))?;
        }
        self.synth.validate().map_err(|e| cfg(e.to_string()))?;
        let r = self.data.split_ratios;
        if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(cfg(format!("split_ratios must be non-negative and sum to 1, got {r:?}")));
        }
        Ok(())
    }
}
