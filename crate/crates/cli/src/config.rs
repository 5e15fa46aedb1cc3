//! Run configuration: one TOML or JSON file, every section optional.

use std::path::Path;

use mupod_core::baselines::{ConcatLstmConfig, TransformerConfig};
use mupod_core::claims::{StudyWindow, MIN_ACTIVE_MONTHS};
use mupod_core::encoder::{MupodConfig, Pair};
use mupod_core::evaluation::DEFAULT_REPEATS;
use mupod_core::representation::PretrainConfig;
use mupod_core::synthetic::GeneratorConfig;
use mupod_core::training::{SearchGrid, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub window: StudyWindow,
    pub min_entries: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            window: StudyWindow::default(),
            min_entries: MIN_ACTIVE_MONTHS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub trials: usize,
    pub grid: SearchGrid,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            grid: SearchGrid::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    pub threshold: f64,
    /// Positive:negative ratios for the imbalanced harness; empty skips it.
    pub ratios: Vec<f64>,
    pub repeats: usize,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            ratios: vec![],
            repeats: DEFAULT_REPEATS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub layer: usize,
    pub pair: Pair,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self { layer: 0, pair: Pair::MD }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub preprocess: PreprocessConfig,
    pub pretrain: PretrainConfig,
    pub mupod: MupodConfig,
    pub concat_lstm: ConcatLstmConfig,
    pub transformer: TransformerConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
    pub evaluate: EvaluateConfig,
    pub explain: ExplainConfig,
}

/// Purposes that draw their own seed from the master seed.
#[derive(Debug, Clone, Copy)]
pub enum Purpose {
    Generate = 1,
    Split = 2,
    PretrainMed = 3,
    PretrainDiag = 4,
    Init = 5,
    Train = 6,
    Search = 7,
    Evaluate = 8,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
        if is_toml {
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        } else {
            serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        }
    }

    /// SplitMix64 of the master seed and the purpose tag.
    pub fn seed_for(&self, purpose: Purpose) -> u64 {
        let mut z = self.seed.wrapping_add((purpose as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}
