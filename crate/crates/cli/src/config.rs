//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use coopgen_core::data::synth::SplitSizes;
use coopgen_core::mcts::SearchParams;
use coopgen_core::training::TrainConfig;
use coopgen_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Bundled generator used by `make-data`.
    pub generator: String,
    /// Dataset directory; defaults to `<out_dir>/data`.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub oracle_train: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SplitSizes::default();
        Self {
            generator: "polarity2".into(),
            dir: None,
            train: s.train,
            validation: s.validation,
            test: s.test,
            oracle_train: s.oracle_train,
        }
    }
}

impl DataConfig {
    pub fn sizes(&self) -> SplitSizes {
        SplitSizes {
            train: self.train,
            validation: self.validation,
            test: self.test,
            oracle_train: self.oracle_train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Probe lengths for accuracy-vs-length curves.
    pub curve_lengths: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            curve_lengths: (1..=coopgen_core::data::L_MAX).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub families: Vec<String>,
    pub num_batches: usize,
    pub batch_size: usize,
    pub c_puct_sweep: Vec<f64>,
    /// Sequences per sweep point in the forward-pass accounting.
    pub accounting_sequences: usize,
    /// Withhold EOS so every profiled sequence runs to `max_length`.
    pub full_length: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            families: vec!["bi".into(), "uni".into(), "gedi".into()],
            num_batches: 10,
            batch_size: 30,
            c_puct_sweep: vec![3.0, 6.0, 15.0],
            accounting_sequences: 30,
            full_length: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub search: SearchParams,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out_dir().join("data"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir().join("models")
    }

    pub fn plots_dir(&self) -> PathBuf {
        self.out_dir().join("plots")
    }
}
