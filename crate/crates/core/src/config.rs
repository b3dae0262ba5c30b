//! Run configuration: one TOML file drives every command.
//!
//! Hyperparameter defaults are the architecture's standard configuration:
//! filter count 300 at width 2, 10 bilinear slices with a 300-dim output
//! layer, hidden 1000 with dropout 0.4, L2 0.01, 100 binning dimensions,
//! mean pooling. Settings with no standard value (the optimizer, a few
//! structural counts) carry desk-scale defaults and say so below.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::context::Pooling;
use crate::error::Error;
use crate::features::{AblationFlags, LdcDecomposition};
use crate::Result;

/// How the foreign embedding table gets into English space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentMethod {
    /// The table on disk is already aligned (e.g. CCA / MultiCCA vectors).
    #[default]
    PreAligned,
    /// Fit a least-squares projection on the dictionary file.
    Ls,
}

/// Input and output locations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: PathBuf,
    /// Word-embedding table per language code.
    pub embeddings: BTreeMap<String, PathBuf>,
    pub dictionary: PathBuf,
    pub interlang: PathBuf,
    pub train_queries: PathBuf,
    pub dev_queries: PathBuf,
    pub queries: PathBuf,
    pub index_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub page_embeddings: PathBuf,
    pub decisions: PathBuf,
}

/// Model and trainer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// CNN filter maps (also the shared context/page vector size).
    pub context_dim: usize,
    /// CNN filter width.
    pub cnn_width: usize,
    /// LSTM hidden size (no standard value; tune per dataset).
    pub lstm_hidden: usize,
    /// Bilinear tensor slices.
    pub ntn_slices: usize,
    /// Fine-grained pathway output size.
    pub fine_out: usize,
    /// Binning layer dimensions.
    pub mpbl_bins: usize,
    /// Cosine reweighting perspectives (no standard value).
    pub mpcm_perspectives: usize,
    /// Composition filters per width; output is 4x this (no standard value).
    pub ldc_filters_per_width: usize,
    pub ldc_decomposition: LdcDecomposition,
    /// Classifier hidden layer size.
    pub hidden: usize,
    /// Dropout rate on the hidden layer at train time.
    pub dropout: f64,
    /// L2 regularization coefficient.
    pub l2: f64,
    /// Learning rate (no standard value; tune per dataset).
    pub lr: f64,
    /// Minibatch size (no standard value).
    pub batch_size: usize,
    /// Maximum training epochs (no standard value).
    pub epochs: usize,
    /// Negatives per positive in training-set construction.
    pub negative_ratio: usize,
    pub pooling: Pooling,
    /// Update English word vectors during training (monolingual runs only).
    pub update_word_embeddings: bool,
    /// Stop early once dev accuracy reaches this value.
    pub early_stop_dev_acc: f64,
    /// Also append the raw cosines to the within-language group.
    pub include_raw_cosines: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            context_dim: 300,
            cnn_width: 2,
            lstm_hidden: 32,
            ntn_slices: 10,
            fine_out: 300,
            mpbl_bins: 100,
            mpcm_perspectives: 20,
            ldc_filters_per_width: 25,
            ldc_decomposition: LdcDecomposition::Linear,
            hidden: 1000,
            dropout: 0.4,
            l2: 0.01,
            lr: 0.01,
            batch_size: 32,
            epochs: 20,
            negative_ratio: 5,
            pooling: Pooling::Mean,
            update_word_embeddings: false,
            early_stop_dev_acc: 0.999,
            include_raw_cosines: false,
        }
    }
}

/// Everything a run needs; the CLI loads this from TOML and applies flag
/// and environment overrides on top.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Candidates retrieved per mention.
    pub k: usize,
    /// NIL threshold on the winning probability.
    pub tau: f64,
    pub alignment: AlignmentMethod,
    pub paths: Paths,
    pub hyper: Hyperparams,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            k: 20,
            tau: 0.2,
            alignment: AlignmentMethod::default(),
            paths: Paths::default(),
            hyper: Hyperparams::default(),
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{display}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.hyper.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.hyper.dropout
            )));
        }
        if self.hyper.lr < 0.0 {
            return Err(Error::Config("lr must be non-negative".into()));
        }
        if self.hyper.batch_size == 0 || self.hyper.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be positive".into()));
        }
        if self.hyper.mpbl_bins < 2 {
            return Err(Error::Config("mpbl_bins must be at least 2".into()));
        }
        Ok(())
    }
}
