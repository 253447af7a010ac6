//! TOML run configuration for `embed`. Every key has a default and unknown
//! keys are rejected, so a misspelt loss weight fails loudly.

use std::path::{Path, PathBuf};

use more_core::backbone::{DEFAULT_D_MODEL, DEFAULT_FFN_DIM, DEFAULT_HEADS, DEFAULT_LAYERS, DEFAULT_TOKENS};
use more_core::doublet::DoubletConfig;
use more_core::model::DEFAULT_DEPTH;
use more_core::pipeline::{EmbedConfig, ModelConfig, PrepConfig};
use more_core::prep::{DEFAULT_MAX_PCT_MT, DEFAULT_MIN_GENES, DEFAULT_TARGET_SUM};
use more_core::train::{LossWeights, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    /// Overridden by `--seed`; 0 when neither is given.
    pub seed: Option<u64>,
    pub data: DataConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub losses: LossSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// MatrixMarket counts of modality 0; paths are relative to the config.
    pub matrix: Option<PathBuf>,
    pub genes: Option<PathBuf>,
    pub barcodes: Option<PathBuf>,
    /// TSV with `barcode`, `batch` and optional `label`.
    pub metadata: Option<PathBuf>,
    /// Matrix files are stored cells × genes.
    pub transpose: bool,
    /// Further modalities, matched to modality 0 by barcode.
    pub extra_modalities: Vec<ModalityFiles>,
    /// Generate counts instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
    pub min_genes: usize,
    pub max_pct_mt: f64,
    pub target_sum: f64,
    pub score_doublets: bool,
    pub remove_doublets: bool,
    pub doublet_rate: f64,
    pub doublet_sim_ratio: f64,
    pub doublet_k: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let d = DoubletConfig::default();
        Self {
            matrix: None,
            genes: None,
            barcodes: None,
            metadata: None,
            transpose: false,
            extra_modalities: Vec::new(),
            synthetic: None,
            min_genes: DEFAULT_MIN_GENES,
            max_pct_mt: DEFAULT_MAX_PCT_MT,
            target_sum: DEFAULT_TARGET_SUM,
            score_doublets: false,
            remove_doublets: false,
            doublet_rate: d.rho,
            doublet_sim_ratio: d.r,
            doublet_k: d.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModalityFiles {
    pub matrix: PathBuf,
    pub genes: PathBuf,
    pub barcodes: PathBuf,
    #[serde(default)]
    pub transpose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub cells: usize,
    pub genes: usize,
    pub types: usize,
    pub batches: usize,
    /// Heterotypic sum-doublets appended to the singlets (unlabeled).
    pub doublets: usize,
    pub batch_effect_sd: f64,
    pub marker_fold: f64,
    pub depth: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            cells: 1000,
            genes: 500,
            types: 3,
            batches: 2,
            doublets: 0,
            batch_effect_sd: 0.5,
            marker_fold: 6.0,
            depth: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub tokens: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Refinement steps T.
    pub depth: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            tokens: DEFAULT_TOKENS,
            d_model: DEFAULT_D_MODEL,
            layers: DEFAULT_LAYERS,
            heads: DEFAULT_HEADS,
            ffn_dim: DEFAULT_FFN_DIM,
            depth: DEFAULT_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            minibatch: t.minibatch,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_ce: f64,
    pub lambda_supcon: f64,
    pub lambda_align: f64,
    pub lambda_var: f64,
    pub lambda_mse: f64,
    pub tau: f64,
    pub mask_rate: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_ce: w.lambda_ce,
            lambda_supcon: w.lambda_supcon,
            lambda_align: w.lambda_align,
            lambda_var: w.lambda_var,
            lambda_mse: w.lambda_mse,
            tau: w.tau,
            mask_rate: w.mask_rate,
        }
    }
}

impl Config {
    pub fn parse(text: &str, path: &Path) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn embed_config(&self, seed: u64) -> EmbedConfig {
        let (m, t, l) = (&self.model, &self.train, &self.losses);
        EmbedConfig {
            model: ModelConfig {
                n_tokens: m.tokens,
                d_model: m.d_model,
                n_layers: m.layers,
                n_heads: m.heads,
                ffn_dim: m.ffn_dim,
                depth: m.depth,
            },
            train: TrainConfig {
                epochs: t.epochs,
                minibatch: t.minibatch,
                learning_rate: t.learning_rate,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                seed,
                depth: m.depth,
            },
            losses: LossWeights {
                lambda_ce: l.lambda_ce,
                lambda_supcon: l.lambda_supcon,
                lambda_align: l.lambda_align,
                lambda_var: l.lambda_var,
                lambda_mse: l.lambda_mse,
                tau: l.tau,
                mask_rate: l.mask_rate,
            },
            seed,
        }
    }

    pub fn prep_config(&self, seed: u64) -> PrepConfig {
        let d = &self.data;
        PrepConfig {
            min_genes: d.min_genes,
            max_pct_mt: d.max_pct_mt,
            target_sum: d.target_sum,
            n_tokens: self.model.tokens,
            score_doublets: d.score_doublets,
            remove_doublets: d.remove_doublets,
            doublet: DoubletConfig {
                rho: d.doublet_rate,
                r: d.doublet_sim_ratio,
                k: d.doublet_k,
                target_sum: d.target_sum,
                seed,
                ..DoubletConfig::default()
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_takes_defaults() {
        let c = Config::parse("", Path::new("x.toml")).unwrap();
        assert_eq!(c, Config::default());
        let e = c.embed_config(3);
        assert_eq!(e.losses, LossWeights::default());
        assert_eq!(e.model, ModelConfig::default());
        assert_eq!(e.train, TrainConfig { seed: 3, ..TrainConfig::default() });
    }

    #[test]
    fn unknown_keys_are_errors() {
        let err = Config::parse("[losses]\nlambda_sup = 1.0\n", Path::new("x.toml")).unwrap_err();
        assert!(err.to_string().contains("lambda_sup"), "{err}");
        assert!(Config::parse("[modle]\n", Path::new("x.toml")).is_err());
        assert!(Config::parse("[data.synthetic]\ncell = 3\n", Path::new("x.toml")).is_err());
    }

    #[test]
    fn sections_parse() {
        let c = Config::parse(
            "seed = 4\n[data]\nmin_genes = 10\n[data.synthetic]\ncells = 50\n[model]\nd_model = 16\n[train]\nepochs = 2\n[losses]\nlambda_ce = 0.0\n",
            Path::new("x.toml"),
        )
        .unwrap();
        assert_eq!(c.seed, Some(4));
        assert_eq!(c.data.synthetic.as_ref().unwrap().cells, 50);
        assert_eq!(c.data.synthetic.as_ref().unwrap().genes, 500);
        assert_eq!(c.model.d_model, 16);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.losses.lambda_ce, 0.0);
        assert_eq!(c.losses.lambda_supcon, 0.5);
    }
}
