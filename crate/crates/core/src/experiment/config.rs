use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::coref::{FullLinkEdges, LinkMode};
use crate::corpus::{GeneratorConfig, Split, SplitSizes};
use crate::error::{ensure, Error, Result};
use crate::head_analysis::DEFAULT_COV_THRESHOLD;
use crate::injection::HeadSelection;
use crate::model::{Bank, ModelConfig};
use crate::training::TrainConfig;

/// Environment variable that replaces `output_dir`.
pub const OUTDIR_ENV: &str = "HEADLAB_OUTDIR";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Generator seed; ignored when `path` is set.
    pub seed: u64,
    pub sizes: SplitSizes,
    /// Existing JSONL corpus to copy instead of generating one.
    pub path: Option<PathBuf>,
}

impl CorpusConfig {
    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            seed: self.seed,
            sizes: self.sizes,
            ..GeneratorConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Heads pruned per layer.
    pub k: usize,
    pub cov_threshold: f64,
    /// Split whose samples define the importance expectation.
    pub score_split: Split,
    /// The scoring split is cut into this many shards, each scored as one
    /// run of the ensemble.
    pub score_shards: usize,
    /// Attention banks targeted by pruning plans.
    pub banks: Vec<Bank>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            k: 1,
            cov_threshold: DEFAULT_COV_THRESHOLD,
            score_split: Split::Validation,
            score_shards: 4,
            banks: Bank::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InjectionConfig {
    pub selections: Vec<HeadSelection>,
    pub link_modes: Vec<LinkMode>,
    /// Encoder layers `[lo, hi)`; the upper half when absent.
    pub layer_range: Option<(usize, usize)>,
    /// Injected heads per layer.
    pub k: usize,
    pub full_link_edges: FullLinkEdges,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            selections: vec![HeadSelection::Importance],
            link_modes: vec![LinkMode::Adjacent],
            layer_range: None,
            k: 1,
            full_link_edges: FullLinkEdges::AllPairs,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_size: 5,
            max_len: 48,
        }
    }
}

/// Everything one experiment run needs. Missing JSON fields take defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `vocab_size` is replaced by the size of the corpus vocabulary.
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub seeds: Vec<u64>,
    pub corpus: CorpusConfig,
    pub analysis: AnalysisConfig,
    pub injection: InjectionConfig,
    pub decode: DecodeConfig,
    pub output_dir: PathBuf,
    pub run_id: String,
}

/// A model small enough to train on one CPU core in about a minute.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        encoder_layers: 4,
        decoder_layers: 2,
        heads: 4,
        model_dim: 32,
        ffn_dim: 64,
        max_seq_len: 72,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn desk_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 3e-3,
        ..TrainConfig::default()
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: desk_model(),
            training: desk_training(),
            seeds: vec![1],
            corpus: CorpusConfig::default(),
            analysis: AnalysisConfig::default(),
            injection: InjectionConfig::default(),
            decode: DecodeConfig::default(),
            output_dir: PathBuf::from("runs"),
            run_id: "default".into(),
        }
    }
}

fn field(prefix: &str, e: Error) -> Error {
    match e {
        Error::Validation(msg) => Error::Validation(format!("{prefix}: {msg}")),
        other => other,
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; unknown fields are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Applies the output-directory environment override.
    pub fn apply_env(&mut self) {
        if let Some(dir) = std::env::var_os(OUTDIR_ENV).filter(|d| !d.is_empty()) {
            self.output_dir = PathBuf::from(dir);
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            !self.seeds.is_empty(),
            Validation,
            "seeds: at least one seed is required"
        );
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        ensure!(
            sorted.len() == self.seeds.len(),
            Validation,
            "seeds: duplicate seed"
        );
        self.model.validate().map_err(|e| field("model", e))?;
        self.training.validate().map_err(|e| field("training", e))?;
        for split in Split::ALL {
            ensure!(
                self.corpus.sizes.get(split) >= 1,
                Validation,
                "corpus.sizes.{split} must be >= 1"
            );
        }
        if let Some(p) = &self.corpus.path {
            ensure!(
                p.is_file(),
                Validation,
                "corpus.path {} does not exist",
                p.display()
            );
        }
        ensure!(
            self.analysis.k <= self.model.heads,
            Validation,
            "analysis.k {} exceeds model.heads {}",
            self.analysis.k,
            self.model.heads
        );
        ensure!(
            self.analysis.cov_threshold >= 0.0,
            Validation,
            "analysis.cov_threshold must be >= 0"
        );
        ensure!(
            self.analysis.score_shards >= 1,
            Validation,
            "analysis.score_shards must be >= 1"
        );
        ensure!(
            self.analysis.score_shards <= self.corpus.sizes.get(self.analysis.score_split),
            Validation,
            "analysis.score_shards exceeds the size of the {} split",
            self.analysis.score_split
        );
        ensure!(
            !self.analysis.banks.is_empty(),
            Validation,
            "analysis.banks must not be empty"
        );
        ensure!(
            !self.injection.selections.is_empty() && !self.injection.link_modes.is_empty(),
            Validation,
            "injection.selections and injection.link_modes must not be empty"
        );
        ensure!(
            self.injection.k >= 1 && self.injection.k <= self.model.heads,
            Validation,
            "injection.k must lie in 1..={}",
            self.model.heads
        );
        let (lo, hi) = self.layer_range();
        ensure!(
            lo < hi && hi <= self.model.encoder_layers,
            Validation,
            "injection.layer_range [{lo}, {hi}) is not within {} encoder layers",
            self.model.encoder_layers
        );
        ensure!(
            self.decode.beam_size >= 1,
            Validation,
            "decode.beam_size must be >= 1"
        );
        ensure!(
            self.decode.max_len >= 1,
            Validation,
            "decode.max_len must be >= 1"
        );
        ensure!(
            !self.run_id.is_empty() && !self.run_id.contains(['/', '\\']) && self.run_id != "..",
            Validation,
            "run_id must be a plain directory name"
        );
        Ok(())
    }

    pub fn layer_range(&self) -> (usize, usize) {
        self.injection
            .layer_range
            .unwrap_or_else(|| crate::injection::upper_half(self.model.encoder_layers))
    }

    /// `<output_dir>/<run_id>`.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}
