//! Experiment configuration: a TOML key-value file where every key is
//! optional and falls back to the documented default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HamError, Result};
use crate::ham::{ConsolidationConfig, GroupingRule, SimilarityScope};
use crate::merging::{MergeAlgorithm, MergeParams};
use crate::optim::AdamWConfig;
use crate::tasks::StreamSpec;
use crate::trainer::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "HAM_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Grouping, pruning, concatenation and merging after every task.
    Ham,
    /// One adapter trained on every task in turn.
    NaiveFt,
    /// One independent adapter per task, merged with a baseline algorithm.
    PerTaskMerge,
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::Ham => "ham",
            Strategy::NaiveFt => "naive_ft",
            Strategy::PerTaskMerge => "per_task_merge",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub strategy: Strategy,
    pub merge: MergeAlgorithm,
    pub rank: usize,
    pub keep_fraction: f64,
    pub g_max: usize,
    pub tau_sim: f64,
    pub grouping: GroupingRule,
    pub similarity_scope: SimilarityScope,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub hidden: Vec<usize>,
    pub ties_trim: f64,
    pub ties_lambda: f64,
    pub dare_drop: f64,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub stream: StreamSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let merge = MergeParams::default();
        let opt = AdamWConfig::default();
        ExperimentConfig {
            strategy: Strategy::Ham,
            merge: MergeAlgorithm::Ham,
            rank: 16,
            keep_fraction: 0.6,
            g_max: 2,
            tau_sim: 0.3,
            grouping: GroupingRule::Similarity,
            similarity_scope: SimilarityScope::LastLayer,
            lr: opt.lr,
            batch_size: 64,
            epochs: 20,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            hidden: vec![64, 64],
            ties_trim: merge.ties_trim,
            ties_lambda: merge.ties_lambda,
            dare_drop: merge.dare_drop,
            seed: 0,
            output_dir: PathBuf::from("out"),
            stream: StreamSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| HamError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HamError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// `output_dir`, unless the environment overrides it.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUTPUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            seed: self.seed,
            ..self.stream.clone()
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer(),
            batch_size: self.batch_size,
            epochs: self.epochs,
            rank: self.rank,
        }
    }

    pub fn consolidation(&self) -> ConsolidationConfig {
        ConsolidationConfig {
            keep_fraction: self.keep_fraction,
            grouping: self.grouping,
            scope: self.similarity_scope,
        }
    }

    pub fn merge_params(&self) -> MergeParams {
        MergeParams {
            ties_trim: self.ties_trim,
            ties_lambda: self.ties_lambda,
            dare_drop: self.dare_drop,
            seed: self.seed,
        }
    }

    /// Rejects every out-of-range value before any compute happens.
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(HamError::Config(m));
        self.stream.validate()?;
        self.merge_params().validate()?;
        if self.rank == 0 {
            return err("rank must be at least 1".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return err("hidden must list at least one positive width".into());
        }
        let mut fan_in = self.stream.input_dim;
        for &w in &self.hidden {
            if self.rank > w.min(fan_in) {
                return err(format!("rank {} exceeds min({w}, {fan_in}) of an adapted layer", self.rank));
            }
            fan_in = w;
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return err(format!("keep_fraction must lie in (0, 1], got {}", self.keep_fraction));
        }
        if self.g_max == 0 {
            return err("g_max must be at least 1".into());
        }
        if !self.tau_sim.is_finite() {
            return err("tau_sim must be finite".into());
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return err("epochs must be at least 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err("weight_decay must be finite and non-negative".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return err(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return err("eps must be positive".into());
        }
        if self.strategy == Strategy::PerTaskMerge && self.merge == MergeAlgorithm::Ham {
            return err("per_task_merge needs a baseline merge algorithm (linear, ties or dare_ties)".into());
        }
        Ok(())
    }
}
