//! Strict JSON experiment configuration.

use std::path::{Path, PathBuf};

use fedval_core::autodiff::NestedMethod;
use fedval_core::consistency::Pairing;
use fedval_core::data::SynthSpec;
use fedval_core::dp::{PrivacyParams, TrainConfig};
use fedval_core::federation::PartitionStrategy;
use fedval_core::models::{Activation, Architecture, ConvBlock, ModelSpec, Pooling};
use fedval_core::valuation::{Metric, VogMode};
use serde::{Deserialize, Serialize};

use crate::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        test_labels: Option<PathBuf>,
    },
    CifarBin {
        train: Vec<PathBuf>,
        #[serde(default)]
        test: Vec<PathBuf>,
    },
    Synthetic(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_architecture")]
    pub architecture: Architecture,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_architecture() -> Architecture {
    Architecture::Cnn {
        blocks: vec![
            ConvBlock { channels: 16, kernel: 3, stride: 1 },
            ConvBlock { channels: 32, kernel: 3, stride: 1 },
        ],
        pooling: Pooling::Avg,
        head: Some(128),
    }
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: default_architecture(),
            activation: default_activation(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: [usize; 3], classes: usize) -> ModelSpec {
        ModelSpec {
            architecture: self.architecture.clone(),
            activation: self.activation,
            input_shape,
            classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: u32,
    pub lr: f64,
    pub sample_rate: f64,
    #[serde(default = "default_checkpoints")]
    pub checkpoints: usize,
}

fn default_checkpoints() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringSection {
    /// `sqrt(1/K)·Σ(S_t − μ)²` instead of the per-pixel standard deviation.
    pub vog_literal: bool,
    pub nested: NestedMethod,
    /// Score only the first `n` training samples.
    pub subset: Option<usize>,
}

impl Default for ScoringSection {
    fn default() -> Self {
        Self {
            vog_literal: false,
            nested: NestedMethod::Reverse,
            subset: None,
        }
    }
}

impl ScoringSection {
    pub fn vog_mode(&self) -> VogMode {
        if self.vog_literal {
            VogMode::Literal
        } else {
            VogMode::Std
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReleaseSection {
    pub metric: Metric,
    /// Per published scalar.
    pub epsilon: f64,
    pub bound: f64,
    pub cap: Option<f64>,
    /// ε of the variance query over the released metric; `None` skips it.
    pub variance_epsilon: Option<f64>,
    /// Share of the variance-query ε given to the noisy sum.
    pub variance_split: f64,
    /// Top-k ids listed from released scores.
    pub k: usize,
}

impl Default for ReleaseSection {
    fn default() -> Self {
        Self {
            metric: Metric::Vog,
            epsilon: 1.0,
            bound: 1.0,
            cap: None,
            variance_epsilon: Some(1.0),
            variance_split: 0.5,
            k: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub fraction: f64,
    pub warmup_epochs: u32,
    pub retrain_epochs: u32,
    /// Removal criteria, each retrained separately.
    pub metrics: Vec<Metric>,
    /// Also retrain after removing a seeded random subset.
    pub random_control: bool,
    /// Also retrain on the full set.
    pub baseline: bool,
    /// Also remove ground-truth atypical samples first (synthetic data only).
    pub oracle_control: bool,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            fraction: 0.25,
            warmup_epochs: 5,
            retrain_epochs: 15,
            metrics: Metric::ALL.to_vec(),
            random_control: true,
            baseline: true,
            oracle_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationSection {
    pub clients: usize,
    pub strategy: PartitionStrategy,
    pub rounds: u32,
    pub local_epochs: u32,
    pub pool: f64,
}

impl Default for FederationSection {
    fn default() -> Self {
        Self {
            clients: 5,
            strategy: PartitionStrategy::Dirichlet { alpha: 0.5 },
            rounds: 5,
            local_epochs: 1,
            pool: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CompareColumn {
    #[default]
    Normalized,
    Raw,
    /// Inputs are released-score CSVs.
    Released,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub a: PathBuf,
    pub b: PathBuf,
    #[serde(default = "default_setting_a")]
    pub setting_a: String,
    #[serde(default = "default_setting_b")]
    pub setting_b: String,
    #[serde(default = "default_metric")]
    pub metric: Metric,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub pairing: Pairing,
    #[serde(default)]
    pub column: CompareColumn,
}

fn default_setting_a() -> String {
    "a".into()
}

fn default_setting_b() -> String {
    "b".into()
}

fn default_metric() -> Metric {
    Metric::Vog
}

fn default_k() -> usize {
    25
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_metrics() -> Vec<Metric> {
    Metric::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Seed of dataset generation and the held-out split; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    pub dataset: DatasetConfig,
    /// Keep only the first `n` training samples.
    #[serde(default)]
    pub subset: Option<usize>,
    /// Held-out share, used when the dataset has no test files.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub model: ModelConfig,
    pub train: TrainSection,
    #[serde(default)]
    pub privacy: Option<PrivacyParams>,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<Metric>,
    #[serde(default)]
    pub scoring: ScoringSection,
    #[serde(default)]
    pub release: ReleaseSection,
    #[serde(default)]
    pub prune: PruneSection,
    #[serde(default)]
    pub federation: FederationSection,
    #[serde(default)]
    pub compare: Option<CompareSection>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epsilon: Option<f64>,
    pub metric: Option<Metric>,
    pub vog_literal: bool,
}

pub const DEFAULT_DELTA: f64 = 1e-5;
pub const DEFAULT_CLIP: f64 = 1.0;

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Parses `path`, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                fix(train_images);
                fix(train_labels);
                test_images.iter_mut().for_each(fix);
                test_labels.iter_mut().for_each(fix);
            }
            DatasetConfig::CifarBin { train, test } => {
                train.iter_mut().chain(test.iter_mut()).for_each(fix);
            }
            DatasetConfig::Synthetic(_) => {}
        }
        if let Some(c) = &mut self.compare {
            fix(&mut c.a);
            fix(&mut c.b);
        }
    }

    /// `--epsilon` replaces any configured noise multiplier so σ is calibrated.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.epsilon {
            let p = self.privacy.get_or_insert(PrivacyParams::with_epsilon(e, DEFAULT_DELTA, DEFAULT_CLIP));
            p.epsilon = Some(e);
            p.noise_multiplier = None;
        }
        if let Some(m) = o.metric {
            self.release.metric = m;
            self.prune.metrics = vec![m];
            if let Some(c) = &mut self.compare {
                c.metric = m;
            }
        }
        if o.vog_literal {
            self.scoring.vog_literal = true;
        }
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn train_config(&self, epochs: u32) -> TrainConfig {
        TrainConfig {
            epochs,
            lr: self.train.lr,
            sample_rate: self.train.sample_rate,
            checkpoints: self.train.checkpoints,
            privacy: self.privacy.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.train_config(self.train.epochs)
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.train.checkpoints < 2 && self.metrics.contains(&Metric::Vog) {
            return bad(format!("VoG needs checkpoints >= 2, got {}", self.train.checkpoints));
        }
        if !(0.0..=0.9).contains(&self.prune.fraction) {
            return bad(format!("prune fraction must lie in [0, 0.9], got {}", self.prune.fraction));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad(format!("test_fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        let r = &self.release;
        if !(r.epsilon > 0.0 && r.bound > 0.0) {
            return bad("release epsilon and bound must be positive".into());
        }
        if !(r.variance_split > 0.0 && r.variance_split < 1.0) {
            return bad(format!("variance_split must lie in (0, 1), got {}", r.variance_split));
        }
        if r.variance_epsilon.is_some_and(|e| !(e > 0.0)) {
            return bad("variance_epsilon must be positive".into());
        }
        if self.prune.oracle_control && !matches!(self.dataset, DatasetConfig::Synthetic(_)) {
            return bad("oracle_control needs a synthetic dataset".into());
        }
        if self.federation.clients == 0 {
            return bad("federation needs at least one client".into());
        }
        if !(self.federation.pool >= 0.0 && self.federation.pool.is_finite()) {
            return bad("reward pool must be non-negative".into());
        }
        let mut files: Vec<&Path> = Vec::new();
        match &self.dataset {
            DatasetConfig::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                if test_images.is_some() != test_labels.is_some() {
                    return bad("test_images and test_labels must be given together".into());
                }
                files.extend([train_images.as_path(), train_labels.as_path()]);
                files.extend(test_images.iter().chain(test_labels.iter()).map(PathBuf::as_path));
            }
            DatasetConfig::CifarBin { train, test } => {
                if train.is_empty() {
                    return bad("cifar_bin needs at least one train file".into());
                }
                files.extend(train.iter().chain(test.iter()).map(PathBuf::as_path));
            }
            DatasetConfig::Synthetic(s) => {
                if s.classes < 2 {
                    return bad("synthetic data needs at least 2 classes".into());
                }
            }
        }
        if let Some(c) = &self.compare {
            files.extend([c.a.as_path(), c.b.as_path()]);
        }
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return bad(format!("file not found: {}", missing.display()));
        }
        Ok(())
    }

    /// Canonical JSON of the effective configuration.
    pub fn canonical_json(&self) -> Result<String, PipelineError> {
        crate::report::canonical_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }
}
