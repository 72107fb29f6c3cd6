//! Experiment configuration.
//!
//! A single TOML document with one section per stage. Every field has a
//! desk-scale default so partial files are accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// How percentile thresholds are computed over the two partitions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPolicy {
    /// One threshold per partition (backbone, decoder).
    #[default]
    Independent,
    /// A single threshold over the concatenated scaling factors.
    Unified,
}

impl std::fmt::Display for ThresholdPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThresholdPolicy::Independent => f.write_str("independent"),
            ThresholdPolicy::Unified => f.write_str("unified"),
        }
    }
}

impl std::str::FromStr for ThresholdPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(ThresholdPolicy::Independent),
            "unified" => Ok(ThresholdPolicy::Unified),
            other => Err(Error::Parse(format!("unknown threshold policy `{other}`"))),
        }
    }
}

/// Which backbone copy supplies the backbone scaling factors at pruning time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GammaSource {
    /// The classification-trained copy `w1`.
    #[default]
    W1,
    /// Elementwise mean of the `w1` and `w3` scales (analysis only).
    MeanW1W3,
}

/// Desk network shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    /// Width of the stem and first residual block; later blocks double it once.
    pub width: usize,
    /// Number of residual blocks.
    pub depth: usize,
    pub decoder_width: usize,
    pub num_classes: usize,
    pub seg_classes: usize,
    pub seg_head_prunable: bool,
    /// Initial batch-norm scale.
    pub bn_init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 3,
            image_size: 16,
            width: 8,
            depth: 2,
            decoder_width: 8,
            num_classes: 10,
            seg_classes: 4,
            seg_head_prunable: false,
            bn_init_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub cls_train: usize,
    pub cls_val: usize,
    pub seg_train: usize,
    pub seg_val: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            cls_train: 1000,
            cls_val: 500,
            seg_train: 400,
            seg_val: 200,
        }
    }
}

/// SGD budget for one training stage or sub-problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Schedule {
    pub const fn new(epochs: usize, lr: f64, batch_size: usize) -> Self {
        Schedule {
            epochs,
            lr,
            batch_size,
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{name}.batch_size must be positive")));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("{name}.lr must be finite and >= 0")));
        }
        Ok(())
    }
}

/// Augmented-Lagrangian sparse training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SparseConfig {
    /// Weight of the segmentation loss relative to classification.
    pub lambda_tradeoff: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Penalty growth factor per round, `> 1`.
    pub rho: f64,
    pub mu0: f64,
    pub mu_max: f64,
    pub rounds: usize,
    pub w1: Schedule,
    pub w2: Schedule,
    pub w3: Schedule,
    /// Stop once `|w1 - w3| / |w1|` drops below this value.
    pub early_stop_tol: Option<f64>,
    pub gamma_source: GammaSource,
}

impl Default for SparseConfig {
    fn default() -> Self {
        SparseConfig {
            lambda_tradeoff: 1.0,
            alpha1: 1e-3,
            alpha2: 1e-3,
            rho: 1.5,
            mu0: 1.0,
            mu_max: 10.0,
            rounds: 5,
            w1: Schedule::new(1, 0.05, 16),
            w2: Schedule::new(1, 0.05, 8),
            w3: Schedule::new(1, 0.05, 8),
            early_stop_tol: None,
            gamma_source: GammaSource::W1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    /// Percentage of prunable channels removed, in (0, 100).
    pub percentile: f64,
    pub policy: ThresholdPolicy,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            percentile: 50.0,
            policy: ThresholdPolicy::Independent,
        }
    }
}

impl PruneConfig {
    /// Converts a keep-fraction label (0.75x, 0.5x) to the pruned percentile.
    pub fn percentile_from_keep_fraction(keep: f64) -> Result<f64> {
        if !(keep > 0.0 && keep < 1.0) {
            return Err(Error::Config(format!(
                "keep fraction must lie in (0, 1), got {keep}"
            )));
        }
        Ok((1.0 - keep) * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub classification: Schedule,
    pub segmentation: Schedule,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            classification: Schedule::new(3, 0.05, 16),
            segmentation: Schedule::new(10, 0.05, 8),
        }
    }
}

/// Single-task slimming baseline: L1 on every prunable scale, segmentation data only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlimmingConfig {
    pub alpha: f64,
    pub schedule: Schedule,
}

impl Default for SlimmingConfig {
    fn default() -> Self {
        SlimmingConfig {
            alpha: 1e-3,
            schedule: Schedule::new(10, 0.05, 8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub latency_runs: usize,
    pub latency_batch: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            latency_runs: 20,
            latency_batch: 8,
        }
    }
}

/// All hyperparameters of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MtpConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: Schedule,
    pub segmentation: Schedule,
    pub sparse: SparseConfig,
    pub prune: PruneConfig,
    pub finetune: FinetuneConfig,
    pub slimming: SlimmingConfig,
    pub profile: ProfileConfig,
}

impl Default for MtpConfig {
    fn default() -> Self {
        MtpConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: Schedule::new(10, 0.1, 16),
            segmentation: Schedule::new(20, 0.1, 8),
            sparse: SparseConfig::default(),
            prune: PruneConfig::default(),
            finetune: FinetuneConfig::default(),
            slimming: SlimmingConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

impl MtpConfig {
    /// Tiny budgets for smoke runs.
    pub fn smoke() -> Self {
        let mut cfg = MtpConfig::default();
        cfg.data = DataConfig {
            cls_train: 64,
            cls_val: 32,
            seg_train: 32,
            seg_val: 16,
        };
        cfg.pretrain.epochs = 1;
        cfg.segmentation.epochs = 1;
        cfg.sparse.rounds = 2;
        cfg.finetune.classification.epochs = 1;
        cfg.finetune.segmentation.epochs = 1;
        cfg.slimming.schedule.epochs = 1;
        cfg.profile.latency_runs = 5;
        cfg.profile.latency_batch = 2;
        cfg
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: MtpConfig =
            toml::from_str(text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks the invariants: `rho > 1`, `0 < p < 100`, `mu0 <= mu_max`, and so on.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.width == 0 || m.depth == 0 || m.decoder_width == 0 {
            return Err(Error::Config("width, depth and decoder_width must be positive".into()));
        }
        if m.in_channels == 0 || m.image_size == 0 {
            return Err(Error::Config("in_channels and image_size must be positive".into()));
        }
        if m.num_classes < 2 || m.seg_classes < 2 {
            return Err(Error::Config("both heads need at least two classes".into()));
        }
        let s = &self.sparse;
        if !(s.lambda_tradeoff > 0.0) {
            return Err(Error::Config("lambda_tradeoff must be > 0".into()));
        }
        if !(s.alpha1 >= 0.0 && s.alpha2 >= 0.0 && self.slimming.alpha >= 0.0) {
            return Err(Error::Config("alpha values must be >= 0".into()));
        }
        if !(s.rho > 1.0) {
            return Err(Error::Config(format!("rho must be > 1, got {}", s.rho)));
        }
        if !(s.mu0 > 0.0) {
            return Err(Error::Config("mu0 must be > 0".into()));
        }
        if !(s.mu0 <= s.mu_max) {
            return Err(Error::Config("mu0 must not exceed mu_max".into()));
        }
        let p = self.prune.percentile;
        if !(p > 0.0 && p < 100.0) {
            return Err(Error::Config(format!("percentile must lie in (0, 100), got {p}")));
        }
        self.pretrain.check("pretrain")?;
        self.segmentation.check("segmentation")?;
        s.w1.check("sparse.w1")?;
        s.w2.check("sparse.w2")?;
        s.w3.check("sparse.w3")?;
        self.finetune.classification.check("finetune.classification")?;
        self.finetune.segmentation.check("finetune.segmentation")?;
        self.slimming.schedule.check("slimming.schedule")?;
        Ok(())
    }

    /// Short stable digest of the full configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }
}
