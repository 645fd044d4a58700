use std::fs;
use std::path::{Path, PathBuf};

use dynprune_core::data::{CsvSchema, ShiftSpec};
use dynprune_core::model::Activation;
use dynprune_core::trainer::{Optimizer, SelectionMode, TrainConfig};
use dynprune_core::ScorerKind;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Synthetic source/target pair: a Gaussian mixture for pretraining and an
/// affinely shifted draw from the same mixture for pruned finetuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratedData {
    pub seed: u64,
    pub n_features: usize,
    pub n_classes: usize,
    pub source_samples: usize,
    pub target_samples: usize,
    /// Per-coordinate standard deviation of the class means.
    pub class_separation: f64,
    pub class_cov_scale: f64,
    /// Per-coordinate standard deviation of the target mean shift.
    pub mean_shift_scale: f64,
    pub scale_shift: f64,
    pub label_noise: f64,
    pub class_prior_target: Option<Vec<f64>>,
}

impl Default for GeneratedData {
    fn default() -> Self {
        Self {
            seed: 0,
            n_features: 20,
            n_classes: 4,
            source_samples: 20_000,
            target_samples: 4_000,
            class_separation: 0.5,
            class_cov_scale: 1.0,
            mean_shift_scale: 2.0,
            scale_shift: 1.5,
            label_noise: 0.0,
            class_prior_target: None,
        }
    }
}

impl GeneratedData {
    /// Derived seeds for each random stage of the recipe.
    pub fn means_seed(&self) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(1)
    }

    pub fn source_seed(&self) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(2)
    }

    pub fn target_seed(&self) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(3)
    }

    pub fn shift_seed(&self) -> u64 {
        self.seed.wrapping_mul(4).wrapping_add(4)
    }

    pub fn shift_spec(&self, mean_shift: Vec<f64>) -> ShiftSpec {
        ShiftSpec {
            mean_shift,
            scale_shift: self.scale_shift,
            label_noise: self.label_noise,
            class_prior_target: self.class_prior_target.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    /// Pretraining data; without it finetuning starts from a fresh init.
    #[serde(default)]
    pub source: Option<PathBuf>,
    pub target: PathBuf,
    pub schema: CsvSchema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Generated(GeneratedData),
    Csv(CsvData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Generated(GeneratedData::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Seed of the parameter initialisation (before pretraining).
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![32],
            activation: Activation::Tanh,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub enabled: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            epochs: 5,
            learning_rate: 0.05,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub pruning_ratios: Vec<f64>,
    pub scorers: Vec<ScorerKind>,
    pub seeds: Vec<u64>,
    pub betas: Vec<f64>,
    /// Worker threads; `None` uses every available core.
    pub jobs: Option<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pruning_ratios: vec![0.2, 0.4, 0.6, 0.7, 0.8, 0.9],
            scorers: vec![ScorerKind::Molpeg, ScorerKind::SoftRandom],
            seeds: vec![0, 1, 2, 3, 4],
            betas: vec![0.5],
            jobs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub drift_betas: Vec<f64>,
    pub sign_steps: usize,
    pub scaling_learning_rate: f64,
    pub scaling_steps: usize,
    pub scaling_range: (f64, f64),
    pub identity_tol: f64,
    pub budget_pass_fraction: f64,
    pub sign_test_alpha: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            learning_rate: 0.05,
            drift_betas: vec![0.25, 0.5, 0.9],
            sign_steps: 50,
            scaling_learning_rate: 0.001,
            scaling_steps: 40,
            scaling_range: (3.5, 4.5),
            identity_tol: 1e-10,
            budget_pass_fraction: 0.95,
            sign_test_alpha: 0.001,
        }
    }
}

/// One JSON document describing data, model, pretraining, finetuning,
/// sweep grids and theory-check settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
    pub verify: VerifyConfig,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            split: SplitConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                pruning_ratio: 0.4,
                epochs: 15,
                batch_size: 64,
                learning_rate: 0.05,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
            verify: VerifyConfig::default(),
            out: PathBuf::from("runs/default"),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub pruning_ratio: Option<f64>,
    pub scorer: Option<ScorerKind>,
    pub beta: Option<f64>,
    pub mode: Option<SelectionMode>,
    pub optimizer: Option<Optimizer>,
    pub jobs: Option<usize>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Loads `path` (or the defaults) and applies `overrides`. Single-value
    /// flags also collapse the matching sweep grid to that value.
    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self, CliError> {
        let mut config = match path {
            Some(p) => Self::from_path(p)?,
            None => Self::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(out) = &o.out {
            self.out = out.clone();
        }
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.sweep.seeds = vec![seed];
        }
        if let Some(p) = o.pruning_ratio {
            self.train.pruning_ratio = p;
            self.sweep.pruning_ratios = vec![p];
        }
        if let Some(s) = o.scorer {
            self.train.scorer = s;
            self.sweep.scorers = vec![s];
        }
        if let Some(b) = o.beta {
            self.train.beta = b;
            self.sweep.betas = vec![b];
            self.verify.drift_betas = vec![b];
        }
        if let Some(m) = o.mode {
            self.train.selection_mode = m;
        }
        if let Some(opt) = o.optimizer {
            self.train.optimizer = opt;
        }
        if let Some(j) = o.jobs {
            self.sweep.jobs = Some(j);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let s = &self.sweep;
        if s.pruning_ratios.is_empty()
            || s.scorers.is_empty()
            || s.seeds.is_empty()
            || s.betas.is_empty()
        {
            return bad("sweep grids must be non-empty".into());
        }
        if let Some(p) = s.pruning_ratios.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("pruning ratio {p} outside [0, 1)"));
        }
        if let Some(b) = s
            .betas
            .iter()
            .chain(&self.verify.drift_betas)
            .find(|b| !(0.0..=1.0).contains(*b))
        {
            return bad(format!("beta {b} outside [0, 1]"));
        }
        if s.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        if self.pretrain.enabled && (self.pretrain.epochs == 0 || self.pretrain.batch_size == 0) {
            return bad("pretrain epochs and batch_size must be positive".into());
        }
        if !(self.pretrain.learning_rate >= 0.0 && self.pretrain.learning_rate.is_finite()) {
            return bad("pretrain learning_rate must be finite and non-negative".into());
        }
        let v = &self.verify;
        if v.steps < 2 || v.sign_steps == 0 || v.sign_steps >= v.steps || v.scaling_steps == 0 {
            return bad(
                "verify needs steps >= 2 and 0 < sign_steps < steps, scaling_steps > 0".into(),
            );
        }
        if !(v.learning_rate >= 0.0 && v.scaling_learning_rate > 0.0) {
            return bad(
                "verify learning rates must be non-negative (scaling rate positive)".into(),
            );
        }
        if let DataConfig::Generated(g) = &self.data {
            if g.n_features == 0
                || g.n_classes < 2
                || g.source_samples == 0
                || g.target_samples == 0
            {
                return bad("generated data needs features, >= 2 classes and samples".into());
            }
            if !(0.0..0.5).contains(&g.label_noise) {
                return bad(format!("label_noise {} outside [0, 0.5)", g.label_noise));
            }
        }
        Ok(())
    }
}
