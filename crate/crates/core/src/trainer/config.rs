//! TOML run configuration.
//!
//! Every field has a default, so an empty file is the synthetic benchmark:
//! 10 classes, exponential imbalance 100, 16-dimensional Gaussian mixture
//! with separation 3, CIBL with `λ^SCL = 0.05`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive_bank::DEFAULT_MOMENTUM;
use crate::data_gen::{
    exponential_profile, gaussian_mixture_sized, load_csv, pareto_profile, subsample, Dataset, Split,
    DEFAULT_TEST_PER_CLASS,
};
use crate::error::{Error, Result};
use crate::losses::{ClassProfile, LossKind, LossWeights};
use crate::metrics_report::Thresholds;
use crate::trainer::model::HeadKind;
use crate::trainer::optim::{Milestone, Schedule, ScheduleKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Exponential,
    Pareto,
    /// Use the CSV's class counts unchanged.
    AsIs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub profile: ProfileKind,
    pub num_classes: usize,
    pub n_max: usize,
    /// Exponential profiles only.
    pub imbalance: f64,
    /// Pareto profiles only.
    pub n_min: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub test_per_class: usize,
    /// Training rows; subsampled to the profile unless `profile = "as_is"`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// Required with `csv`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_csv: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            profile: ProfileKind::Exponential,
            num_classes: 10,
            n_max: 500,
            imbalance: 100.0,
            n_min: 5,
            dim: 16,
            separation: 3.0,
            noise_sigma: 0.3,
            test_per_class: DEFAULT_TEST_PER_CLASS,
            csv: None,
            test_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_widths: Vec<usize>,
    pub embedding_dim: usize,
    pub head_kind: HeadKind,
    pub gamma_t: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 64],
            embedding_dim: 32,
            head_kind: HeadKind::Linear,
            gamma_t: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub lambda_ce: f64,
    pub lambda_scl: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Cibl,
            lambda_ce: 1.0,
            lambda_scl: 0.05,
            alpha: 1.0,
            beta: 1.0,
            tau: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankConfig {
    pub queue_capacity: usize,
    pub momentum_m: f64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            queue_capacity: 1024,
            momentum_m: DEFAULT_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleName {
    Step,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: ScheduleName,
    pub warmup_epochs: usize,
    /// Step schedules only.
    pub milestones: Vec<Milestone>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 128,
            epochs: 50,
            schedule: ScheduleName::Cosine,
            warmup_epochs: 5,
            milestones: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Classes with more training instances than this are "Many".
    pub many_above: usize,
    /// Classes with at most this many are "Few".
    pub few_at_most: usize,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_at_most: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub bank: BankConfig,
    pub optim: OptimConfig,
    pub run: RunConfig,
    pub report: ReportConfig,
}

impl Config {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Parses and validates a config file. Parse errors carry the line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        let cfg = Self::from_toml_str(&text).map_err(|e| toml_error(path, &text, &e))?;
        // relative data paths resolve against the config's directory
        let base = path.parent().unwrap_or(Path::new(""));
        let cfg = cfg.with_paths_relative_to(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn with_paths_relative_to(mut self, base: &Path) -> Self {
        for p in [&mut self.data.csv, &mut self.data.test_csv].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ce: self.loss.lambda_ce,
            lambda_scl: self.loss.lambda_scl,
            alpha: self.loss.alpha,
            beta: self.loss.beta,
            tau: self.loss.tau,
            gamma_t: self.model.gamma_t,
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        self.loss.kind.resolve_head(self.model.head_kind)
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            many_above: self.report.many_above,
            few_at_most: self.report.few_at_most,
        }
    }

    pub fn schedule(&self) -> Result<Schedule> {
        let o = &self.optim;
        let kind = match o.schedule {
            ScheduleName::Cosine => ScheduleKind::Cosine,
            ScheduleName::Step => ScheduleKind::Step(o.milestones.clone()),
        };
        Schedule::new(o.base_lr, o.warmup_epochs, kind, o.epochs)
    }

    /// The training profile implied by `[data]` (ignores any CSV).
    pub fn profile(&self) -> Result<ClassProfile> {
        let d = &self.data;
        match d.profile {
            ProfileKind::Exponential => exponential_profile(d.num_classes, d.n_max, d.imbalance),
            ProfileKind::Pareto => pareto_profile(d.num_classes, d.n_max, d.n_min),
            ProfileKind::AsIs => Err(Error::Config("profile \"as_is\" needs a csv file".into())),
        }
    }

    /// Train and test splits for this config.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        match (&d.csv, &d.test_csv) {
            (None, None) => {
                let profile = self.profile()?;
                gaussian_mixture_sized(&profile, d.dim, d.separation, self.run.seed, d.test_per_class)
            }
            (Some(train_path), Some(test_path)) => {
                let full = load_csv(train_path)?;
                let train = match d.profile {
                    ProfileKind::AsIs => full,
                    _ => subsample(&full, &self.profile()?, self.run.seed)?,
                };
                let mut test = load_csv(test_path)?;
                test.split = Split::Test;
                if test.dim() != train.dim() || test.num_classes() != train.num_classes() {
                    return Err(Error::Config(format!(
                        "test set ({} features, {} classes) does not match training set ({}, {})",
                        test.dim(),
                        test.num_classes(),
                        train.dim(),
                        train.num_classes()
                    )));
                }
                Ok((train, test))
            }
            _ => Err(Error::Config("data.csv and data.test_csv must be given together".into())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.csv.is_none() {
            self.profile()?;
            if self.data.dim < 2 {
                return bad(format!("data.dim {} must be at least 2", self.data.dim));
            }
        }
        if !(self.data.noise_sigma >= 0.0) {
            return bad(format!("data.noise_sigma {} must be non-negative", self.data.noise_sigma));
        }
        if self.model.encoder_widths.is_empty() || self.model.encoder_widths.contains(&0) {
            return bad("model.encoder_widths must be non-empty and positive".into());
        }
        if self.model.embedding_dim == 0 {
            return bad("model.embedding_dim must be positive".into());
        }
        if !(self.model.gamma_t > 0.0) {
            return bad(format!("model.gamma_t {} must be positive", self.model.gamma_t));
        }
        let l = &self.loss;
        if !(l.tau > 0.0) {
            return bad(format!("loss.tau {} must be positive", l.tau));
        }
        if !(l.lambda_ce >= 0.0 && l.lambda_scl >= 0.0) || l.lambda_ce + l.lambda_scl <= 0.0 {
            return bad("loss.lambda_ce and loss.lambda_scl must be non-negative, not both zero".into());
        }
        if matches!(l.kind, LossKind::Cibl | LossKind::Ncibl) && l.lambda_ce <= 0.0 {
            // instances without positives would have a zero normalizer
            return bad("cibl/ncibl need loss.lambda_ce > 0".into());
        }
        if l.kind == LossKind::Paco && !(l.beta > 0.0 && l.alpha >= 0.0) {
            return bad("paco needs loss.beta > 0 and loss.alpha ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.bank.momentum_m) {
            return bad(format!("bank.momentum_m {} outside [0, 1]", self.bank.momentum_m));
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return bad(format!("optim.momentum {} outside [0, 1)", self.optim.momentum));
        }
        if !(self.optim.weight_decay >= 0.0) {
            return bad("optim.weight_decay must be non-negative".into());
        }
        if self.report.few_at_most >= self.report.many_above {
            return bad("report.few_at_most must be below report.many_above".into());
        }
        self.schedule().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

pub(crate) fn toml_error(path: &Path, text: &str, e: &toml::de::Error) -> Error {
    let line = e
        .span()
        .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
        .unwrap_or(0);
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: e.message().to_string(),
    }
}
