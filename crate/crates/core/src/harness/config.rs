use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::net::NetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Peak step size.
    pub lr: f64,
    /// Step size reached at the end of the cosine schedule.
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            lr_min: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Existing training set. When absent, training generates one.
    pub train_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    /// Share of the training set held out for validation, taken from the
    /// end of its seed sequence.
    pub val_fraction: f64,
    /// Worker threads for generation; 0 uses every core.
    pub threads: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_dir: None,
            n_train: 500,
            n_test: 100,
            val_fraction: 0.1,
            threads: 0,
        }
    }
}

impl DataConfig {
    pub fn thread_count(&self) -> usize {
        if self.threads == 0 {
            rayon::current_num_threads()
        } else {
            self.threads
        }
    }
}

/// Everything a run needs, read from a TOML file with the sections
/// `[dataset]`, `[data]`, `[net]`, `[loss]` and `[optim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Master seed for data generation, initialization and shuffling.
    pub seed: u64,
    /// Save an extra checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    pub dataset: DatasetSpec,
    pub data: DataConfig,
    pub net: NetConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            checkpoint_every: 0,
            dataset: DatasetSpec::default(),
            data: DataConfig::default(),
            net: NetConfig::default(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Toml(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Sets both grid dimensions.
    pub fn with_grid(mut self, n: usize) -> Self {
        self.dataset.stack.rows = n;
        self.dataset.stack.cols = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optim;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return bad(format!("lr {} must be positive", o.lr));
        }
        if !(0.0..=o.lr).contains(&o.lr_min) {
            return bad(format!("lr_min {} must lie in [0, lr]", o.lr_min));
        }
        for (name, b) in [("beta1", o.beta1), ("beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} {b} must lie in [0, 1)"));
            }
        }
        if !(o.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if o.batch_size == 0 || o.epochs == 0 {
            return bad("batch_size and epochs must be at least 1".into());
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return bad("n_train and n_test must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return bad(format!("val_fraction {} must lie in [0, 1)", self.data.val_fraction));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.beta >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.seed > i64::MAX as u64 {
            return bad("seed must fit in a signed 64-bit integer".into());
        }
        self.dataset.validate()?;
        self.net.validate()?;
        self.net.check_grid(self.dataset.stack.rows, self.dataset.stack.cols)
    }

    /// Loss weights in effect: the frequency term is dropped when the
    /// network configuration disables it.
    pub fn loss_weights(&self) -> LossWeights {
        if self.net.freq_loss {
            self.loss
        } else {
            LossWeights { alpha: 0.0, ..self.loss }
        }
    }
}
