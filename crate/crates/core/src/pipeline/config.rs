use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, AttackMethod};
use crate::curriculum::{CurriculumConfig, CurriculumOrder};
use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::{Architecture, TrainConfig};
use crate::rng::{
    child_seed, stream_seed, STREAM_CURRICULUM_RANDOM, STREAM_DATA, STREAM_INIT, STREAM_SHUFFLE,
};

/// How the base stage fits the protected probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseSchedule {
    /// θ, ρ and φ trained together on the summed cross-entropies.
    Joint,
    /// θ and ρ first, then φ alone on the frozen backbone.
    Sequential,
}

/// Every key a run reads, flat. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,

    pub data_n: usize,
    pub data_grid: usize,
    pub data_bias: f64,
    pub data_noise: f64,
    pub data_signal: f64,
    pub train_fraction: f64,

    pub hidden: Vec<usize>,

    pub base_schedule: BaseSchedule,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub base_batch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip: f64,

    pub ft_alpha: f64,
    pub ft_epochs: usize,
    pub ft_batch: usize,
    /// 0 means one micro-batch per minibatch.
    pub ft_micro_batch: usize,
    pub ft_lr: f64,

    pub curriculum_eps: Vec<f64>,
    pub curriculum_order: CurriculumOrder,

    pub attack_method: AttackMethod,
    pub pgd_steps: usize,
    /// 0 means `eps / 4`.
    pub pgd_step_size: f64,

    pub analyze_samples: usize,
    pub analyze_eps: Vec<f64>,
    pub ig_steps: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = GenConfig::default();
        let train = TrainConfig::default();
        let ft = FinetuneConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data_n: data.n,
            data_grid: data.grid,
            data_bias: data.bias,
            data_noise: data.noise,
            data_signal: data.signal,
            train_fraction: 0.8,
            hidden: vec![64, 32],
            base_schedule: BaseSchedule::Joint,
            base_lr: train.lr,
            base_epochs: train.epochs,
            base_batch: train.batch_size,
            adam_beta1: train.beta1,
            adam_beta2: train.beta2,
            adam_eps: train.adam_eps,
            clip: train.clip,
            ft_alpha: ft.alpha,
            ft_epochs: ft.train.epochs,
            ft_batch: ft.train.batch_size,
            ft_micro_batch: 0,
            ft_lr: ft.train.lr,
            curriculum_eps: ft.curriculum.eps.clone(),
            curriculum_order: ft.curriculum.order,
            attack_method: AttackMethod::Fgsm,
            pgd_steps: 10,
            pgd_step_size: 0.0,
            analyze_samples: 8,
            analyze_eps: vec![0.0, 0.01, 0.02, 0.05, 0.1, 0.2],
            ig_steps: crate::analysis::DEFAULT_IG_STEPS,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_kind(&e))))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        let n_train = (self.train_fraction * self.data_n as f64).floor() as usize;
        if n_train == 0 || n_train == self.data_n {
            return Err(Error::Config(format!(
                "data_n = {} with train_fraction = {} leaves an empty split",
                self.data_n, self.train_fraction
            )));
        }
        self.architecture().validate()?;
        self.base_train().validate()?;
        self.finetune_config().validate()?;
        self.attack().validate()?;
        if self.analyze_eps.is_empty() || self.analyze_eps.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("analyze_eps must be a non-empty list in [0, 1]".into()));
        }
        if self.ig_steps == 0 {
            return Err(Error::Config("ig_steps must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. `out_dir` is excluded so the
    /// same experiment written to two places has one digest.
    pub fn digest(&self) -> String {
        hex::encode(self.digest_bytes())
    }

    pub fn digest_bytes(&self) -> [u8; 32] {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        let canonical = serde_json::to_vec(&value).expect("json value serializes");
        Sha256::digest(&canonical).into()
    }

    pub fn data_seed(&self) -> u64 {
        stream_seed(self.seed, STREAM_DATA)
    }

    pub fn split_seed(&self) -> u64 {
        child_seed(self.data_seed(), 1)
    }

    pub fn init_seed(&self) -> u64 {
        stream_seed(self.seed, STREAM_INIT)
    }

    fn shuffle_seed(&self, stage: u64) -> u64 {
        child_seed(stream_seed(self.seed, STREAM_SHUFFLE), stage)
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.data_seed(),
            n: self.data_n,
            grid: self.data_grid,
            bias: self.data_bias,
            noise: self.data_noise,
            signal: self.data_signal,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.data_grid * self.data_grid,
            hidden: self.hidden.clone(),
            target_classes: 2,
        }
    }

    fn train_config(&self, lr: f64, epochs: usize, batch_size: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            lr,
            epochs,
            batch_size,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            clip: self.clip,
            seed,
        }
    }

    /// Target head and backbone.
    pub fn base_train(&self) -> TrainConfig {
        self.train_config(self.base_lr, self.base_epochs, self.base_batch, self.shuffle_seed(0))
    }

    /// Protected probe on the frozen backbone, sequential schedule only.
    pub fn probe_train(&self) -> TrainConfig {
        self.train_config(self.base_lr, self.base_epochs, self.base_batch, self.shuffle_seed(1))
    }

    pub fn attack(&self) -> AttackConfig {
        AttackConfig {
            method: self.attack_method,
            eps: 0.0,
            pgd_steps: self.pgd_steps,
            pgd_step_size: (self.pgd_step_size > 0.0).then_some(self.pgd_step_size),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            alpha: self.ft_alpha,
            micro_batch: (self.ft_micro_batch > 0).then_some(self.ft_micro_batch),
            curriculum: CurriculumConfig {
                eps: self.curriculum_eps.clone(),
                order: self.curriculum_order,
                attack: self.attack(),
                seed: stream_seed(self.seed, STREAM_CURRICULUM_RANDOM),
            },
            train: self.train_config(self.ft_lr, self.ft_epochs, self.ft_batch, self.shuffle_seed(2)),
        }
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
