//! Declarative run configuration: one TOML file with nested sections covers
//! the task, model dims, optimizer schedule, imbalance machinery, smoothing
//! policy and paths. `MMFUSION_SEED`, `MMFUSION_DATASET` and
//! `MMFUSION_OUT_DIR` override the corresponding fields when applied.

use crate::datapipe::{RemixParams, ResampleCaps};
use crate::error::{CoreError, Result};
use crate::features::{FeatureDims, PerStream, SyntheticSpec};
use crate::labels::{AU_COUNT, EXPR_COUNT};
use crate::model::{FusionMode, ModalityFlags, ModelConfig, Task};
use crate::postprocess::{SmoothRule, SmoothingPolicy};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    /// Sliding-window half-width M.
    pub m: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub gru_layers: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub fusion: FusionMode,
    #[serde(default)]
    pub positional_encoding: bool,
    pub modalities: ModalityFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSection {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Warm-restart period T_0, in epochs (converted to steps at run time).
    pub restart_epochs: f64,
    pub period_multiplier: f64,
    pub momentum: f64,
    pub clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub folds: usize,
    /// Weight of the circle loss in the AU objective (CE + weight * circle).
    #[serde(default = "default_circle_weight")]
    pub circle_weight: f64,
    /// Decision threshold on sigmoid AU probabilities.
    #[serde(default = "default_au_threshold")]
    pub au_threshold: f64,
}

fn default_circle_weight() -> f64 {
    1.0
}

fn default_au_threshold() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemixSection {
    pub enabled: bool,
    #[serde(flatten)]
    pub params: RemixParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSection {
    pub majority: SmoothRule,
    pub minority: SmoothRule,
    /// Smooth AU channel predictions too, not just expression labels.
    pub smooth_au: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PathsSection {
    #[serde(default)]
    pub dataset: String,
    #[serde(default)]
    pub out_dir: String,
}

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    /// Train at f32 (default); f64 is for gradient checks and debugging.
    #[serde(default = "default_true")]
    pub float32: bool,
    pub features: FeatureDims,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub training: TrainingSection,
    pub resample: ResampleCaps,
    pub remix: RemixSection,
    pub smoothing: SmoothingSection,
    #[serde(default)]
    pub paths: PathsSection,
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dims: self.features,
            window_half: self.model.m,
            model_dim: self.model.model_dim,
            heads: self.model.heads,
            gru_layers: self.model.gru_layers,
            gru_hidden: self.model.gru_hidden,
            head_hidden: self.model.head_hidden,
            modalities: self.model.modalities,
            fusion: self.model.fusion,
            positional_encoding: self.model.positional_encoding,
            task: self.task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.training.batch_size == 0 || self.training.epochs == 0 {
            return Err(CoreError::config("batch_size and epochs must be positive"));
        }
        if self.training.folds < 2 {
            return Err(CoreError::config("fold count must be at least 2"));
        }
        if self.optimizer.lr_max < 0.0 || self.optimizer.lr_min < 0.0 {
            return Err(CoreError::config("learning rates must be nonnegative"));
        }
        if self.optimizer.lr_min > self.optimizer.lr_max {
            return Err(CoreError::config("lr_min must not exceed lr_max"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) {
            return Err(CoreError::config("momentum must be in [0, 1)"));
        }
        if self.optimizer.restart_epochs <= 0.0 || self.optimizer.period_multiplier < 1.0 {
            return Err(CoreError::config(
                "restart_epochs must be positive and period_multiplier >= 1",
            ));
        }
        if self.optimizer.clip_norm <= 0.0 {
            return Err(CoreError::config("clip_norm must be positive"));
        }
        if self.resample.n_minor == 0 || self.resample.n_major == 0 {
            return Err(CoreError::config("resample caps must be positive"));
        }
        if self.training.circle_weight < 0.0 {
            return Err(CoreError::config("circle_weight must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.training.au_threshold) || self.training.au_threshold == 0.0 {
            return Err(CoreError::config("au_threshold must be in (0, 1)"));
        }
        if self.remix.params.alpha <= 0.0 {
            return Err(CoreError::config("remix alpha must be positive"));
        }
        if self.remix.params.kappa < 1.0 {
            return Err(CoreError::config("remix kappa must be at least 1"));
        }
        for (v, name) in [
            (self.remix.params.tau, "tau"),
            (self.remix.params.prob, "prob"),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::config(format!("remix {} must be in [0, 1]", name)));
            }
        }
        self.smoothing.majority.validate()?;
        self.smoothing.minority.validate()?;
        Ok(())
    }

    /// Smoothing policy for the configured task.
    pub fn smoothing_policy(&self) -> SmoothingPolicy {
        match self.task {
            Task::Expr => SmoothingPolicy::expr_policy(
                EXPR_COUNT,
                &self.resample.minority_classes,
                self.smoothing.majority,
                self.smoothing.minority,
            ),
            Task::Au => {
                SmoothingPolicy::uniform(0..AU_COUNT as u8, self.smoothing.majority)
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CoreError::Parse(format!("config serialization: {}", e)))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| CoreError::Parse(format!("config parse: {}", e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn digest(&self) -> Result<String> {
        let text = self.to_toml()?;
        let hash = Sha256::digest(text.as_bytes());
        Ok(hash.iter().map(|b| format!("{:02x}", b)).collect())
    }

    /// Apply `MMFUSION_SEED` / `MMFUSION_DATASET` / `MMFUSION_OUT_DIR`.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var("MMFUSION_SEED") {
            self.seed = seed
                .parse()
                .map_err(|_| CoreError::config(format!("MMFUSION_SEED `{}` is not a u64", seed)))?;
        }
        if let Ok(p) = std::env::var("MMFUSION_DATASET") {
            self.paths.dataset = p;
        }
        if let Ok(p) = std::env::var("MMFUSION_OUT_DIR") {
            self.paths.out_dir = p;
        }
        Ok(())
    }
}

// ---- presets ----------------------------------------------------------------

/// Training configuration mirroring the published settings: lr 0.002 with
/// cosine warm restarts, batch 80, 20 epochs, M = 60, resampling caps 200/50.
pub fn paper_run(task: Task) -> RunConfig {
    RunConfig {
        task,
        seed: 7,
        float32: true,
        features: FeatureDims::default(),
        model: ModelSection {
            m: 60,
            model_dim: 64,
            heads: 4,
            gru_layers: 4,
            gru_hidden: 64,
            head_hidden: 64,
            fusion: FusionMode::Transformer,
            positional_encoding: false,
            modalities: ModalityFlags::all(),
        },
        optimizer: OptimizerSection {
            lr_max: 0.002,
            lr_min: 0.0,
            restart_epochs: 2.0,
            period_multiplier: 2.0,
            momentum: 0.9,
            clip_norm: 5.0,
        },
        training: TrainingSection {
            batch_size: 80,
            epochs: 20,
            folds: 5,
            circle_weight: 1.0,
            au_threshold: 0.5,
        },
        resample: ResampleCaps::default(),
        remix: RemixSection {
            enabled: task == Task::Expr,
            params: RemixParams::default(),
        },
        smoothing: SmoothingSection {
            majority: SmoothRule {
                run_threshold: 8,
                window_radius: 15,
            },
            minority: SmoothRule {
                run_threshold: 4,
                window_radius: 8,
            },
            smooth_au: true,
        },
        paths: PathsSection::default(),
    }
}

/// Desk-scale configuration that trains in seconds per fold.
pub fn ci_run(task: Task) -> RunConfig {
    let mut cfg = paper_run(task);
    cfg.features = ci_dims();
    cfg.model.m = 8;
    cfg.model.model_dim = 32;
    cfg.model.gru_layers = 1;
    cfg.model.gru_hidden = 32;
    cfg.model.head_hidden = 32;
    cfg.optimizer.lr_max = 0.05;
    cfg.training.batch_size = 16;
    cfg.training.epochs = 8;
    cfg.resample.n_minor = 48;
    cfg.resample.n_major = 48;
    cfg.smoothing.majority = SmoothRule {
        run_threshold: 5,
        window_radius: 8,
    };
    cfg.smoothing.minority = SmoothRule {
        run_threshold: 3,
        window_radius: 5,
    };
    cfg
}

fn ci_dims() -> FeatureDims {
    FeatureDims {
        d_s: 16,
        d_e: 8,
        d_a: 8,
        d_w: 8,
    }
}

/// Synthetic dataset paired with [`ci_run`]: 8 classes, 40 videos, low noise.
pub fn ci_dataset(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        class_count: 8,
        videos_per_class: 5,
        frames_per_video: 96,
        dims: ci_dims(),
        signal_strength: PerStream::uniform(1.0),
        noise_std: 0.05,
        run_length_min: 8,
        run_length_max: 14,
        prototype_map: None,
    }
}

/// Synthetic stand-in at the published feature dimensions, for exercising
/// the paper-scale configuration end to end.
pub fn paper_dataset(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        class_count: 8,
        videos_per_class: 10,
        frames_per_video: 300,
        dims: FeatureDims::default(),
        signal_strength: PerStream::uniform(1.0),
        noise_std: 0.1,
        run_length_min: 30,
        run_length_max: 90,
        prototype_map: None,
    }
}

/// Ablation-study dataset: the static stream carries no signal, and each
/// dynamic modality encodes one bit of the 8-class id, so every modality
/// holds information the others cannot supply.
pub fn ablation_dataset(seed: u64) -> SyntheticSpec {
    let classes = 8usize;
    let bit = |shift: usize| -> Vec<usize> { (0..classes).map(|c| (c >> shift) & 1).collect() };
    SyntheticSpec {
        seed,
        class_count: classes,
        videos_per_class: 3,
        frames_per_video: 72,
        dims: FeatureDims {
            d_s: 8,
            d_e: 8,
            d_a: 8,
            d_w: 8,
        },
        signal_strength: PerStream {
            static_feat: 0.0,
            expr_emb: 1.0,
            audio_feat: 1.0,
            word_emb: 1.0,
        },
        noise_std: 0.1,
        run_length_min: 8,
        run_length_max: 10,
        prototype_map: Some(PerStream {
            static_feat: (0..classes).collect(),
            expr_emb: bit(0),
            audio_feat: bit(1),
            word_emb: bit(2),
        }),
    }
}

/// Training configuration paired with [`ablation_dataset`].
pub fn ablation_run() -> RunConfig {
    let mut cfg = ci_run(Task::Expr);
    cfg.features = ablation_dataset(0).dims;
    cfg.model.m = 4;
    cfg.model.model_dim = 16;
    cfg.model.gru_hidden = 16;
    cfg.model.head_hidden = 16;
    cfg.training.folds = 4;
    cfg.training.epochs = 8;
    cfg.smoothing.majority = SmoothRule {
        run_threshold: 3,
        window_radius: 5,
    };
    cfg.smoothing.minority = SmoothRule {
        run_threshold: 2,
        window_radius: 4,
    };
    cfg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_preserves_the_config() {
        let cfg = ci_run(Task::Expr);
        let text = cfg.to_toml().unwrap();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ci_run(Task::Expr);
        let mut b = a.clone();
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        b.seed = 8;
        assert_ne!(a.digest().unwrap(), b.digest().unwrap());
    }

    #[test]
    fn presets_validate() {
        for task in [Task::Au, Task::Expr] {
            paper_run(task).validate().unwrap();
            ci_run(task).validate().unwrap();
        }
        ablation_run().validate().unwrap();
        ci_dataset(1).validate().unwrap();
        ablation_dataset(1).validate().unwrap();
    }

    #[test]
    fn bad_momentum_is_rejected() {
        let mut cfg = ci_run(Task::Au);
        cfg.optimizer.momentum = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn env_overrides_take_effect() {
        let mut cfg = ci_run(Task::Expr);
        // set-and-unset around the call; tests in this module run serially
        std::env::set_var("MMFUSION_SEED", "99");
        std::env::set_var("MMFUSION_DATASET", "/tmp/x.mmds");
        cfg.apply_env_overrides().unwrap();
        std::env::remove_var("MMFUSION_SEED");
        std::env::remove_var("MMFUSION_DATASET");
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.paths.dataset, "/tmp/x.mmds");
    }
}
