//! Run configuration.
//!
//! Read from TOML. Every field has a default, unknown keys are rejected, and
//! the text form is embedded verbatim in checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CopsError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub saga: SagaConfig,
    pub icts: IctsConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    /// Context tokens per prompt (K).
    pub context_len: usize,
    /// State tokens per prompt, also the prototype count (M).
    pub state_len: usize,
    /// Class tokens per prompt (N).
    pub class_len: usize,
    /// Class-token samples per image (R).
    pub samples: usize,
    pub ests_heads: usize,
    /// Standard deviation of every normal-initialized weight.
    pub init_std: f64,
    /// Seed for the frozen backbone weights.
    pub backbone_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            patch_size: 8,
            image_height: 32,
            image_width: 32,
            vision_layers: 2,
            vision_heads: 8,
            text_layers: 9,
            text_heads: 8,
            context_len: 6,
            state_len: 6,
            class_len: 2,
            samples: 10,
            ests_heads: 8,
            init_std: 0.02,
            backbone_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn prompt_len(&self) -> usize {
        self.context_len + self.state_len + self.class_len
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskNorm {
    L2,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SagaConfig {
    /// Distance coefficient of the spatial mask.
    pub alpha: f64,
    /// Glocal coefficient of the refined global score.
    pub beta: f64,
    pub tau: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_eps: f64,
    pub mask_norm: MaskNorm,
}

impl Default for SagaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            beta: 0.9,
            tau: 0.07,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_eps: 1.0,
            mask_norm: MaskNorm::L2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Posterior,
    Prior,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IctsConfig {
    /// Where class-token samples come from during training.
    pub train_sampling: SamplingMode,
    pub recon_reduction: Reduction,
}

impl Default for IctsConfig {
    fn default() -> Self {
        Self { train_sampling: SamplingMode::Posterior, recon_reduction: Reduction::Sum }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Module switches (ablation variants).
    pub enable_ests: bool,
    pub enable_icts: bool,
    pub enable_saga: bool,
    /// Loss-term switches; a term only contributes when its module is on too.
    pub loss_ests: bool,
    pub loss_icts: bool,
    pub loss_saga: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 8,
            learning_rate: 0.001,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            enable_ests: true,
            enable_icts: true,
            enable_saga: true,
            loss_ests: true,
            loss_icts: true,
            loss_saga: true,
        }
    }
}

/// Component ablation variants (A)..(G) plus the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    Full,
}

impl Variant {
    /// `(ests, icts, saga)` switches.
    pub fn modules(self) -> (bool, bool, bool) {
        match self {
            Variant::A => (false, false, false),
            Variant::B => (true, false, false),
            Variant::C => (false, true, false),
            Variant::D => (false, false, true),
            Variant::E => (true, true, false),
            Variant::F => (true, false, true),
            Variant::G => (false, true, true),
            Variant::Full => (true, true, true),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.to_ascii_lowercase().as_str() {
            "a" => Variant::A,
            "b" => Variant::B,
            "c" => Variant::C,
            "d" => Variant::D,
            "e" => Variant::E,
            "f" => Variant::F,
            "g" => Variant::G,
            "full" | "ours" => Variant::Full,
            _ => return None,
        })
    }
}

impl TrainConfig {
    pub fn apply_variant(&mut self, v: Variant) {
        let (e, i, s) = v.modules();
        self.enable_ests = e;
        self.enable_icts = i;
        self.enable_saga = s;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelPooling {
    Pooled,
    PerImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub gaussian_sigma: f64,
    /// Seed of the prior-sampling stream at evaluation time.
    pub seed: u64,
    /// Draw one class-token set and reuse it for every image.
    pub shared_samples: bool,
    pub pixel_pooling: PixelPooling,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self { gaussian_sigma: 4.0, seed: 0, shared_samples: false, pixel_pooling: PixelPooling::Pooled }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: Option<String>,
    pub test_dir: Option<String>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CopsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |key: &str, why: &str| Err(CopsError::Config(format!("{key}: {why}")));
        if m.embed_dim == 0 || m.patch_size == 0 || m.image_height == 0 || m.image_width == 0 {
            return bad("model", "sizes must be positive");
        }
        if m.image_height % m.patch_size != 0 || m.image_width % m.patch_size != 0 {
            return bad("model.patch_size", "must divide image_height and image_width");
        }
        for (key, heads) in
            [("model.vision_heads", m.vision_heads), ("model.text_heads", m.text_heads), ("model.ests_heads", m.ests_heads)]
        {
            if heads == 0 || m.embed_dim % heads != 0 {
                return bad(key, "must be positive and divide embed_dim");
            }
        }
        if m.context_len == 0 || m.state_len == 0 || m.class_len == 0 {
            return bad("model", "context_len, state_len and class_len must be >= 1");
        }
        if m.text_layers < crate::backbone::DEEP_PROMPT_GROUPS + 1 {
            return bad("model.text_layers", "deep prompts need at least 9 text layers");
        }
        if m.vision_layers == 0 {
            return bad("model.vision_layers", "must be >= 1");
        }
        let s = &self.saga;
        if !(0.0..=1.0).contains(&s.alpha) {
            return bad("saga.alpha", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&s.beta) {
            return bad("saga.beta", "must lie in [0, 1]");
        }
        if s.tau <= 0.0 {
            return bad("saga.tau", "must be positive");
        }
        let t = &self.train;
        if t.epochs == 0 {
            return bad("train.epochs", "must be >= 1");
        }
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be >= 1");
        }
        if t.learning_rate < 0.0 || !t.learning_rate.is_finite() {
            return bad("train.learning_rate", "must be finite and non-negative");
        }
        if self.inference.gaussian_sigma < 0.0 {
            return bad("inference.gaussian_sigma", "must be non-negative");
        }
        Ok(())
    }
}
