//! Model, training and data-generation configuration.
//!
//! Every struct rejects unknown fields, and [`RunConfig::apply_override`]
//! rejects dotted key paths that do not exist in the default tree.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{FobaError, Result};
use crate::types::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FbgVariant {
    Attention,
    Ssm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dims: [usize; 4],
    pub blocks_per_stage: usize,
    /// Excludes encoder parameters from optimisation.
    pub frozen: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dims: [32, 64, 128, 256],
            blocks_per_stage: 1,
            frozen: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FoBaConfig {
    /// Number of change classes; label 0 is reserved for "unchanged".
    pub n_classes: usize,
    pub image_channels: usize,
    pub encoder: EncoderConfig,
    pub gif_dims: [usize; 4],
    pub fbg_dim: usize,
    pub fbg_variant: FbgVariant,
    pub gif_enabled: [bool; 4],
    /// Decode modules fed by encoder stages 3, 2 and 1.
    pub fbg_enabled: [bool; 3],
    pub bg_branch_enabled: bool,
    pub consistency_loss_enabled: bool,
    pub loss_weights: LossWeights,
    pub ssm_state_dim: usize,
    pub gn_groups: usize,
    pub bottleneck_ratio: usize,
    /// Zero semantic predictions wherever the change head predicts "unchanged".
    pub gate_semantics: bool,
    pub seed: u64,
}

impl Default for FoBaConfig {
    /// Desk-scale defaults: feature widths follow the encoder.
    fn default() -> Self {
        Self {
            n_classes: 4,
            image_channels: 3,
            encoder: EncoderConfig::default(),
            gif_dims: [32, 64, 128, 256],
            fbg_dim: 32,
            fbg_variant: FbgVariant::Attention,
            gif_enabled: [true; 4],
            fbg_enabled: [true; 3],
            bg_branch_enabled: true,
            consistency_loss_enabled: true,
            loss_weights: LossWeights::default(),
            ssm_state_dim: 16,
            gn_groups: 8,
            bottleneck_ratio: 4,
            gate_semantics: true,
            seed: 0,
        }
    }
}

impl FoBaConfig {
    /// Full-width configuration: fused stage widths 128 to 1024, decoder width 128.
    pub fn full_scale(n_classes: usize) -> Self {
        Self {
            n_classes,
            encoder: EncoderConfig {
                dims: [128, 256, 512, 1024],
                ..EncoderConfig::default()
            },
            gif_dims: [128, 256, 512, 1024],
            fbg_dim: 128,
            ..Self::default()
        }
    }

    /// Everything switched off: concatenation fusion, plain convolutional
    /// decoding, no consistency term.
    pub fn baseline(mut self) -> Self {
        self.gif_enabled = [false; 4];
        self.fbg_enabled = [false; 3];
        self.consistency_loss_enabled = false;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 254 {
            return Err(FobaError::config("model.n_classes", "must be in 1..=254"));
        }
        if self.image_channels == 0 {
            return Err(FobaError::config("model.image_channels", "must be positive"));
        }
        if self.encoder.dims.contains(&0) {
            return Err(FobaError::config("model.encoder.dims", "must be positive"));
        }
        if self.encoder.blocks_per_stage == 0 {
            return Err(FobaError::config("model.encoder.blocks_per_stage", "must be at least 1"));
        }
        if self.fbg_dim == 0 {
            return Err(FobaError::config("model.fbg_dim", "must be positive"));
        }
        if self.ssm_state_dim == 0 {
            return Err(FobaError::config("model.ssm_state_dim", "must be at least 1"));
        }
        if self.gn_groups == 0 {
            return Err(FobaError::config("model.gn_groups", "must be at least 1"));
        }
        if self.bottleneck_ratio == 0 {
            return Err(FobaError::config("model.bottleneck_ratio", "must be at least 1"));
        }
        for &d in &self.gif_dims {
            if d == 0 || d % self.bottleneck_ratio != 0 {
                return Err(FobaError::config(
                    "model.gif_dims",
                    format!("{} is not a positive multiple of the bottleneck ratio {}", d, self.bottleneck_ratio),
                ));
            }
        }
        let w = &self.loss_weights;
        if [w.lambda1, w.lambda2, w.lambda3, w.lambda4]
            .iter()
            .any(|l| !l.is_finite() || *l < 0.0)
        {
            return Err(FobaError::config("model.loss_weights", "weights must be finite and nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps between evaluations on the training set; 0 disables.
    pub eval_every: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop early once train mIoU and SeK both reach these values.
    pub target_miou: Option<f64>,
    pub target_sek: Option<f64>,
    /// Random horizontal/vertical flips of whole samples.
    pub augment_flips: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 4,
            max_steps: 1000,
            eval_every: 0,
            checkpoint_every: 0,
            target_miou: None,
            target_sek: None,
            augment_flips: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FobaError::config("train.lr", "must be positive"));
        }
        if !(self.weight_decay > 0.0 && self.weight_decay.is_finite()) {
            return Err(FobaError::config("train.weight_decay", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(FobaError::config("train.beta1", "betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(FobaError::config("train.batch_size", "must be at least 1"));
        }
        if (self.target_miou.is_some() || self.target_sek.is_some()) && self.eval_every == 0 {
            return Err(FobaError::config("train.eval_every", "targets need periodic evaluation"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Probability that a shape takes part in a change.
    pub change_density: f64,
    /// Standard deviation of the per-pixel colour noise.
    pub noise: f64,
    /// Maximum absolute per-image brightness offset.
    pub illumination: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 64,
            image_size: 64,
            n_classes: 4,
            min_shapes: 3,
            max_shapes: 7,
            change_density: 0.6,
            noise: 0.04,
            illumination: 0.08,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(crate::types::SIZE_MULTIPLE) {
            return Err(FobaError::config("synth.image_size", "must be a positive multiple of 32"));
        }
        if self.n_classes < 2 || self.n_classes > 254 {
            return Err(FobaError::config("synth.n_classes", "must be in 2..=254"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(FobaError::config("synth.min_shapes", "exceeds max_shapes"));
        }
        if !(0.0..=1.0).contains(&self.change_density) {
            return Err(FobaError::config("synth.change_density", "must lie in [0, 1]"));
        }
        if self.noise < 0.0 || self.illumination < 0.0 {
            return Err(FobaError::config("synth.noise", "noise and illumination must be nonnegative"));
        }
        Ok(())
    }
}

/// Everything a CLI invocation needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: FoBaConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Parses a config tree; missing keys take defaults, unknown keys are errors.
    pub fn from_value(v: Value) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| FobaError::config("<file>", e.to_string()))?;
        Ok(cfg)
    }

    /// Replaces the value at a dotted key path such as `model.fbg_dim` or
    /// `train.lr`. The path must exist in the schema.
    pub fn apply_override(&mut self, key: &str, value: Value) -> Result<()> {
        let mut tree = serde_json::to_value(&*self)?;
        let mut node = &mut tree;
        for part in key.split('.') {
            node = match node {
                Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| FobaError::config(key, "unknown key"))?,
                Value::Array(items) => part
                    .parse::<usize>()
                    .ok()
                    .and_then(|i| items.get_mut(i))
                    .ok_or_else(|| FobaError::config(key, "unknown key"))?,
                _ => return Err(FobaError::config(key, "unknown key")),
            };
        }
        *node = value;
        *self = serde_json::from_value(tree).map_err(|e| FobaError::config(key, e.to_string()))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// Hex SHA-256 of the canonical JSON encoding of any config value.
pub fn config_hash<S: Serialize>(cfg: &S) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{:02x}", b)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn defaults_carry_optimizer_hyperparameters() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.weight_decay), (1e-4, 5e-4));
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn full_scale_widths() {
        let c = FoBaConfig::full_scale(6);
        assert_eq!(c.gif_dims, [128, 256, 512, 1024]);
        assert_eq!(c.fbg_dim, 128);
        c.validate().unwrap();
    }

    #[test]
    fn override_known_and_reject_unknown_keys() {
        let mut c = RunConfig::default();
        c.apply_override("model.fbg_dim", json!(64)).unwrap();
        c.apply_override("model.fbg_variant", json!("ssm")).unwrap();
        c.apply_override("model.gif_enabled.2", json!(false)).unwrap();
        c.apply_override("train.target_sek", json!(0.8)).unwrap();
        assert_eq!(c.model.fbg_dim, 64);
        assert_eq!(c.model.fbg_variant, FbgVariant::Ssm);
        assert_eq!(c.model.gif_enabled, [true, true, false, true]);
        assert_eq!(c.train.target_sek, Some(0.8));
        let err = c.apply_override("model.fbg_width", json!(3)).unwrap_err();
        assert!(matches!(err, FobaError::Config { ref key, .. } if key == "model.fbg_width"));
        assert!(c.apply_override("model.fbg_dim", json!("wide")).is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        assert!(RunConfig::from_value(json!({"model": {"nope": 1}})).is_err());
        let c = RunConfig::from_value(json!({"train": {"lr": 0.001}})).unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.model, FoBaConfig::default());
    }

    #[test]
    fn hash_distinguishes_toggles() {
        let a = FoBaConfig::default();
        let b = a.clone().baseline();
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a), config_hash(&a.clone()));
    }

    #[test]
    fn validation_names_the_key() {
        let mut c = FoBaConfig::default();
        c.gif_dims[1] = 30;
        assert!(matches!(c.validate(), Err(FobaError::Config { ref key, .. }) if key == "model.gif_dims"));
    }
}
