use serde::{Deserialize, Serialize};

use crate::backbone::{PatchEmbedConfig, StreamConfig};
use crate::cme::PromptMode;
use crate::error::{Error, Result};
use crate::hcma::BlockKind;
use crate::losses::{BayesianLoss, ZeroAnnotationPolicy};
use crate::model::{ModelConfig, Scale};

/// Flat training configuration, read from JSON. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub scale: Scale,
    pub scma: bool,
    pub mcma: bool,
    pub block: BlockKind,
    pub prompting_mode: PromptMode,
    pub prompt_len: usize,
    pub use_pseudo_in_head: bool,
    pub seed: u64,
    pub sigma: f64,
    pub stride: usize,
    pub zero_annotation: ZeroAnnotationPolicy,
    pub crop_size: Option<usize>,
    pub flip_prob: f64,
    pub dropout: f64,
    pub replicate_aux: bool,
    pub backbone_channels: Option<Vec<usize>>,
    pub convs_per_block: Option<usize>,
    pub embed_dims: Option<Vec<usize>>,
    pub patch_sizes: Option<Vec<usize>>,
    pub feature_channels: Option<usize>,
    pub heads: Option<usize>,
    pub ffn_hidden: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 4,
            epochs: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            scale: Scale::Desk,
            scma: true,
            mcma: true,
            block: BlockKind::Hybrid,
            prompting_mode: PromptMode::Ap,
            prompt_len: 5,
            use_pseudo_in_head: false,
            seed: 42,
            sigma: 8.0,
            stride: 8,
            zero_annotation: ZeroAnnotationPolicy::CountToZero,
            crop_size: None,
            flip_prob: 0.0,
            dropout: 0.1,
            replicate_aux: true,
            backbone_channels: None,
            convs_per_block: None,
            embed_dims: None,
            patch_sizes: None,
            feature_channels: None,
            heads: None,
            ffn_hidden: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.stride != crate::backbone::DOWNSAMPLE {
            return Err(Error::Config(format!(
                "stride must equal the backbone downsampling {}, got {}",
                crate::backbone::DOWNSAMPLE,
                self.stride
            )));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip_prob {} outside [0, 1]", self.flip_prob)));
        }
        if let Some(c) = self.crop_size {
            if c == 0 || c % crate::backbone::DOWNSAMPLE != 0 {
                return Err(Error::Config(format!(
                    "crop_size {c} must be a positive multiple of {}",
                    crate::backbone::DOWNSAMPLE
                )));
            }
        }
        self.bayesian_loss().validate()?;
        self.model_config().validate()
    }

    pub fn bayesian_loss(&self) -> BayesianLoss {
        BayesianLoss {
            sigma: self.sigma,
            stride: self.stride,
            zero_policy: self.zero_annotation,
        }
    }

    /// Network configuration: the scale preset with any explicit overrides.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = ModelConfig::for_scale(self.scale);
        if let Some(c) = &self.backbone_channels {
            m.backbone = StreamConfig {
                channels: c.clone(),
                ..m.backbone
            };
        }
        if let Some(n) = self.convs_per_block {
            m.backbone.convs_per_block = n;
        }
        if let Some(d) = &self.embed_dims {
            m.patches = PatchEmbedConfig {
                dims: d.clone(),
                ..m.patches
            };
        }
        if let Some(p) = &self.patch_sizes {
            m.patches.patch_sizes = p.clone();
        }
        if let Some(c) = self.feature_channels {
            m.channels = c;
            m.ffn_hidden = 2 * c;
        }
        if let Some(h) = self.heads {
            m.heads = h;
        }
        if let Some(f) = self.ffn_hidden {
            m.ffn_hidden = f;
        }
        m.dropout = self.dropout;
        m.kind = self.block;
        m.scma = self.scma;
        m.mcma = self.mcma;
        m.prompting = self.prompting_mode;
        m.prompt_len = self.prompt_len;
        m.use_pseudo_in_head = self.use_pseudo_in_head;
        m.replicate_aux = self.replicate_aux;
        m
    }
}
