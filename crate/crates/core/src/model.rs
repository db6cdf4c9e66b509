//! The full two-pass network: backbone, HCMA stack, regression head and the
//! optional emulation pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PatchEmbedConfig, StreamConfig, TwoStreamBackbone};
use crate::cme::{cme_pass, PromptMode, PromptSet};
use crate::error::{Error, Result};
use crate::hcma::{BlockKind, HcmaStack, RegressionHead, StackConfig};
use crate::nn::{Conv2d, Gain};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Desk,
    Small,
    Base,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: StreamConfig,
    pub patches: PatchEmbedConfig,
    /// `C'`, the channel width of the 2-D features inside and after HCMA.
    pub channels: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub kind: BlockKind,
    pub scma: bool,
    pub mcma: bool,
    pub prompting: PromptMode,
    pub prompt_len: usize,
    pub use_pseudo_in_head: bool,
    pub replicate_aux: bool,
}

impl ModelConfig {
    pub fn for_scale(scale: Scale) -> Self {
        let (backbone, dims, channels) = match scale {
            Scale::Desk => (StreamConfig::default(), vec![64, 64, 64], 32),
            Scale::Small => (
                StreamConfig {
                    channels: vec![64, 128, 256],
                    convs_per_block: 2,
                },
                vec![256, 512, 512],
                256,
            ),
            Scale::Base => (
                StreamConfig {
                    channels: vec![64, 128, 256],
                    convs_per_block: 2,
                },
                vec![768, 768, 768],
                256,
            ),
        };
        ModelConfig {
            backbone,
            patches: PatchEmbedConfig {
                patch_sizes: vec![2, 1, 1],
                dims,
            },
            channels,
            heads: 4,
            ffn_hidden: 2 * channels,
            dropout: 0.1,
            kind: BlockKind::Hybrid,
            scma: true,
            mcma: true,
            prompting: PromptMode::Ap,
            prompt_len: 5,
            use_pseudo_in_head: false,
            replicate_aux: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.patches.validate()?;
        if self.channels == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("channels and ffn_hidden must be positive".into()));
        }
        if self.prompting == PromptMode::Ap && !self.scma {
            return Err(Error::Config(
                "attention prompting reuses the scma projections and needs scma = true".into(),
            ));
        }
        if self.use_pseudo_in_head && !self.prompting.is_on() {
            return Err(Error::Config("use_pseudo_in_head needs prompting enabled".into()));
        }
        Ok(())
    }

    /// The same network with every training-only part removed.
    pub fn inference_only(&self) -> Self {
        ModelConfig {
            prompting: PromptMode::Off,
            use_pseudo_in_head: false,
            ..self.clone()
        }
    }
}

/// First-pass activations needed by the heads, the losses and the emulation pass.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    /// Fused features `F̂_r`, `F̂_t` (`C'×h×w`).
    pub f_r: Var,
    pub f_t: Var,
    /// First-stage sequences `X_r`, `X_t`.
    pub x_r: Var,
    pub x_t: Var,
    pub grid: (usize, usize),
}

/// Outputs of one training forward.
#[derive(Debug, Clone, Copy)]
pub struct TrainOutputs {
    pub density: Var,
    pub features: Features,
    /// Pseudo-features `(F̄_r, F̄_t)` when the emulation pass ran.
    pub pseudo: Option<(Var, Var)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: TwoStreamBackbone,
    pub stack: HcmaStack,
    pub head: RegressionHead,
    pub pseudo_reduce: Option<(Conv2d, Conv2d)>,
    pub prompts: Option<PromptSet>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = TwoStreamBackbone::new(&mut params, &config.backbone, config.replicate_aux, &mut rng)?;
        let stack_cfg = StackConfig {
            in_channels: config.backbone.out_channels(),
            patches: config.patches.clone(),
            channels: config.channels,
            heads: config.heads,
            dropout: config.dropout,
            ffn_hidden: config.ffn_hidden,
            kind: config.kind,
            scma: config.scma,
            mcma: config.mcma,
        };
        let stack = HcmaStack::new(&mut params, &stack_cfg, &mut rng)?;
        let head = RegressionHead::new(
            &mut params,
            config.channels,
            config.patches.total_reduction(),
            &mut rng,
        )?;
        let c = config.channels;
        let pseudo_reduce = if config.use_pseudo_in_head {
            Some((
                Conv2d::pointwise(&mut params, "head.pseudo_rgb", 2 * c, c, Gain::Unit, &mut rng)?,
                Conv2d::pointwise(&mut params, "head.pseudo_aux", 2 * c, c, Gain::Unit, &mut rng)?,
            ))
        } else {
            None
        };
        let prompts = if config.prompting.is_on() {
            Some(PromptSet::new(
                &mut params,
                config.prompting,
                config.prompt_len,
                config.patches.dims[0],
                config.heads,
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(Model {
            config,
            params,
            backbone,
            stack,
            head,
            pseudo_reduce,
            prompts,
        })
    }

    /// A fresh graph reading this model's parameters.
    pub fn graph(&self) -> Graph<'_> {
        Graph::with_params(&self.params)
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Scalars that belong to the training-only emulation machinery.
    pub fn num_prompt_params(&self) -> usize {
        self.prompts.as_ref().map_or(0, |p| {
            self.params.get(p.rgb).numel() + self.params.get(p.aux).numel()
        })
    }

    /// Multi-modal inference pass up to the fused features.
    pub fn features(&self, g: &mut Graph<'_>, rgb: &Tensor, aux: &Tensor) -> Result<Features> {
        let (f_r, f_t) = self.backbone.forward(g, rgb, aux)?;
        let (x_r, x_t, grid) = self.stack.embed_first(g, f_r, f_t)?;
        let (f_r, f_t) = self.stack.forward_sequences(g, x_r, x_t, grid, 0)?;
        Ok(Features {
            f_r,
            f_t,
            x_r,
            x_t,
            grid,
        })
    }

    /// Emulation pass; returns `(F̄_r, F̄_t)`.
    pub fn emulate(&self, g: &mut Graph<'_>, feats: &Features) -> Result<(Var, Var)> {
        let prompts = self
            .prompts
            .as_ref()
            .ok_or_else(|| Error::contract("emulation pass on a model built without prompts"))?;
        cme_pass(g, &self.stack, prompts, feats.x_r, feats.x_t, feats.grid)
    }

    /// Regression head fed with real and pseudo features, channel-reduced per modality.
    pub fn regress_with_pseudo(
        &self,
        g: &mut Graph<'_>,
        feats: &Features,
        pseudo: (Var, Var),
    ) -> Result<Var> {
        let (red_r, red_t) = self
            .pseudo_reduce
            .as_ref()
            .ok_or_else(|| Error::contract("model built without the pseudo-feature head"))?;
        let cat_r = g.concat(&[feats.f_r, pseudo.0], 0)?;
        let cat_t = g.concat(&[feats.f_t, pseudo.1], 0)?;
        let r = red_r.forward(g, cat_r)?;
        let t = red_t.forward(g, cat_t)?;
        self.head.regress(g, r, t)
    }

    /// Density map from the inference pass only.
    pub fn predict(&self, g: &mut Graph<'_>, rgb: &Tensor, aux: &Tensor) -> Result<Var> {
        let feats = self.features(g, rgb, aux)?;
        self.head.regress(g, feats.f_r, feats.f_t)
    }

    /// Density map from the pseudo-feature head: both passes run.
    pub fn predict_with_pseudo(&self, g: &mut Graph<'_>, rgb: &Tensor, aux: &Tensor) -> Result<Var> {
        let feats = self.features(g, rgb, aux)?;
        let pseudo = self.emulate(g, &feats)?;
        self.regress_with_pseudo(g, &feats, pseudo)
    }

    /// Everything one training step needs: both passes when prompting is on.
    pub fn forward_train(&self, g: &mut Graph<'_>, rgb: &Tensor, aux: &Tensor) -> Result<TrainOutputs> {
        let features = self.features(g, rgb, aux)?;
        let pseudo = if self.prompts.is_some() {
            Some(self.emulate(g, &features)?)
        } else {
            None
        };
        let density = match (pseudo, self.pseudo_reduce.is_some()) {
            (Some(p), true) => self.regress_with_pseudo(g, &features, p)?,
            _ => self.head.regress(g, features.f_r, features.f_t)?,
        };
        Ok(TrainOutputs {
            density,
            features,
            pseudo,
        })
    }

    /// Copies parameters by name from `other`; parameters missing here are
    /// ignored, parameters missing there are an error.
    pub fn load_params_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = other
                .by_name(&name)
                .ok_or_else(|| Error::Config(format!("parameter {name} missing from source")))?;
            if src.shape() != self.params.get(id).shape() {
                return Err(Error::dim(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    src.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = src.clone();
        }
        Ok(())
    }
}
