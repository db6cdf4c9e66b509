//! Two-stream convolutional feature extractor and patch (un)embedding.
//!
//! Each stream is three blocks of `convs_per_block` 3×3 convolutions with ReLU,
//! followed by 2×2 max pooling, so the output is 1/8 of the input resolution.
//! The RGB and auxiliary streams own disjoint parameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Gain, Linear};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const NUM_BLOCKS: usize = 3;

/// Spatial reduction of a stream: one 2× pool per block.
pub const DOWNSAMPLE: usize = 1 << NUM_BLOCKS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            channels: vec![8, 16, 32],
            convs_per_block: 2,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != NUM_BLOCKS {
            return Err(Error::Config(format!(
                "backbone needs exactly {NUM_BLOCKS} blocks, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0) || self.convs_per_block == 0 {
            return Err(Error::Config("backbone channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    /// Patch size of each HCMA stage.
    pub patch_sizes: Vec<usize>,
    /// Embedding dimension of each HCMA stage.
    pub dims: Vec<usize>,
}

impl Default for PatchEmbedConfig {
    fn default() -> Self {
        PatchEmbedConfig {
            patch_sizes: vec![2, 1, 1],
            dims: vec![64, 64, 64],
        }
    }
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_sizes.is_empty() || self.patch_sizes.len() != self.dims.len() {
            return Err(Error::Config(format!(
                "patch_sizes ({}) and dims ({}) must be non-empty and equally long",
                self.patch_sizes.len(),
                self.dims.len()
            )));
        }
        if self.patch_sizes.iter().chain(&self.dims).any(|&v| v == 0) {
            return Err(Error::Config("patch sizes and dims must be positive".into()));
        }
        Ok(())
    }

    /// Product of all stage patch sizes.
    pub fn total_reduction(&self) -> usize {
        self.patch_sizes.iter().product()
    }
}

/// One modality's convolutional stream.
#[derive(Debug, Clone)]
pub struct Stream {
    blocks: Vec<Vec<Conv2d>>,
}

impl Stream {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &StreamConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut ch = in_channels;
        for (b, &out) in cfg.channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(cfg.convs_per_block);
            for c in 0..cfg.convs_per_block {
                convs.push(Conv2d::same3(
                    store,
                    &format!("{name}.block{b}.conv{c}"),
                    ch,
                    out,
                    Gain::Relu,
                    rng,
                )?);
                ch = out;
            }
            blocks.push(convs);
        }
        Ok(Stream { blocks })
    }

    pub fn blocks(&self) -> &[Vec<Conv2d>] {
        &self.blocks
    }

    /// `C_in×H×W` → `C×H/8×W/8`.
    pub fn extract(&self, g: &mut Graph<'_>, img: Var) -> Result<Var> {
        let s = g.shape(img).to_vec();
        if s.len() != 3 || s[1] % DOWNSAMPLE != 0 || s[2] % DOWNSAMPLE != 0 {
            return Err(Error::dim(format!(
                "backbone input {s:?}: height and width must be divisible by {DOWNSAMPLE}"
            )));
        }
        let mut x = img;
        for block in &self.blocks {
            for conv in block {
                x = conv.forward(g, x)?;
                x = g.relu(x)?;
            }
            x = g.maxpool2d(x, 2)?;
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
pub struct TwoStreamBackbone {
    pub rgb: Stream,
    pub aux: Stream,
    /// Replicate a 1-channel auxiliary image to 3 channels before the stream.
    pub replicate_aux: bool,
}

impl TwoStreamBackbone {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &StreamConfig,
        replicate_aux: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let rgb = Stream::new(store, "backbone.rgb", 3, cfg, rng)?;
        let aux = Stream::new(store, "backbone.aux", if replicate_aux { 3 } else { 1 }, cfg, rng)?;
        Ok(TwoStreamBackbone {
            rgb,
            aux,
            replicate_aux,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, rgb: &Tensor, aux: &Tensor) -> Result<(Var, Var)> {
        if rgb.ndim() != 3 || aux.ndim() != 3 || rgb.shape()[1..] != aux.shape()[1..] {
            return Err(Error::dim(format!(
                "rgb {:?} and aux {:?} must be C×H×W images of equal size",
                rgb.shape(),
                aux.shape()
            )));
        }
        let vr = g.constant(rgb.clone());
        let mut va = g.constant(aux.clone());
        if self.replicate_aux && aux.shape()[0] == 1 {
            va = g.concat(&[va, va, va], 0)?;
        }
        Ok((self.rgb.extract(g, vr)?, self.aux.extract(g, va)?))
    }
}

/// Patch flattening followed by a learned projection to the stage dimension.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        patch: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = Linear::new(store, name, in_channels * patch * patch, dim, rng)?;
        Ok(PatchEmbed { patch, proj })
    }

    /// `C×H×W` → `N×D` with `N = (H/p)·(W/p)`.
    pub fn forward(&self, g: &mut Graph<'_>, f: Var) -> Result<Var> {
        let tokens = g.patchify(f, self.patch)?;
        if g.shape(tokens)[1] != self.proj.in_dim {
            return Err(Error::dim(format!(
                "patch embedding expects {} values per patch, got {}",
                self.proj.in_dim,
                g.shape(tokens)[1]
            )));
        }
        self.proj.forward(g, tokens)
    }
}

/// Reshapes an `N×C` token sequence into a `C×H×W` map (row-major token order).
pub fn tokens_to_map(g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != h * w {
        return Err(Error::dim(format!(
            "cannot unpatch sequence {s:?} onto a {h}×{w} grid"
        )));
    }
    let t = g.transpose(x)?;
    g.reshape(t, &[s[1], h, w])
}

/// Sequence → 2-D map, with a projection `D → C'` when the widths differ.
#[derive(Debug, Clone)]
pub struct Unpatch {
    pub proj: Option<Linear>,
}

impl Unpatch {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let proj = if dim == channels {
            None
        } else {
            Some(Linear::new(store, name, dim, channels, rng)?)
        };
        Ok(Unpatch { proj })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        let x = match &self.proj {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        tokens_to_map(g, x, h, w)
    }
}
