//! Hybrid cross-modal attention.
//!
//! A block fuses the two modality sequences twice: globally, with straight
//! cross-modal attention (queries of one modality against keys/values of the
//! other), and locally, with sigmoid-gated convolutional modulation of the
//! reshaped 2-D maps. The two results are concatenated, reduced back to `C'`
//! channels and passed through a per-modality feed-forward network. A stack of
//! blocks is followed by a weighted-sum regression head that emits the density
//! map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{PatchEmbed, PatchEmbedConfig, Unpatch};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, FeedForward, Gain, Linear};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Rgb,
    Aux,
}

/// Which fusion a block performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// SCMA + MCMA + concat/reduce fusion + feed-forward.
    #[default]
    Hybrid,
    /// Vanilla cross-attention: SCMA followed directly by the feed-forward network.
    Vca,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub patch: usize,
    pub dim: usize,
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
    pub kind: BlockKind,
    pub scma: bool,
    pub mcma: bool,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.kind == BlockKind::Vca && !self.scma {
            return Err(Error::Config("the vca block requires scma".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Scaled dot-product attention weights, one `Nq×Nk` matrix per head.
pub fn attention_weights(g: &mut Graph<'_>, q: Var, k: Var, heads: usize) -> Result<Vec<Var>> {
    let (sq, sk) = (g.shape(q).to_vec(), g.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::dim(format!("attention queries {sq:?} against keys {sk:?}")));
    }
    if heads == 0 || sq[1] % heads != 0 {
        return Err(Error::dim(format!("width {} not divisible by {heads} heads", sq[1])));
    }
    let d = sq[1] / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh) = if heads == 1 {
            (q, k)
        } else {
            (g.slice(q, 1, h * d, d)?, g.slice(k, 1, h * d, d)?)
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        out.push(g.softmax_rows(logits)?);
    }
    Ok(out)
}

/// Multi-head attention of `q: Nq×D` over `k, v: Nk×D`; heads split the width
/// evenly and are concatenated back to `Nq×D`.
pub fn multi_head_attention(g: &mut Graph<'_>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    if g.shape(k) != g.shape(v) {
        return Err(Error::dim(format!(
            "attention keys {:?} and values {:?} differ",
            g.shape(k),
            g.shape(v)
        )));
    }
    let weights = attention_weights(g, q, k, heads)?;
    let d = g.shape(v)[1] / heads;
    let mut outs = Vec::with_capacity(heads);
    for (h, w) in weights.into_iter().enumerate() {
        let vh = if heads == 1 { v } else { g.slice(v, 1, h * d, d)? };
        outs.push(g.matmul(w, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs, 1)
    }
}

/// Query/key/value projections of one modality.
#[derive(Debug, Clone)]
pub struct AttentionProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl AttentionProj {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(AttentionProj {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng)?,
        })
    }

    pub fn project(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var, Var)> {
        Ok((
            self.q.forward(g, x)?,
            self.k.forward(g, x)?,
            self.v.forward(g, x)?,
        ))
    }
}

/// Straight cross-modal attention parameters.
#[derive(Debug, Clone)]
pub struct ScmaParams {
    pub rgb: AttentionProj,
    pub aux: AttentionProj,
    pub out_rgb: Linear,
    pub out_aux: Linear,
    pub heads: usize,
    pub dropout: f64,
}

impl ScmaParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ScmaParams {
            rgb: AttentionProj::new(store, &format!("{name}.rgb"), dim, rng)?,
            aux: AttentionProj::new(store, &format!("{name}.aux"), dim, rng)?,
            out_rgb: Linear::new(store, &format!("{name}.out_rgb"), dim, dim, rng)?,
            out_aux: Linear::new(store, &format!("{name}.out_aux"), dim, dim, rng)?,
            heads,
            dropout,
        })
    }

    pub fn proj(&self, m: Modality) -> &AttentionProj {
        match m {
            Modality::Rgb => &self.rgb,
            Modality::Aux => &self.aux,
        }
    }

    /// Cross attention in both directions, then output projection, dropout and
    /// a residual from the query-side input. Returns sequences of the input shape.
    pub fn forward(&self, g: &mut Graph<'_>, x_r: Var, x_t: Var) -> Result<(Var, Var)> {
        if g.shape(x_r) != g.shape(x_t) || g.shape(x_r).len() != 2 {
            return Err(Error::dim(format!(
                "scma sequences {:?} and {:?} must match",
                g.shape(x_r),
                g.shape(x_t)
            )));
        }
        let (q_r, k_r, v_r) = self.rgb.project(g, x_r)?;
        let (q_t, k_t, v_t) = self.aux.project(g, x_t)?;
        let h_r = multi_head_attention(g, q_r, k_t, v_t, self.heads)?;
        let h_t = multi_head_attention(g, q_t, k_r, v_r, self.heads)?;
        let out_r = self.finish(g, &self.out_rgb, h_r, x_r)?;
        let out_t = self.finish(g, &self.out_aux, h_t, x_t)?;
        Ok((out_r, out_t))
    }

    fn finish(&self, g: &mut Graph<'_>, out: &Linear, h: Var, residual: Var) -> Result<Var> {
        let y = out.forward(g, h)?;
        let y = g.dropout(y, self.dropout)?;
        g.add(y, residual)
    }
}

/// `φ`: 3×3 conv, ReLU, 3×3 conv, channel-preserving.
#[derive(Debug, Clone)]
pub struct Phi {
    pub first: Conv2d,
    pub second: Conv2d,
}

impl Phi {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Phi {
            first: Conv2d::same3(store, &format!("{name}.conv0"), ch, ch, Gain::Relu, rng)?,
            second: Conv2d::same3(store, &format!("{name}.conv1"), ch, ch, Gain::Unit, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(g, x)?;
        let h = g.relu(h)?;
        self.second.forward(g, h)
    }
}

/// Modulated cross-modal attention parameters.
#[derive(Debug, Clone)]
pub struct McmaParams {
    pub phi_r: Phi,
    pub phi_t: Phi,
}

impl McmaParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, ch: usize, rng: &mut R) -> Result<Self> {
        Ok(McmaParams {
            phi_r: Phi::new(store, &format!("{name}.phi_rgb"), ch, rng)?,
            phi_t: Phi::new(store, &format!("{name}.phi_aux"), ch, rng)?,
        })
    }

    /// `F_r^l = φ_r(F̃_r) ⊙ σ(φ_t(F̃_t)) + F̃_r` and symmetrically for the auxiliary map.
    pub fn forward(&self, g: &mut Graph<'_>, f_r: Var, f_t: Var) -> Result<(Var, Var)> {
        if g.shape(f_r) != g.shape(f_t) {
            return Err(Error::dim(format!(
                "mcma maps {:?} and {:?} must match",
                g.shape(f_r),
                g.shape(f_t)
            )));
        }
        let p_r = self.phi_r.forward(g, f_r)?;
        let p_t = self.phi_t.forward(g, f_t)?;
        modulate(g, p_r, p_t, f_r, f_t)
    }
}

/// Gated exchange given already-computed `φ` outputs.
pub fn modulate(g: &mut Graph<'_>, p_r: Var, p_t: Var, f_r: Var, f_t: Var) -> Result<(Var, Var)> {
    let gate_t = g.sigmoid(p_t)?;
    let gate_r = g.sigmoid(p_r)?;
    let m_r = g.mul(p_r, gate_t)?;
    let m_t = g.mul(p_t, gate_r)?;
    Ok((g.add(m_r, f_r)?, g.add(m_t, f_t)?))
}

/// Global/local fusion of one modality.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub reduce: Conv2d,
    pub ffn: FeedForward,
}

impl Fusion {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        ch: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Fusion {
            reduce: Conv2d::pointwise(store, &format!("{name}.reduce"), 2 * ch, ch, Gain::Unit, rng)?,
            ffn: FeedForward::new(store, &format!("{name}.ffn"), ch, hidden, rng)?,
        })
    }

    /// `f([F_g, F_l])` with a 1×1 reduction to `C'` channels before `f`.
    pub fn forward(&self, g: &mut Graph<'_>, f_g: Var, f_l: Var) -> Result<Var> {
        if g.shape(f_g) != g.shape(f_l) {
            return Err(Error::dim(format!(
                "fusion inputs {:?} and {:?} must match",
                g.shape(f_g),
                g.shape(f_l)
            )));
        }
        let cat = g.concat(&[f_g, f_l], 0)?;
        let reduced = self.reduce.forward(g, cat)?;
        self.ffn.forward(g, reduced)
    }
}

#[derive(Debug, Clone)]
enum Merge {
    Hybrid {
        local_r: Unpatch,
        local_t: Unpatch,
        mcma: Option<McmaParams>,
        fuse_r: Fusion,
        fuse_t: Fusion,
    },
    Vca {
        ffn_r: FeedForward,
        ffn_t: FeedForward,
    },
}

/// One HCMA block operating on stage sequences.
#[derive(Debug, Clone)]
pub struct HcmaBlock {
    pub config: BlockConfig,
    pub scma: Option<ScmaParams>,
    global_r: Unpatch,
    global_t: Unpatch,
    merge: Merge,
}

impl HcmaBlock {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: BlockConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, c) = (cfg.dim, cfg.channels);
        let scma = if cfg.scma {
            Some(ScmaParams::new(store, &format!("{name}.scma"), d, cfg.heads, cfg.dropout, rng)?)
        } else {
            None
        };
        let global_r = Unpatch::new(store, &format!("{name}.global_rgb"), d, c, rng)?;
        let global_t = Unpatch::new(store, &format!("{name}.global_aux"), d, c, rng)?;
        let merge = match cfg.kind {
            BlockKind::Hybrid => Merge::Hybrid {
                local_r: Unpatch::new(store, &format!("{name}.local_rgb"), d, c, rng)?,
                local_t: Unpatch::new(store, &format!("{name}.local_aux"), d, c, rng)?,
                mcma: if cfg.mcma {
                    Some(McmaParams::new(store, &format!("{name}.mcma"), c, rng)?)
                } else {
                    None
                },
                fuse_r: Fusion::new(store, &format!("{name}.fuse_rgb"), c, cfg.ffn_hidden, rng)?,
                fuse_t: Fusion::new(store, &format!("{name}.fuse_aux"), c, cfg.ffn_hidden, rng)?,
            },
            BlockKind::Vca => Merge::Vca {
                ffn_r: FeedForward::new(store, &format!("{name}.ffn_rgb"), c, cfg.ffn_hidden, rng)?,
                ffn_t: FeedForward::new(store, &format!("{name}.ffn_aux"), c, cfg.ffn_hidden, rng)?,
            },
        };
        Ok(HcmaBlock {
            config: cfg,
            scma,
            global_r,
            global_t,
            merge,
        })
    }

    pub fn mcma(&self) -> Option<&McmaParams> {
        match &self.merge {
            Merge::Hybrid { mcma, .. } => mcma.as_ref(),
            Merge::Vca { .. } => None,
        }
    }

    fn drop_prefix(g: &mut Graph<'_>, x: Var, prefix: usize) -> Result<Var> {
        if prefix == 0 {
            return Ok(x);
        }
        let n = g.shape(x)[0];
        if prefix >= n {
            return Err(Error::dim(format!("prefix {prefix} covers the whole sequence of {n}")));
        }
        g.slice(x, 0, prefix, n - prefix)
    }

    /// Global branch: `(F_r^g, F_t^g)` on an `h×w` grid. The first `prefix`
    /// tokens of each sequence take part in attention and are then discarded.
    pub fn scma(
        &self,
        g: &mut Graph<'_>,
        x_r: Var,
        x_t: Var,
        grid: (usize, usize),
        prefix: usize,
    ) -> Result<(Var, Var)> {
        let (s_r, s_t) = match &self.scma {
            Some(p) => p.forward(g, x_r, x_t)?,
            None => (x_r, x_t),
        };
        let s_r = Self::drop_prefix(g, s_r, prefix)?;
        let s_t = Self::drop_prefix(g, s_t, prefix)?;
        Ok((
            self.global_r.forward(g, s_r, grid.0, grid.1)?,
            self.global_t.forward(g, s_t, grid.0, grid.1)?,
        ))
    }

    /// `(F̂_r, F̂_t)`, each `C'×h×w`.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x_r: Var,
        x_t: Var,
        grid: (usize, usize),
        prefix: usize,
    ) -> Result<(Var, Var)> {
        let (g_r, g_t) = self.scma(g, x_r, x_t, grid, prefix)?;
        match &self.merge {
            Merge::Vca { ffn_r, ffn_t } => Ok((ffn_r.forward(g, g_r)?, ffn_t.forward(g, g_t)?)),
            Merge::Hybrid {
                local_r,
                local_t,
                mcma,
                fuse_r,
                fuse_t,
            } => {
                let xr = Self::drop_prefix(g, x_r, prefix)?;
                let xt = Self::drop_prefix(g, x_t, prefix)?;
                let fr = local_r.forward(g, xr, grid.0, grid.1)?;
                let ft = local_t.forward(g, xt, grid.0, grid.1)?;
                let (l_r, l_t) = match mcma {
                    Some(m) => m.forward(g, fr, ft)?,
                    None => (fr, ft),
                };
                Ok((fuse_r.forward(g, g_r, l_r)?, fuse_t.forward(g, g_t, l_t)?))
            }
        }
    }
}

/// Patch embeddings plus the block of one stage.
#[derive(Debug, Clone)]
pub struct Stage {
    pub embed_r: PatchEmbed,
    pub embed_t: PatchEmbed,
    pub block: HcmaBlock,
}

/// Shared settings for every block of a stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackConfig {
    pub in_channels: usize,
    pub patches: PatchEmbedConfig,
    pub channels: usize,
    pub heads: usize,
    pub dropout: f64,
    pub ffn_hidden: usize,
    pub kind: BlockKind,
    pub scma: bool,
    pub mcma: bool,
}

#[derive(Debug, Clone)]
pub struct HcmaStack {
    pub stages: Vec<Stage>,
}

impl HcmaStack {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &StackConfig, rng: &mut R) -> Result<Self> {
        cfg.patches.validate()?;
        let mut stages = Vec::new();
        let mut in_ch = cfg.in_channels;
        for (i, (&patch, &dim)) in cfg.patches.patch_sizes.iter().zip(&cfg.patches.dims).enumerate() {
            let name = format!("stage{i}");
            let block_cfg = BlockConfig {
                in_channels: in_ch,
                patch,
                dim,
                channels: cfg.channels,
                heads: cfg.heads,
                dropout: cfg.dropout,
                ffn_hidden: cfg.ffn_hidden,
                kind: cfg.kind,
                scma: cfg.scma,
                mcma: cfg.mcma,
            };
            stages.push(Stage {
                embed_r: PatchEmbed::new(store, &format!("{name}.embed_rgb"), in_ch, patch, dim, rng)?,
                embed_t: PatchEmbed::new(store, &format!("{name}.embed_aux"), in_ch, patch, dim, rng)?,
                block: HcmaBlock::new(store, &name, block_cfg, rng)?,
            });
            in_ch = cfg.channels;
        }
        Ok(HcmaStack { stages })
    }

    /// Patch-embeds backbone maps for the first stage; returns sequences and grid.
    pub fn embed_first(&self, g: &mut Graph<'_>, f_r: Var, f_t: Var) -> Result<(Var, Var, (usize, usize))> {
        let stage = &self.stages[0];
        let s = g.shape(f_r).to_vec();
        if g.shape(f_t) != s.as_slice() {
            return Err(Error::dim(format!(
                "backbone maps {s:?} and {:?} differ",
                g.shape(f_t)
            )));
        }
        let x_r = stage.embed_r.forward(g, f_r)?;
        let x_t = stage.embed_t.forward(g, f_t)?;
        let p = stage.embed_r.patch;
        Ok((x_r, x_t, (s[1] / p, s[2] / p)))
    }

    /// Runs every stage starting from first-stage sequences on `grid`.
    pub fn forward_sequences(
        &self,
        g: &mut Graph<'_>,
        x_r: Var,
        x_t: Var,
        grid: (usize, usize),
        prefix: usize,
    ) -> Result<(Var, Var)> {
        let (mut f_r, mut f_t) = self.stages[0].block.forward(g, x_r, x_t, grid, prefix)?;
        let mut grid = grid;
        for stage in &self.stages[1..] {
            let p = stage.embed_r.patch;
            if grid.0 % p != 0 || grid.1 % p != 0 {
                return Err(Error::dim(format!(
                    "patch size {p} does not divide the {}×{} stage grid",
                    grid.0, grid.1
                )));
            }
            let x_r = stage.embed_r.forward(g, f_r)?;
            let x_t = stage.embed_t.forward(g, f_t)?;
            grid = (grid.0 / p, grid.1 / p);
            let out = stage.block.forward(g, x_r, x_t, grid, 0)?;
            f_r = out.0;
            f_t = out.1;
        }
        Ok((f_r, f_t))
    }

    pub fn forward(&self, g: &mut Graph<'_>, f_r: Var, f_t: Var) -> Result<(Var, Var)> {
        let (x_r, x_t, grid) = self.embed_first(g, f_r, f_t)?;
        self.forward_sequences(g, x_r, x_t, grid, 0)
    }
}

/// Weighted-sum fusion and regression head `γ`.
#[derive(Debug, Clone)]
pub struct RegressionHead {
    /// Pre-sigmoid logits of the modality weights `α` and `β`.
    pub alpha_logit: ParamId,
    pub beta_logit: ParamId,
    /// Nearest-neighbour factor restoring backbone resolution.
    pub upsample: usize,
    pub conv0: Conv2d,
    pub conv1: Conv2d,
    pub out: Conv2d,
}

impl RegressionHead {
    pub fn new<R: Rng>(store: &mut ParamStore, ch: usize, upsample: usize, rng: &mut R) -> Result<Self> {
        let half = (ch / 2).max(1);
        let quarter = (ch / 4).max(1);
        Ok(RegressionHead {
            alpha_logit: store.add("head.alpha_logit", Tensor::scalar(0.0))?,
            beta_logit: store.add("head.beta_logit", Tensor::scalar(0.0))?,
            upsample,
            conv0: Conv2d::same3(store, "head.conv0", ch, half, Gain::Relu, rng)?,
            conv1: Conv2d::same3(store, "head.conv1", half, quarter, Gain::Relu, rng)?,
            out: Conv2d::pointwise(store, "head.out", quarter, 1, Gain::Unit, rng)?,
        })
    }

    /// `(α, β)` under the current parameters.
    pub fn weights(&self, store: &ParamStore) -> (f64, f64) {
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        (
            s(store.get(self.alpha_logit).item()),
            s(store.get(self.beta_logit).item()),
        )
    }

    /// `γ`: upsample, two 3×3 convs with ReLU, 1×1 conv to one channel, ReLU.
    pub fn gamma(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let x = g.upsample_nearest(x, self.upsample)?;
        let x = self.conv0.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.conv1.forward(g, x)?;
        let x = g.relu(x)?;
        let x = self.out.forward(g, x)?;
        g.relu(x)
    }

    /// `D̂ = γ(α·F̂_r + β·F̂_t)`, shape `1×H×W`.
    pub fn regress(&self, g: &mut Graph<'_>, f_r: Var, f_t: Var) -> Result<Var> {
        if g.shape(f_r) != g.shape(f_t) {
            return Err(Error::dim(format!(
                "regression inputs {:?} and {:?} must match",
                g.shape(f_r),
                g.shape(f_t)
            )));
        }
        let a = g.param(self.alpha_logit)?;
        let b = g.param(self.beta_logit)?;
        let alpha = g.sigmoid(a)?;
        let beta = g.sigmoid(b)?;
        let wr = g.scale_by(f_r, alpha)?;
        let wt = g.scale_by(f_t, beta)?;
        let mixed = g.add(wr, wt)?;
        self.gamma(g, mixed)
    }
}
