//! Cross-modal emulation pass.
//!
//! Each modality's first-stage sequence is attention-prompted (learnable key and
//! value sub-prompts prepended inside self-attention) and then pushed through the
//! shared HCMA stack with the stream slots swapped, so RGB features come out as
//! pseudo-auxiliary features and vice versa. The pass only runs during training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hcma::{multi_head_attention, AttentionProj, HcmaStack, Modality};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Half-width of the uniform prompt initialisation.
pub const PROMPT_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Key/value attention prompting.
    #[default]
    Ap,
    /// Input prompting: extra tokens prepended to the first block's input.
    Ip,
    /// No emulation pass.
    Off,
}

impl PromptMode {
    pub fn is_on(self) -> bool {
        self != PromptMode::Off
    }
}

/// Learnable prompts of both modalities.
///
/// In attention-prompting mode each tensor is `2·L_p × d` (key sub-prompts in
/// the first `L_p` rows, value sub-prompts in the rest) and is shared by every
/// head. In input-prompting mode each tensor is `L_p × D` tokens.
#[derive(Debug, Clone)]
pub struct PromptSet {
    pub mode: PromptMode,
    pub len: usize,
    pub rgb: ParamId,
    pub aux: ParamId,
}

impl PromptSet {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        mode: PromptMode,
        len: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = match mode {
            PromptMode::Ap => {
                if heads == 0 || dim % heads != 0 {
                    return Err(Error::Config(format!(
                        "embedding dim {dim} is not divisible by {heads} heads"
                    )));
                }
                [2 * len, dim / heads]
            }
            PromptMode::Ip => [len, dim],
            PromptMode::Off => {
                return Err(Error::Config("prompts requested with prompting off".into()))
            }
        };
        let rgb = store.add("prompts.rgb", Tensor::uniform(&shape, PROMPT_INIT, rng))?;
        let aux = store.add("prompts.aux", Tensor::uniform(&shape, PROMPT_INIT, rng))?;
        Ok(PromptSet {
            mode,
            len,
            rgb,
            aux,
        })
    }

    pub fn id(&self, m: Modality) -> ParamId {
        match m {
            Modality::Rgb => self.rgb,
            Modality::Aux => self.aux,
        }
    }
}

/// Plain multi-head self-attention of `x` under `proj`.
pub fn self_attention(g: &mut Graph<'_>, x: Var, proj: &AttentionProj, heads: usize) -> Result<Var> {
    let (q, k, v) = proj.project(g, x)?;
    multi_head_attention(g, q, k, v, heads)
}

/// `softmax(Q·[P^k, K]ᵀ/√d)·[P^v, V]` with `Q, K, V` projected from `x`.
///
/// `prompts` is `2·L_p × d`; the same sub-prompts are prepended to every head.
pub fn prompt_attend(
    g: &mut Graph<'_>,
    x: Var,
    prompts: Var,
    proj: &AttentionProj,
    heads: usize,
) -> Result<Var> {
    let (q, k, v) = proj.project(g, x)?;
    let dm = g.shape(k)[1];
    let ps = g.shape(prompts).to_vec();
    if heads == 0 || dm % heads != 0 {
        return Err(Error::dim(format!("width {dm} not divisible by {heads} heads")));
    }
    if ps.len() != 2 || ps[0] % 2 != 0 || ps[1] != dm / heads {
        return Err(Error::dim(format!(
            "prompts {ps:?} must be 2·L_p × {} for {heads} heads of width {dm}",
            dm / heads
        )));
    }
    let lp = ps[0] / 2;
    let pk = g.slice(prompts, 0, 0, lp)?;
    let pv = g.slice(prompts, 0, lp, lp)?;
    let (pk, pv) = if heads == 1 {
        (pk, pv)
    } else {
        (g.concat(&vec![pk; heads], 1)?, g.concat(&vec![pv; heads], 1)?)
    };
    let k = g.concat(&[pk, k], 0)?;
    let v = g.concat(&[pv, v], 0)?;
    multi_head_attention(g, q, k, v, heads)
}

/// Prepends full-width prompt tokens to a sequence.
pub fn input_prompting_variant(g: &mut Graph<'_>, x: Var, prompts: Var) -> Result<Var> {
    if g.shape(prompts).len() != 2 || g.shape(prompts)[1] != g.shape(x)[1] {
        return Err(Error::dim(format!(
            "input prompts {:?} do not match sequence {:?}",
            g.shape(prompts),
            g.shape(x)
        )));
    }
    g.concat(&[prompts, x], 0)
}

/// `[F̄_t, F̄_r] = ψ(F_r^p, F_t^p)`: the prompted RGB sequence enters the
/// auxiliary slot of the shared stack and the prompted auxiliary sequence the
/// RGB slot. `prefix` leading tokens are dropped after the first block's
/// attention. Returns `(F̄_t, F̄_r)`.
pub fn emulate(
    g: &mut Graph<'_>,
    stack: &HcmaStack,
    f_r_p: Var,
    f_t_p: Var,
    grid: (usize, usize),
    prefix: usize,
) -> Result<(Var, Var)> {
    let (from_aux, from_rgb) = stack.forward_sequences(g, f_t_p, f_r_p, grid, prefix)?;
    Ok((from_rgb, from_aux))
}

/// Runs the whole emulation pass from first-stage sequences `(X_r, X_t)`.
/// Returns `(F̄_r, F̄_t)`.
pub fn cme_pass(
    g: &mut Graph<'_>,
    stack: &HcmaStack,
    prompts: &PromptSet,
    x_r: Var,
    x_t: Var,
    grid: (usize, usize),
) -> Result<(Var, Var)> {
    let p_r = g.param(prompts.rgb)?;
    let p_t = g.param(prompts.aux)?;
    let (f_t_bar, f_r_bar) = match prompts.mode {
        PromptMode::Ap => {
            let scma = stack.stages[0].block.scma.as_ref().ok_or_else(|| {
                Error::Config("attention prompting needs the first block's scma projections".into())
            })?;
            let heads = scma.heads;
            let f_r_p = prompt_attend(g, x_r, p_r, &scma.rgb, heads)?;
            let f_t_p = prompt_attend(g, x_t, p_t, &scma.aux, heads)?;
            emulate(g, stack, f_r_p, f_t_p, grid, 0)?
        }
        PromptMode::Ip => {
            let f_r_p = input_prompting_variant(g, x_r, p_r)?;
            let f_t_p = input_prompting_variant(g, x_t, p_t)?;
            emulate(g, stack, f_r_p, f_t_p, grid, prompts.len)?
        }
        PromptMode::Off => return Err(Error::contract("emulation pass with prompting off")),
    };
    Ok((f_r_bar, f_t_bar))
}
