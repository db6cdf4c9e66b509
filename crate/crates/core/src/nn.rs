//! Parameterised layers built on the graph primitives.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Gain of the Kaiming-uniform initialisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gain {
    /// `√2`, for layers followed by a ReLU.
    Relu,
    /// `1`, for layers whose output is used linearly.
    Unit,
}

/// Kaiming-uniform fan-in bound `gain·√(3/fan_in)`.
pub fn kaiming_bound(fan_in: usize, gain: Gain) -> f64 {
    let g2 = match gain {
        Gain::Relu => 2.0,
        Gain::Unit => 1.0,
    };
    (3.0 * g2 / fan_in as f64).sqrt()
}

/// Affine map on row vectors: `x·W + b`, with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = Tensor::uniform(&[in_dim, out_dim], kaiming_bound(in_dim, Gain::Unit), rng);
        Ok(Linear {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]))?,
            in_dim,
            out_dim,
        })
    }

    /// `x: N×in` → `N×out`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        gain: Gain,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = Tensor::uniform(&[out_ch, in_ch, kernel, kernel], kaiming_bound(fan_in, gain), rng);
        Ok(Conv2d {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]))?,
            stride,
            pad,
        })
    }

    /// 3×3, stride 1, padding 1: spatial extent preserved.
    pub fn same3<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        gain: Gain,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 3, 1, 1, gain, rng)
    }

    pub fn pointwise<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        gain: Gain,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(store, name, in_ch, out_ch, 1, 1, 0, gain, rng)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight)?;
        let b = g.param(self.bias)?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Two pointwise convolutions with a ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub expand: Conv2d,
    pub project: Conv2d,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            expand: Conv2d::pointwise(store, &format!("{name}.expand"), channels, hidden, Gain::Relu, rng)?,
            project: Conv2d::pointwise(store, &format!("{name}.project"), hidden, channels, Gain::Unit, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.expand.forward(g, x)?;
        let h = g.relu(h)?;
        self.project.forward(g, h)
    }
}
