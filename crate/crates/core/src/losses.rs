//! Consistency loss between real and pseudo features, Bayesian counting loss,
//! and their sum.

use serde::{Deserialize, Serialize};

use crate::data::Point;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Euclidean distance between the real and pseudo features of both modalities:
/// `‖F̂_r − F̄_r‖₂ + ‖F̂_t − F̄_t‖₂` for one sample.
pub fn consistency_loss(
    g: &mut Graph<'_>,
    f_r_hat: Var,
    f_r_bar: Var,
    f_t_hat: Var,
    f_t_bar: Var,
) -> Result<Var> {
    let pair = |g: &mut Graph<'_>, a: Var, b: Var| -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::dim(format!(
                "consistency pair {:?} vs {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        let d = g.sub(a, b)?;
        g.l2_norm(d)
    };
    let r = pair(g, f_r_hat, f_r_bar)?;
    let t = pair(g, f_t_hat, f_t_bar)?;
    g.add(r, t)
}

/// What to do with an image that has no annotated heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZeroAnnotationPolicy {
    /// Penalise the predicted total: `|0 − ΣD̂|`.
    #[default]
    CountToZero,
    /// Contribute nothing.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesianLoss {
    /// Gaussian standard deviation in image pixels.
    pub sigma: f64,
    /// Image pixels per density-map cell.
    pub stride: usize,
    pub zero_policy: ZeroAnnotationPolicy,
}

impl Default for BayesianLoss {
    fn default() -> Self {
        BayesianLoss {
            sigma: 8.0,
            stride: 8,
            zero_policy: ZeroAnnotationPolicy::CountToZero,
        }
    }
}

impl BayesianLoss {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        Ok(())
    }

    /// Posterior of every head at every cell of an `h×w` map, as a
    /// `K × (h·w)` matrix whose columns sum to one. Cells sit at pixel
    /// centres `((j + ½)·s, (i + ½)·s)`.
    pub fn posterior(&self, points: &[Point], h: usize, w: usize) -> Tensor {
        let k = points.len();
        let s = self.stride as f64;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut data = vec![0.0; k * h * w];
        let mut logits = vec![0.0; k];
        for i in 0..h {
            let cy = (i as f64 + 0.5) * s;
            for j in 0..w {
                let cx = (j as f64 + 0.5) * s;
                for (l, p) in logits.iter_mut().zip(points) {
                    let (dx, dy) = (cx - p[0], cy - p[1]);
                    *l = -(dx * dx + dy * dy) * inv;
                }
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (n, l) in logits.iter().enumerate() {
                    data[n * h * w + i * w + j] = (l - m).exp() / z;
                }
            }
        }
        Tensor::new(vec![k, h * w], data).expect("sized above")
    }

    /// `Σ_i |1 − ⟨D̂, posterior_i⟩|` for a `1×h×w` or `h×w` density map.
    pub fn loss(&self, g: &mut Graph<'_>, density: Var, points: &[Point]) -> Result<Var> {
        self.validate()?;
        if !g.value(density).is_finite() {
            return Err(Error::numeric("density map contains NaN or infinity"));
        }
        let s = g.shape(density).to_vec();
        let (h, w) = match s.as_slice() {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::dim(format!("density map must be 1×H×W, got {s:?}"))),
        };
        if points.is_empty() {
            return match self.zero_policy {
                ZeroAnnotationPolicy::CountToZero => {
                    let total = g.sum(density)?;
                    g.abs(total)
                }
                ZeroAnnotationPolicy::Skip => Ok(g.constant(Tensor::scalar(0.0))),
            };
        }
        let post = g.constant(self.posterior(points, h, w));
        let flat = g.reshape(density, &[h * w, 1])?;
        let mass = g.matmul(post, flat)?;
        let dev = g.affine(mass, -1.0, 1.0)?;
        let dev = g.abs(dev)?;
        g.sum(dev)
    }
}

/// `L_BL + L_CL`, both finite.
pub fn total_loss(g: &mut Graph<'_>, bl: Var, cl: Var) -> Result<Var> {
    for (name, v) in [("bayesian", bl), ("consistency", cl)] {
        if !g.value(v).is_scalar() {
            return Err(Error::dim(format!("{name} loss is not a scalar")));
        }
        if !g.value(v).is_finite() {
            return Err(Error::numeric(format!("{name} loss is not finite")));
        }
    }
    g.add(bl, cl)
}
