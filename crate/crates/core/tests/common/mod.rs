#![allow(dead_code)]

use modal_emu_core::{Graph, ParamStore, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// Relative error between two gradient tensors, measured on their difference norm.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic
        .iter()
        .map(|a| a * a)
        .sum::<f64>()
        .sqrt()
        .max(numeric.iter().map(|n| n * n).sum::<f64>().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}

/// Central finite differences of `f` with respect to every element of every input.
pub fn numeric_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = f(&mut g, &vars).expect("forward");
        g.value(out).item()
    };
    let mut result = Vec::new();
    for i in 0..inputs.len() {
        let mut grads = Vec::with_capacity(inputs[i].numel());
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            grads.push((eval(&plus) - eval(&minus)) / (2.0 * FD_STEP));
        }
        result.push(grads);
    }
    result
}

pub fn analytic_grads<F>(inputs: &[Tensor], f: &F) -> Vec<Vec<f64>>
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars).expect("forward");
    g.backward(out).expect("backward");
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect()
}

/// Worst relative error across inputs between analytic and finite-difference gradients.
pub fn gradcheck<F>(inputs: &[Tensor], f: F) -> f64
where
    F: Fn(&mut Graph<'static>, &[Var]) -> Result<Var>,
{
    let a = analytic_grads(inputs, &f);
    let n = numeric_grads(inputs, &f);
    a.iter()
        .zip(&n)
        .map(|(a, n)| rel_error(a, n))
        .fold(0.0, f64::max)
}

/// `sum(out ⊙ weights)` with fixed random weights, so upstream gradients are not all ones.
pub fn project(g: &mut Graph<'_>, out: Var, seed: u64) -> Result<Var> {
    let w = random(g.shape(out), seed);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Direct six-loop cross-correlation.
pub fn conv_oracle(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.at(&[ci, iy as usize, ix as usize]) * w.at(&[o, ci, ki, kj]);
                            }
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co, ho, wo], out).unwrap()
}

/// `conv_oracle` plus a per-output-channel bias.
pub fn conv_bias_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut out = conv_oracle(x, w, stride, pad);
    let plane = out.shape()[1] * out.shape()[2];
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += b.data()[i / plane];
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "element {i}: {x} vs {y} (tol {tol})");
    }
}

/// Worst per-tensor relative error between analytic parameter gradients and
/// central differences over every scalar of every parameter in `store`.
pub fn param_gradcheck<F>(store: &ParamStore, f: F) -> (f64, String)
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::with_params(s);
        g.set_training(false);
        let out = f(&mut g).expect("forward");
        g.value(out).item()
    };
    let mut g = Graph::with_params(store);
    g.set_training(false);
    let out = f(&mut g).expect("forward");
    g.backward(out).expect("backward");
    let grads = g.param_grads().expect("grads");
    let mut worst = (0.0, String::new());
    let mut s = store.clone();
    for (id, name, t) in store.iter() {
        let analytic = grads
            .get(id)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut numeric = Vec::with_capacity(t.numel());
        for j in 0..t.numel() {
            let orig = s.get(id).data()[j];
            s.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(&s);
            s.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(&s);
            s.get_mut(id).data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
        let e = rel_error(&analytic, &numeric);
        if e > worst.0 {
            worst = (e, name.to_string());
        }
    }
    worst
}

/// Overwrites every `aux` parameter with its `rgb` counterpart.
pub fn symmetrize(store: &mut ParamStore) {
    let pairs: Vec<_> = store
        .iter()
        .filter(|(_, n, _)| n.contains("rgb"))
        .map(|(id, n, _)| (id, n.replace("rgb", "aux")))
        .collect();
    for (src, dst_name) in pairs {
        let dst = store.id(&dst_name).expect("counterpart");
        let v = store.get(src).clone();
        *store.get_mut(dst) = v;
    }
}
