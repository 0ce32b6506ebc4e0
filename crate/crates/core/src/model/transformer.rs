//! Pre-norm transformer encoder block shared by the frame encoder and the
//! temporal streams.

use rand::Rng;

use super::params::{Bound, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub fn init_block<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dim: usize,
    mlp_dim: usize,
    rng: &mut R,
) {
    store.init_layer_norm(&format!("{prefix}.ln1"), dim);
    store.init_linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, rng);
    store.init_linear(&format!("{prefix}.attn.out"), dim, dim, rng);
    store.init_layer_norm(&format!("{prefix}.ln2"), dim);
    store.init_linear(&format!("{prefix}.mlp.fc1"), dim, mlp_dim, rng);
    store.init_linear(&format!("{prefix}.mlp.fc2"), mlp_dim, dim, rng);
}

/// Multi-head self-attention over the rows of `x: [n, dim]`.
pub fn attention<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let dim = g.shape(x)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!(
            "{prefix}: dim {dim} is not divisible by {heads} heads"
        )));
    }
    let dh = dim / heads;
    let qkv = p.linear(g, &format!("{prefix}.qkv"), x)?;
    let scale = T::one() / T::of_f64(dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = g.slice(qkv, 1, h * dh, dh)?;
        let k = g.slice(qkv, 1, dim + h * dh, dh)?;
        let v = g.slice(qkv, 1, 2 * dim + h * dh, dh)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, scale)?;
        let a = g.softmax(s, causal)?;
        outs.push(g.matmul(a, v)?);
    }
    let o = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    p.linear(g, &format!("{prefix}.out"), o)
}

pub fn block<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = p.layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let a = attention(g, p, &format!("{prefix}.attn"), h, heads, causal)?;
    let x = g.add(x, a)?;
    let h = p.layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let h = p.linear(g, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.relu(h)?;
    let h = p.linear(g, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Sinusoidal position table `[n, dim]`.
pub fn sinusoidal<T: Real>(n: usize, dim: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * dim];
    for t in 0..n {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
            let angle = t as f64 * freq;
            data[t * dim + i] = T::of_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(&[n, dim], data).expect("sinusoidal shape")
}
