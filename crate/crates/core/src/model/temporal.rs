//! Causal sliding window and bidirectional temporal transformer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::transformer::{block, init_block, sinusoidal};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub k: usize,
    /// Initial weights are proportional to `gamma^i`.
    pub gamma: f64,
    /// One weight profile for all channels instead of one per channel.
    pub shared: bool,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            k: 4,
            gamma: 0.5,
            shared: false,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("window: k must be at least 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!(
                "window: gamma must lie in (0,1) for a decaying profile, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PosEncoding {
    Sinusoidal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BittConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub pos_encoding: PosEncoding,
    /// Each stream attends only to its own past, so the forward stream sees
    /// frames up to `t` and the reversed stream frames from `t` on.
    pub causal_streams: bool,
}

impl Default for BittConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            dim: 64,
            heads: 4,
            ff_dim: 128,
            pos_encoding: PosEncoding::Sinusoidal,
            causal_streams: true,
        }
    }
}

impl BittConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("bitt: at least one layer per stream".into()));
        }
        if self.heads == 0 || self.dim == 0 || self.dim % self.heads != 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!(
                "bitt: dim {} must be positive and divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Logits `i * ln(gamma)` so the softmax over the window gives `w_i ∝ gamma^i`.
pub fn init_window<T: Real>(store: &mut ParamStore<T>, cfg: &WindowConfig, channels: usize) {
    let width = if cfg.shared { 1 } else { channels };
    let lg = cfg.gamma.ln();
    let data = (0..cfg.k)
        .flat_map(|i| std::iter::repeat_n(T::of_f64(i as f64 * lg), width))
        .collect();
    store.insert("window.logits", Tensor::new(&[cfg.k, width], data).expect("window shape"));
}

/// Realised `[k, width]` window weights: softmax of the logits over `k`.
pub fn window_weights<T: Real>(g: &mut Graph<T>, p: &Bound) -> Result<Var> {
    let logits = p.get("window.logits")?;
    let lt = g.transpose(logits)?;
    let w = g.softmax(lt, false)?;
    g.transpose(w)
}

/// Window weights without building a training graph.
pub fn realized_window(logits: &Tensor<f32>) -> Result<Tensor<f32>> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let lt = g.transpose(l)?;
    let w = g.softmax(lt, false)?;
    let w = g.transpose(w)?;
    Ok(g.value(w).clone())
}

/// `out[t] = Σ_i w_i ⊙ x[t-i]` with zero left padding.
pub fn sliding_aggregate<T: Real>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    g.causal_conv(x, w)
}

pub fn init_bitt<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &BittConfig, in_dim: usize, rng: &mut R) {
    for dir in ["fwd", "bwd"] {
        store.init_linear(&format!("bitt.{dir}.in"), in_dim, cfg.dim, rng);
        for j in 0..cfg.layers {
            init_block(store, &format!("bitt.{dir}.block{j}"), cfg.dim, cfg.ff_dim, rng);
        }
        store.init_layer_norm(&format!("bitt.{dir}.ln"), cfg.dim);
    }
    store.init_linear("head", 2 * cfg.dim, 1, rng);
}

fn stream<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &BittConfig, dir: &str, x: Var) -> Result<Var> {
    let t = g.shape(x)[0];
    let mut h = p.linear(g, &format!("bitt.{dir}.in"), x)?;
    if cfg.pos_encoding == PosEncoding::Sinusoidal {
        let pe = g.constant(sinusoidal(t, cfg.dim));
        h = g.add(h, pe)?;
    }
    for j in 0..cfg.layers {
        h = block(g, p, &format!("bitt.{dir}.block{j}"), h, cfg.heads, cfg.causal_streams)?;
    }
    p.layer_norm(g, &format!("bitt.{dir}.ln"), h)
}

/// Per-frame logits `[T, 1]` and embeddings `H = [H_f, H_b]` of shape `[T, 2d]`.
pub fn bitt_forward<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &BittConfig, x: Var) -> Result<(Var, Var)> {
    let t = g.shape(x)[0];
    if t == 0 {
        return Err(Error::invalid("bitt_forward", "empty sequence"));
    }
    let flip: Vec<usize> = (0..t).rev().collect();
    let hf = stream(g, p, cfg, "fwd", x)?;
    let xr = g.gather_rows(x, &flip)?;
    let hb = stream(g, p, cfg, "bwd", xr)?;
    let hb = g.gather_rows(hb, &flip)?;
    let h = g.concat(&[hf, hb], 1)?;
    let z = p.linear(g, "head", h)?;
    Ok((z, h))
}

/// `σ(z)` in double precision.
pub fn posterior(z: &[f32]) -> Vec<f64> {
    z.iter().map(|&v| 1.0 / (1.0 + (-(v as f64)).exp())).collect()
}
