//! Patch-transformer frame encoder with squeeze-excitation gates per tap and
//! recursive deep-to-shallow fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamStore};
use super::transformer::{block, init_block, sinusoidal};
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// 1-based block indices whose outputs are tapped, shallow to deep.
    pub tap_layers: Vec<usize>,
    pub fused_dim: usize,
    pub se_reduction: usize,
    pub pooling: Pooling,
    /// Update backbone weights during training. Off by default so features
    /// can be computed once per sequence.
    pub train_backbone: bool,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 12,
            heads: 4,
            mlp_dim: 128,
            tap_layers: vec![5, 7, 9, 11],
            fused_dim: 64,
            se_reduction: 4,
            pooling: Pooling::Mean,
            train_backbone: false,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("encoder: {m}")));
        if self.tap_layers.is_empty() {
            return bad("at least one tap layer is required".into());
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap_layers {:?} must be strictly increasing", self.tap_layers));
        }
        if self.tap_layers[0] == 0 || *self.tap_layers.last().unwrap() > self.depth {
            return bad(format!(
                "tap_layers {:?} must lie in 1..={}",
                self.tap_layers, self.depth
            ));
        }
        if self.patch_size == 0 || self.embed_dim == 0 || self.fused_dim == 0 || self.mlp_dim == 0 {
            return bad("patch_size, embed_dim, mlp_dim and fused_dim must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.se_reduction == 0 || self.embed_dim / self.se_reduction == 0 {
            return bad(format!("se_reduction {} is too large", self.se_reduction));
        }
        Ok(())
    }

    /// Width of the fused frame feature.
    pub fn out_dim(&self) -> usize {
        if self.tap_layers.len() == 1 {
            self.embed_dim
        } else {
            self.fused_dim
        }
    }

    /// Number of fusion stages beyond the base case.
    pub fn stages(&self) -> usize {
        self.tap_layers.len() - 1
    }
}

/// Pooled token vectors per tap, in `tap_layers` order.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthFeatures {
    pub taps: Vec<usize>,
    pub features: Vec<Vec<f32>>,
}

pub fn init_backbone<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    store.init_linear("backbone.patch", cfg.patch_size * cfg.patch_size, d, rng);
    if cfg.pooling == Pooling::Cls {
        store.insert("backbone.cls", Tensor::randn(&[1, d], 0.02, rng));
    }
    let last = *cfg.tap_layers.last().expect("validated");
    for i in 1..=last {
        init_block(store, &format!("backbone.block{i}"), d, cfg.mlp_dim, rng);
    }
}

pub fn init_heads<T: Real, R: Rng>(store: &mut ParamStore<T>, cfg: &EncoderConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    let hidden = d / cfg.se_reduction;
    for &l in &cfg.tap_layers {
        store.init_linear(&format!("se.{l}.fc1"), d, hidden, rng);
        store.init_linear(&format!("se.{l}.fc2"), hidden, d, rng);
    }
    let mut r_dim = d;
    for s in 0..cfg.stages() {
        store.init_linear(&format!("fusion.{s}.proj"), r_dim, cfg.fused_dim, rng);
        store.init_linear(&format!("fusion.{s}.fc1"), cfg.fused_dim + d, cfg.fused_dim, rng);
        store.init_linear(&format!("fusion.{s}.fc2"), cfg.fused_dim, cfg.fused_dim, rng);
        store.init_linear(&format!("aux.{s}"), cfg.fused_dim, 1, rng);
        r_dim = cfg.fused_dim;
    }
}

/// Cut an `h x w` frame into row-major `p x p` patches, `[n_patches, p*p]`.
pub fn patchify<T: Real>(frame: &[f32], h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    if h % p != 0 || w % p != 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "patchify",
            format!("frame {h}x{w} is not divisible into {p}x{p} patches"),
        ));
    }
    if frame.len() != h * w {
        return Err(Error::invalid(
            "patchify",
            format!("frame holds {} values, expected {h}x{w}", frame.len()),
        ));
    }
    let (ph, pw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for by in 0..ph {
        for bx in 0..pw {
            for y in 0..p {
                let row = (by * p + y) * w + bx * p;
                data.extend(frame[row..row + p].iter().map(|&v| T::of_f64(v as f64)));
            }
        }
    }
    Tensor::new(&[ph * pw, p * p], data)
}

/// Backbone forward on `[n_patches, p*p]`; returns one `[1, D]` pooled vector
/// per tap.
pub fn backbone_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    patches: Var,
) -> Result<Vec<Var>> {
    let n = g.shape(patches)[0];
    let x = p.linear(g, "backbone.patch", patches)?;
    let pos = g.constant(sinusoidal(n, cfg.embed_dim));
    let mut x = g.add(x, pos)?;
    if cfg.pooling == Pooling::Cls {
        let cls = p.get("backbone.cls")?;
        x = g.concat(&[cls, x], 0)?;
    }
    let last = *cfg.tap_layers.last().expect("validated");
    let mut taps = Vec::with_capacity(cfg.tap_layers.len());
    for i in 1..=last {
        x = block(g, p, &format!("backbone.block{i}"), x, cfg.heads, false)?;
        if cfg.tap_layers.contains(&i) {
            let pooled = match cfg.pooling {
                Pooling::Mean => g.mean_rows(x)?,
                Pooling::Cls => g.slice(x, 0, 0, 1)?,
            };
            taps.push(pooled);
        }
    }
    Ok(taps)
}

/// Tap features of a single frame under fixed backbone weights.
pub fn encode_frame(
    store: &ParamStore<f32>,
    cfg: &EncoderConfig,
    frame: &[f32],
    h: usize,
    w: usize,
) -> Result<DepthFeatures> {
    let mut g = Graph::new();
    let p = store.bind(&mut g, |_| false);
    let patches = g.constant(patchify(frame, h, w, cfg.patch_size)?);
    let taps = backbone_graph(&mut g, &p, cfg, patches)?;
    Ok(DepthFeatures {
        taps: cfg.tap_layers.clone(),
        features: taps.into_iter().map(|v| g.value(v).data().to_vec()).collect(),
    })
}

/// Tap features of a whole sequence: one `[T, D]` tensor per tap.
pub fn encode_sequence(
    store: &ParamStore<f32>,
    cfg: &EncoderConfig,
    frames: &[f32],
    t: usize,
    h: usize,
    w: usize,
    mode: ExecMode,
) -> Result<Vec<Tensor<f32>>> {
    if frames.len() != t * h * w {
        return Err(Error::invalid(
            "encode_sequence",
            format!("{} values do not form {t} frames of {h}x{w}", frames.len()),
        ));
    }
    let per_frame = par::try_map(mode, &(0..t).collect::<Vec<_>>(), |&i| {
        encode_frame(store, cfg, &frames[i * h * w..(i + 1) * h * w], h, w)
    })?;
    let d = cfg.embed_dim;
    (0..cfg.tap_layers.len())
        .map(|k| {
            let mut data = Vec::with_capacity(t * d);
            for f in &per_frame {
                data.extend_from_slice(&f.features[k]);
            }
            Tensor::new(&[t, d], data)
        })
        .collect()
}

/// Squeeze-excitation gate `s = σ(relu(f W1 + b1) W2 + b2)` applied row-wise.
/// `force_gate` replaces `s` by a constant.
pub fn se_rescale<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    layer: usize,
    f: Var,
    force_gate: Option<f64>,
) -> Result<(Var, Var)> {
    let s = match force_gate {
        Some(v) => {
            let shape = g.shape(f).to_vec();
            g.constant(Tensor::full(&shape, T::of_f64(v)))
        }
        None => {
            let h = p.linear(g, &format!("se.{layer}.fc1"), f)?;
            let h = g.relu(h)?;
            let h = p.linear(g, &format!("se.{layer}.fc2"), h)?;
            g.sigmoid(h)?
        }
    };
    Ok((g.mul(f, s)?, s))
}

/// Output of [`fuse_depths`].
#[derive(Clone, Debug)]
pub struct Fused {
    pub r: Var,
    /// `r` after each fusion step, deepest first; empty for a single tap.
    pub stages: Vec<Var>,
}

/// `r = f̃(deepest)`, then `r = MLP([Proj(r), f̃(next shallower)])`.
/// `taps` are SE-rescaled features in `tap_layers` order.
pub fn fuse_depths<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &EncoderConfig,
    taps: &[Var],
) -> Result<Fused> {
    if taps.is_empty() {
        return Err(Error::invalid("fuse_depths", "no taps"));
    }
    if taps.len() != cfg.tap_layers.len() {
        return Err(Error::invalid(
            "fuse_depths",
            format!("{} tap features for {} configured taps", taps.len(), cfg.tap_layers.len()),
        ));
    }
    let mut order = taps.iter().rev();
    let mut r = *order.next().expect("non-empty");
    let mut stages = Vec::with_capacity(taps.len() - 1);
    for (s, &f) in order.enumerate() {
        let proj = p.linear(g, &format!("fusion.{s}.proj"), r)?;
        if g.shape(proj)[1] != cfg.fused_dim {
            return Err(Error::Shape {
                op: "fuse_depths",
                lhs: g.shape(proj).to_vec(),
                rhs: vec![cfg.fused_dim],
            });
        }
        let x = g.concat(&[proj, f], 1)?;
        let h = p.linear(g, &format!("fusion.{s}.fc1"), x)?;
        let h = g.relu(h)?;
        r = p.linear(g, &format!("fusion.{s}.fc2"), h)?;
        stages.push(r);
    }
    Ok(Fused { r, stages })
}
