//! The detector network: frozen-prior input, multi-depth encoder, causal
//! window, bidirectional temporal transformer and the per-frame head.

pub mod encoder;
pub mod params;
pub mod temporal;
mod transformer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DetectorConfig;
use crate::dataio::SweepSequence;
use crate::error::{Error, Result};
use crate::par::ExecMode;
use crate::prior::augment_sequence;
use crate::prs::{prs_detect, Detection, PrsConfig};
use crate::tensor::{Graph, Real, Tensor, Var};

pub use encoder::{DepthFeatures, EncoderConfig, Pooling};
pub use params::{Bound, ParamStore};
pub use temporal::{posterior, BittConfig, PosEncoding, WindowConfig};

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[T, 1]`.
    pub logits: Var,
    /// `[T, 2d]`.
    pub embeddings: Var,
    /// One `[T, 1]` logit column per fusion stage.
    pub stage_logits: Vec<Var>,
    pub fused: Var,
    pub aggregated: Var,
}

/// Everything downstream of the backbone: SE gates, fusion, auxiliary heads,
/// window and BiTT. `taps` are `[T, D]` features in tap order.
pub fn head_graph<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &DetectorConfig, taps: &[Var]) -> Result<Outputs> {
    let enc = &cfg.encoder;
    let mut gated = Vec::with_capacity(taps.len());
    for (&f, &l) in taps.iter().zip(&enc.tap_layers) {
        gated.push(encoder::se_rescale(g, p, l, f, None)?.0);
    }
    let fused = encoder::fuse_depths(g, p, enc, &gated)?;
    let mut stage_logits = Vec::with_capacity(fused.stages.len());
    for (s, &r) in fused.stages.iter().enumerate() {
        stage_logits.push(p.linear(g, &format!("aux.{s}"), r)?);
    }
    let w = temporal::window_weights(g, p)?;
    let aggregated = temporal::sliding_aggregate(g, fused.r, w)?;
    let (logits, embeddings) = temporal::bitt_forward(g, p, &cfg.bitt, aggregated)?;
    Ok(Outputs {
        logits,
        embeddings,
        stage_logits,
        fused: fused.r,
        aggregated,
    })
}

/// Backbone plus head on `[n_patches, p*p]` patch matrices, one per frame.
pub fn full_graph<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &DetectorConfig,
    frames: &[Var],
) -> Result<Outputs> {
    let n_taps = cfg.encoder.tap_layers.len();
    let mut per_tap: Vec<Vec<Var>> = vec![Vec::with_capacity(frames.len()); n_taps];
    for &f in frames {
        for (k, v) in encoder::backbone_graph(g, p, &cfg.encoder, f)?.into_iter().enumerate() {
            per_tap[k].push(v);
        }
    }
    let taps = per_tap
        .iter()
        .map(|rows| g.concat(rows, 0))
        .collect::<Result<Vec<_>>>()?;
    head_graph(g, p, cfg, &taps)
}

/// Posterior and embeddings of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub logits: Vec<f32>,
    pub p: Vec<f64>,
    pub embeddings: Vec<f32>,
    pub emb_dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamStore<f32>,
}

impl Detector {
    /// Fresh weights drawn from `cfg.encoder.seed`.
    pub fn new(cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg);
        Ok(Self { cfg, params })
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        trainable(&self.cfg, name)
    }

    /// Prior-augmented backbone features, one `[T, D]` tensor per tap.
    pub fn features(&self, seq: &SweepSequence, mode: ExecMode) -> Result<Vec<Tensor<f32>>> {
        let aug = augment_sequence(seq, &self.cfg.prior)?;
        encoder::encode_sequence(&self.params, &self.cfg.encoder, &aug.frames, aug.t, aug.h, aug.w, mode)
    }

    pub fn infer_features(&self, taps: &[Tensor<f32>]) -> Result<Inference> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let vars: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
        let out = head_graph(&mut g, &p, &self.cfg, &vars)?;
        let logits = g.value(out.logits).data().to_vec();
        let h = g.value(out.embeddings);
        Ok(Inference {
            p: posterior(&logits),
            logits,
            emb_dim: h.shape()[1],
            embeddings: h.data().to_vec(),
        })
    }

    pub fn infer(&self, seq: &SweepSequence, mode: ExecMode) -> Result<Inference> {
        let taps = self.features(seq, mode)?;
        self.infer_features(&taps)
    }

    pub fn detect(&self, seq: &SweepSequence, mode: ExecMode) -> Result<(Inference, Detection)> {
        let inf = self.infer(seq, mode)?;
        let det = self.postprocess(&inf, &self.cfg.prs)?;
        Ok((inf, det))
    }

    pub fn postprocess(&self, inf: &Inference, prs: &PrsConfig) -> Result<Detection> {
        prs_detect(&inf.p, &inf.embeddings, inf.emb_dim, prs)
    }

    /// Replace the parameters, checking names and shapes against this model.
    pub fn set_params(&mut self, params: ParamStore<f32>) -> Result<()> {
        check_compatible(&self.params, &params)?;
        self.params = params;
        Ok(())
    }
}

pub fn trainable(cfg: &DetectorConfig, name: &str) -> bool {
    cfg.encoder.train_backbone || !name.starts_with("backbone.")
}

pub fn init_params<T: Real>(cfg: &DetectorConfig) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed);
    let mut store = ParamStore::new();
    encoder::init_backbone(&mut store, &cfg.encoder, &mut rng);
    encoder::init_heads(&mut store, &cfg.encoder, &mut rng);
    temporal::init_window(&mut store, &cfg.window, cfg.encoder.out_dim());
    temporal::init_bitt(&mut store, &cfg.bitt, cfg.encoder.out_dim(), &mut rng);
    store
}

/// Same names with the same shapes.
pub fn check_compatible<T: Real>(want: &ParamStore<T>, got: &ParamStore<T>) -> Result<()> {
    for (name, t) in want.iter() {
        let other = got
            .get(name)
            .map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
        if other.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                other.shape(),
                t.shape()
            )));
        }
    }
    if let Some(extra) = got.names().into_iter().find(|n| !want.contains(n)) {
        return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
    }
    Ok(())
}
