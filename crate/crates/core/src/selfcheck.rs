//! End-to-end gradient check of a micro detector: backbone, SE gates, fusion,
//! window, BiTT and the full training objective, in 64-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::DetectorConfig;
use crate::dataio::{synth_generate, SynthConfig};
use crate::error::Result;
use crate::model::encoder::patchify;
use crate::model::{full_graph, init_params, BittConfig, Bound, EncoderConfig};
use crate::objective::{objective, GumbelNoise, LossInputs};
use crate::par::ExecMode;
use crate::prior::augment_sequence;
use crate::tensor::{gradcheck, GradcheckReport, Tensor, Var};

/// Frames per checked window.
pub const MICRO_FRAMES: usize = 8;

/// Taps {2, 3} of a 3-block, 16-wide encoder on 8x8 frames and a one-layer BiTT.
pub fn micro_config(seed: u64) -> DetectorConfig {
    let mut cfg = DetectorConfig::default();
    cfg.encoder = EncoderConfig {
        patch_size: 4,
        embed_dim: 16,
        depth: 3,
        heads: 2,
        mlp_dim: 16,
        tap_layers: vec![2, 3],
        fused_dim: 16,
        se_reduction: 4,
        seed,
        ..EncoderConfig::default()
    };
    cfg.bitt = BittConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        ff_dim: 16,
        ..BittConfig::default()
    };
    cfg.synth = SynthConfig {
        cases: 1,
        sweeps_per_case: 1,
        frames: 40,
        height: 8,
        width: 8,
        events_per_sweep: [1, 1],
        seed,
        ..SynthConfig::default()
    };
    cfg
}

/// Gradient check of the total loss with respect to every parameter on a
/// window of [`MICRO_FRAMES`] frames around the synthetic event.
pub fn micro_gradcheck(seed: u64, tol: f64, mode: ExecMode) -> Result<GradcheckReport> {
    let cfg = micro_config(seed);
    let seq = synth_generate(&cfg.synth, ExecMode::Sequential)?.remove(0);
    let aug = augment_sequence(&seq, &cfg.prior)?;
    let start = seq
        .labels
        .iter()
        .position(|&v| v == 1)
        .unwrap_or(0)
        .saturating_sub(MICRO_FRAMES / 2)
        .min(seq.t - MICRO_FRAMES);
    let frames = (start..start + MICRO_FRAMES)
        .map(|t| patchify::<f64>(aug.frame(t), aug.h, aug.w, cfg.encoder.patch_size))
        .collect::<Result<Vec<_>>>()?;
    let labels = seq.labels[start..start + MICRO_FRAMES].to_vec();
    let store = init_params::<f64>(&cfg);
    let names = store.names();
    let params: Vec<(String, Tensor<f64>)> = store.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let noise = GumbelNoise::sample(MICRO_FRAMES, &mut ChaCha8Rng::seed_from_u64(seed));
    gradcheck(
        |g, vars| {
            let p = Bound::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
            let fv: Vec<Var> = frames.iter().map(|f| g.constant(f.clone())).collect();
            let out = full_graph(g, &p, &cfg, &fv)?;
            let inputs = LossInputs {
                logits: out.logits,
                embeddings: out.embeddings,
                stage_logits: &out.stage_logits,
                labels: &labels,
                tau: cfg.train.gumbel.tau0,
                noise: &noise,
            };
            Ok(objective(g, &inputs, &cfg.loss)?.0)
        },
        &params,
        tol,
        mode,
    )
}
