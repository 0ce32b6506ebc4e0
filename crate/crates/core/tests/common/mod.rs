#![allow(dead_code)]

use sweepkey::dataio::{synth_generate, SweepSequence, SynthConfig};
use sweepkey::model::{BittConfig, EncoderConfig};
use sweepkey::par::ExecMode;
use sweepkey::DetectorConfig;

/// A model small enough to train in seconds on 32x32 frames.
pub fn small_config() -> DetectorConfig {
    let mut cfg = DetectorConfig::default();
    cfg.encoder = EncoderConfig {
        patch_size: 8,
        embed_dim: 16,
        depth: 4,
        heads: 2,
        mlp_dim: 32,
        tap_layers: vec![2, 4],
        fused_dim: 16,
        ..EncoderConfig::default()
    };
    cfg.bitt = BittConfig {
        layers: 1,
        dim: 16,
        heads: 2,
        ff_dim: 32,
        ..BittConfig::default()
    };
    cfg.synth = SynthConfig {
        cases: 12,
        sweeps_per_case: 1,
        frames: 60,
        height: 32,
        width: 32,
        events_per_sweep: [1, 1],
        peak_contrast: 1.0,
        ..SynthConfig::default()
    };
    cfg
}

pub fn small_data(cfg: &DetectorConfig) -> Vec<SweepSequence> {
    synth_generate(&cfg.synth, ExecMode::Parallel).unwrap()
}
