//! Synthetic blind sweeps with gradually appearing standard planes.
//!
//! Each sweep has a smoothed-noise background. Each event is an elliptical
//! "abdomen" holding two circular landmarks. Its contrast ramps up over
//! `ramp_in` frames, holds for `dwell` frames and ramps down over `ramp_out`
//! frames. Labels mark frames whose contrast reaches
//! `label_visibility_threshold × peak_contrast`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SweepSequence;
use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampShape {
    #[default]
    Linear,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub cases: usize,
    pub sweeps_per_case: usize,
    /// Frames per sweep.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Inclusive `[min, max]` ranges.
    pub events_per_sweep: [usize; 2],
    pub ramp_in: [usize; 2],
    pub dwell: [usize; 2],
    pub ramp_out: [usize; 2],
    pub ramp_shape: RampShape,
    pub peak_contrast: f64,
    pub speckle: f64,
    pub label_visibility_threshold: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            cases: 20,
            sweeps_per_case: 4,
            frames: 120,
            height: 64,
            width: 64,
            events_per_sweep: [1, 2],
            ramp_in: [3, 6],
            dwell: [6, 14],
            ramp_out: [3, 6],
            ramp_shape: RampShape::Linear,
            peak_contrast: 0.8,
            speckle: 0.08,
            label_visibility_threshold: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        for (name, r) in [
            ("events_per_sweep", self.events_per_sweep),
            ("ramp_in", self.ramp_in),
            ("dwell", self.dwell),
            ("ramp_out", self.ramp_out),
        ] {
            if r[0] > r[1] {
                return bad(format!("{name} range {r:?} has min > max"));
            }
        }
        for (name, r) in [
            ("ramp_in", self.ramp_in),
            ("dwell", self.dwell),
            ("ramp_out", self.ramp_out),
        ] {
            if r[0] < 1 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.peak_contrast) {
            return bad(format!("peak_contrast {} outside [0, 1]", self.peak_contrast));
        }
        let th = self.label_visibility_threshold;
        if !(th > 0.0 && th < 1.0) {
            return bad(format!("label_visibility_threshold {th} outside (0, 1)"));
        }
        if self.speckle < 0.0 {
            return bad("speckle must be non-negative".into());
        }
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("frames, height and width must be positive".into());
        }
        let longest = self.ramp_in[1] + self.dwell[1] + self.ramp_out[1];
        let need = self.events_per_sweep[1] * longest;
        if need > self.frames {
            return Err(Error::Synth(format!(
                "{} events of up to {longest} frames cannot be placed without overlap in {} frames; \
                 use frames >= {need}",
                self.events_per_sweep[1], self.frames
            )));
        }
        Ok(())
    }
}

/// Visibility fraction of every frame of one event: ramp-in from 0,
/// dwell at 1, ramp-out towards 0.
pub fn event_profile(ramp_in: usize, dwell: usize, ramp_out: usize, shape: RampShape) -> Vec<f64> {
    let ramp = |x: f64| match shape {
        RampShape::Linear => x,
        RampShape::Cosine => 0.5 * (1.0 - (std::f64::consts::PI * x).cos()),
    };
    let mut v = Vec::with_capacity(ramp_in + dwell + ramp_out);
    v.extend((0..ramp_in).map(|j| ramp(j as f64 / ramp_in as f64)));
    v.extend(std::iter::repeat_n(1.0, dwell));
    v.extend((1..=ramp_out).map(|j| ramp((ramp_out - j) as f64 / ramp_out as f64)));
    v
}

#[derive(Clone, Debug)]
struct Event {
    start: usize,
    profile: Vec<f64>,
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
    angle: f64,
    landmarks: [(f64, f64, f64); 2],
}

fn sample_range<R: Rng>(rng: &mut R, r: [usize; 2]) -> usize {
    rng.random_range(r[0]..=r[1])
}

/// Box blur with clamped borders, applied in place.
fn box_blur(field: &mut [f64], h: usize, w: usize, radius: usize) {
    let r = radius as isize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let xx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                s += field[y * w + xx];
            }
            tmp[y * w + x] = s / (2 * radius + 1) as f64;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for d in -r..=r {
                let yy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                s += tmp[yy * w + x];
            }
            field[y * w + x] = s / (2 * radius + 1) as f64;
        }
    }
}

fn place_events<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Vec<Event> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let n = sample_range(rng, cfg.events_per_sweep);
    let profiles: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let ri = sample_range(rng, cfg.ramp_in);
            let dw = sample_range(rng, cfg.dwell);
            let ro = sample_range(rng, cfg.ramp_out);
            event_profile(ri, dw, ro, cfg.ramp_shape)
        })
        .collect();
    let used: usize = profiles.iter().map(Vec::len).sum();
    let slack = cfg.frames - used;
    let mut cuts: Vec<usize> = (0..n).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let mut events = Vec::with_capacity(n);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (profile, cut) in profiles.into_iter().zip(cuts) {
        cursor += cut - prev_cut;
        prev_cut = cut;
        let start = cursor;
        cursor += profile.len();
        let ax = rng.random_range(0.18..0.28) * w;
        let ay = rng.random_range(0.14..0.22) * h;
        let cx = rng.random_range(0.35..0.65) * w;
        let cy = rng.random_range(0.35..0.65) * h;
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        // landmark centres in the ellipse's own frame (unit-disc coords)
        let bubble = (
            rng.random_range(-0.45..-0.15),
            rng.random_range(-0.3..0.3),
            0.30 * ay,
        );
        let vein = (
            rng.random_range(0.2..0.5),
            rng.random_range(-0.3..0.3),
            0.18 * ay,
        );
        events.push(Event {
            start,
            profile,
            cx,
            cy,
            ax,
            ay,
            angle,
            landmarks: [bubble, vein],
        });
    }
    events
}

fn generate_sweep(cfg: &SynthConfig, case: usize, sweep: usize) -> SweepSequence {
    let stream = ((case as u64) << 16) | sweep as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let (t_len, h, w) = (cfg.frames, cfg.height, cfg.width);
    let n = h * w;

    let mut field: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    box_blur(&mut field, h, w, 3);
    box_blur(&mut field, h, w, 3);
    let (lo, hi) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(1e-12);
    let background: Vec<f64> = field.iter().map(|v| 0.15 + 0.3 * (v - lo) / span).collect();

    let events = place_events(cfg, &mut rng);
    let mut frames = vec![0f32; t_len * n];
    let mut masks = vec![0u8; t_len * n];
    let mut labels = vec![0u8; t_len];

    for t in 0..t_len {
        let active = events
            .iter()
            .find(|e| t >= e.start && t < e.start + e.profile.len());
        let frac = active.map_or(0.0, |e| e.profile[t - e.start]);
        let contrast = frac * cfg.peak_contrast;
        if contrast > 0.0 && frac >= cfg.label_visibility_threshold {
            labels[t] = 1;
        }
        let frame = &mut frames[t * n..(t + 1) * n];
        let mask = &mut masks[t * n..(t + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut v = background[i];
                if let (Some(e), true) = (active, contrast > 0.0) {
                    let (s, c) = e.angle.sin_cos();
                    let dx = x as f64 + 0.5 - e.cx;
                    let dy = y as f64 + 0.5 - e.cy;
                    let u = (c * dx + s * dy) / e.ax;
                    let vv = (-s * dx + c * dy) / e.ay;
                    if u * u + vv * vv <= 1.0 {
                        mask[i] = 1;
                        v += 0.45 * contrast;
                        for &(lu, lv, r) in &e.landmarks {
                            let px = (u - lu) * e.ax;
                            let py = (vv - lv) * e.ay;
                            if px * px + py * py <= r * r {
                                v -= 0.55 * contrast;
                            }
                        }
                    }
                }
                v += cfg.speckle * (2.0 * rng.random::<f64>() - 1.0);
                frame[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    SweepSequence {
        case_id: format!("case_{case:04}"),
        sweep_id: sweep as u32,
        t: t_len,
        h,
        w,
        frames,
        masks: Some(masks),
        labels,
    }
}

/// All sweeps of all cases, ordered by (case, sweep). Each sweep draws from
/// its own RNG stream, so output does not depend on `mode`.
pub fn synth_generate(cfg: &SynthConfig, mode: ExecMode) -> Result<Vec<SweepSequence>> {
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..cfg.cases)
        .flat_map(|c| (0..cfg.sweeps_per_case).map(move |s| (c, s)))
        .collect();
    Ok(par::map(mode, &jobs, |&(c, s)| generate_sweep(cfg, c, s)))
}
