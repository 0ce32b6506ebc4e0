//! Peak-preserving redundancy suppression.
//!
//! The posterior is smoothed with a blend of Savitzky–Golay and EMA that may
//! not sink below the raw trace by more than `delta`, thresholded into runs,
//! gap-merged, length-filtered and then checked against the embedding of each
//! segment's peak frame. When nothing survives the argmax frame is promoted.

mod savgol;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use savgol::savgol;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrsConfig {
    pub lambda: f64,
    pub delta: f64,
    pub theta: f64,
    pub sg_window: usize,
    pub sg_order: usize,
    pub ema_beta: f64,
    pub min_len: usize,
    pub max_gap: usize,
    pub peak_window: usize,
    pub cos_thresh: f64,
    pub pass_fraction: f64,
    /// Merge gaps before dropping short runs.
    pub merge_first: bool,
}

impl Default for PrsConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            delta: 0.05,
            theta: 0.9,
            sg_window: 7,
            sg_order: 2,
            ema_beta: 0.3,
            min_len: 3,
            max_gap: 2,
            peak_window: 2,
            cos_thresh: 0.8,
            pass_fraction: 0.5,
            merge_first: true,
        }
    }
}

impl PrsConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("prs: {msg}")));
        if !(self.lambda > 0.0 && self.lambda < 1.0) {
            return bad(format!("lambda must lie in (0,1), got {}", self.lambda));
        }
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.ema_beta > 0.0 && self.ema_beta <= 1.0) {
            return bad(format!("ema_beta must lie in (0,1], got {}", self.ema_beta));
        }
        if self.sg_window % 2 == 0 || self.sg_window <= self.sg_order {
            return bad(format!(
                "sg_window {} must be odd and greater than sg_order {}",
                self.sg_window, self.sg_order
            ));
        }
        if !(0.0..=1.0).contains(&self.pass_fraction) {
            return bad(format!("pass_fraction must lie in [0,1], got {}", self.pass_fraction));
        }
        if !self.theta.is_finite() || !self.cos_thresh.is_finite() {
            return bad("theta and cos_thresh must be finite".into());
        }
        Ok(())
    }
}

/// Sorted, disjoint, inclusive `(start, end)` frame intervals.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SegmentSet(pub Vec<(usize, usize)>);

impl SegmentSet {
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.0.iter()
    }

    /// Checks ordering, disjointness and `end < t`.
    pub fn validate(&self, t: usize) -> Result<()> {
        let mut prev: Option<usize> = None;
        for &(s, e) in &self.0 {
            if s > e || e >= t {
                return Err(Error::invalid("segments", format!("({s},{e}) out of range for T={t}")));
            }
            if let Some(p) = prev {
                if s <= p + 1 {
                    return Err(Error::invalid(
                        "segments",
                        format!("({s},{e}) touches or overlaps the previous segment ending at {p}"),
                    ));
                }
            }
            prev = Some(e);
        }
        Ok(())
    }

    /// Per-frame 0/1 labels.
    pub fn to_labels(&self, t: usize) -> Vec<u8> {
        let mut out = vec![0u8; t];
        for &(s, e) in &self.0 {
            out[s..=e].fill(1);
        }
        out
    }
}

/// `e_0 = p_0`, `e_t = beta * p_t + (1 - beta) * e_{t-1}`.
pub fn ema(p: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(p.len());
    let mut prev = None;
    for &v in p {
        let e = match prev {
            None => v,
            Some(e) => beta * v + (1.0 - beta) * e,
        };
        out.push(e);
        prev = Some(e);
    }
    out
}

/// Intermediate traces of the smoothing step.
#[derive(Clone, Debug, PartialEq)]
pub struct Smoothed {
    pub sg: Vec<f64>,
    pub ema: Vec<f64>,
    pub blend: Vec<f64>,
    pub smooth: Vec<f64>,
}

pub fn smooth_parts(p: &[f64], cfg: &PrsConfig) -> Result<Smoothed> {
    let sg = savgol(p, cfg.sg_window, cfg.sg_order)?;
    let em = ema(p, cfg.ema_beta);
    let blend: Vec<f64> = sg
        .iter()
        .zip(&em)
        .map(|(s, e)| cfg.lambda * s + (1.0 - cfg.lambda) * e)
        .collect();
    let smooth = blend
        .iter()
        .zip(p)
        .map(|(&b, &raw)| b.max(raw - cfg.delta))
        .collect();
    Ok(Smoothed {
        sg,
        ema: em,
        blend,
        smooth,
    })
}

pub fn smooth(p: &[f64], cfg: &PrsConfig) -> Result<Vec<f64>> {
    Ok(smooth_parts(p, cfg)?.smooth)
}

/// Maximal runs of `true`, as inclusive intervals.
pub fn runs(mask: &[bool]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    for (t, &m) in mask.iter().enumerate() {
        match (m, start) {
            (true, None) => start = Some(t),
            (false, Some(s)) => {
                out.push((s, t - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, mask.len() - 1));
    }
    out
}

fn merge_gaps(segs: Vec<(usize, usize)>, max_gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(segs.len());
    for (s, e) in segs {
        match out.last_mut() {
            Some(last) if s - last.1 - 1 <= max_gap => last.1 = e,
            _ => out.push((s, e)),
        }
    }
    out
}

fn drop_short(segs: Vec<(usize, usize)>, min_len: usize) -> Vec<(usize, usize)> {
    segs.into_iter().filter(|&(s, e)| e - s + 1 >= min_len).collect()
}

/// Group a binary trace into segments.
pub fn group_binary(mask: &[bool], min_len: usize, max_gap: usize, merge_first: bool) -> SegmentSet {
    let r = runs(mask);
    let segs = if merge_first {
        drop_short(merge_gaps(r, max_gap), min_len)
    } else {
        merge_gaps(drop_short(r, min_len), max_gap)
    };
    SegmentSet(segs)
}

pub fn group_segments(p_smooth: &[f64], cfg: &PrsConfig) -> SegmentSet {
    let mask: Vec<bool> = p_smooth.iter().map(|&v| v >= cfg.theta).collect();
    group_binary(&mask, cfg.min_len, cfg.max_gap, cfg.merge_first)
}

/// Cosine similarity; zero-norm vectors give 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na.sqrt() * nb.sqrt())
    }
}

/// Earliest index of the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Embedding-consistency filter. `emb` holds `t` rows of width `dim`.
pub fn preserve_peaks(
    segments: &SegmentSet,
    p_smooth: &[f64],
    emb: &[f32],
    dim: usize,
    cfg: &PrsConfig,
) -> Result<SegmentSet> {
    let t = p_smooth.len();
    if emb.len() != t * dim {
        return Err(Error::invalid(
            "preserve_peaks",
            format!("embeddings hold {} values, expected T={t} rows of {dim}", emb.len()),
        ));
    }
    let row = |i: usize| &emb[i * dim..(i + 1) * dim];
    let mut out = Vec::new();
    for &(s, e) in segments.iter() {
        let peak = s + argmax(&p_smooth[s..=e]);
        let centre = row(peak);
        let pass: Vec<bool> = (s..=e).map(|i| cosine(row(i), centre) >= cfg.cos_thresh).collect();
        let n_pass = pass.iter().filter(|&&b| b).count();
        if n_pass as f64 >= cfg.pass_fraction * (e - s + 1) as f64 {
            out.push((s, e));
            continue;
        }
        if !pass[peak - s] {
            continue;
        }
        let lo = s.max(peak.saturating_sub(cfg.peak_window));
        let hi = e.min(peak + cfg.peak_window);
        let (mut a, mut b) = (peak, peak);
        while a > lo && pass[a - 1 - s] {
            a -= 1;
        }
        while b < hi && pass[b + 1 - s] {
            b += 1;
        }
        if b - a + 1 >= cfg.min_len {
            out.push((a, b));
        }
    }
    Ok(SegmentSet(out))
}

/// Result of the full post-processing pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub p_smooth: Vec<f64>,
    pub segments: SegmentSet,
    pub labels: Vec<u8>,
    pub fallback: bool,
}

pub fn prs_detect(p: &[f64], emb: &[f32], dim: usize, cfg: &PrsConfig) -> Result<Detection> {
    cfg.validate()?;
    if p.is_empty() {
        return Err(Error::invalid("prs_detect", "empty trace"));
    }
    if let Some(i) = p.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid("prs_detect", format!("non-finite probability at frame {i}")));
    }
    let p_smooth = smooth(p, cfg)?;
    let grouped = group_segments(&p_smooth, cfg);
    let mut segments = preserve_peaks(&grouped, &p_smooth, emb, dim, cfg)?;
    let fallback = segments.is_empty();
    if fallback {
        let i = argmax(p);
        segments = SegmentSet(vec![(i, i)]);
    }
    let labels = segments.to_labels(p.len());
    Ok(Detection {
        p_smooth,
        segments,
        labels,
        fallback,
    })
}

/// Plain thresholding of the raw trace, without smoothing, grouping or fallback.
pub fn threshold_labels(p: &[f64], theta: f64) -> Vec<u8> {
    p.iter().map(|&v| u8::from(v >= theta)).collect()
}
