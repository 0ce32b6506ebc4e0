//! Frame-wise precision/recall/F1 and timing-fidelity errors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, ExecMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn of(pred: &[u8], gt: &[u8]) -> Result<Self> {
        check_len(pred, gt)?;
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (p == 1, g == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(c)
    }

    pub fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
        }
    }

    /// `(P, R, F1)` in percent; empty denominators give 0.
    pub fn prf(self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, f1(p, r))
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn check_len(pred: &[u8], gt: &[u8]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(
            "metrics",
            format!("prediction has {} frames, ground truth {}", pred.len(), gt.len()),
        ));
    }
    Ok(())
}

/// Single-sequence `(P, R, F1)` in percent.
pub fn prf(pred: &[u8], gt: &[u8]) -> Result<(f64, f64, f64)> {
    Ok(Counts::of(pred, gt)?.prf())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMatching {
    /// Average of the gt→pred and pred→gt mean nearest distances.
    #[default]
    Symmetric,
    /// Mean over ground-truth keyframes of the distance to the nearest
    /// predicted keyframe.
    GtToPred,
}

/// Mean distance from each index in `from` to its nearest index in `to`,
/// by a two-pointer sweep over the sorted lists.
fn mean_nearest(from: &[usize], to: &[usize]) -> f64 {
    let mut j = 0;
    let mut acc = 0usize;
    for &a in from {
        while j + 1 < to.len() && to[j + 1] <= a {
            j += 1;
        }
        let mut best = a.abs_diff(to[j]);
        if j + 1 < to.len() {
            best = best.min(a.abs_diff(to[j + 1]));
        }
        acc += best;
    }
    acc as f64 / from.len() as f64
}

fn positives(v: &[u8]) -> Vec<usize> {
    v.iter().enumerate().filter(|(_, &x)| x == 1).map(|(i, _)| i).collect()
}

/// Absolute time error in frames. `None` when `gt` has no keyframe. An empty
/// prediction scores the sequence length.
pub fn abs_time_error_with(pred: &[u8], gt: &[u8], matching: TimeMatching) -> Result<Option<f64>> {
    check_len(pred, gt)?;
    let g = positives(gt);
    if g.is_empty() {
        return Ok(None);
    }
    let p = positives(pred);
    if p.is_empty() {
        return Ok(Some(gt.len() as f64));
    }
    Ok(Some(match matching {
        TimeMatching::Symmetric => 0.5 * (mean_nearest(&g, &p) + mean_nearest(&p, &g)),
        TimeMatching::GtToPred => mean_nearest(&g, &p),
    }))
}

pub fn abs_time_error(pred: &[u8], gt: &[u8]) -> Result<Option<f64>> {
    abs_time_error_with(pred, gt, TimeMatching::Symmetric)
}

/// `|Σ pred − Σ gt|`.
pub fn keyframe_num_error(pred: &[u8], gt: &[u8]) -> Result<usize> {
    check_len(pred, gt)?;
    let count = |v: &[u8]| v.iter().filter(|&&x| x == 1).count();
    Ok(count(pred).abs_diff(count(gt)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub case_id: String,
    pub sweep_id: u32,
    pub frames: usize,
    #[serde(flatten)]
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub abs_time_error: Option<f64>,
    pub keyframe_num_error: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroAverages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Micro-averaged over all frames of the set, in percent.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Mean over sequences with at least one ground-truth keyframe.
    pub abs_time_error: Option<f64>,
    pub keyframe_num_error: f64,
    #[serde(rename = "macro")]
    pub macro_avg: MacroAverages,
    /// Sequences left out of `abs_time_error` for lack of keyframes.
    pub time_error_excluded: usize,
    pub per_sequence: Vec<SequenceEval>,
}

/// Identity and labels of one evaluated sequence.
#[derive(Clone, Debug)]
pub struct Labelled<'a> {
    pub case_id: &'a str,
    pub sweep_id: u32,
    pub pred: &'a [u8],
    pub gt: &'a [u8],
}

pub fn evaluate_sequence(x: &Labelled<'_>, matching: TimeMatching) -> Result<SequenceEval> {
    let counts = Counts::of(x.pred, x.gt)?;
    let (precision, recall, f1) = counts.prf();
    Ok(SequenceEval {
        case_id: x.case_id.to_string(),
        sweep_id: x.sweep_id,
        frames: x.gt.len(),
        counts,
        precision,
        recall,
        f1,
        abs_time_error: abs_time_error_with(x.pred, x.gt, matching)?,
        keyframe_num_error: keyframe_num_error(x.pred, x.gt)?,
    })
}

/// Pool per-sequence results into a report.
pub fn summarize(per_sequence: Vec<SequenceEval>) -> EvalReport {
    let n = per_sequence.len();
    let total = per_sequence.iter().fold(Counts::default(), |a, s| a.add(s.counts));
    let (precision, recall, f1) = total.prf();
    let times: Vec<f64> = per_sequence.iter().filter_map(|s| s.abs_time_error).collect();
    let mean = |v: &mut dyn Iterator<Item = f64>| {
        if n == 0 {
            0.0
        } else {
            v.sum::<f64>() / n as f64
        }
    };
    EvalReport {
        precision,
        recall,
        f1,
        abs_time_error: (!times.is_empty()).then(|| times.iter().sum::<f64>() / times.len() as f64),
        keyframe_num_error: mean(&mut per_sequence.iter().map(|s| s.keyframe_num_error as f64)),
        macro_avg: MacroAverages {
            precision: mean(&mut per_sequence.iter().map(|s| s.precision)),
            recall: mean(&mut per_sequence.iter().map(|s| s.recall)),
            f1: mean(&mut per_sequence.iter().map(|s| s.f1)),
        },
        time_error_excluded: n - times.len(),
        per_sequence,
    }
}

pub fn evaluate_labels(items: &[Labelled<'_>], matching: TimeMatching, mode: ExecMode) -> Result<EvalReport> {
    let per = par::try_map(mode, items, |x| evaluate_sequence(x, matching))?;
    Ok(summarize(per))
}
