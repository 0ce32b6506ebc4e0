//! End-to-end evaluation: prior, encoder, temporal model and PRS per
//! sequence, pooled into an [`EvalReport`].

use std::collections::HashMap;

use crate::dataio::SweepSequence;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_labels, EvalReport, Labelled, TimeMatching};
use crate::model::{Detector, Inference};
use crate::par::{self, ExecMode};
use crate::prs::{Detection, PrsConfig};
use crate::trace::Trace;

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub traces: Vec<Trace>,
}

/// Sequences run in parallel under `mode`; frames inside each sequence are
/// encoded sequentially.
pub fn evaluate(
    det: &Detector,
    seqs: &[SweepSequence],
    prs: &PrsConfig,
    matching: TimeMatching,
    mode: ExecMode,
) -> Result<EvalOutput> {
    let results: Vec<(Inference, Detection)> = par::try_map(mode, seqs, |s| {
        let inf = det.infer(s, ExecMode::Sequential)?;
        let d = det.postprocess(&inf, prs)?;
        Ok::<_, Error>((inf, d))
    })?;
    let traces: Vec<Trace> = seqs
        .iter()
        .zip(&results)
        .map(|(s, (inf, d))| Trace::new(s, inf, d))
        .collect();
    let report = evaluate_traces(&traces, seqs, matching, mode)?;
    Ok(EvalOutput { report, traces })
}

/// Score saved traces against ground truth matched by `(case_id, sweep_id)`.
pub fn evaluate_traces(
    traces: &[Trace],
    seqs: &[SweepSequence],
    matching: TimeMatching,
    mode: ExecMode,
) -> Result<EvalReport> {
    let by_key: HashMap<(&str, u32), &Trace> =
        traces.iter().map(|t| ((t.case_id.as_str(), t.sweep_id), t)).collect();
    let mut items = Vec::with_capacity(seqs.len());
    for s in seqs {
        let t = by_key
            .get(&(s.case_id.as_str(), s.sweep_id))
            .ok_or_else(|| Error::Dataset(format!("no trace for {}", s.name())))?;
        if t.labels.len() != s.t {
            return Err(Error::Dataset(format!(
                "trace for {} has {} frames, sequence has {}",
                s.name(),
                t.labels.len(),
                s.t
            )));
        }
        items.push(Labelled {
            case_id: &s.case_id,
            sweep_id: s.sweep_id,
            pred: &t.labels,
            gt: &s.labels,
        });
    }
    evaluate_labels(&items, matching, mode)
}
