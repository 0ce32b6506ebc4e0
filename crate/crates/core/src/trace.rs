//! Per-sequence detection trace as written by `detect` and read back by
//! trace-based evaluation and plotting.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::SweepSequence;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::Inference;
use crate::prs::{Detection, SegmentSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trace {
    pub case_id: String,
    pub sweep_id: u32,
    pub p: Vec<f32>,
    pub p_smooth: Vec<f32>,
    pub segments: Vec<[usize; 2]>,
    pub labels: Vec<u8>,
}

impl Trace {
    pub fn new(seq: &SweepSequence, inf: &Inference, det: &Detection) -> Self {
        Self {
            case_id: seq.case_id.clone(),
            sweep_id: seq.sweep_id,
            p: inf.p.iter().map(|&v| v as f32).collect(),
            p_smooth: det.p_smooth.iter().map(|&v| v as f32).collect(),
            segments: det.segments.iter().map(|&(s, e)| [s, e]).collect(),
            labels: det.labels.clone(),
        }
    }

    pub fn segment_set(&self) -> SegmentSet {
        SegmentSet(self.segments.iter().map(|s| (s[0], s[1])).collect())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.labels.len();
        if self.p.len() != t || self.p_smooth.len() != t {
            return Err(Error::invalid(
                "trace",
                format!(
                    "p, p_smooth and labels differ in length ({}, {}, {t})",
                    self.p.len(),
                    self.p_smooth.len()
                ),
            ));
        }
        self.segment_set().validate(t)?;
        if self.segment_set().to_labels(t) != self.labels {
            return Err(Error::invalid("trace", "labels disagree with segments"));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let t: Self = fsutil::read_json(path)?;
        t.validate()?;
        Ok(t)
    }

    pub fn file_name(&self) -> String {
        format!("{}_s{}.trace.json", self.case_id, self.sweep_id)
    }
}
