use crate::error::{Error, Result};

/// One blind sweep: `T` frames of `H × W` intensities, optional binary
/// masks, and one binary label per frame (1 = standard plane).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSequence {
    pub case_id: String,
    pub sweep_id: u32,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major `T × H × W`.
    pub frames: Vec<f32>,
    /// Row-major `T × H × W`, values in {0, 1}.
    pub masks: Option<Vec<u8>>,
    pub labels: Vec<u8>,
}

impl SweepSequence {
    pub fn frame_len(&self) -> usize {
        self.h * self.w
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn mask(&self, t: usize) -> Option<&[u8]> {
        let n = self.frame_len();
        self.masks.as_ref().map(|m| &m[t * n..(t + 1) * n])
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    /// `case_id/sweep_id`, used in error messages and reports.
    pub fn name(&self) -> String {
        format!("{}/{}", self.case_id, self.sweep_id)
    }

    /// Check the shared-`T` and value-range invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.t * self.frame_len();
        let bad = |msg: String| Err(Error::Dataset(format!("{}: {msg}", self.name())));
        if self.frames.len() != n {
            return bad(format!("frames hold {} values, expected {n}", self.frames.len()));
        }
        if self.labels.len() != self.t {
            return bad(format!("{} labels for {} frames", self.labels.len(), self.t));
        }
        if let Some(m) = &self.masks {
            if m.len() != n {
                return bad(format!("masks hold {} values, expected {n}", m.len()));
            }
            if m.iter().any(|&v| v > 1) {
                return bad("mask values must be 0 or 1".into());
            }
        }
        if self.labels.iter().any(|&y| y > 1) {
            return bad("labels must be 0 or 1".into());
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return bad("non-finite intensity".into());
        }
        Ok(())
    }
}
