//! Structure-augmented prior: amplify intensities inside the segmentation
//! mask, `I* = I ⊙ (1 + α·M)`. No clipping is applied afterwards.

use serde::{Deserialize, Serialize};

use crate::dataio::SweepSequence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Amplification strength inside the mask.
    pub alpha: f64,
    /// When false, sequences pass through untouched and masks are optional.
    pub enabled: bool,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.15,
            enabled: true,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "prior.alpha must be a finite value >= 0, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Amplify one frame. `frame` and `mask` are the same `H × W` raster.
pub fn augment(frame: &[f32], mask: &[u8], alpha: f64) -> Result<Vec<f32>> {
    if frame.len() != mask.len() {
        return Err(Error::Shape {
            op: "augment",
            lhs: vec![frame.len()],
            rhs: vec![mask.len()],
        });
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::invalid("augment", "mask must be binary"));
    }
    let gain = (1.0 + alpha) as f32;
    Ok(frame
        .iter()
        .zip(mask)
        .map(|(&v, &m)| if m == 1 { v * gain } else { v })
        .collect())
}

/// Apply [`augment`] to every frame; labels and metadata are untouched.
pub fn augment_sequence(seq: &SweepSequence, cfg: &PriorConfig) -> Result<SweepSequence> {
    cfg.validate()?;
    if !cfg.enabled {
        return Ok(seq.clone());
    }
    let masks = seq.masks.as_ref().ok_or_else(|| {
        Error::Dataset(format!(
            "sequence {} has no masks but the structural prior is enabled",
            seq.name()
        ))
    })?;
    let frames = augment(&seq.frames, masks, cfg.alpha)?;
    Ok(SweepSequence {
        frames,
        ..seq.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_frames() -> SweepSequence {
        SweepSequence {
            case_id: "c".into(),
            sweep_id: 0,
            t: 2,
            h: 1,
            w: 2,
            frames: vec![0.2, 0.4, 0.3, 0.6],
            masks: Some(vec![0, 0, 1, 1]),
            labels: vec![0, 1],
        }
    }

    #[test]
    fn pixel_inside_mask() {
        let out = augment(&[0.5], &[1], 0.15).unwrap();
        assert!((out[0] - 0.575).abs() < 1e-7);
    }

    #[test]
    fn identities() {
        let f = [0.1, 0.9, 0.5];
        assert_eq!(augment(&f, &[1, 1, 0], 0.0).unwrap(), f);
        assert_eq!(augment(&f, &[0, 0, 0], 0.7).unwrap(), f);
    }

    #[test]
    fn errors() {
        assert!(augment(&[0.1, 0.2], &[1], 0.1).is_err());
        assert!(augment(&[0.1], &[2], 0.1).is_err());
        let mut s = two_frames();
        s.masks = None;
        let msg = augment_sequence(&s, &PriorConfig::default())
            .unwrap_err()
            .to_string();
        assert!(msg.contains("c/0"), "{msg}");
        let off = PriorConfig {
            enabled: false,
            ..Default::default()
        };
        assert_eq!(augment_sequence(&s, &off).unwrap(), s);
    }

    #[test]
    fn second_frame_doubled() {
        let s = two_frames();
        let cfg = PriorConfig {
            alpha: 1.0,
            enabled: true,
        };
        let out = augment_sequence(&s, &cfg).unwrap();
        assert_eq!(&out.frames[..2], &s.frames[..2]);
        assert_eq!(&out.frames[2..], &[0.6, 1.2]);
        assert_eq!(out.labels, s.labels);
    }

    #[test]
    fn empty_masks_leave_sequence_unchanged() {
        let mut s = two_frames();
        s.masks = Some(vec![0; 4]);
        assert_eq!(augment_sequence(&s, &PriorConfig::default()).unwrap(), s);
    }

    proptest! {
        #[test]
        fn double_application_composes(
            frame in proptest::collection::vec(0.0f32..1.0, 16),
            mask in proptest::collection::vec(0u8..2, 16),
            alpha in 0.0f64..2.0,
        ) {
            let twice = augment(&augment(&frame, &mask, alpha).unwrap(), &mask, alpha).unwrap();
            let once = augment(&frame, &mask, (1.0 + alpha).powi(2) - 1.0).unwrap();
            for (a, b) in twice.iter().zip(&once) {
                prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
            }
        }

        #[test]
        fn monotone_in_alpha(
            frame in proptest::collection::vec(0.0f32..1.0, 16),
            mask in proptest::collection::vec(0u8..2, 16),
            a1 in 0.0f64..1.0,
            gap in 0.01f64..1.0,
        ) {
            let lo = augment(&frame, &mask, a1).unwrap();
            let hi = augment(&frame, &mask, a1 + gap).unwrap();
            for i in 0..16 {
                prop_assert!(hi[i] >= lo[i]);
                if mask[i] == 1 && frame[i] > 0.0 {
                    prop_assert!(hi[i] > lo[i]);
                }
            }
        }

        #[test]
        fn commutes_with_cropping(
            frame in proptest::collection::vec(0.0f32..1.0, 64),
            mask in proptest::collection::vec(0u8..2, 64),
            x0 in 0usize..4, y0 in 0usize..4, cw in 1usize..5, ch in 1usize..5,
        ) {
            let crop = |v: &[f32]| -> Vec<f32> {
                (y0..y0 + ch).flat_map(|y| (x0..x0 + cw).map(move |x| v[y * 8 + x])).collect()
            };
            let crop_m: Vec<u8> =
                (y0..y0 + ch).flat_map(|y| (x0..x0 + cw).map(|x| mask[y * 8 + x]).collect::<Vec<_>>()).collect();
            let a = crop(&augment(&frame, &mask, 0.15).unwrap());
            let b = augment(&crop(&frame), &crop_m, 0.15).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
