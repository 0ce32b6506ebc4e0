use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::blob::{self, Blob};
use super::SweepSequence;
use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!(
                "unknown split {other:?} (expected train, val or test)"
            ))),
        }
    }
}

/// One sequence entry. Blob paths are relative to the JSON file that holds
/// the record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub case_id: String,
    pub sweep_id: u32,
    pub split: Split,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub frames_blob: String,
    pub masks_blob: Option<String>,
    pub labels_blob: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub sequences: Vec<SequenceRecord>,
}

fn stem(seq: &SweepSequence) -> String {
    format!("{}_s{}", seq.case_id, seq.sweep_id)
}

/// Write the blobs of `seq` under `dir/blobs/` plus a standalone record
/// `dir/<case>_s<sweep>.json`, and return the record.
pub fn save_sequence(seq: &SweepSequence, split: Split, dir: &Path) -> Result<SequenceRecord> {
    seq.validate()?;
    let stem = stem(seq);
    let dims = [seq.t, seq.h, seq.w];
    let frames_blob = format!("blobs/{stem}.frames.swkt");
    blob::write(&dir.join(&frames_blob), &Blob::f32(&dims, seq.frames.clone()))?;
    let masks_blob = match &seq.masks {
        Some(m) => {
            let rel = format!("blobs/{stem}.masks.swkt");
            blob::write(&dir.join(&rel), &Blob::u8(&dims, m.clone()))?;
            Some(rel)
        }
        None => None,
    };
    let labels_blob = format!("blobs/{stem}.labels.swkt");
    blob::write(&dir.join(&labels_blob), &Blob::u8(&[seq.t], seq.labels.clone()))?;
    let record = SequenceRecord {
        case_id: seq.case_id.clone(),
        sweep_id: seq.sweep_id,
        split,
        t: seq.t,
        h: seq.h,
        w: seq.w,
        frames_blob,
        masks_blob,
        labels_blob,
    };
    fsutil::write_json(&dir.join(format!("{stem}.json")), &record)?;
    Ok(record)
}

fn check_dims(path: &Path, got: &[usize], want: &[usize]) -> Result<()> {
    if got != want {
        return Err(Error::Blob {
            path: path.to_path_buf(),
            msg: format!("header dims {got:?} do not match record {want:?}"),
        });
    }
    Ok(())
}

/// Load the sequence described by `record`, resolving blobs against `base`.
pub fn load_sequence(record: &SequenceRecord, base: &Path) -> Result<SweepSequence> {
    let dims = [record.t, record.h, record.w];
    let fp = base.join(&record.frames_blob);
    let fb = blob::read(&fp)?;
    check_dims(&fp, &fb.dims, &dims)?;
    let frames = fb.into_f32(&fp)?;
    let masks = match &record.masks_blob {
        Some(rel) => {
            let mp = base.join(rel);
            let mb = blob::read(&mp)?;
            check_dims(&mp, &mb.dims, &dims)?;
            Some(mb.into_u8(&mp)?)
        }
        None => None,
    };
    let lp = base.join(&record.labels_blob);
    let lb = blob::read(&lp)?;
    check_dims(&lp, &lb.dims, &[record.t])?;
    let labels = lb.into_u8(&lp)?;
    let seq = SweepSequence {
        case_id: record.case_id.clone(),
        sweep_id: record.sweep_id,
        t: record.t,
        h: record.h,
        w: record.w,
        frames,
        masks,
        labels,
    };
    seq.validate()?;
    Ok(seq)
}

/// Load a standalone record file written by [`save_sequence`].
pub fn load_sequence_file(path: &Path) -> Result<(SequenceRecord, SweepSequence)> {
    let record: SequenceRecord = fsutil::read_json(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let seq = load_sequence(&record, base)?;
    Ok((record, seq))
}

/// Write every sequence and a `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, items: &[(SweepSequence, Split)]) -> Result<Manifest> {
    let sequences = items
        .iter()
        .map(|(seq, split)| save_sequence(seq, *split, dir))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        sequences,
    };
    validate_case_split(&manifest)?;
    fsutil::write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// Accepts either a manifest file or the directory containing one.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let path = resolve_manifest(path);
    let m: Manifest = fsutil::read_json(&path)?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Dataset(format!(
            "{}: format_version {} unsupported (expected {FORMAT_VERSION})",
            path.display(),
            m.format_version
        )));
    }
    validate_case_split(&m)?;
    Ok(m)
}

/// Every case must live in exactly one split.
pub fn validate_case_split(m: &Manifest) -> Result<()> {
    let mut seen: BTreeMap<&str, Split> = BTreeMap::new();
    for r in &m.sequences {
        match seen.get(r.case_id.as_str()) {
            Some(&s) if s != r.split => {
                return Err(Error::Dataset(format!(
                    "case {} appears in both {s} and {} splits",
                    r.case_id, r.split
                )));
            }
            _ => {
                seen.insert(&r.case_id, r.split);
            }
        }
    }
    Ok(())
}

/// Split counts for `n` cases at the given train/val/test fractions. Val and
/// test are rounded; when that leaves any split empty and `n >= 3`, falls
/// back to one case each for val and test.
pub fn split_counts(n: usize, fractions: [f64; 3]) -> (usize, usize, usize) {
    let total: f64 = fractions.iter().sum();
    let val = (n as f64 * fractions[1] / total).round() as usize;
    let test = (n as f64 * fractions[2] / total).round() as usize;
    let (val, test) = if val + test > n { (0, 0) } else { (val, test) };
    let train = n - val - test;
    if n >= 3 && (train == 0 || val == 0 || test == 0) {
        return (n - 2, 1, 1);
    }
    (train, val, test)
}

/// Assign whole cases to splits in order of first appearance: the first cases
/// go to train, then val, then test.
pub fn assign_splits(seqs: Vec<SweepSequence>, fractions: [f64; 3]) -> Vec<(SweepSequence, Split)> {
    let mut cases: Vec<String> = Vec::new();
    for s in &seqs {
        if !cases.contains(&s.case_id) {
            cases.push(s.case_id.clone());
        }
    }
    let (train, val, _) = split_counts(cases.len(), fractions);
    seqs.into_iter()
        .map(|s| {
            let i = cases.iter().position(|c| *c == s.case_id).unwrap_or(0);
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            (s, split)
        })
        .collect()
}

/// All sequences of one split, in manifest order.
pub fn load_dataset(manifest: &Path, split: Split) -> Result<Vec<SweepSequence>> {
    let path = resolve_manifest(manifest);
    let m = read_manifest(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    m.sequences
        .iter()
        .filter(|r| r.split == split)
        .map(|r| load_sequence(r, base))
        .collect()
}
