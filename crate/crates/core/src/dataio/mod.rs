//! Sequence data model, `SWKT` blobs, JSON manifests and the synthetic
//! sweep generator.

pub mod blob;
mod manifest;
mod sequence;
pub mod synth;

pub use manifest::{
    assign_splits, load_dataset, load_sequence, load_sequence_file, read_manifest, resolve_manifest,
    save_sequence, split_counts, validate_case_split, write_dataset, Manifest, SequenceRecord, Split,
    FORMAT_VERSION, MANIFEST_FILE,
};
pub use sequence::SweepSequence;
pub use synth::{synth_generate, RampShape, SynthConfig};
