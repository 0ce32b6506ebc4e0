mod common;

use common::{small_config, small_data};
use sweepkey::checkpoint::{load_checkpoint, load_into, read_index, save_checkpoint, INDEX_FILE};
use sweepkey::model::Detector;
use sweepkey::par::ExecMode;
use sweepkey::Error;

fn saved() -> (Detector, tempfile::TempDir) {
    let mut cfg = small_config();
    cfg.encoder.seed = 11;
    let det = Detector::new(cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&det, dir.path()).unwrap();
    (det, dir)
}

#[test]
fn round_trip_gives_identical_detections() {
    let (det, dir) = saved();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded, det);
    for seq in small_data(&det.cfg).iter().take(3) {
        let (ia, da) = det.detect(seq, ExecMode::Parallel).unwrap();
        let (ib, db) = loaded.detect(seq, ExecMode::Sequential).unwrap();
        assert_eq!(ia, ib);
        assert_eq!(da, db);
    }
}

#[test]
fn corrupted_index_is_reported() {
    let (_, dir) = saved();
    std::fs::write(dir.path().join(INDEX_FILE), "{\"format_version\": 1, \"par").unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(err.to_string().contains("corrupted index"), "{err}");
}

#[test]
fn unknown_version_is_rejected() {
    let (_, dir) = saved();
    let path = dir.path().join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&path, text).unwrap();
    let err = read_index(dir.path()).unwrap_err();
    assert!(err.to_string().contains("format_version 9"), "{err}");
}

#[test]
fn missing_blob_is_reported() {
    let (_, dir) = saved();
    std::fs::remove_file(dir.path().join("params/window.logits.swkt")).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)) && err.to_string().contains("window.logits"), "{err}");
}

#[test]
fn different_dimensions_give_a_shape_error() {
    let (_, dir) = saved();
    let mut cfg = small_config();
    cfg.bitt.dim = 8;
    let err = load_into(cfg, dir.path()).unwrap_err();
    assert!(err.to_string().contains("shape"), "{err}");
}
