mod common;

use common::{small_config, small_data};
use sweepkey::checkpoint::{load_checkpoint, INDEX_FILE};
use sweepkey::model::temporal::realized_window;
use sweepkey::par::ExecMode;
use sweepkey::trainer::{train, EpochLog, TrainOptions, LOG_FILE};
use sweepkey::{DetectorConfig, Error};

#[test]
fn zero_epochs_is_rejected() {
    let mut cfg = small_config();
    cfg.train.epochs = 0;
    let data = small_data(&small_config());
    let err = train(&data[..2], &[], &cfg, TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(train(&[], &[], &small_config(), TrainOptions::default()).is_err());
}

#[test]
fn same_seed_gives_identical_logs() {
    let mut cfg = small_config();
    cfg.train.epochs = 3;
    let data = small_data(&cfg);
    let run = |mode| {
        let dir = tempfile::tempdir().unwrap();
        let out = train(
            &data[..6],
            &data[6..9],
            &cfg,
            TrainOptions {
                mode,
                out_dir: Some(dir.path()),
                ..Default::default()
            },
        )
        .unwrap();
        (std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap(), out.best.params)
    };
    let (a, pa) = run(ExecMode::Parallel);
    let (b, pb) = run(ExecMode::Sequential);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.lines().count(), 3);
    for line in a.lines() {
        let e: EpochLog = serde_json::from_str(line).unwrap();
        assert!(e.val.is_some());
    }
}

#[test]
fn loss_halves_within_twenty_epochs() {
    let mut cfg = small_config();
    cfg.train.epochs = 20;
    cfg.synth.cases = 40;
    cfg.encoder = Default::default();
    cfg.bitt = Default::default();
    let data = small_data(&cfg);
    let out = train(&data, &[], &cfg, TrainOptions::default()).unwrap();
    let first = out.log[0].loss;
    let best = out.log.iter().map(|e| e.loss).fold(f64::INFINITY, f64::min);
    assert!(best <= 0.5 * first, "loss went from {first} to {best}");
}

#[test]
fn window_stays_on_the_simplex_and_checkpoint_is_best() {
    let mut cfg = small_config();
    cfg.train.epochs = 6;
    cfg.train.patience = 2;
    let data = small_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let mut worst = 0.0f64;
    let mut steps = 0;
    let mut hook = |s: &sweepkey::trainer::StepInfo<'_>| {
        let w = realized_window(s.params.get("window.logits").unwrap()).unwrap();
        for col in 0..w.shape()[1] {
            let mut sum = 0.0f64;
            for i in 0..w.shape()[0] {
                let v = w.data()[i * w.shape()[1] + col] as f64;
                assert!(v >= 0.0);
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        steps += 1;
    };
    let out = train(
        &data[..8],
        &data[8..],
        &cfg,
        TrainOptions {
            out_dir: Some(dir.path()),
            on_step: Some(&mut hook),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(steps > 0);
    assert!(worst <= 1e-6, "{worst}");

    let f1s: Vec<f64> = out.log.iter().map(|e| e.val.as_ref().unwrap().f1).collect();
    let best_epoch = out.best_epoch.unwrap();
    assert!(f1s[..best_epoch].iter().all(|&f| f < f1s[best_epoch]));
    assert!(f1s.iter().all(|&f| f <= f1s[best_epoch]));
    assert_eq!(load_checkpoint(dir.path()).unwrap().params, out.best.params);
}

#[test]
fn diverging_run_aborts_and_keeps_the_checkpoint() {
    let mut cfg: DetectorConfig = small_config();
    cfg.train.epochs = 5;
    cfg.train.lr = 1e30;
    let data = small_data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        &data[..6],
        &data[6..8],
        &cfg,
        TrainOptions {
            out_dir: Some(dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    assert!(out.aborted.is_some(), "{:?}", out.log);
    if out.best_epoch.is_some() {
        assert!(dir.path().join(INDEX_FILE).exists());
        assert_eq!(load_checkpoint(dir.path()).unwrap().params, out.best.params);
    }
}
