//! End-to-end acceptance checks. Runs without the libtest harness so that
//! every criterion prints one PASS/FAIL line regardless of capture settings.

mod common;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{small_config, small_data};
use sweepkey::checkpoint::{load_checkpoint, save_checkpoint};
use sweepkey::dataio::blob::{self, Blob};
use sweepkey::dataio::{load_dataset, synth_generate, write_dataset, Split, SweepSequence, SynthConfig};
use sweepkey::metrics::{abs_time_error, evaluate_labels, keyframe_num_error, prf, Labelled, TimeMatching};
use sweepkey::model::temporal::{realized_window, sliding_aggregate};
use sweepkey::model::{init_params, Detector};
use sweepkey::objective::{anneal_tau, bce_weighted, contrastive, gumbel_soft, temporal_smoothness, GumbelNoise, GumbelSchedule};
use sweepkey::par::ExecMode;
use sweepkey::prs::{group_segments, savgol, smooth_parts, threshold_labels, PrsConfig};
use sweepkey::selfcheck::{micro_config, micro_gradcheck};
use sweepkey::tensor::{Graph, Tensor};
use sweepkey::trainer::{train, StepInfo, TrainOptions, LOG_FILE};
use sweepkey::DetectorConfig;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let timer = Instant::now();
    let report = micro_gradcheck(1, 1e-3, ExecMode::Sequential).map_err(|e| e.to_string())?;
    let secs = timer.elapsed().as_secs_f64();
    let cfg = micro_config(1);
    let n = init_params::<f64>(&cfg).iter().map(|(_, t)| t.len()).sum::<usize>();
    check(
        report.passed && secs <= 60.0 && cfg.encoder.tap_layers == [2, 3] && cfg.bitt.layers == 1,
        format!(
            "{n} parameters, max rel error {:.2e}, {} kink retries, {secs:.1}s single-threaded{}",
            report.max_rel_error(),
            report.refined,
            report.failure.map(|f| format!(", {f}")).unwrap_or_default()
        ),
    )
}

/// Maximal intervals whose endpoints are on and which contain no run of more
/// than `max_gap` off frames, kept when at least `min_len` long.
fn enumeration_oracle(mask: &[bool], min_len: usize, max_gap: usize) -> Vec<(usize, usize)> {
    let n = mask.len();
    let bridged = |s: usize, e: usize| {
        if !mask[s] || !mask[e] {
            return false;
        }
        let mut gap = 0;
        for &m in &mask[s..=e] {
            gap = if m { 0 } else { gap + 1 };
            if gap > max_gap {
                return false;
            }
        }
        true
    };
    let mut ok = vec![vec![false; n]; n];
    for s in 0..n {
        for e in s..n {
            ok[s][e] = bridged(s, e);
        }
    }
    let mut out = Vec::new();
    for s in 0..n {
        for e in s..n {
            if !ok[s][e] || e - s + 1 < min_len {
                continue;
            }
            let contained = (0..=s).any(|a| (e..n).any(|b| (a, b) != (s, e) && ok[a][b]));
            if !contained {
                out.push((s, e));
            }
        }
    }
    out
}

fn criterion_2() -> Outcome {
    let mut mismatches = 0;
    for (min_len, max_gap) in [(3, 2), (1, 0), (2, 1)] {
        let cfg = PrsConfig {
            min_len,
            max_gap,
            ..PrsConfig::default()
        };
        for bits in 0u32..4096 {
            let mask: Vec<bool> = (0..12).map(|i| bits >> i & 1 == 1).collect();
            let p: Vec<f64> = mask.iter().map(|&m| if m { 0.95 } else { 0.1 }).collect();
            if group_segments(&p, &cfg).0 != enumeration_oracle(&mask, min_len, max_gap) {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("{mismatches} mismatches over 3 x 4096 traces"))
}

fn criterion_3() -> Outcome {
    let cfg = PrsConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut below, mut blend_err, mut inactive) = (0usize, 0.0f64, 0usize);
    for _ in 0..1000 {
        let t = rng.random_range(1..=150);
        let p: Vec<f64> = (0..t).map(|_| rng.random::<f64>()).collect();
        let s = smooth_parts(&p, &cfg).map_err(|e| e.to_string())?;
        let sg = savgol(&p, cfg.sg_window, cfg.sg_order).map_err(|e| e.to_string())?;
        let mut e = p[0];
        for i in 0..t {
            if i > 0 {
                e = 0.3 * p[i] + 0.7 * e;
            }
            if s.smooth[i] < p[i] - 0.05 {
                below += 1;
            }
            let expect = 0.6 * sg[i] + 0.4 * e;
            if expect >= p[i] - 0.05 + 1e-9 {
                inactive += 1;
                blend_err = blend_err.max((s.smooth[i] - expect).abs());
            }
        }
    }
    check(
        below == 0 && blend_err <= 1e-6,
        format!("{below} clamp violations; blend error {blend_err:.1e} over {inactive} unclamped frames"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for window in [5, 7, 9] {
        for order in 0..=2 {
            if window <= order {
                continue;
            }
            for t in 1..=40 {
                for degree in 0..=order {
                    let c: Vec<f64> = (0..=degree).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let p: Vec<f64> = (0..t)
                        .map(|i| {
                            let x = i as f64 / 10.0;
                            c.iter().rev().fold(0.0, |acc, &k| acc * x + k)
                        })
                        .collect();
                    let s = savgol(&p, window, order).map_err(|e| e.to_string())?;
                    for (a, b) in s.iter().zip(&p) {
                        worst = worst.max((a - b).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    check(worst <= 1e-6, format!("max deviation {worst:.1e} over {cases} polynomial traces"))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut changed = 0;
    for _ in 0..100 {
        let t = rng.random_range(2..40);
        let d = rng.random_range(1..8);
        let k = rng.random_range(1..6);
        let at = rng.random_range(0..t - 1);
        let x = Tensor::<f32>::randn(&[t, d], 1.0, &mut rng);
        let logits = Tensor::<f32>::randn(&[k, d], 1.0, &mut rng);
        let w = realized_window(&logits).map_err(|e| e.to_string())?;
        let mut y = x.clone();
        let from = rng.random_range(at + 1..t);
        for v in &mut y.data_mut()[from * d..] {
            *v += rng.random_range(-10.0..10.0);
        }
        let row = |input: &Tensor<f32>| -> Result<Vec<u32>, String> {
            let mut g = Graph::new();
            let xv = g.constant(input.clone());
            let wv = g.constant(w.clone());
            let out = sliding_aggregate(&mut g, xv, wv).map_err(|e| e.to_string())?;
            Ok(g.value(out).data()[at * d..(at + 1) * d].iter().map(|v| v.to_bits()).collect())
        };
        if row(&x)? != row(&y)? {
            changed += 1;
        }
    }

    let mut cfg = small_config();
    cfg.train.epochs = 10;
    let data = small_data(&cfg);
    let (mut worst, mut negative, mut steps) = (0.0f64, 0usize, 0usize);
    let mut hook = |s: &StepInfo<'_>| {
        let w = realized_window(s.params.get("window.logits").unwrap()).unwrap();
        let cols = w.shape()[1];
        for c in 0..cols {
            let mut sum = 0.0f64;
            for i in 0..w.shape()[0] {
                let v = w.data()[i * cols + c] as f64;
                negative += usize::from(v < 0.0);
                sum += v;
            }
            worst = worst.max((sum - 1.0).abs());
        }
        steps += 1;
    };
    train(
        &data,
        &[],
        &cfg,
        TrainOptions {
            on_step: Some(&mut hook),
            max_steps: Some(50),
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    check(
        changed == 0 && steps == 50 && worst <= 1e-6 && negative == 0,
        format!(
            "{changed}/100 outputs changed by future frames; {steps} steps, max |sum w - 1| = {worst:.1e}, {negative} negative weights"
        ),
    )
}

fn criterion_6() -> Outcome {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(&[1, 1], vec![0.0]).unwrap());
    let v = bce_weighted(&mut g, z, &[1], 1.0).map_err(|e| e.to_string())?;
    let bce = g.value(v).item();

    let pair = |g: &mut Graph<f64>, a: [f64; 2], b: [f64; 2], y: [u8; 2]| -> Result<f64, String> {
        let h = g.constant(Tensor::new(&[2, 2], vec![a[0], a[1], b[0], b[1]]).unwrap());
        let v = contrastive(g, h, &y, 1.0).map_err(|e| e.to_string())?;
        Ok(g.value(v).item())
    };
    let c = [
        pair(&mut g, [1.0, 0.0], [1.0, 0.0], [1, 1])?,
        pair(&mut g, [1.0, 0.0], [1.0, 0.0], [0, 1])?,
        pair(&mut g, [1.0, 0.0], [0.0, 1.0], [0, 1])?,
    ];

    let zs = [-3.0, -0.4, 0.0, 1.2, 4.0];
    let mut gs_err = 0.0f64;
    for tau in [0.5, 1.0, 1.5] {
        let z = g.constant(Tensor::new(&[5, 1], zs.to_vec()).unwrap());
        let v = gumbel_soft(&mut g, z, tau, &GumbelNoise::zeros(5)).map_err(|e| e.to_string())?;
        for (&got, &zz) in g.value(v).data().iter().zip(&zs) {
            gs_err = gs_err.max((got - 1.0 / (1.0 + (-zz / tau).exp())).abs());
        }
    }

    let alt = g.constant(Tensor::new(&[6, 1], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap());
    let v = temporal_smoothness(&mut g, alt).map_err(|e| e.to_string())?;
    let tmp = g.value(v).item();

    check(
        (bce - std::f64::consts::LN_2).abs() <= 1e-9 && c == [0.0, 1.0, 0.0] && gs_err <= 1e-9 && tmp == 1.0,
        format!("bce(0,1) = {bce:.12}, contrastive pairs {c:?}, gumbel error {gs_err:.1e}, smoothness {tmp}"),
    )
}

fn criterion_7() -> Outcome {
    let s = GumbelSchedule::default();
    let taus: Vec<f64> = (0..1000).map(|e| anneal_tau(e, &s)).collect();
    let monotone = taus.windows(2).all(|w| w[1] <= w[0]);
    let floor = taus.iter().all(|&t| t >= 0.5) && taus[999] == 0.5;
    let first_floor = taus.iter().position(|&t| t == 0.5).unwrap_or(usize::MAX);
    check(
        taus[0] == 1.5 && monotone && floor,
        format!("tau(0) = {}, floor 0.5 reached at epoch {first_floor}, non-increasing: {monotone}", taus[0]),
    )
}

fn f1_of(seqs: &[SweepSequence], preds: &[Vec<u8>]) -> f64 {
    let items: Vec<Labelled<'_>> = seqs
        .iter()
        .zip(preds)
        .map(|(s, p)| Labelled {
            case_id: &s.case_id,
            sweep_id: s.sweep_id,
            pred: p,
            gt: &s.labels,
        })
        .collect();
    evaluate_labels(&items, TimeMatching::Symmetric, ExecMode::Parallel).unwrap().f1
}

fn criterion_8() -> Outcome {
    let timer = Instant::now();
    let mut cfg = DetectorConfig::default();
    cfg.synth = SynthConfig {
        cases: 84,
        sweeps_per_case: 1,
        frames: 120,
        peak_contrast: 1.0,
        seed: 8,
        ..SynthConfig::default()
    };
    let seqs = synth_generate(&cfg.synth, ExecMode::Parallel).map_err(|e| e.to_string())?;
    let (train_set, rest) = seqs.split_at(60);
    let (val_set, test_set) = rest.split_at(12);
    let out = train(
        train_set,
        val_set,
        &cfg,
        TrainOptions {
            mode: ExecMode::Parallel,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    if let Some(reason) = &out.aborted {
        return Err(format!("training aborted: {reason}"));
    }

    let untrained = Detector::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (mut trained_pred, mut untrained_pred, mut background) = (Vec::new(), Vec::new(), Vec::new());
    let (mut wins, mut ties, mut losses) = (0, 0, 0);
    let mut per_case = Vec::new();
    for s in test_set {
        let (inf, d) = out.best.detect(s, ExecMode::Parallel).map_err(|e| e.to_string())?;
        let raw = threshold_labels(&inf.p, 0.9);
        let a = abs_time_error(&d.labels, &s.labels).unwrap().unwrap_or(0.0);
        let b = abs_time_error(&raw, &s.labels).unwrap().unwrap_or(0.0);
        match a.partial_cmp(&b) {
            Some(std::cmp::Ordering::Less) => wins += 1,
            Some(std::cmp::Ordering::Equal) => ties += 1,
            _ => losses += 1,
        }
        per_case.push(format!("{:.2}/{:.2}", a, b));
        trained_pred.push(d.labels);
        untrained_pred.push(untrained.detect(s, ExecMode::Parallel).map_err(|e| e.to_string())?.1.labels);
        background.push(vec![0u8; s.t]);
    }
    let f1 = f1_of(test_set, &trained_pred);
    let f1_untrained = f1_of(test_set, &untrained_pred);
    let f1_background = f1_of(test_set, &background);
    let margin = f1 - f1_untrained.max(f1_background);
    let secs = timer.elapsed().as_secs_f64();
    let a_ok = margin >= 30.0;
    let b_ok = f1 >= 80.0;
    let c_ok = wins >= 8;
    let flag = |ok: bool| if ok { "ok" } else { "FAILED" };
    check(
        a_ok && b_ok && c_ok && secs <= 1800.0,
        format!(
            "(a) {} test F1 {f1:.2} vs untrained {f1_untrained:.2} and background {f1_background:.2}; \
             (b) {}; (c) {} PRS beats raw thresholding on {wins}/12 cases ({ties} ties, {losses} worse; prs/raw time error {}); \
             best epoch {:?} of {} run, {secs:.0}s",
            flag(a_ok),
            flag(b_ok),
            flag(c_ok),
            per_case.join(" "),
            out.best_epoch,
            out.log.len()
        ),
    )
}

fn brute_time(pred: &[u8], gt: &[u8]) -> Option<f64> {
    let t = gt.len();
    let gp: Vec<usize> = (0..t).filter(|&i| gt[i] == 1).collect();
    let pp: Vec<usize> = (0..t).filter(|&i| pred[i] == 1).collect();
    if gp.is_empty() {
        return None;
    }
    let side = |from: &[usize], to: &[usize]| -> f64 {
        if to.is_empty() {
            return t as f64;
        }
        let total: usize = from.iter().map(|&a| to.iter().map(|&b| a.abs_diff(b)).min().unwrap()).sum();
        total as f64 / from.len() as f64
    };
    let pred_side = if pp.is_empty() { t as f64 } else { side(&pp, &gp) };
    Some(0.5 * (side(&gp, &pp) + pred_side))
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad = 0;
    for _ in 0..500 {
        let t = rng.random_range(1..=15);
        let pred: Vec<u8> = (0..t).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let gt: Vec<u8> = (0..t).map(|_| u8::from(rng.random_bool(0.4))).collect();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &g) in pred.iter().zip(&gt) {
            tp += usize::from(p == 1 && g == 1);
            fp += usize::from(p == 1 && g == 0);
            fn_ += usize::from(p == 0 && g == 1);
        }
        let pct = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
        let (p, r) = (pct(tp, tp + fp), pct(tp, tp + fn_));
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        let count = |v: &[u8]| v.iter().filter(|&&x| x == 1).count();
        let got = prf(&pred, &gt).unwrap();
        let time_ok = match (abs_time_error(&pred, &gt).unwrap(), brute_time(&pred, &gt)) {
            (None, None) => true,
            (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
            _ => false,
        };
        if got != (p, r, f)
            || keyframe_num_error(&pred, &gt).unwrap() != count(&pred).abs_diff(count(&gt))
            || !time_ok
        {
            bad += 1;
        }
    }
    check(bad == 0, format!("{bad} of 500 random label pairs disagree with brute force"))
}

fn criterion_10() -> Outcome {
    let mut cfg = small_config();
    cfg.train.epochs = 5;
    let data = small_data(&cfg);
    let run = || -> Result<(String, Detector), String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let out = train(
            &data[..8],
            &data[8..],
            &cfg,
            TrainOptions {
                out_dir: Some(dir.path()),
                ..Default::default()
            },
        )
        .map_err(|e| e.to_string())?;
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).map_err(|e| e.to_string())?;
        Ok((log, out.best))
    };
    let (log_a, det) = run()?;
    let (log_b, _) = run()?;
    let logs_equal = log_a == log_b && log_a.lines().count() == 5;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    save_checkpoint(&det, dir.path()).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint(dir.path()).map_err(|e| e.to_string())?;
    let mut detections_equal = true;
    for s in &data {
        let before = det.detect(s, ExecMode::Parallel).map_err(|e| e.to_string())?;
        let after = loaded.detect(s, ExecMode::Sequential).map_err(|e| e.to_string())?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        detections_equal &= bits(&before.0.p) == bits(&after.0.p) && before.1 == after.1;
    }

    let ddir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let items: Vec<(SweepSequence, Split)> = data.iter().map(|s| (s.clone(), Split::Test)).collect();
    write_dataset(ddir.path(), &items).map_err(|e| e.to_string())?;
    let back = load_dataset(ddir.path(), Split::Test).map_err(|e| e.to_string())?;
    let frame_bits = |s: &[SweepSequence]| -> Vec<u32> { s.iter().flat_map(|q| q.frames.iter().map(|v| v.to_bits())).collect() };
    let mut blobs_equal = frame_bits(&back) == frame_bits(&data)
        && back.iter().zip(&data).all(|(a, b)| a.labels == b.labels && a.masks == b.masks);
    let specials = vec![f32::NAN, -0.0, f32::INFINITY, f32::MIN_POSITIVE / 2.0, 1.5];
    let path = ddir.path().join("specials.swkt");
    blob::write(&path, &Blob::f32(&[5], specials.clone())).map_err(|e| e.to_string())?;
    let read = blob::read(&path).and_then(|b| b.into_f32(&path)).map_err(|e| e.to_string())?;
    blobs_equal &= read.iter().map(|v| v.to_bits()).eq(specials.iter().map(|v| v.to_bits()));

    check(
        logs_equal && detections_equal && blobs_equal,
        format!("identical logs: {logs_equal}; reloaded detections identical: {detections_equal}; blobs bit-exact: {blobs_equal}"),
    )
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient fidelity", criterion_1),
        ("2 PRS grouping oracle", criterion_2),
        ("3 smoothing clamp and blend", criterion_3),
        ("4 Savitzky-Golay polynomial reproduction", criterion_4),
        ("5 causality and window simplex", criterion_5),
        ("6 loss unit values", criterion_6),
        ("7 temperature annealing", criterion_7),
        ("8 closed-loop synthetic experiment", criterion_8),
        ("9 metric correctness", criterion_9),
        ("10 determinism and round-trip", criterion_10),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {name}: PASS ({detail}) [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {name}: FAIL ({detail}) [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
