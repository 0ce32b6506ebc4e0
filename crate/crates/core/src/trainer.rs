//! Training loop: one Adam step per sequence, per-epoch temperature
//! annealing, validation F1 model selection and early stopping.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::DetectorConfig;
use crate::dataio::SweepSequence;
use crate::error::{Error, Result};
use crate::fsutil;
use crate::metrics::{evaluate_labels, Labelled, TimeMatching};
use crate::model::{encoder::patchify, full_graph, head_graph, Detector, ParamStore};
use crate::objective::{anneal_tau, objective, GumbelNoise, GumbelSchedule, LossInputs};
use crate::optim::{Adam, AdamConfig};
use crate::par::{self, ExecMode};
use crate::prior::augment_sequence;
use crate::tensor::{Graph, Tensor, Var};

pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Sequences per optimizer step. Only 1 is supported.
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub gumbel: GumbelSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 150,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 15,
            eval_every: 1,
            seed: 0,
            gumbel: GumbelSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size != 1 {
            return bad(format!("batch_size must be 1, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0,1) and eps must be positive".into());
        }
        if self.patience == 0 || self.eval_every == 0 {
            return bad("patience and eval_every must be at least 1".into());
        }
        self.gumbel.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub abs_time_error: Option<f64>,
    pub keyframe_num_error: f64,
}

/// One line of the training log. Loss terms are means over the epoch's steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub tau: f64,
    pub steps: usize,
    pub loss: f64,
    pub bce: f64,
    pub con: f64,
    pub gs: f64,
    pub aux: f64,
    pub tmp: f64,
    pub val: Option<ValMetrics>,
    pub best_epoch: Option<usize>,
}

/// Observation passed to [`TrainOptions::on_step`] after each update.
pub struct StepInfo<'a> {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub params: &'a ParamStore<f32>,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub mode: ExecMode,
    /// Checkpoint directory; also receives the JSON-lines log.
    pub out_dir: Option<&'a Path>,
    pub on_step: Option<&'a mut dyn FnMut(&StepInfo<'_>)>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Highest validation F1, or the final weights without a validation set.
    pub best: Detector,
    pub last: Detector,
    pub best_epoch: Option<usize>,
    pub best_f1: Option<f64>,
    pub log: Vec<EpochLog>,
    pub stopped_early: bool,
    /// Reason training stopped on a non-finite loss or gradient.
    pub aborted: Option<String>,
}

enum Input {
    Features(Vec<Tensor<f32>>),
    Patches(Vec<Tensor<f32>>),
}

fn prepare(det: &Detector, seqs: &[SweepSequence], mode: ExecMode) -> Result<Vec<Input>> {
    let train_backbone = det.cfg.encoder.train_backbone;
    let p = det.cfg.encoder.patch_size;
    par::try_map(mode, seqs, |s| {
        if train_backbone {
            let aug = augment_sequence(s, &det.cfg.prior)?;
            let patches = (0..aug.t)
                .map(|t| patchify(aug.frame(t), aug.h, aug.w, p))
                .collect::<Result<Vec<_>>>()?;
            Ok(Input::Patches(patches))
        } else {
            Ok(Input::Features(det.features(s, ExecMode::Sequential)?))
        }
    })
}

struct StepResult {
    loss: f64,
    terms: [f64; 5],
    grads: Vec<(String, Tensor<f32>)>,
}

fn loss_and_grads(det: &Detector, input: &Input, labels: &[u8], tau: f64, noise: &GumbelNoise) -> Result<StepResult> {
    let mut g = Graph::<f32>::new();
    let p = det.params.bind(&mut g, |n| det.is_trainable(n));
    let out = match input {
        Input::Features(taps) => {
            let vars: Vec<Var> = taps.iter().map(|t| g.constant(t.clone())).collect();
            head_graph(&mut g, &p, &det.cfg, &vars)?
        }
        Input::Patches(frames) => {
            let vars: Vec<Var> = frames.iter().map(|t| g.constant(t.clone())).collect();
            full_graph(&mut g, &p, &det.cfg, &vars)?
        }
    };
    let inputs = LossInputs {
        logits: out.logits,
        embeddings: out.embeddings,
        stage_logits: &out.stage_logits,
        labels,
        tau,
        noise,
    };
    let (total, terms) = objective(&mut g, &inputs, &det.cfg.loss)?;
    let loss = g.value(total).item() as f64;
    let grads = g.backward(total)?;
    let mut out = Vec::new();
    for (name, &v) in p.iter() {
        if det.is_trainable(name) {
            let gr = grads.get(v);
            if !gr.all_finite() {
                return Err(Error::NonFinite { op: "gradient" });
            }
            out.push((name.clone(), gr));
        }
    }
    Ok(StepResult {
        loss,
        terms: terms.0.map(|v| g.value(v).item() as f64),
        grads: out,
    })
}

fn validate_epoch(det: &Detector, seqs: &[SweepSequence], inputs: &[Input], mode: ExecMode) -> Result<ValMetrics> {
    let labels: Vec<Vec<u8>> = par::try_map(mode, &(0..seqs.len()).collect::<Vec<_>>(), |&i| {
        let inf = match &inputs[i] {
            Input::Features(taps) => det.infer_features(taps)?,
            Input::Patches(_) => det.infer(&seqs[i], ExecMode::Sequential)?,
        };
        Ok::<_, Error>(det.postprocess(&inf, &det.cfg.prs)?.labels)
    })?;
    let items: Vec<Labelled<'_>> = seqs
        .iter()
        .zip(&labels)
        .map(|(s, l)| Labelled {
            case_id: &s.case_id,
            sweep_id: s.sweep_id,
            pred: l,
            gt: &s.labels,
        })
        .collect();
    let r = evaluate_labels(&items, TimeMatching::Symmetric, mode)?;
    Ok(ValMetrics {
        precision: r.precision,
        recall: r.recall,
        f1: r.f1,
        abs_time_error: r.abs_time_error,
        keyframe_num_error: r.keyframe_num_error,
    })
}

fn write_log(dir: &Path, log: &[EpochLog]) -> Result<()> {
    let mut text = String::new();
    for e in log {
        let line = serde_json::to_string(e).map_err(|err| Error::json(dir.join(LOG_FILE), err))?;
        text.push_str(&line);
        text.push('\n');
    }
    fsutil::write_atomic(&dir.join(LOG_FILE), text.as_bytes())
}

/// Train a fresh detector built from `cfg`.
pub fn train(
    train_set: &[SweepSequence],
    val_set: &[SweepSequence],
    cfg: &DetectorConfig,
    opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    train_from(Detector::new(cfg.clone())?, train_set, val_set, opts)
}

/// Train starting from the weights in `det`.
pub fn train_from(
    mut det: Detector,
    train_set: &[SweepSequence],
    val_set: &[SweepSequence],
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    det.cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let tc = det.cfg.train.clone();
    let mode = opts.mode;
    let train_in = prepare(&det, train_set, mode)?;
    let val_in = prepare(&det, val_set, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::<f32>::new(tc.adam());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, Detector)> = None;
    let mut since_best = 0usize;
    let mut step = 0usize;
    let mut stopped_early = false;
    let mut aborted = None;

    'epochs: for epoch in 0..tc.epochs {
        let tau = anneal_tau(epoch, &tc.gumbel);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut n = 0usize;
        for &i in &order {
            if opts.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let seq = &train_set[i];
            let noise = GumbelNoise::sample(seq.t, &mut rng);
            let r = match loss_and_grads(&det, &train_in[i], &seq.labels, tau, &noise) {
                Ok(r) if r.loss.is_finite() => r,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    aborted = Some(format!("non-finite loss at epoch {epoch} on {}", seq.name()));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut det.params, &r.grads)?;
            step += 1;
            n += 1;
            sums[0] += r.loss;
            for (s, t) in sums[1..].iter_mut().zip(r.terms) {
                *s += t;
            }
            if let Some(cb) = opts.on_step.as_mut() {
                cb(&StepInfo {
                    step,
                    epoch,
                    loss: r.loss,
                    params: &det.params,
                });
            }
        }
        if n == 0 {
            break;
        }
        let mean = sums.map(|s| s / n as f64);
        let val = if !val_set.is_empty() && (epoch + 1) % tc.eval_every == 0 {
            Some(validate_epoch(&det, val_set, &val_in, mode)?)
        } else {
            None
        };
        if let Some(v) = &val {
            let improved = best.as_ref().is_none_or(|(_, f, _)| v.f1 > *f);
            if improved {
                best = Some((epoch, v.f1, det.clone()));
                since_best = 0;
                if let Some(dir) = opts.out_dir {
                    save_checkpoint(&det, dir)?;
                }
            } else {
                since_best += tc.eval_every;
            }
        }
        log.push(EpochLog {
            epoch,
            tau,
            steps: n,
            loss: mean[0],
            bce: mean[1],
            con: mean[2],
            gs: mean[3],
            aux: mean[4],
            tmp: mean[5],
            val,
            best_epoch: best.as_ref().map(|b| b.0),
        });
        if let Some(dir) = opts.out_dir {
            write_log(dir, &log)?;
        }
        if best.is_some() && since_best >= tc.patience {
            stopped_early = true;
            break;
        }
    }

    let last = det;
    let (best_epoch, best_f1, best_det) = match best {
        Some((e, f, d)) => (Some(e), Some(f), d),
        None => (None, None, last.clone()),
    };
    if let Some(dir) = opts.out_dir {
        if best_epoch.is_none() && aborted.is_none() {
            save_checkpoint(&best_det, dir)?;
        }
    }
    Ok(TrainOutcome {
        best: best_det,
        last,
        best_epoch,
        best_f1,
        log,
        stopped_early,
        aborted,
    })
}
