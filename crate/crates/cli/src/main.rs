use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sweepkey::checkpoint::load_checkpoint;
use sweepkey::dataio::{assign_splits, load_dataset, load_sequence_file, synth_generate, write_dataset, Split};
use sweepkey::fsutil;
use sweepkey::evaluate::{evaluate, evaluate_traces};
use sweepkey::metrics::{EvalReport, TimeMatching};
use sweepkey::par::ExecMode;
use sweepkey::plot::render_svg;
use sweepkey::selfcheck::micro_gradcheck;
use sweepkey::trace::Trace;
use sweepkey::trainer::{train, TrainOptions};
use sweepkey::DetectorConfig;

const SPLIT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Parser)]
#[command(name = "sweepkey", version, about = "Keyframe detection for blind-sweep ultrasound")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a detector and write the best checkpoint.
    Train(TrainArgs),
    /// Run detection and write trace JSON.
    Detect(DetectArgs),
    /// Score a checkpoint or saved traces against ground truth.
    Eval(EvalArgs),
    /// Check analytic gradients of a micro model against finite differences.
    Gradcheck(GradcheckArgs),
    /// Render a trace against ground truth as SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    cases: Option<usize>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "data"]))]
struct DetectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// A sequence record file.
    #[arg(long)]
    input: Option<PathBuf>,
    /// A dataset directory; writes one trace per sequence of `--split` into `--out`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, required_unless_present = "from_traces")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long)]
    out: PathBuf,
    /// Score trace files from this directory instead of running the model.
    #[arg(long)]
    from_traces: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "symmetric")]
    matching: MatchingArg,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Also write the full report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Sequence record file holding the ground-truth labels.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Threshold guide line.
    #[arg(long, default_value_t = 0.9)]
    theta: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MatchingArg {
    Symmetric,
    GtToPred,
}

impl From<MatchingArg> for TimeMatching {
    fn from(m: MatchingArg) -> Self {
        match m {
            MatchingArg::Symmetric => TimeMatching::Symmetric,
            MatchingArg::GtToPred => TimeMatching::GtToPred,
        }
    }
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl Failure {
    fn usage(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    fn runtime(msg: impl Into<String>) -> Self {
        Self { code: 1, msg: msg.into() }
    }
}

impl From<sweepkey::Error> for Failure {
    fn from(e: sweepkey::Error) -> Self {
        match e {
            sweepkey::Error::Config(_) => Self::usage(e.to_string()),
            _ => Self::runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<DetectorConfig, Failure> {
    match path {
        Some(p) if !p.exists() => Err(Failure::usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Ok(DetectorConfig::load(p)?),
        None => Ok(DetectorConfig::default()),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    Ok(fsutil::write_atomic(path, text.as_bytes())?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    Ok(fsutil::write_json(path, value)?)
}

fn print_report(r: &EvalReport) {
    let time = r.abs_time_error.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into());
    println!(
        "P {:.2}  R {:.2}  F1 {:.2}  abs time err {time}  keyframe num err {:.3}  ({} sequences)",
        r.precision,
        r.recall,
        r.f1,
        r.keyframe_num_error,
        r.per_sequence.len()
    );
}

fn cmd_synth(a: SynthArgs, mode: ExecMode) -> Outcome {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.synth.seed = seed;
    }
    if let Some(cases) = a.cases {
        cfg.synth.cases = cases;
    }
    cfg.synth.validate()?;
    if a.out.is_file() {
        return Err(Failure::usage(format!("{} is a file", a.out.display())));
    }
    let non_empty = a.out.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !a.force {
        return Err(Failure::usage(format!(
            "{} is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    let seqs = synth_generate(&cfg.synth, mode)?;
    let items = assign_splits(seqs, SPLIT_FRACTIONS);
    write_dataset(&a.out, &items)?;
    cfg.save(&a.out.join("config.json"))?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let seqs: Vec<_> = items.iter().filter(|(_, s)| *s == split).map(|(q, _)| q).collect();
        let mut cases: Vec<&str> = seqs.iter().map(|q| q.case_id.as_str()).collect();
        cases.dedup();
        println!("{split}: {} cases, {} sequences", cases.len(), seqs.len());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, mode: ExecMode) -> Outcome {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let train_set = load_dataset(&a.data, Split::Train)?;
    let val_set = load_dataset(&a.data, Split::Val)?;
    if train_set.is_empty() {
        return Err(Failure::usage(format!("{} has no training sequences", a.data.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Failure::runtime(format!("{}: {e}", a.out.display())))?;
    let out = train(
        &train_set,
        &val_set,
        &cfg,
        TrainOptions {
            mode,
            out_dir: Some(&a.out),
            ..Default::default()
        },
    )?;
    for e in &out.log {
        let val = e
            .val
            .as_ref()
            .map(|v| format!("  val F1 {:.2}", v.f1))
            .unwrap_or_default();
        println!("epoch {:>3}  tau {:.3}  loss {:.4}{val}", e.epoch, e.tau, e.loss);
    }
    if let Some(reason) = out.aborted {
        return Err(Failure::runtime(format!(
            "training aborted: {reason}; the last good checkpoint is kept in {}",
            a.out.display()
        )));
    }
    match (out.best_epoch, out.best_f1) {
        (Some(e), Some(f)) => println!("best val F1 {f:.2} at epoch {e}; checkpoint in {}", a.out.display()),
        _ => println!("no validation split; final weights saved to {}", a.out.display()),
    }
    Ok(())
}

fn cmd_detect(a: DetectArgs, mode: ExecMode) -> Outcome {
    let det = load_checkpoint(&a.ckpt)?;
    if let Some(input) = &a.input {
        let (_, seq) = load_sequence_file(input)?;
        let (inf, d) = det.detect(&seq, mode)?;
        let trace = Trace::new(&seq, &inf, &d);
        trace.save(&a.out)?;
        println!(
            "{}: {} segments, {} keyframes{}",
            seq.name(),
            d.segments.len(),
            d.labels.iter().filter(|&&v| v == 1).count(),
            if d.fallback { " (argmax fallback)" } else { "" }
        );
        return Ok(());
    }
    let data = a.data.as_ref().expect("clap enforces one source");
    let seqs = load_dataset(data, a.split.into())?;
    let out = evaluate(&det, &seqs, &det.cfg.prs, TimeMatching::Symmetric, mode)?;
    for t in &out.traces {
        t.save(&a.out.join(t.file_name()))?;
    }
    println!("wrote {} traces to {}", out.traces.len(), a.out.display());
    Ok(())
}

fn read_traces(dir: &Path) -> Result<Vec<Trace>, Failure> {
    let entries = std::fs::read_dir(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".trace.json"))
        .collect();
    paths.sort();
    Ok(paths.iter().map(|p| Trace::load(p)).collect::<Result<Vec<_>, _>>()?)
}

fn cmd_eval(a: EvalArgs, mode: ExecMode) -> Outcome {
    let seqs = load_dataset(&a.data, a.split.into())?;
    if seqs.is_empty() {
        return Err(Failure::usage(format!("{} has no {} sequences", a.data.display(), Split::from(a.split))));
    }
    let report = match (&a.from_traces, &a.ckpt) {
        (Some(dir), _) => evaluate_traces(&read_traces(dir)?, &seqs, a.matching.into(), mode)?,
        (None, Some(ckpt)) => {
            let det = load_checkpoint(ckpt)?;
            evaluate(&det, &seqs, &det.cfg.prs, a.matching.into(), mode)?.report
        }
        (None, None) => unreachable!("clap requires --ckpt without --from-traces"),
    };
    write_json(&a.out, &report)?;
    print_report(&report);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, mode: ExecMode) -> Outcome {
    if !(a.tol > 0.0) {
        return Err(Failure::usage("--tol must be positive"));
    }
    let report = micro_gradcheck(a.seed, a.tol, mode)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    for e in &report.entries {
        if e.max_rel_error > a.tol {
            println!(
                "  {} [{}]: analytic {:.6e}, numeric {:.6e}",
                e.name, e.worst_index, e.analytic, e.numeric
            );
        }
    }
    let params: usize = report.entries.len();
    if report.passed {
        println!(
            "PASS: {params} tensors, max relative error {:.3e} (tol {}), {} kink retries",
            report.max_rel_error(),
            a.tol,
            report.refined
        );
        Ok(())
    } else {
        Err(Failure::runtime(format!(
            "FAIL: max relative error {:.3e} (tol {}){}",
            report.max_rel_error(),
            a.tol,
            report.failure.map(|f| format!("; {f}")).unwrap_or_default()
        )))
    }
}

fn cmd_plot(a: PlotArgs) -> Outcome {
    let trace = Trace::load(&a.trace)?;
    let (_, seq) = load_sequence_file(&a.gt)?;
    if seq.t != trace.labels.len() {
        return Err(Failure::usage(format!(
            "trace has {} frames but {} has {}",
            trace.labels.len(),
            a.gt.display(),
            seq.t
        )));
    }
    let svg = render_svg(&trace, &seq.labels, a.theta)?;
    write_text(&a.out, &svg)
}

fn configure_threads() -> Outcome {
    let Ok(v) = std::env::var("SWEEPKEY_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("SWEEPKEY_THREADS must be a positive integer, got {v:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::runtime(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let mode = if cli.sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    };
    match cli.command {
        Command::Synth(a) => cmd_synth(a, mode),
        Command::Train(a) => cmd_train(a, mode),
        Command::Detect(a) => cmd_detect(a, mode),
        Command::Eval(a) => cmd_eval(a, mode),
        Command::Gradcheck(a) => cmd_gradcheck(a, mode),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
