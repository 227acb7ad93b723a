//! `cns-eval` command line.
//!
//! Every subcommand prints `key=value` summary lines on stdout. Failures print
//! `code=<CODE> <message>` on stderr and exit 1 (validation) or 2 (I/O, parse,
//! missing input, usage).

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::exec::{with_thread_cap, Execution};
use crate::filter::{
    apply_filter_with, calibrate_thresholds, compute_alignment_scores_with, evaluate_filter,
    load_labels, load_scores, prefilter_base, write_scores, EmbeddingSet, FilterCalibration,
    FilterVerdicts, PartialPolicy, ScoreTable, DEFAULT_CLIP_TEXT_THRESHOLD,
};
use crate::manifest::{load_manifest, trajectory_index, Manifest, Scale};
use crate::metrics::{
    accuracy_by_scale_with, failure_histogram, failure_points_with, Averaging, BasePolicy,
    Completeness, CorruptionOptions, PredictionLog,
};
use crate::report::{
    accuracy_csv, build_report, emit_plot_data, fmt_float, load_model_meta, PlotKind, ReportInputs,
    ReportOptions, DEFAULT_BASELINE,
};
use crate::slider::{slider_demo, timestep_gate, SampleSpec, SliderTrainConfig};
use crate::stats::{proportion_ci_with, rank_models, IntervalMethod};
use crate::synth::{EMBEDDINGS_DIR, LABELS_FILE, MANIFEST_FILE, PREDICTIONS_FILE};

pub const THREADS_ENV: &str = "CNS_EVAL_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "cns-eval",
    version,
    about = "Robustness evaluation under continuous nuisance shifts"
)]
struct Cli {
    /// Run every loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check a manifest (and optionally predictions, labels, embeddings).
    Validate(ValidateArgs),
    /// Compute the four alignment scores per image.
    Scores(ScoresArgs),
    /// Calibrate per-filter thresholds on labeled images.
    Calibrate(CalibrateArgs),
    /// Apply the k-of-4 filter and write verdicts.
    Filter(FilterArgs),
    /// Per-scale accuracy, drops and corruption errors.
    Eval(EvalArgs),
    /// Rank models at one (shift, scale).
    Rank(RankArgs),
    /// Failure-point histograms.
    Fp(FpArgs),
    /// Train a toy slider and dump the trace.
    SliderDemo(SliderDemoArgs),
    /// Full report bundle with CSV and SVG plot data.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PartialArg {
    Exclude,
    AsInClass,
}

impl From<PartialArg> for PartialPolicy {
    fn from(p: PartialArg) -> Self {
        match p {
            PartialArg::Exclude => PartialPolicy::Exclude,
            PartialArg::AsInClass => PartialPolicy::AsInClass,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AveragingArg {
    PerScale,
    ImageWeighted,
}

impl From<AveragingArg> for Averaging {
    fn from(a: AveragingArg) -> Self {
        match a {
            AveragingArg::PerScale => Averaging::PerScale,
            AveragingArg::ImageWeighted => Averaging::ImageWeighted,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaseArg {
    Exclude,
    BinAtZero,
}

impl From<BaseArg> for BasePolicy {
    fn from(b: BaseArg) -> Self {
        match b {
            BaseArg::Exclude => BasePolicy::ExcludeBaseFailures,
            BaseArg::BinAtZero => BasePolicy::BinAtZero,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum CompletenessArg {
    CompleteOnly,
    Any,
}

impl From<CompletenessArg> for Completeness {
    fn from(c: CompletenessArg) -> Self {
        match c {
            CompletenessArg::CompleteOnly => Completeness::CompleteOnly,
            CompletenessArg::Any => Completeness::Any,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum IntervalArg {
    Wald,
    Wilson,
}

impl From<IntervalArg> for IntervalMethod {
    fn from(i: IntervalArg) -> Self {
        match i {
            IntervalArg::Wald => IntervalMethod::Wald,
            IntervalArg::Wilson => IntervalMethod::Wilson,
        }
    }
}

#[derive(Args, Debug)]
struct ValidateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoresArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory holding the embedding binaries and index files.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = FilterCalibration::DEFAULT_TARGET_TPR)]
    target_tpr: f64,
    #[arg(long, default_value_t = FilterCalibration::DEFAULT_VOTE_K)]
    vote_k: u8,
}

#[derive(Args, Debug)]
struct PrefilterArgs {
    /// Drop trajectories whose clean image fails the text or classifier check.
    #[arg(long)]
    prefilter: bool,
    #[arg(long, default_value = "resnet50")]
    reference_model: String,
    #[arg(long, default_value_t = DEFAULT_CLIP_TEXT_THRESHOLD)]
    clip_text_threshold: f64,
}

#[derive(Args, Debug)]
struct FilterArgs {
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the calibrated vote count.
    #[arg(long)]
    vote_k: Option<u8>,
    /// Single text filter (plain prompt) with one vote.
    #[arg(long)]
    text_only: bool,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PartialArg::Exclude)]
    partial_policy: PartialArg,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[command(flatten)]
    prefilter: PrefilterArgs,
}

#[derive(Args, Debug)]
struct MetricArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Filter verdicts; removed images are dropped before counting.
    #[arg(long)]
    verdicts: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    z: f64,
    #[arg(long, value_enum, default_value_t = IntervalArg::Wald)]
    interval: IntervalArg,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, default_value = DEFAULT_BASELINE)]
    baseline: String,
    #[arg(long, value_enum, default_value_t = AveragingArg::ImageWeighted)]
    averaging: AveragingArg,
    /// Include scale 0 in the CE sums.
    #[arg(long)]
    include_base_scale: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RankArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long)]
    shift: String,
    #[arg(long)]
    scale: f64,
}

#[derive(Args, Debug)]
struct FpArgs {
    #[command(flatten)]
    metric: MetricArgs,
    #[arg(long, value_enum, default_value_t = BaseArg::Exclude)]
    base_policy: BaseArg,
    #[arg(long, value_enum, default_value_t = CompletenessArg::CompleteOnly)]
    completeness: CompletenessArg,
    #[arg(long)]
    normalize: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SliderDemoArgs {
    #[arg(long, default_value_t = 4)]
    d_in: usize,
    #[arg(long, default_value_t = 4)]
    d_out: usize,
    #[arg(long, default_value_t = 4)]
    rank: usize,
    #[arg(long, default_value_t = 1.0)]
    eta: f64,
    #[arg(long, default_value_t = 1.0)]
    train_scale: f64,
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    learning_rate: f64,
    #[arg(long, default_value_t = 20_000)]
    iterations: usize,
    #[arg(long, default_value_t = 1e-10)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.75)]
    active_fraction: f64,
    #[arg(long, default_value_t = 50)]
    total_steps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Directory with manifest.jsonl, predictions.jsonl and optionally
    /// labels.jsonl and embeddings/.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    model_meta: Option<PathBuf>,
    /// Skip the out-of-class filter even when scores are available.
    #[arg(long)]
    no_filter: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = FilterCalibration::DEFAULT_TARGET_TPR)]
    target_tpr: f64,
    #[arg(long)]
    vote_k: Option<u8>,
    #[arg(long, value_enum, default_value_t = PartialArg::Exclude)]
    partial_policy: PartialArg,
    #[arg(long, default_value = DEFAULT_BASELINE)]
    baseline: String,
    #[arg(long, value_enum, default_value_t = AveragingArg::ImageWeighted)]
    averaging: AveragingArg,
    #[arg(long)]
    include_base_scale: bool,
    #[arg(long, value_enum, default_value_t = BaseArg::Exclude)]
    base_policy: BaseArg,
    #[arg(long, value_enum, default_value_t = CompletenessArg::CompleteOnly)]
    completeness: CompletenessArg,
    #[arg(long, default_value_t = 0.5)]
    min_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    z: f64,
    #[arg(long, value_enum, default_value_t = IntervalArg::Wald)]
    interval: IntervalArg,
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    prefilter: PrefilterArgs,
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                eprintln!("code=USAGE {}", e.to_string().trim_end());
                return 2;
            }
            // a closed pipe (e.g. `| head`) is not an error for help output
            let _ = write!(std::io::stdout(), "{e}");
            return 0;
        }
    };
    match run(cli) {
        Ok(lines) => {
            let mut out = std::io::stdout().lock();
            for l in lines {
                if writeln!(out, "{l}").is_err() {
                    break;
                }
            }
            0
        }
        Err(e) => {
            eprintln!("code={} {e}", e.code());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("{THREADS_ENV}={v} is not a count")))?,
        Err(_) => 0,
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    with_thread_cap(threads, || dispatch(cli.command, exec))
}

fn dispatch(cmd: Command, exec: Execution) -> Result<Vec<String>> {
    match cmd {
        Command::Validate(a) => validate(a),
        Command::Scores(a) => scores(a, exec),
        Command::Calibrate(a) => calibrate(a),
        Command::Filter(a) => filter(a, exec),
        Command::Eval(a) => eval(a, exec),
        Command::Rank(a) => rank(a, exec),
        Command::Fp(a) => fp(a, exec),
        Command::SliderDemo(a) => slider(a),
        Command::Report(a) => report(a, exec),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &'static str) -> Result<&'a Path> {
    p.as_deref().ok_or(Error::MissingInput(flag))
}

/// Every referenced input must exist before any work starts.
fn check_exists<'a>(paths: impl IntoIterator<Item = &'a Option<PathBuf>>) -> Result<()> {
    for p in paths.into_iter().flatten() {
        if !p.exists() {
            return Err(Error::io(
                p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
            ));
        }
    }
    Ok(())
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

fn validate(a: ValidateArgs) -> Result<Vec<String>> {
    let manifest_path = required(&a.manifest, "--manifest")?;
    check_exists([&a.manifest, &a.predictions, &a.labels, &a.embeddings])?;
    let m = load_manifest(manifest_path)?;
    let idx = trajectory_index(&m);
    let mut out = vec![format!(
        "records={} trajectories={} complete={}",
        m.len(),
        idx.len(),
        idx.complete_count()
    )];
    if let Some(p) = &a.predictions {
        let preds = PredictionLog::load(p, Some(&m))?;
        out.push(format!(
            "predictions={} models={}",
            preds.len(),
            preds.models().count()
        ));
    }
    if let Some(p) = &a.labels {
        let labels = load_labels(p)?;
        if let Some(id) = labels.keys().find(|id| m.get(id).is_none()) {
            return Err(Error::Invariant {
                record: id.clone(),
                line: 0,
                reason: "labeled image is not in the manifest".into(),
            });
        }
        out.push(format!("labels={}", labels.len()));
    }
    if let Some(p) = &a.embeddings {
        let emb = EmbeddingSet::load(p)?;
        emb.validate()?;
        out.push(format!(
            "clip_images={} dino_images={} prompts={}",
            emb.clip_image.len(),
            emb.dino_cls.len(),
            emb.text.len()
        ));
    }
    Ok(out)
}

fn score_table(manifest: &Manifest, emb_dir: &Path, exec: Execution) -> Result<ScoreTable> {
    let emb = EmbeddingSet::load(emb_dir)?;
    emb.validate()?;
    compute_alignment_scores_with(&emb, &trajectory_index(manifest), exec)
}

fn scores(a: ScoresArgs, exec: Execution) -> Result<Vec<String>> {
    let manifest = required(&a.manifest, "--manifest")?;
    let emb = required(&a.embeddings, "--embeddings")?;
    let out = required(&a.out, "--out")?;
    check_exists([&a.manifest, &a.embeddings])?;
    let m = load_manifest(manifest)?;
    let table = score_table(&m, emb, exec)?;
    write_scores(out, &table)?;
    Ok(vec![format!("scored={}", table.len())])
}

fn calibrate(a: CalibrateArgs) -> Result<Vec<String>> {
    let scores = required(&a.scores, "--scores")?;
    let labels = required(&a.labels, "--labels")?;
    let out = required(&a.out, "--out")?;
    check_exists([&a.scores, &a.labels])?;
    let mut cal = calibrate_thresholds(&load_scores(scores)?, &load_labels(labels)?, a.target_tpr)?;
    cal.vote_k = a.vote_k;
    cal.validate()?;
    cal.save(out)?;
    let t = cal.thresholds();
    Ok(vec![format!(
        "tau_text_plain={} tau_text_shift={} tau_feat_clip={} tau_feat_dino={} vote_k={}",
        fmt_float(t[0]),
        fmt_float(t[1]),
        fmt_float(t[2]),
        fmt_float(t[3]),
        cal.vote_k
    )])
}

fn adjust_calibration(
    mut cal: FilterCalibration,
    vote_k: Option<u8>,
    text_only: bool,
) -> Result<FilterCalibration> {
    if text_only {
        cal = cal.text_only_baseline();
    }
    if let Some(k) = vote_k {
        cal.vote_k = k;
    }
    cal.validate()?;
    Ok(cal)
}

fn prefiltered(
    verdicts: &mut FilterVerdicts,
    scores: &ScoreTable,
    manifest: &Manifest,
    preds: &PredictionLog,
    args: &PrefilterArgs,
) -> Result<usize> {
    let idx = trajectory_index(manifest);
    let excluded = prefilter_base(
        scores,
        preds,
        &idx,
        &args.reference_model,
        args.clip_text_threshold,
    )?;
    verdicts.mark_prefiltered(&excluded, &idx);
    Ok(excluded.len())
}

fn filter(a: FilterArgs, exec: Execution) -> Result<Vec<String>> {
    let scores_path = required(&a.scores, "--scores")?;
    let cal_path = required(&a.calibration, "--calibration")?;
    let out = required(&a.out, "--out")?;
    check_exists([
        &a.scores,
        &a.calibration,
        &a.labels,
        &a.manifest,
        &a.predictions,
    ])?;
    let scores = load_scores(scores_path)?;
    let cal = adjust_calibration(FilterCalibration::load(cal_path)?, a.vote_k, a.text_only)?;
    let mut verdicts = apply_filter_with(&scores, &cal, exec)?;
    let mut lines = Vec::new();
    if a.prefilter.prefilter {
        let m = load_manifest(required(&a.manifest, "--manifest")?)?;
        let preds = PredictionLog::load(required(&a.predictions, "--predictions")?, Some(&m))?;
        let n = prefiltered(&mut verdicts, &scores, &m, &preds, &a.prefilter)?;
        lines.push(format!("prefiltered_trajectories={n}"));
    }
    verdicts.write_jsonl(out)?;
    lines.insert(
        0,
        format!(
            "images={} removed={}",
            verdicts.len(),
            verdicts.removed_count()
        ),
    );
    if let Some(l) = &a.labels {
        let q = evaluate_filter(&verdicts, &load_labels(l)?, a.partial_policy.into())?;
        lines.push(format!(
            "tpr={} fpr={} acc={}",
            fmt_float(q.tpr),
            fmt_float(q.fpr),
            fmt_float(q.acc)
        ));
    }
    Ok(lines)
}

struct MetricInputs {
    manifest: Manifest,
    preds: PredictionLog,
    verdicts: Option<FilterVerdicts>,
}

fn metric_inputs(a: &MetricArgs) -> Result<MetricInputs> {
    let manifest = required(&a.manifest, "--manifest")?;
    let preds = required(&a.predictions, "--predictions")?;
    check_exists([&a.manifest, &a.predictions, &a.verdicts])?;
    let manifest = load_manifest(manifest)?;
    let preds = PredictionLog::load(preds, Some(&manifest))?;
    let verdicts = a
        .verdicts
        .as_ref()
        .map(FilterVerdicts::load_jsonl)
        .transpose()?;
    Ok(MetricInputs {
        manifest,
        preds,
        verdicts,
    })
}

fn eval(a: EvalArgs, exec: Execution) -> Result<Vec<String>> {
    let inp = metric_inputs(&a.metric)?;
    let opts = ReportOptions {
        baseline: a.baseline.clone(),
        averaging: a.averaging.into(),
        corruption: CorruptionOptions {
            include_base_scale: a.include_base_scale,
        },
        interval: a.metric.interval.into(),
        z: a.metric.z,
        ..ReportOptions::default()
    };
    let mut inputs = ReportInputs::new(&inp.manifest, &inp.preds);
    inputs.verdicts = inp.verdicts.as_ref();
    let report = build_report(&inputs, &opts, exec)?;
    if let Some(dir) = &a.out_dir {
        write(&dir.join("accuracy.csv"), &accuracy_csv(&report))?;
        write(&dir.join("drops.json"), &to_json(&report.drops))?;
        write(&dir.join("corruption.json"), &to_json(&report.corruption))?;
    }
    let mut lines = vec![format!(
        "cells={} models={}",
        report.cells.len(),
        report.models.len()
    )];
    for c in &report.corruption {
        lines.push(format!(
            "model={} baseline={} mce={} mean_rce={}",
            c.model,
            c.baseline,
            c.mce.map_or("none".into(), fmt_float),
            c.mean_rce.map_or("none".into(), fmt_float)
        ));
    }
    Ok(lines)
}

fn rank(a: RankArgs, exec: Execution) -> Result<Vec<String>> {
    let inp = metric_inputs(&a.metric)?;
    let scale = Scale::from_f64(a.scale)
        .ok_or_else(|| Error::InvalidArgument(format!("scale {} off grid", a.scale)))?;
    let table = accuracy_by_scale_with(&inp.preds, &inp.manifest, inp.verdicts.as_ref(), exec)?;
    let table = if a.shift == crate::metrics::ALL_SHIFTS {
        table.pooled_over_shifts()
    } else {
        table
    };
    let mut est = Vec::new();
    for model in table.models() {
        if let Some(c) = table.get(model, &a.shift, scale) {
            est.push((
                model.to_string(),
                proportion_ci_with(c.correct, c.total, a.metric.z, a.metric.interval.into())?,
            ));
        }
    }
    if est.is_empty() {
        return Err(Error::EmptySelection(format!(
            "shift {} at scale {scale}",
            a.shift
        )));
    }
    Ok(rank_models(&est)
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| format!("rank={} models={}", i + 1, g.join(",")))
        .collect())
}

fn fp(a: FpArgs, exec: Execution) -> Result<Vec<String>> {
    let inp = metric_inputs(&a.metric)?;
    let idx = trajectory_index(&inp.manifest);
    let fps = failure_points_with(
        &inp.preds,
        &idx,
        inp.verdicts.as_ref(),
        a.base_policy.into(),
        a.completeness.into(),
        exec,
    )?;
    let hist = failure_histogram(&fps, a.normalize);
    if let Some(out) = &a.out {
        write(out, &to_json(&hist))?;
    }
    Ok(hist
        .iter()
        .map(|r| {
            let counts: Vec<String> = r.counts.iter().map(|(s, c)| format!("{s}:{c}")).collect();
            format!(
                "model={} shift={} counts={} none={} base={} trajectories={}",
                r.model,
                r.shift,
                counts.join(","),
                r.no_failure,
                r.base_failures,
                r.trajectories
            )
        })
        .collect())
}

fn slider(a: SliderDemoArgs) -> Result<Vec<String>> {
    let cfg = SliderTrainConfig {
        eta: a.eta,
        train_scale: a.train_scale,
        rank: a.rank,
        learning_rate: a.learning_rate,
        iterations: a.iterations,
        tolerance: a.tolerance,
        seed: a.seed,
        ..SliderTrainConfig::default()
    };
    let data = SampleSpec {
        samples: a.samples,
        concept: 0,
        concept_plus: 1,
        std: 1.0,
        seed: a.seed.wrapping_add(1),
    };
    let trace = slider_demo(a.d_in, a.d_out, cfg, data)?;
    let active: Vec<usize> = (0..a.total_steps)
        .map(|i| timestep_gate(i, a.total_steps, a.active_fraction).map(|on| (i, on)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter_map(|(i, on)| on.then_some(i))
        .collect();
    let mut json = serde_json::to_value(&trace).expect("trace serializes");
    json["active_steps"] = serde_json::json!(active);
    json["total_steps"] = serde_json::json!(a.total_steps);
    if let Some(out) = &a.out {
        write(out, &to_json(&json))?;
    }
    Ok(vec![format!(
        "iterations={} final_loss={} closed_form_residual={} active_steps={}",
        trace.iterations,
        fmt_float(trace.final_loss),
        fmt_float(trace.closed_form_residual),
        active.len()
    )])
}

fn report(mut a: ReportArgs, exec: Execution) -> Result<Vec<String>> {
    if let Some(dir) = a.input_dir.clone() {
        let fill = |slot: &mut Option<PathBuf>, name: &str| {
            let p = dir.join(name);
            if slot.is_none() && p.exists() {
                *slot = Some(p);
            }
        };
        fill(&mut a.manifest, MANIFEST_FILE);
        fill(&mut a.predictions, PREDICTIONS_FILE);
        fill(&mut a.labels, LABELS_FILE);
        fill(&mut a.embeddings, EMBEDDINGS_DIR);
        fill(&mut a.calibration, "calibration.json");
        fill(&mut a.model_meta, "model_meta.jsonl");
    }
    let manifest_path = required(&a.manifest, "--manifest")?;
    let preds_path = required(&a.predictions, "--predictions")?;
    let out_dir = required(&a.out_dir, "--out-dir")?;
    check_exists([
        &a.manifest,
        &a.predictions,
        &a.embeddings,
        &a.scores,
        &a.labels,
        &a.calibration,
        &a.model_meta,
    ])?;
    let manifest = load_manifest(manifest_path)?;
    let preds = PredictionLog::load(preds_path, Some(&manifest))?;
    let scores = match (&a.scores, &a.embeddings) {
        (Some(s), _) => Some(load_scores(s)?),
        (None, Some(e)) => Some(score_table(&manifest, e, exec)?),
        (None, None) => None,
    };
    let labels = a.labels.as_ref().map(load_labels).transpose()?;
    let meta = a.model_meta.as_ref().map(load_model_meta).transpose()?;

    let mut lines = Vec::new();
    let calibration = match (&a.calibration, &scores, &labels) {
        (Some(c), _, _) => Some(FilterCalibration::load(c)?),
        (None, Some(s), Some(l)) => Some(calibrate_thresholds(s, l, a.target_tpr)?),
        _ => None,
    };
    let verdicts = match (&scores, calibration) {
        (Some(s), Some(cal)) if !a.no_filter => {
            let cal = adjust_calibration(cal, a.vote_k, false)?;
            write(&out_dir.join("calibration.json"), &to_json(&cal))?;
            let mut v = apply_filter_with(s, &cal, exec)?;
            if a.prefilter.prefilter {
                let n = prefiltered(&mut v, s, &manifest, &preds, &a.prefilter)?;
                lines.push(format!("prefiltered_trajectories={n}"));
            }
            v.write_jsonl(out_dir.join("verdicts.jsonl"))?;
            Some(v)
        }
        _ => None,
    };

    let opts = ReportOptions {
        baseline: a.baseline.clone(),
        averaging: a.averaging.into(),
        corruption: CorruptionOptions {
            include_base_scale: a.include_base_scale,
        },
        base_policy: a.base_policy.into(),
        completeness: a.completeness.into(),
        partial_policy: a.partial_policy.into(),
        interval: a.interval.into(),
        z: a.z,
        min_scale: Scale::from_f64(a.min_scale)
            .ok_or_else(|| Error::InvalidArgument(format!("min scale {} off grid", a.min_scale)))?,
        normalize_histogram: a.normalize,
    };
    let inputs = ReportInputs {
        manifest: &manifest,
        predictions: &preds,
        verdicts: verdicts.as_ref(),
        scores: scores.as_ref(),
        labels: labels.as_ref(),
        model_meta: meta.as_deref(),
    };
    let report = build_report(&inputs, &opts, exec)?;
    write(&out_dir.join("report.json"), &to_json(&report))?;
    write(&out_dir.join("accuracy.csv"), &accuracy_csv(&report))?;
    for (kind, stem) in [
        (PlotKind::AccDropCurve, "acc_drop_curve"),
        (PlotKind::FailureHist, "failure_hist"),
    ] {
        let plot = emit_plot_data(&report, kind)?;
        write(&out_dir.join(format!("{stem}.csv")), &plot.csv)?;
        write(&out_dir.join(format!("{stem}.svg")), &plot.svg)?;
    }
    lines.insert(
        0,
        format!(
            "images={} removed={} models={} cells={}",
            report.images,
            report.removed_images,
            report.models.len(),
            report.cells.len()
        ),
    );
    if let Some(q) = &report.filter_quality {
        lines.push(format!(
            "tpr={} fpr={} acc={}",
            fmt_float(q.tpr),
            fmt_float(q.fpr),
            fmt_float(q.acc)
        ));
    }
    if let Some(m) = report.monotonicity {
        lines.push(format!("monotonicity={}", fmt_float(m)));
    }
    Ok(lines)
}
