//! `ead`: preprocess EEG manifests, align montages, train, evaluate and run
//! zero-shot scoring from the command line.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ead_core::dsp::FilterSettings;
use ead_core::manifest::{load_manifest, write_recording_bin, write_recording_text, DatasetManifest, ManifestEntry, RecordingFormat, Split, SplitStrategy};
use ead_core::montage::{MontageMap, BUILTIN_TABLE1};
use ead_core::pipeline::{align_windows, embed_split, evaluate_split, fit, prepare, preprocess_manifest, AlignKind, Architecture, Mode, WindowSet};
use ead_core::store::{
    format_run_header, load_checkpoint, load_windows, read_embeddings, save_checkpoint, save_windows, write_embeddings,
    Checkpoint, RunHeader, FORMAT_VERSION,
};
use ead_core::synth::{generate, synth_montage, SynthConfig};
use ead_core::train::{format_epoch_log, LrSchedule, OptimizerKind, TrainConfig};
use ead_core::zeroshot::{run_zeroshot, subject_aggregate, votes_by_subject, ZeroShotProtocol};

#[derive(Parser)]
#[command(name = "ead", version, about = "EEG adapter pipeline")]
struct Cli {
    /// Repeat for more log output on standard error.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (recordings, manifest and montage map).
    Synth(SynthArgs),
    /// Filter and window every recording of a manifest.
    Preprocess(PreprocessArgs),
    /// Map windows onto the 23 encoder channels.
    Align(AlignArgs),
    /// Train a model and write checkpoint, metrics and epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Export pooled embeddings as delimited text.
    Extract(ExtractArgs),
    /// Classify embeddings of held-out classes with SVM, KNN and k-means.
    Zeroshot(ZeroshotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    F32Binary,
    DelimitedText,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 256)]
    timesteps: usize,
    #[arg(long, default_value_t = 256.0)]
    sample_rate: f64,
    /// Subjects in train, val and test.
    #[arg(long, value_delimiter = ',', default_values_t = [40, 10, 10])]
    subjects: Vec<usize>,
    /// Trials per subject and class.
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FormatArg::F32Binary)]
    format: FormatArg,
    /// Leave splits unassigned and configure a seeded subject-independent split instead.
    #[arg(long)]
    unassigned: bool,
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 50.0)]
    notch: f64,
    #[arg(long, default_value_t = 30.0)]
    notch_q: f64,
    #[arg(long, default_value_t = 0.1)]
    band_low: f64,
    #[arg(long, default_value_t = 75.0)]
    band_high: f64,
    #[arg(long, default_value_t = 4)]
    order: usize,
    #[arg(long, default_value_t = 128)]
    window: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AlignModeArg {
    Select,
    Mix,
    None,
}

#[derive(Args, Debug)]
struct AlignArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long, value_enum)]
    mode: AlignModeArg,
    /// `builtin-table1` or a montage map file.
    #[arg(long, default_value = BUILTIN_TABLE1)]
    montage: String,
    /// Samples per aligned channel; defaults to the window length.
    #[arg(long)]
    target_len: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Adapter,
    Select,
    Mix,
    Raw,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Adapter => Mode::Adapter,
            ModeArg::Select => Mode::Select,
            ModeArg::Mix => Mode::Mix,
            ModeArg::Raw => Mode::Raw,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum OptimizerArg {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ScheduleArg {
    Cosine,
    Constant,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    windows: PathBuf,
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Montage for select and mix modes.
    #[arg(long, default_value = BUILTIN_TABLE1)]
    montage: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.01)]
    weight_decay: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    optimizer: OptimizerArg,
    #[arg(long, value_enum, default_value_t = ScheduleArg::Cosine)]
    schedule: ScheduleArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Update only the adapter (adapter mode only).
    #[arg(long)]
    freeze_bfm: bool,
    /// Train on these class indices only; the rest stay unseen.
    #[arg(long, value_delimiter = ',')]
    classes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 32)]
    embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ff_dim: usize,
    #[arg(long, default_value_t = 16)]
    patch_len: usize,
    /// Encoder input length in adapter mode.
    #[arg(long, default_value_t = 64)]
    adapter_timesteps: usize,
    #[arg(long)]
    out_checkpoint: PathBuf,
    /// Test-split metrics; defaults to `<checkpoint>.metrics.json`.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Per-epoch CSV; defaults to `<checkpoint>.epochs.csv`.
    #[arg(long)]
    epoch_log: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Val => vec![Split::Val],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => Split::ASSIGNED.to_vec(),
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    windows: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Add majority-vote metrics per subject.
    #[arg(long)]
    subject_level: bool,
    /// Montage override for select and mix checkpoints.
    #[arg(long)]
    montage: Option<String>,
    /// Report path; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    windows: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::All)]
    split: SplitArg,
    #[arg(long)]
    montage: Option<String>,
    #[arg(long)]
    out_embeddings: PathBuf,
}

#[derive(Args, Debug)]
struct ZeroshotArgs {
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    held_out_classes: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    fit_fraction: f64,
    #[arg(long, default_value_t = 5)]
    knn_k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report path; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run_header(command: &str, args: &impl std::fmt::Debug) -> RunHeader {
    BTreeMap::from([
        ("command".to_string(), command.to_string()),
        ("flags".to_string(), format!("{args:?}")),
        ("ead_version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("format_version".to_string(), FORMAT_VERSION.to_string()),
    ])
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_montage(spec: &str) -> Result<MontageMap> {
    MontageMap::load(spec).with_context(|| format!("loading montage `{spec}`"))
}

fn synth(args: &SynthArgs) -> Result<()> {
    if args.subjects.len() != 3 {
        bail!("--subjects takes three counts: train,val,test");
    }
    let cfg = SynthConfig {
        num_classes: args.classes,
        num_channels: args.channels,
        num_timesteps: args.timesteps,
        sample_rate_hz: args.sample_rate,
        subjects: [args.subjects[0], args.subjects[1], args.subjects[2]],
        trials_per_subject_class: args.trials,
        noise_std: args.noise,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let ds = generate(&cfg)?;
    let rec_dir = args.out.join("rec");
    fs::create_dir_all(&rec_dir).with_context(|| format!("creating {}", rec_dir.display()))?;
    let (format, ext) = match args.format {
        FormatArg::F32Binary => (RecordingFormat::F32Binary, "bin"),
        FormatArg::DelimitedText => (RecordingFormat::DelimitedText, "csv"),
    };
    let mut entries = Vec::with_capacity(ds.recordings.len());
    for (i, (rec, split)) in ds.recordings.iter().zip(&ds.splits).enumerate() {
        let path = rec_dir.join(format!("r{i:05}.{ext}"));
        match format {
            RecordingFormat::F32Binary => write_recording_bin(&path, &rec.data)?,
            RecordingFormat::DelimitedText => write_recording_text(&path, &rec.data)?,
        }
        entries.push(ManifestEntry {
            path,
            format,
            channel_labels: rec.channel_labels.clone(),
            sample_rate_hz: rec.sample_rate_hz,
            resolution: None,
            label: ds.class_names[rec.label.expect("synthetic trials are labelled")].clone(),
            subject_id: rec.subject_id.clone(),
            split: if args.unassigned { Split::Unassigned } else { *split },
            line: 0,
        });
    }
    let montage_path = args.out.join("montage.txt");
    write_text(&montage_path, &synth_montage(args.channels)?.to_text())?;
    let manifest = DatasetManifest {
        entries,
        classes: ds.class_names.clone(),
        montage: "montage.txt".into(),
        splitting: args.unassigned.then(|| SplitStrategy {
            fractions: vec![0.6, 0.2, 0.2],
            seed: args.seed,
        }),
    };
    let header = format_run_header(&run_header("synth", args));
    write_text(&args.out.join("manifest.toml"), &format!("{header}{}", manifest.to_toml(&args.out)))?;
    log::info!("wrote {} recordings to {}", ds.recordings.len(), args.out.display());
    Ok(())
}

fn preprocess(args: &PreprocessArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let filters = FilterSettings {
        notch_hz: args.notch,
        notch_quality: args.notch_q,
        band_low_hz: args.band_low,
        band_high_hz: args.band_high,
        band_order: args.order,
    };
    let set = preprocess_manifest(manifest, &filters, args.window)?;
    if set.windows.is_empty() {
        bail!("no recording is long enough for a {}-sample window", args.window);
    }
    save_windows(&args.out, &set, &run_header("preprocess", args))?;
    log::info!("wrote {} windows to {}", set.windows.len(), args.out.display());
    Ok(())
}

fn align(args: &AlignArgs) -> Result<()> {
    let (set, _) = load_windows(&args.windows)?;
    let target_len = args.target_len.unwrap_or(set.window_len);
    let kind = match args.mode {
        AlignModeArg::Select => Some(AlignKind::Select),
        AlignModeArg::Mix => Some(AlignKind::Mix),
        AlignModeArg::None => None,
    };
    let out = match kind {
        Some(kind) => align_windows(&set, kind, &load_montage(&args.montage)?, &args.montage, target_len)?,
        None => set,
    };
    save_windows(&args.out, &out, &run_header("align", args))?;
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let mode = Mode::from(args.mode);
    let (set, _) = load_windows(&args.windows)?;
    let needs_map = matches!(mode, Mode::Select | Mode::Mix) && set.alignment.is_none();
    let map = needs_map.then(|| load_montage(&args.montage)).transpose()?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        weight_decay: args.weight_decay,
        optimizer: match args.optimizer {
            OptimizerArg::Adamw => OptimizerKind::AdamW,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        },
        schedule: match args.schedule {
            ScheduleArg::Cosine => LrSchedule::Cosine,
            ScheduleArg::Constant => LrSchedule::Constant,
        },
        seed: args.seed,
        freeze_bfm: args.freeze_bfm,
    };
    let arch = Architecture {
        embed_dim: args.embed_dim,
        num_layers: args.layers,
        num_heads: args.heads,
        ff_dim: args.ff_dim,
        patch_len: args.patch_len,
        adapter_timesteps: args.adapter_timesteps,
    };
    let run = run_header("train", args);
    let fitted = fit(&set, mode, map.as_ref().map(|m| (m, args.montage.as_str())), &arch, &cfg, args.classes.as_deref())?;
    let (_, metrics) = evaluate_split(&fitted.outcome.model, &fitted.prepared, Split::Test, &fitted.class_indices)?;
    let ckpt = Checkpoint {
        model: fitted.outcome.model,
        classes: fitted.class_indices.iter().map(|&c| set.classes[c].clone()).collect(),
        class_indices: fitted.class_indices,
        fingerprint: fitted.fingerprint,
        run: run.clone(),
    };
    save_checkpoint(&args.out_checkpoint, &ckpt)?;
    let report = json!({
        "run": run,
        "split": "test",
        "best_epoch": fitted.outcome.best_epoch,
        "metrics": metrics,
    });
    let metrics_path = args.metrics.clone().unwrap_or_else(|| with_suffix(&args.out_checkpoint, ".metrics.json"));
    write_text(&metrics_path, &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
    let log_path = args.epoch_log.clone().unwrap_or_else(|| with_suffix(&args.out_checkpoint, ".epochs.csv"));
    write_text(&log_path, &format!("{}{}", format_run_header(&run), format_epoch_log(&fitted.outcome.trace)))?;
    log::info!("test accuracy {:.4}", metrics.accuracy);
    Ok(())
}

/// Loads a checkpoint and brings the window set into its input shape, refusing
/// data preprocessed differently from the training data.
fn checkpoint_and_data(checkpoint: &Path, windows: &Path, montage: Option<&str>) -> Result<(Checkpoint, WindowSet)> {
    let ckpt = load_checkpoint(checkpoint)?;
    let (set, _) = load_windows(windows)?;
    let fp = &ckpt.fingerprint;
    let montage_name = montage
        .map(str::to_string)
        .or_else(|| fp.alignment.as_ref().map(|a| a.montage.clone()));
    let map = match (&montage_name, set.alignment.is_none() && fp.alignment.is_some()) {
        (Some(name), true) => Some(load_montage(name)?),
        _ => None,
    };
    let (prepared, found) = prepare(&set, fp.mode, map.as_ref().zip(montage_name.as_deref()))?;
    ckpt.check_fingerprint(&found)?;
    Ok((ckpt, prepared))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let (ckpt, prepared) = checkpoint_and_data(&args.checkpoint, &args.windows, args.montage.as_deref())?;
    let mut sample_preds = Vec::new();
    for split in args.split.splits() {
        let (preds, _) = evaluate_split(&ckpt.model, &prepared, split, &ckpt.class_indices)?;
        sample_preds.extend(preds);
    }
    let truth: Vec<usize> = sample_preds.iter().map(|p| p.label).collect();
    let guess: Vec<usize> = sample_preds.iter().map(|p| p.predicted).collect();
    let k = ckpt.classes.len();
    let metrics = ead_core::train::MetricsReport::from_predictions(&truth, &guess, k)?;
    let mut report = json!({
        "run": run_header("eval", args),
        "split": format!("{:?}", args.split).to_lowercase(),
        "classes": ckpt.classes,
        "metrics": metrics,
    });
    if args.subject_level {
        let (subjects, subject_metrics) = subject_aggregate(&votes_by_subject(&sample_preds), k)?;
        report["subject_metrics"] = serde_json::to_value(subject_metrics)?;
        report["subjects"] = serde_json::to_value(subjects)?;
    }
    emit(args.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&report)?))
}

fn extract(args: &ExtractArgs) -> Result<()> {
    let (ckpt, prepared) = checkpoint_and_data(&args.checkpoint, &args.windows, args.montage.as_deref())?;
    let mut batches = Vec::new();
    for split in args.split.splits() {
        batches.push(embed_split(&ckpt.model, &prepared, split)?);
    }
    let rows: Vec<Vec<f64>> = batches.iter().flat_map(|b| b.embeddings.iter_rows().map(<[f64]>::to_vec)).collect();
    if rows.is_empty() {
        bail!("no labelled windows in the requested split");
    }
    let batch = ead_core::bfm::EmbeddingBatch::new(
        ead_core::Matrix::from_rows(&rows)?,
        batches.iter().flat_map(|b| b.labels.iter().copied()).collect(),
        batches.iter().flat_map(|b| b.subject_ids.iter().cloned()).collect(),
    )?;
    write_embeddings(&args.out_embeddings, &batch, &run_header("extract", args))?;
    log::info!("wrote {} embeddings to {}", batch.len(), args.out_embeddings.display());
    Ok(())
}

fn zeroshot(args: &ZeroshotArgs) -> Result<()> {
    let batch = read_embeddings(&args.embeddings)?;
    let mut protocol = ZeroShotProtocol::new(args.held_out_classes.clone(), args.seed);
    protocol.fit_fraction = args.fit_fraction;
    protocol.knn_k = args.knn_k;
    let report = run_zeroshot(&batch, &protocol)?;
    let text = format!("{}{}", format_run_header(&run_header("zeroshot", args)), report.to_toml());
    emit(args.out.as_deref(), &text)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Train(t) = &cli.command {
        if t.freeze_bfm && !matches!(t.mode, ModeArg::Adapter) {
            Cli::command()
                .error(ErrorKind::ArgumentConflict, "--freeze-bfm requires --mode adapter")
                .exit();
        }
    }
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Preprocess(a) => preprocess(a),
        Command::Align(a) => align(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Extract(a) => extract(a),
        Command::Zeroshot(a) => zeroshot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
