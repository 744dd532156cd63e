//! The `gseg` command line.
//!
//! Exit codes:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 2 | usage error |
//! | 3 | file system error |
//! | 4 | invalid dataset layout or contents |
//! | 5 | invalid NIfTI file |
//! | 6 | invalid checkpoint |
//! | 7 | training, model or configuration error |
//! | 8 | gradient check above tolerance |
//! | 9 | output directory locked by another run |

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::arch::{ModelKind, Rank};
use crate::data::layout::{self, LayoutError};
use crate::data::{
    generate_phantom, inverse_remap_labels, preprocess, slices_2d, DataError, PhantomSpec, CROP_SHAPE,
};
use crate::gradcheck;
use crate::metrics::MetricsReport;
use crate::nifti::{write_nifti_file, NiftiError, NiftiVolume};
use crate::train::{
    self, load_checkpoint, parse_pairs, run_kfold, CheckpointError, HistoryRow, TrainConfig, TrainError,
    TrainOptions, TrainState, TrainingHistory, HISTORY_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_LAYOUT: i32 = 4;
pub const EXIT_NIFTI: i32 = 5;
pub const EXIT_CHECKPOINT: i32 = 6;
pub const EXIT_TRAIN: i32 = 7;
pub const EXIT_GRADCHECK: i32 = 8;
pub const EXIT_LOCKED: i32 = 9;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const LOCK_FILE: &str = ".lock";
pub const METRICS_HEADER: &str = "case_id,class,dice,iou,hausdorff,accuracy";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("gradient check failed: max relative error {0:e}")]
    GradCheck(f64),
    #[error("{0} is locked by another run (remove {1} if stale)")]
    Locked(PathBuf, PathBuf),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Layout(e) => match e {
                LayoutError::Io { .. } => EXIT_IO,
                LayoutError::Nifti(NiftiError::Io { .. }) => EXIT_IO,
                LayoutError::Nifti(_) => EXIT_NIFTI,
                _ => EXIT_LAYOUT,
            },
            CliError::Data(_) => EXIT_LAYOUT,
            CliError::Nifti(NiftiError::Io { .. }) => EXIT_IO,
            CliError::Nifti(_) => EXIT_NIFTI,
            CliError::Train(e) => match e {
                TrainError::Io { .. } => EXIT_IO,
                TrainError::Checkpoint(_) => EXIT_CHECKPOINT,
                TrainError::Data(_) | TrainError::EmptyDataset | TrainError::SampleShape { .. } => EXIT_LAYOUT,
                _ => EXIT_TRAIN,
            },
            CliError::GradCheck(_) => EXIT_GRADCHECK,
            CliError::Locked(..) => EXIT_LOCKED,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gseg", version, about = "Volumetric glioma segmentation on the CPU")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic tumour phantoms in the dataset layout.
    Phantom(PhantomArgs),
    /// Normalise, crop, remap and stack raw cases.
    Preprocess(PreprocessArgs),
    /// Cut preprocessed volumes into 2D samples along the third axis.
    Slices(SlicesArgs),
    /// Train a model; writes a checkpoint and a history CSV.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes per-case metrics as CSV or JSON.
    Eval(EvalArgs),
    /// Segment one preprocessed sample into a NIfTI label mask.
    Segment(SegmentArgs),
    /// Compare every gradient with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Merge history CSVs into one curve table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Gaussian noise standard deviation.
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Dataset root with one directory per case.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Crop extent per axis; defaults to 128 when every extent allows it,
    /// otherwise no crop.
    #[arg(long)]
    pub crop: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SlicesArgs {
    /// Directory of preprocessed 3D samples.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of preprocessed samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint, history and fold reports.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub rank: Option<Rank>,
    #[arg(long)]
    pub width_scale: Option<usize>,
    #[arg(long)]
    pub spatial: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub class_weighting: Option<bool>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub validation_fraction: Option<f64>,
    #[arg(long)]
    pub augmentation_ratio: Option<f64>,
    /// Continue from the checkpoint in the output directory up to `epochs`.
    #[arg(long)]
    pub resume: bool,
    /// Run a k-fold experiment instead of a single training run.
    #[arg(long)]
    pub kfold: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of preprocessed samples.
    #[arg(long)]
    pub data: PathBuf,
    /// Output file; `.json` selects JSON, anything else CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory holding the preprocessed sample.
    #[arg(long)]
    pub data: PathBuf,
    /// Sample id (file prefix before `_x.nii`).
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// History CSVs; the run name is the parent directory name.
    #[arg(required = true)]
    pub histories: Vec<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("gseg: {e}");
            e.exit_code()
        }
    }
}

pub fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::Phantom(a) => phantom(&a),
        Command::Preprocess(a) => preprocess_cmd(&a),
        Command::Slices(a) => slices(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval(&a),
        Command::Segment(a) => segment(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Report(a) => report(&a),
    }
}

fn phantom(a: &PhantomArgs) -> Result<(), CliError> {
    if a.count == 0 || a.size == 0 {
        return Err(CliError::Usage("--count and --size must be positive".into()));
    }
    let width = (a.count - 1).to_string().len().max(3);
    for i in 0..a.count {
        let mut spec = PhantomSpec::cube(format!("phantom{i:0width$}"), a.size, a.seed.wrapping_add(i as u64));
        if let Some(s) = a.noise {
            spec.noise_sigma = s;
        }
        layout::write_case(&a.out, &generate_phantom(&spec)?)?;
    }
    println!("wrote {} phantoms of {}^3 to {}", a.count, a.size, a.out.display());
    Ok(())
}

fn preprocess_cmd(a: &PreprocessArgs) -> Result<(), CliError> {
    let ids = layout::discover_cases(&a.data)?;
    for id in &ids {
        let case = layout::read_case(&a.data, id)?;
        let target: Option<Vec<usize>> = match a.crop {
            Some(c) => Some(vec![c; case.shape().len()]),
            None if case.shape().iter().zip(CROP_SHAPE).all(|(&s, t)| s >= t) => Some(CROP_SHAPE.to_vec()),
            None => None,
        };
        let sample = preprocess(&case, target.as_deref())?;
        layout::write_sample(&a.out, &sample)?;
    }
    println!("preprocessed {} cases into {}", ids.len(), a.out.display());
    Ok(())
}

fn slices(a: &SlicesArgs) -> Result<(), CliError> {
    let samples = layout::read_samples(&a.data)?;
    let mut n = 0;
    for s in &samples {
        for slice in slices_2d(s)? {
            layout::write_sample(&a.out, &slice)?;
            n += 1;
        }
    }
    println!("wrote {n} slices from {} volumes to {}", samples.len(), a.out.display());
    Ok(())
}

/// Resolves the training config: flag, then config file, then default.
/// Without any source for `spatial`, it is taken from the data.
pub fn resolve_config(a: &TrainArgs, data_spatial: Option<usize>) -> Result<TrainConfig, CliError> {
    let pairs = match &a.config {
        Some(p) => parse_pairs(&fs::read_to_string(p).map_err(io_err(p))?)?,
        None => Vec::new(),
    };
    let from_file = |k: &str| pairs.iter().find(|(key, _)| key == k).map(|(_, v)| v.clone());
    let model = match (a.model, from_file("model")) {
        (Some(m), _) => m,
        (None, Some(v)) => v.parse().map_err(CliError::Usage)?,
        (None, None) => ModelKind::UNet,
    };
    let rank = match (a.rank, from_file("rank")) {
        (Some(r), _) => r,
        (None, Some(v)) => v.parse().map_err(CliError::Usage)?,
        (None, None) => Rank::Three,
    };
    let mut cfg = TrainConfig::new(model, rank);
    for (k, v) in &pairs {
        cfg.set(k, v)?;
    }
    cfg.model = model;
    cfg.rank = rank;
    if a.spatial.is_none() && from_file("spatial").is_none() {
        if let Some(s) = data_spatial {
            cfg.spatial = s;
        }
    }
    macro_rules! flag {
        ($($field:ident),*) => {$(
            if let Some(v) = a.$field {
                cfg.$field = v;
            }
        )*};
    }
    flag!(
        width_scale,
        spatial,
        batch_size,
        learning_rate,
        epochs,
        dropout,
        gamma,
        class_weighting,
        seed,
        validation_fraction,
        augmentation_ratio
    );
    cfg.validate()?;
    Ok(cfg)
}

/// Exclusive claim on an output directory, released on drop.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked(dir.to_path_buf(), path)),
            Err(e) => Err(CliError::Io { path, source: e }),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn train_cmd(a: &TrainArgs) -> Result<(), CliError> {
    let samples = layout::read_samples(&a.data)?;
    let data_spatial = samples.first().map(|s| s.spatial()[0]);
    let cfg = resolve_config(a, data_spatial)?;
    let _lock = DirLock::acquire(&a.out)?;

    if let Some(k) = a.kfold {
        let rep = run_kfold(&cfg, &samples, k)?;
        let json = serde_json::json!({
            "folds": rep.folds,
            "mean": rep.mean,
            "std_mean_dice_foreground": rep.std_mean_dice_foreground,
            "std_accuracy": rep.std_accuracy,
            "std_mean_iou": rep.std_mean_iou,
        });
        let path = a.out.join("kfold.json");
        fs::write(&path, serde_json::to_string_pretty(&json).expect("report serializes")).map_err(io_err(&path))?;
        println!(
            "{k}-fold foreground Dice {:.4} +/- {:.4}",
            rep.mean.mean_dice_foreground, rep.std_mean_dice_foreground
        );
        return Ok(());
    }

    let ckpt = a.out.join(CHECKPOINT_FILE);
    let history = a.out.join(HISTORY_FILE);
    let mut state = if a.resume {
        let mut s = load_checkpoint(&ckpt)?;
        s.config.epochs = cfg.epochs;
        s
    } else {
        if history.exists() {
            fs::remove_file(&history).map_err(io_err(&history))?;
        }
        TrainState::new(cfg)?
    };
    let remaining = state.config.epochs.saturating_sub(state.epoch);
    let opts = TrainOptions {
        history_path: Some(&history),
        checkpoint_path: Some(&ckpt),
        max_steps: None,
    };
    let rep = train::train(&mut state, &samples, remaining, &opts)?;
    if remaining == 0 {
        train::save_checkpoint(&state, &ckpt)?;
    }
    if let Some(last) = rep.history.rows.last() {
        println!(
            "epoch {}: loss {:.4}, foreground Dice {:.4}",
            last.epoch, last.total_loss, last.mean_dice
        );
    }
    Ok(())
}

/// One CSV row per case and class, with `mean` rows at the end.
pub fn metrics_csv(cases: &[(String, MetricsReport)], mean: &MetricsReport) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    let rows = cases.iter().map(|(id, r)| (id.as_str(), r)).chain([("mean", mean)]);
    for (id, r) in rows {
        for c in 0..r.dice.len() {
            let hd = r.hausdorff[c].map(|h| h.to_string()).unwrap_or_default();
            s.push_str(&format!("{id},{c},{},{},{hd},{}\n", r.dice[c], r.iou[c], r.accuracy));
        }
    }
    s
}

fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    let samples = layout::read_samples(&a.data)?;
    let ev = train::evaluate(&state.network()?, &state.params, &samples)?;
    let text = if a.out.extension().is_some_and(|e| e == "json") {
        let cases: serde_json::Map<String, serde_json::Value> = ev
            .cases
            .iter()
            .map(|(id, r)| (id.clone(), serde_json::to_value(r).expect("report serializes")))
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "cases": cases, "mean": ev.mean })).expect("report serializes")
    } else {
        metrics_csv(&ev.cases, &ev.mean)
    };
    fs::write(&a.out, text).map_err(io_err(&a.out))?;
    println!(
        "{} cases: foreground Dice {:.4}, accuracy {:.4}",
        ev.cases.len(),
        ev.mean.mean_dice_foreground,
        ev.mean.accuracy
    );
    Ok(())
}

fn segment(a: &SegmentArgs) -> Result<(), CliError> {
    let state = load_checkpoint(&a.checkpoint)?;
    let sample = layout::read_sample(&a.data, &a.id)?;
    let mask = train::predict_mask(&state.network()?, &state.params, &sample)?;
    let raw = inverse_remap_labels(&mask)?;
    write_nifti_file(&a.out, &NiftiVolume::from_mask(&raw)?)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<(), CliError> {
    let cases = gradcheck::run_suite(a.seed).map_err(TrainError::from)?;
    let mut worst = 0f64;
    for c in &cases {
        println!("{:<28} {:.3e}", c.name, c.max_rel_error);
        worst = worst.max(c.max_rel_error);
    }
    println!("max relative error {worst:.3e} (tolerance {:.0e})", gradcheck::TOLERANCE);
    if worst < gradcheck::TOLERANCE {
        Ok(())
    } else {
        Err(CliError::GradCheck(worst))
    }
}

fn run_name(path: &Path) -> String {
    path.parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn report(a: &ReportArgs) -> Result<(), CliError> {
    let mut out = format!("run,{HISTORY_HEADER}\n");
    let mut n = 0;
    for p in &a.histories {
        let h = TrainingHistory::from_csv(&fs::read_to_string(p).map_err(io_err(p))?)?;
        let name = run_name(p);
        for r in &h.rows {
            out.push_str(&format!("{name},{}\n", HistoryRow::to_csv(r)));
            n += 1;
        }
    }
    fs::write(&a.out, out).map_err(io_err(&a.out))?;
    println!("merged {n} rows from {} histories into {}", a.histories.len(), a.out.display());
    Ok(())
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Train(e.into())
    }
}
