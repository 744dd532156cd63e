//! Training loop, evaluation, k-fold harness and checkpoints.

mod checkpoint;
mod config;
mod history;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{build, ArchError, NetworkSpec};
use crate::autodiff::Tape;
use crate::data::{
    batches, compute_class_weights, expand_with_augmentation, k_fold, stack_batch, DataError, PreprocessedSample,
};
use crate::loss::{total_loss, uniform_weights, FocalParams};
use crate::mask::{LabelMask, N_CLASSES};
use crate::metrics::{accuracy, dice_score, metrics_report_from_probs, MetricsReport};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamStore;
use crate::tensor::{Tensor, TensorError};

pub use checkpoint::{decode, encode, load_checkpoint, save_checkpoint, CheckpointError, MAGIC, VERSION};
pub use config::{default_batch_size, parse_pairs, TrainConfig};
pub use history::{HistoryRow, HistoryWriter, Split, TrainingHistory, HISTORY_HEADER};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid history: {0}")]
    History(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sample {id} has spatial shape {got:?}, expected {expected:?}")]
    SampleShape {
        id: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Everything a run owns: config, weights, optimizer state and the number
/// of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub epoch: usize,
}

/// Independent generator per purpose, derived from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_INIT: u64 = 0;
const STREAM_SPLIT: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
/// Dropout masks of epoch `e` use stream `STREAM_DROPOUT + e`.
const STREAM_DROPOUT: u64 = 1 << 32;

fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl TrainState {
    /// Fresh He-uniform weights from the config seed.
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let net = network(&config)?;
        let params = net.init_params(&mut stream(config.seed, STREAM_INIT))?;
        let adam = AdamState::new(&params);
        Ok(Self {
            config,
            params,
            adam,
            epoch: 0,
        })
    }

    pub fn network(&self) -> Result<NetworkSpec, TrainError> {
        network(&self.config)
    }
}

/// The architecture a config describes, with its dropout rate.
pub fn network(config: &TrainConfig) -> Result<NetworkSpec, TrainError> {
    Ok(build(config.model, config.rank, config.width_scale)?.with_dropout(config.dropout))
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: TrainingHistory,
    /// Total loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Where and how much to train.
#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    /// Rows are appended and flushed here after each epoch.
    pub history_path: Option<&'a Path>,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    /// Rewritten after every epoch.
    pub checkpoint_path: Option<&'a Path>,
}

fn check_samples(config: &TrainConfig, samples: &[PreprocessedSample]) -> Result<(), TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let expected = config.sample_shape();
    for s in samples {
        if s.spatial() != expected.as_slice() || s.x.channels() != crate::arch::IN_CHANNELS {
            return Err(TrainError::SampleShape {
                id: s.id.clone(),
                got: s.x.shape().to_vec(),
                expected,
            });
        }
    }
    Ok(())
}

/// Seeded train/validation split; the validation share is rounded down.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let n_val = ((n as f64) * fraction).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, STREAM_SPLIT));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

/// Per-item foreground mean Dice and accuracy of a batch of probabilities.
fn batch_scores(probs: &Tensor<f32>, targets: &[&LabelMask]) -> Result<Vec<(f64, f64)>, TensorError> {
    targets
        .iter()
        .enumerate()
        .map(|(b, gt)| {
            let mut shape = gt.shape().to_vec();
            shape.push(N_CLASSES);
            let p = probs.batch_item(b).reshape(&shape)?;
            let pred = LabelMask::argmax_decode(&p);
            let fg = (1..N_CLASSES)
                .map(|c| dice_score(&pred, gt, c as u8))
                .sum::<Result<f64, _>>()?
                / (N_CLASSES - 1) as f64;
            Ok((fg, accuracy(&pred, gt)?))
        })
        .collect()
}

#[derive(Default)]
struct EpochAccumulator {
    total: f64,
    dice: f64,
    focal: f64,
    mean_dice: f64,
    accuracy: f64,
    items: usize,
}

impl EpochAccumulator {
    fn add(&mut self, losses: [f64; 3], scores: &[(f64, f64)]) {
        let n = scores.len() as f64;
        self.total += losses[0] * n;
        self.dice += losses[1] * n;
        self.focal += losses[2] * n;
        for (d, a) in scores {
            self.mean_dice += d;
            self.accuracy += a;
        }
        self.items += scores.len();
    }

    fn row(&self, epoch: usize, split: Split, seconds: f64) -> HistoryRow {
        let n = self.items.max(1) as f64;
        HistoryRow {
            epoch,
            split,
            total_loss: self.total / n,
            dice_loss: self.dice / n,
            focal_loss: self.focal / n,
            mean_dice: self.mean_dice / n,
            accuracy: self.accuracy / n,
            seconds,
        }
    }
}

/// Loss weights for the Dice term.
pub fn class_weights(config: &TrainConfig, samples: &[PreprocessedSample]) -> Result<Vec<f64>, TrainError> {
    if config.class_weighting {
        let masks: Vec<&LabelMask> = samples.iter().map(|s| &s.y).collect();
        Ok(compute_class_weights(&masks)?.to_vec())
    } else {
        Ok(uniform_weights(N_CLASSES))
    }
}

/// Runs `epochs` more epochs starting at `state.epoch`. Each epoch visits
/// the training split in shuffled batches (forward, Dice + focal loss,
/// backward, Adam) and logs one training row, plus one validation row when
/// a validation split exists.
pub fn train(
    state: &mut TrainState,
    samples: &[PreprocessedSample],
    epochs: usize,
    options: &TrainOptions<'_>,
) -> Result<TrainReport, TrainError> {
    let config = state.config.clone();
    config.validate()?;
    check_samples(&config, samples)?;
    let net = network(&config)?;
    let focal = FocalParams::new(config.gamma)?;

    let (train_idx, val_idx) = split_validation(samples.len(), config.validation_fraction, config.seed);
    let base: Vec<PreprocessedSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let train_set = expand_with_augmentation(&base, config.augmentation_ratio, &mut stream(config.seed, STREAM_AUGMENT))?;
    let val_set: Vec<PreprocessedSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let weights = class_weights(&config, &train_set)?;

    let mut writer = match options.history_path {
        Some(p) => Some(HistoryWriter::open(p).map_err(|e| TrainError::io(p, e))?),
        None => None,
    };
    let mut history = TrainingHistory::default();
    let mut step_losses = Vec::new();

    'epochs: for _ in 0..epochs {
        if options.max_steps.is_some_and(|m| step_losses.len() >= m) {
            break;
        }
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let mut dropout_rng = stream(config.seed, STREAM_DROPOUT + epoch as u64);
        let mut acc = EpochAccumulator::default();
        for batch in batches(train_set.len(), config.batch_size, true, epoch_shuffle_seed(config.seed, epoch))? {
            if options.max_steps.is_some_and(|m| step_losses.len() >= m) {
                // partial epoch: record what ran, then stop
                let row = acc.row(epoch, Split::Train, started.elapsed().as_secs_f64());
                finish_epoch(state, &mut history, &mut writer, options, row, epoch)?;
                break 'epochs;
            }
            let (x, y) = stack_batch(&train_set, &batch)?;
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let probs = net.forward(&mut tape, &state.params, xv, true, &mut dropout_rng)?;
            let loss = total_loss(&mut tape, probs, &y, &weights, focal)?;
            let grads = tape.backward(loss.total)?;
            grads.write_params(&mut state.params);
            adam_step(&mut state.params, &mut state.adam, config.learning_rate)?;
            // gradients are transient; a state at rest holds none
            state.params.zero_grads();

            let values = [loss.total, loss.dice, loss.focal].map(|v| tape.value(v).item() as f64);
            let targets: Vec<&LabelMask> = batch.iter().map(|&i| &train_set[i].y).collect();
            acc.add(values, &batch_scores(tape.value(probs), &targets)?);
            step_losses.push(values[0]);
        }
        let row = acc.row(epoch, Split::Train, started.elapsed().as_secs_f64());
        if !val_set.is_empty() {
            let val_started = Instant::now();
            let mut vacc = EpochAccumulator::default();
            for batch in batches(val_set.len(), config.batch_size, false, 0)? {
                let (x, y) = stack_batch(&val_set, &batch)?;
                let mut tape = Tape::new();
                let xv = tape.leaf(x);
                let probs = net.forward(&mut tape, &state.params, xv, false, &mut dropout_rng)?;
                let loss = total_loss(&mut tape, probs, &y, &weights, focal)?;
                let values = [loss.total, loss.dice, loss.focal].map(|v| tape.value(v).item() as f64);
                let targets: Vec<&LabelMask> = batch.iter().map(|&i| &val_set[i].y).collect();
                vacc.add(values, &batch_scores(tape.value(probs), &targets)?);
            }
            let vrow = vacc.row(epoch, Split::Validation, val_started.elapsed().as_secs_f64());
            finish_epoch(state, &mut history, &mut writer, options, row, epoch)?;
            history.rows.push(vrow.clone());
            if let Some(w) = writer.as_mut() {
                w.append(&vrow).map_err(|e| TrainError::io(options.history_path.unwrap_or(Path::new("")), e))?;
            }
        } else {
            finish_epoch(state, &mut history, &mut writer, options, row, epoch)?;
        }
    }
    Ok(TrainReport { history, step_losses })
}

fn finish_epoch(
    state: &mut TrainState,
    history: &mut TrainingHistory,
    writer: &mut Option<HistoryWriter>,
    options: &TrainOptions<'_>,
    row: HistoryRow,
    epoch: usize,
) -> Result<(), TrainError> {
    if let Some(w) = writer.as_mut() {
        w.append(&row).map_err(|e| TrainError::io(options.history_path.unwrap_or(Path::new("")), e))?;
    }
    history.rows.push(row);
    state.epoch = epoch;
    if let Some(p) = options.checkpoint_path {
        save_checkpoint(state, p)?;
    }
    Ok(())
}

/// Evaluation-mode class probabilities for one sample, `[spatial.., 4]`.
pub fn predict_probs(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    sample: &PreprocessedSample,
) -> Result<Tensor<f32>, TrainError> {
    let mut shape = vec![1];
    shape.extend_from_slice(sample.x.shape());
    let x = sample.x.clone().reshape(&shape)?;
    let probs = net.predict(params, &x)?;
    let mut out = sample.spatial().to_vec();
    out.push(N_CLASSES);
    Ok(probs.reshape(&out)?)
}

/// Hard segmentation (class indices) of one sample.
pub fn predict_mask(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    sample: &PreprocessedSample,
) -> Result<LabelMask, TrainError> {
    Ok(LabelMask::argmax_decode(&predict_probs(net, params, sample)?))
}

/// Per-case reports and their arithmetic mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cases: Vec<(String, MetricsReport)>,
    pub mean: MetricsReport,
}

/// Evaluation-mode forward, argmax decode and metrics per case, averaged.
pub fn evaluate(
    net: &NetworkSpec,
    params: &ParamStore<f32>,
    samples: &[PreprocessedSample],
) -> Result<Evaluation, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cases = samples
        .iter()
        .map(|s| {
            let probs = predict_probs(net, params, s)?;
            Ok((s.id.clone(), metrics_report_from_probs(&probs, &s.y)?))
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let reports: Vec<MetricsReport> = cases.iter().map(|(_, r)| r.clone()).collect();
    let mean = MetricsReport::mean(&reports).ok_or(TrainError::EmptyDataset)?;
    Ok(Evaluation { cases, mean })
}

/// Per-fold results of [`run_kfold`] with their mean and spread.
#[derive(Debug, Clone, PartialEq)]
pub struct KFoldReport {
    pub folds: Vec<MetricsReport>,
    pub mean: MetricsReport,
    /// Population standard deviation across folds of the foreground mean
    /// Dice, overall accuracy and mean IoU.
    pub std_mean_dice_foreground: f64,
    pub std_accuracy: f64,
    pub std_mean_iou: f64,
}

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Trains a fresh model per fold (seed + fold index) for `config.epochs`
/// epochs and evaluates it on the fold's held-out cases.
pub fn run_kfold(config: &TrainConfig, samples: &[PreprocessedSample], k: usize) -> Result<KFoldReport, TrainError> {
    let plan = k_fold(samples.len(), k, config.seed)?;
    let mut folds = Vec::with_capacity(k);
    for (f, fold) in plan.folds.iter().enumerate() {
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(f as u64);
        let train_set: Vec<PreprocessedSample> = fold.train.iter().map(|&i| samples[i].clone()).collect();
        let test_set: Vec<PreprocessedSample> = fold.test.iter().map(|&i| samples[i].clone()).collect();
        let mut state = TrainState::new(cfg.clone())?;
        train(&mut state, &train_set, cfg.epochs, &TrainOptions::default())?;
        folds.push(evaluate(&state.network()?, &state.params, &test_set)?.mean);
    }
    let mean = MetricsReport::mean(&folds).ok_or(TrainError::EmptyDataset)?;
    Ok(KFoldReport {
        std_mean_dice_foreground: std_dev(folds.iter().map(|r| r.mean_dice_foreground)),
        std_accuracy: std_dev(folds.iter().map(|r| r.accuracy)),
        std_mean_iou: std_dev(folds.iter().map(|r| r.mean_iou)),
        folds,
        mean,
    })
}

#[cfg(test)]
mod tests;
