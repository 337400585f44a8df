//! Mini-batch training with Adam, validation tracking and early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelInput, Targets};
use crate::numcore::{AdamConfig, Tape};
use crate::patterns::PatternSet;
use crate::train::data::{window_starts, SeriesDataset};
use crate::train::metrics::split_windows;
use crate::train::Split;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Window origins per mini-batch.
    pub batch: usize,
    pub lr: f64,
    pub patience: usize,
    pub seed: u64,
    /// Random subset of the shuffled batches per epoch.
    pub max_batches_per_epoch: Option<usize>,
    /// Evenly spaced subset of validation windows.
    pub max_val_windows: Option<usize>,
    /// Record wall-clock seconds per epoch; when off the column is 0 so
    /// history files are reproducible.
    pub history_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch: 16,
            lr: 1e-3,
            patience: 15,
            seed: 0,
            max_batches_per_epoch: None,
            max_val_windows: None,
            history_timing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean batch MAE, normalized units.
    pub train_mae: f64,
    /// Normalized units.
    pub val_mae: f64,
    pub seconds: f64,
}

/// Progress carried across resumed runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainProgress {
    /// Last completed epoch, 0 before training.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub stale_epochs: usize,
}

impl Default for TrainProgress {
    fn default() -> Self {
        TrainProgress {
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            stale_epochs: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the initial model if no
    /// epoch ran).
    pub best: ForecastModel,
    /// State after the last epoch.
    pub last: ForecastModel,
    pub history: Vec<EpochRecord>,
    pub progress: TrainProgress,
    pub stopped_early: bool,
}

/// What the per-epoch callback sees.
pub struct EpochEvent<'a> {
    pub record: &'a EpochRecord,
    pub model: &'a ForecastModel,
    pub progress: &'a TrainProgress,
    pub improved: bool,
}

pub fn history_header() -> &'static str {
    "epoch,train_mae,val_mae,seconds"
}

pub fn history_line(r: &EpochRecord) -> String {
    format!("{},{},{},{}", r.epoch, r.train_mae, r.val_mae, r.seconds)
}

/// Masked MAE of the model on `starts`, normalized units, frozen batchnorm.
pub fn normalized_mae(
    model: &ForecastModel,
    dataset: &SeriesDataset,
    patterns: &PatternSet,
    starts: &[usize],
    batch: usize,
) -> Result<f64> {
    let cfg = model.config();
    let (mut sum, mut count) = (0.0, 0usize);
    for chunk in starts.chunks(batch.max(1)) {
        let input = ModelInput::from_dataset(dataset, model.zscore(), patterns, cfg.k, cfg.t_in, chunk)?;
        let targets = Targets::from_dataset(dataset, model.zscore(), cfg.t_in, cfg.t_out, chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input, cfg.t_out)?;
        let pred = tape.value(out.pred);
        for ((p, t), &m) in pred.data().iter().zip(targets.values.data()).zip(&targets.mask) {
            if m {
                sum += (p - t).abs();
                count += 1;
            }
        }
    }
    Ok(if count == 0 { f64::NAN } else { sum / count as f64 })
}

/// Trains on the training split starting after `progress.epoch`, runs until
/// `cfg.epochs` total epochs or early stopping.
pub fn train_loop(
    model: ForecastModel,
    dataset: &SeriesDataset,
    patterns: &PatternSet,
    cfg: &TrainConfig,
    progress: TrainProgress,
    mut on_epoch: impl FnMut(&EpochEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    model.check_patterns(patterns)?;
    if cfg.batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    if dataset.has_missing() {
        return Err(Error::invalid("dataset has missing values; fill them first"));
    }
    let (t_in, t_out, k) = (model.config().t_in, model.config().t_out, model.config().k);
    let train_starts = window_starts(dataset.splits().train.clone(), t_in, t_out);
    let val_starts = split_windows(dataset, Split::Val, t_in, t_out, cfg.max_val_windows);
    if cfg.epochs > progress.epoch && train_starts.is_empty() {
        return Err(Error::invalid(format!(
            "training split of {} steps is shorter than one window of {}",
            dataset.splits().train.len(),
            t_in + t_out
        )));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };

    let mut model = model;
    let mut best = model.clone();
    let mut progress = progress;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let diverged = |epoch, batch| move |e: Error| match e {
        Error::NonFinite(_) => Error::Diverged { epoch, batch },
        other => other,
    };

    while progress.epoch < cfg.epochs {
        if progress.stale_epochs >= cfg.patience && progress.epoch > 0 {
            stopped_early = true;
            break;
        }
        let epoch = progress.epoch + 1;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order = train_starts.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch).collect();
        if let Some(cap) = cfg.max_batches_per_epoch {
            batches.truncate(cap.max(1));
        }

        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for (b, starts) in batches.iter().enumerate() {
            let batch_no = b + 1;
            let input = ModelInput::from_dataset(dataset, model.zscore(), patterns, k, t_in, starts)?;
            let targets = Targets::from_dataset(dataset, model.zscore(), t_in, t_out, starts)?;
            if !targets.mask.iter().any(|&m| m) {
                continue;
            }
            let mut tape = Tape::new();
            let out = model.forward_train(&mut tape, &input, t_out).map_err(diverged(epoch, batch_no))?;
            let loss = tape.mae(out.pred, targets.values, targets.mask).map_err(diverged(epoch, batch_no))?;
            let l = tape.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, batch: batch_no });
            }
            tape.backward(loss, &mut model.store).map_err(diverged(epoch, batch_no))?;
            model.store.adam_step(&adam)?;
            loss_sum += l;
            counted += 1;
        }
        let train_mae = if counted == 0 { f64::NAN } else { loss_sum / counted as f64 };
        let val_mae = if val_starts.is_empty() {
            train_mae
        } else {
            normalized_mae(&model, dataset, patterns, &val_starts, cfg.batch)?
        };
        let seconds = if cfg.history_timing { started.elapsed().as_secs_f64() } else { 0.0 };
        let record = EpochRecord {
            epoch,
            train_mae,
            val_mae,
            seconds,
        };
        let improved = val_mae < progress.best_val;
        progress.epoch = epoch;
        if improved {
            progress.best_val = val_mae;
            progress.best_epoch = epoch;
            progress.stale_epochs = 0;
            best = model.clone();
        } else {
            progress.stale_epochs += 1;
        }
        on_epoch(&EpochEvent {
            record: &record,
            model: &model,
            progress: &progress,
            improved,
        })?;
        history.push(record);
    }
    Ok(TrainOutcome {
        best,
        last: model,
        history,
        progress,
        stopped_early,
    })
}
