//! Per-horizon MAE / MAPE / RMSE, model evaluation, and the
//! historical-average baseline.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelInput};
use crate::numcore::Tape;
use crate::patterns::PatternSet;
use crate::train::data::{window_starts, SeriesDataset, Split, MINUTES_PER_STEP};

/// Horizons reported by default, in minutes.
pub const REPORT_HORIZONS: [usize; 6] = [15, 30, 45, 60, 75, 90];

/// Targets with `|y|` below this many speed units are left out of MAPE.
pub const MAPE_FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonMetrics {
    pub horizon_min: usize,
    pub mae: f64,
    /// Percent.
    pub mape: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub horizons: Vec<HorizonMetrics>,
}

impl MetricReport {
    pub fn at(&self, horizon_min: usize) -> Option<&HorizonMetrics> {
        self.horizons.iter().find(|h| h.horizon_min == horizon_min)
    }
}

/// Running sums per forecast step.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    abs: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
    ape: Vec<f64>,
    ape_count: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(steps: usize) -> Self {
        MetricAccumulator {
            abs: vec![0.0; steps],
            sq: vec![0.0; steps],
            count: vec![0; steps],
            ape: vec![0.0; steps],
            ape_count: vec![0; steps],
        }
    }

    pub fn steps(&self) -> usize {
        self.abs.len()
    }

    /// Records one prediction at 0-based step `step`, in speed units.
    pub fn add(&mut self, step: usize, pred: f64, truth: f64) {
        let e = pred - truth;
        self.abs[step] += e.abs();
        self.sq[step] += e * e;
        self.count[step] += 1;
        if truth.abs() >= MAPE_FLOOR {
            self.ape[step] += e.abs() / truth.abs();
            self.ape_count[step] += 1;
        }
    }

    /// Metrics at the given horizons (minutes). Steps without any valid
    /// target report NaN.
    pub fn report(&self, horizons_min: &[usize]) -> Result<MetricReport> {
        let horizons = horizons_min
            .iter()
            .map(|&h| {
                let step = horizon_step(h, self.steps())?;
                let n = self.count[step] as f64;
                let na = self.ape_count[step] as f64;
                let ratio = |s: f64, c: f64| if c > 0.0 { s / c } else { f64::NAN };
                Ok(HorizonMetrics {
                    horizon_min: h,
                    mae: ratio(self.abs[step], n),
                    mape: 100.0 * ratio(self.ape[step], na),
                    rmse: ratio(self.sq[step], n).sqrt(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(MetricReport { horizons })
    }
}

/// 0-based decoder step of a horizon in minutes.
pub fn horizon_step(horizon_min: usize, steps: usize) -> Result<usize> {
    if horizon_min == 0 || horizon_min % MINUTES_PER_STEP != 0 {
        return Err(Error::invalid(format!(
            "horizon {horizon_min} min is not a positive multiple of {MINUTES_PER_STEP}"
        )));
    }
    let step = horizon_min / MINUTES_PER_STEP - 1;
    if step >= steps {
        return Err(Error::invalid(format!(
            "horizon {horizon_min} min is beyond the {} min forecast",
            steps * MINUTES_PER_STEP
        )));
    }
    Ok(step)
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub horizons_min: Vec<usize>,
    /// Windows per forward pass.
    pub batch: usize,
    /// Evenly spaced subset of windows, all windows when `None`.
    pub max_windows: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            horizons_min: REPORT_HORIZONS.to_vec(),
            batch: 16,
            max_windows: None,
        }
    }
}

/// Up to `max` window starts spread evenly over `starts`.
pub fn spread(starts: Vec<usize>, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < starts.len() => {
            if m == 0 {
                return Vec::new();
            }
            (0..m).map(|i| starts[i * starts.len() / m]).collect()
        }
        _ => starts,
    }
}

/// Window starts of a split, respecting `max_windows`.
pub fn split_windows(
    dataset: &SeriesDataset,
    split: Split,
    t_in: usize,
    t_out: usize,
    max_windows: Option<usize>,
) -> Vec<usize> {
    let range: Range<usize> = dataset.splits().range(split);
    spread(window_starts(range, t_in, t_out), max_windows)
}

/// Scores per-window `N x T` speed forecasts against every observed target.
fn score(
    dataset: &SeriesDataset,
    starts: &[usize],
    t_in: usize,
    t_out: usize,
    acc: &mut MetricAccumulator,
    predictions: &[Vec<Vec<f64>>],
) {
    for (&s, pred) in starts.iter().zip(predictions) {
        for (node, row) in pred.iter().enumerate() {
            let speed = dataset.speed(node);
            let obs = dataset.observed(node);
            for (h, &p) in row.iter().enumerate().take(t_out) {
                let t = s + t_in + h;
                if obs[t] {
                    acc.add(h, p, speed[t]);
                }
            }
        }
    }
}

/// Model metrics in speed units on `split`.
pub fn evaluate(
    model: &ForecastModel,
    dataset: &SeriesDataset,
    patterns: &PatternSet,
    split: Split,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    model.check_patterns(patterns)?;
    let cfg = model.config();
    let (t_in, t_out) = (cfg.t_in, cfg.t_out);
    for &h in &opts.horizons_min {
        horizon_step(h, t_out)?;
    }
    let starts = split_windows(dataset, split, t_in, t_out, opts.max_windows);
    let mut acc = MetricAccumulator::new(t_out);
    let n = dataset.num_nodes();
    for chunk in starts.chunks(opts.batch.max(1)) {
        let input = ModelInput::from_dataset(dataset, model.zscore(), patterns, cfg.k, t_in, chunk)?;
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &input, t_out)?;
        let pred = tape.value(out.pred);
        let preds: Vec<Vec<Vec<f64>>> = (0..chunk.len())
            .map(|b| {
                (0..n)
                    .map(|node| pred.row(b * n + node).iter().map(|&z| model.zscore().invert(z)).collect())
                    .collect()
            })
            .collect();
        score(dataset, chunk, t_in, t_out, &mut acc, &preds);
    }
    acc.report(&opts.horizons_min)
}

/// Training-split time-of-day mean per node and slot; slots never observed
/// in training fall back to the node's overall training mean.
pub fn historical_profile(dataset: &SeriesDataset) -> Result<Vec<Vec<f64>>> {
    let train = dataset.splits().train.clone();
    dataset
        .training_slot_means()
        .into_iter()
        .enumerate()
        .map(|(node, slots)| {
            let obs: Vec<f64> = train
                .clone()
                .filter(|&t| dataset.observed(node)[t])
                .map(|t| dataset.speed(node)[t])
                .collect();
            if obs.is_empty() {
                return Err(Error::invalid(format!(
                    "node {} has no training observations",
                    dataset.node_ids()[node]
                )));
            }
            let mean = obs.iter().sum::<f64>() / obs.len() as f64;
            Ok(slots.into_iter().map(|s| s.unwrap_or(mean)).collect())
        })
        .collect()
}

/// Historical-average baseline scored on the same windows and targets as
/// [`evaluate`].
pub fn historical_average(
    dataset: &SeriesDataset,
    split: Split,
    t_in: usize,
    t_out: usize,
    opts: &EvalOptions,
) -> Result<MetricReport> {
    for &h in &opts.horizons_min {
        horizon_step(h, t_out)?;
    }
    let profile = historical_profile(dataset)?;
    let starts = split_windows(dataset, split, t_in, t_out, opts.max_windows);
    let slots = dataset.slots();
    let preds: Vec<Vec<Vec<f64>>> = starts
        .iter()
        .map(|&s| {
            profile
                .iter()
                .map(|p| (0..t_out).map(|h| p[slots[s + t_in + h]]).collect())
                .collect()
        })
        .collect();
    let mut acc = MetricAccumulator::new(t_out);
    score(dataset, &starts, t_in, t_out, &mut acc, &preds);
    acc.report(&opts.horizons_min)
}
