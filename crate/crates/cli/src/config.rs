//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use pmmn::graph::DEFAULT_KAPPA;
use pmmn::model::ModelConfig;
use pmmn::patterns::DEFAULT_MAX_ITER;
use pmmn::synth::SynthConfig;
use pmmn::train::metrics::REPORT_HORIZONS;
use pmmn::train::{Split, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub distances: Option<PathBuf>,
    /// Pattern bank file. Defaults to `<out_dir>/patterns.bin`.
    pub patterns: Option<PathBuf>,
    /// Checkpoint read by evaluate/forecast.
    pub checkpoint: Option<PathBuf>,
    /// Checkpoint to continue training from.
    pub resume: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub model: ModelConfig,
    pub train: TrainConfig,

    pub kappa: f64,
    pub sigma: Option<f64>,
    pub kmeans_iters: usize,
    pub allow_shrink: bool,

    pub split: Split,
    pub horizons: Vec<usize>,
    pub eval_batch: usize,
    pub max_eval_windows: Option<usize>,
    pub ha_only: bool,

    /// Forecast origin: timestamp of the last input step. Defaults to the
    /// end of the series.
    pub origin: Option<String>,
    /// Forecast steps, defaults to `t_out`.
    pub horizon: Option<usize>,

    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            distances: None,
            patterns: None,
            checkpoint: None,
            resume: None,
            out_dir: PathBuf::from("out"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            kappa: DEFAULT_KAPPA,
            sigma: None,
            kmeans_iters: DEFAULT_MAX_ITER,
            allow_shrink: true,
            split: Split::Test,
            horizons: REPORT_HORIZONS.to_vec(),
            eval_batch: 16,
            max_eval_windows: None,
            ha_only: false,
            origin: None,
            horizon: None,
            synth: SynthConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| anyhow!("config key {key}: cannot parse {value:?}"))
}

fn optional<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    /// The one seed feeds model init, shuffling, clustering and synthesis.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset" => self.dataset = path(value),
            "distances" => self.distances = path(value),
            "patterns" => self.patterns = path(value),
            "checkpoint" => self.checkpoint = path(value),
            "resume" => self.resume = path(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.set_seed(parse(key, value)?),
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch" => self.train.batch = parse(key, value)?,
            "lr" => self.train.lr = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "max_batches_per_epoch" => self.train.max_batches_per_epoch = optional(key, value)?,
            "max_val_windows" => self.train.max_val_windows = optional(key, value)?,
            "history_timing" => self.train.history_timing = parse(key, value)?,
            "kappa" => self.kappa = parse(key, value)?,
            "sigma" => self.sigma = optional(key, value)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "allow_shrink" => self.allow_shrink = parse(key, value)?,
            "split" => self.split = value.parse()?,
            "horizons" => {
                self.horizons = value
                    .split(',')
                    .map(|h| parse(key, h.trim()))
                    .collect::<Result<_>>()?
            }
            "eval_batch" => self.eval_batch = parse(key, value)?,
            "max_eval_windows" => self.max_eval_windows = optional(key, value)?,
            "ha_only" => self.ha_only = parse(key, value)?,
            "origin" => self.origin = (!value.is_empty()).then(|| value.to_string()),
            "horizon" => self.horizon = optional(key, value)?,
            "topology" => self.synth.topology = value.parse()?,
            "nodes" => self.synth.nodes = parse(key, value)?,
            "days" => self.synth.days = parse(key, value)?,
            "regimes" => self.synth.regimes = parse(key, value)?,
            "noise" => self.synth.noise = parse(key, value)?,
            "event_rate" => self.synth.event_rate = parse(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    bail!("unknown config key {key}");
                }
            }
        }
        Ok(())
    }

    /// Applies a `KEY=VALUE` pair.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| anyhow!("expected KEY=VALUE, got {pair:?}"))?;
        self.set(k.trim(), v)
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.set_pair(line).with_context(|| format!("config line {}", no + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))
    }

    pub fn patterns_path(&self) -> PathBuf {
        self.patterns.clone().unwrap_or_else(|| self.out_dir.join("patterns.bin"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("best.ckpt"))
    }
}

/// Errors unless the optional path is set and exists.
pub fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    let p = p.as_deref().ok_or_else(|| anyhow!("config key {key} is required"))?;
    must_exist(p, key)?;
    Ok(p)
}

pub fn must_exist(p: &Path, key: &str) -> Result<()> {
    if !p.exists() {
        bail!("{key} {} does not exist", p.display());
    }
    Ok(())
}
