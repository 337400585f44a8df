use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pmmn::checkpoint::Checkpoint;
use pmmn::graph::{read_distances, write_distances, RoadGraph};
use pmmn::model::ForecastModel;
use pmmn::patterns::{extract_patterns, similarity_histogram, write_similarity_histogram, PatternSet};
use pmmn::synth::generate;
use pmmn::train::data::{format_timestamp, parse_timestamp, MINUTES_PER_STEP};
use pmmn::train::fit::{history_header, history_line, train_loop, TrainProgress};
use pmmn::train::metrics::{evaluate, historical_average, EvalOptions, MetricReport};
use pmmn::train::SeriesDataset;

use crate::config::{must_exist, require, RunConfig};

const HISTOGRAM_BINS: usize = 40;

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

/// Reads the dataset and fills missing entries.
fn load_dataset(cfg: &RunConfig) -> Result<SeriesDataset> {
    let path = require(&cfg.dataset, "dataset")?;
    let mut ds = SeriesDataset::from_csv(path)?;
    ds.fill_missing()?;
    Ok(ds)
}

fn load_patterns(cfg: &RunConfig) -> Result<PatternSet> {
    let path = cfg.patterns_path();
    must_exist(&path, "patterns")?;
    Ok(PatternSet::read(&path)?)
}

fn load_checkpoint(cfg: &RunConfig, patterns: &PatternSet) -> Result<Checkpoint> {
    let path = cfg.checkpoint_path();
    must_exist(&path, "checkpoint")?;
    let ck = Checkpoint::load(&path)?;
    ck.check_bank(patterns)?;
    if ck.model.num_nodes() != 0 && patterns.t_prime() != ck.model.config().t_in {
        bail!("pattern length {} does not match the checkpoint", patterns.t_prime());
    }
    Ok(ck)
}

pub fn synth(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let data = generate(&cfg.synth)?;
    let speed = dir.join("speed.csv");
    let dist = dir.join("distances.csv");
    data.dataset.write_csv(&speed)?;
    write_distances(&dist, &data.distances)?;
    println!("nodes: {}", data.dataset.num_nodes());
    println!("steps: {}", data.dataset.len());
    println!("events: {}", data.events.len());
    println!("dataset: {}", speed.display());
    println!("distances: {}", dist.display());
    Ok(())
}

pub fn extract_patterns_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let dir = out_dir(cfg)?;
    let ex = extract_patterns(
        &ds,
        cfg.model.t_in,
        cfg.model.num_patterns,
        cfg.kmeans_iters,
        cfg.seed(),
        cfg.allow_shrink,
    )?;
    if let Some(wanted) = ex.shrunk_from {
        eprintln!(
            "warning: only {} distinct raw windows; bank shrunk from {wanted} to {} keys",
            ex.raw.len(),
            ex.set.len()
        );
    }
    let bank = cfg.patterns_path();
    if let Some(parent) = bank.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    ex.set.write(&bank)?;
    ex.set.write_csv(&dir.join("patterns.csv"))?;
    let hist = similarity_histogram(ex.set.pattern(0), &ex.raw, &ex.set, HISTOGRAM_BINS);
    write_similarity_histogram(&dir.join("similarity_histogram.csv"), &hist)?;
    let inertia = ex.report.inertia_history.last().copied().unwrap_or(0.0);
    println!("raw patterns: {}", ex.raw.len());
    println!("keys: {}", ex.set.len());
    println!("inertia: {inertia}");
    println!("hash: {}", ex.set.hash_hex());
    println!("bank: {}", bank.display());
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let patterns = load_patterns(cfg)?;
    let dir = out_dir(cfg)?.to_path_buf();

    let (model, progress) = match &cfg.resume {
        Some(path) => {
            must_exist(path, "resume")?;
            let ck = Checkpoint::load(path)?;
            ck.check_bank(&patterns)?;
            if ck.model.num_nodes() != ds.num_nodes() {
                bail!("checkpoint has {} nodes, dataset {}", ck.model.num_nodes(), ds.num_nodes());
            }
            (ck.model, ck.progress)
        }
        None => {
            let dist_path = require(&cfg.distances, "distances")?;
            let graph = RoadGraph::build(ds.node_ids().to_vec(), &read_distances(dist_path)?, cfg.kappa, cfg.sigma)?;
            let mut mc = cfg.model.clone();
            if patterns.len() != mc.num_patterns {
                eprintln!("note: using the bank's {} keys instead of num_patterns = {}", patterns.len(), mc.num_patterns);
                mc.num_patterns = patterns.len();
            }
            if patterns.t_prime() != mc.t_in {
                bail!("pattern bank has length {} but t_in = {}", patterns.t_prime(), mc.t_in);
            }
            let model = ForecastModel::new(mc, graph.normalized_adjacency(), ds.zscore_stats()?)?;
            (model, TrainProgress::default())
        }
    };

    let history_path = dir.join("history.csv");
    let mut history = if cfg.resume.is_some() && history_path.exists() {
        fs::OpenOptions::new().append(true).open(&history_path)?
    } else {
        let mut f = fs::File::create(&history_path)?;
        writeln!(f, "{}", history_header())?;
        f
    };
    let best_path = dir.join("best.ckpt");
    let last_path = dir.join("last.ckpt");
    let outcome = train_loop(model, &ds, &patterns, &cfg.train, progress, |ev| {
        writeln!(history, "{}", history_line(ev.record)).map_err(|e| pmmn::Error::Io {
            path: history_path.clone(),
            source: e,
        })?;
        println!(
            "epoch {} train_mae {:.5} val_mae {:.5}{}",
            ev.record.epoch,
            ev.record.train_mae,
            ev.record.val_mae,
            if ev.improved { " *" } else { "" }
        );
        if ev.improved {
            Checkpoint::new(ev.model.clone(), &patterns, *ev.progress).save(&best_path)?;
        }
        Checkpoint::new(ev.model.clone(), &patterns, *ev.progress).save(&last_path)
    })?;
    if outcome.history.is_empty() && !best_path.exists() {
        Checkpoint::new(outcome.best.clone(), &patterns, outcome.progress).save(&best_path)?;
    }
    if outcome.stopped_early {
        println!("early stop after epoch {}", outcome.progress.epoch);
    }
    println!(
        "best epoch {} val_mae {:.5}",
        outcome.progress.best_epoch, outcome.progress.best_val
    );
    println!("checkpoint: {}", best_path.display());
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn evaluate_cmd(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let opts = EvalOptions {
        horizons_min: cfg.horizons.clone(),
        batch: cfg.eval_batch,
        max_windows: cfg.max_eval_windows,
    };
    let (report, t_in, t_out): (Option<MetricReport>, usize, usize) = if cfg.ha_only {
        (None, cfg.model.t_in, cfg.model.t_out)
    } else {
        let patterns = load_patterns(cfg)?;
        let ck = load_checkpoint(cfg, &patterns)?;
        let mc = ck.model.config();
        let r = evaluate(&ck.model, &ds, &patterns, cfg.split, &opts)?;
        (Some(r), mc.t_in, mc.t_out)
    };
    let ha = historical_average(&ds, cfg.split, t_in, t_out, &opts)?;
    let dir = out_dir(cfg)?;
    let path = dir.join("metrics.csv");
    let mut csv = String::from("horizon_min,mae,mape,rmse,ha_mae,ha_mape,ha_rmse\n");
    println!(
        "{:>8} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}",
        "horizon", "MAE", "MAPE%", "RMSE", "HA MAE", "HA MAPE%", "HA RMSE"
    );
    for (i, h) in ha.horizons.iter().enumerate() {
        let m = report.as_ref().map(|r| r.horizons[i]);
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            h.horizon_min,
            fmt(m.map(|m| m.mae)),
            fmt(m.map(|m| m.mape)),
            fmt(m.map(|m| m.rmse)),
            h.mae,
            h.mape,
            h.rmse
        ));
        let cell = |v: Option<f64>| v.map(|x| format!("{x:9.4}")).unwrap_or_else(|| format!("{:>9}", "-"));
        println!(
            "{:>5}min {} {} {} {:9.4} {:9.4} {:9.4}",
            h.horizon_min,
            cell(m.map(|m| m.mae)),
            cell(m.map(|m| m.mape)),
            cell(m.map(|m| m.rmse)),
            h.mae,
            h.mape,
            h.rmse
        );
    }
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("metrics: {}", path.display());
    Ok(())
}

pub fn forecast(cfg: &RunConfig) -> Result<()> {
    let ds = load_dataset(cfg)?;
    let patterns = load_patterns(cfg)?;
    let ck = load_checkpoint(cfg, &patterns)?;
    let model = &ck.model;
    let t_in = model.config().t_in;
    let horizon = cfg.horizon.unwrap_or(model.config().t_out);
    let origin = match &cfg.origin {
        Some(s) => {
            let ts = parse_timestamp(s)?;
            ds.timestamps()
                .iter()
                .position(|&t| t == ts)
                .ok_or_else(|| anyhow!("origin {s} is not a timestamp of the dataset"))?
        }
        None => ds.len() - 1,
    };
    if origin + 1 < t_in {
        bail!("origin leaves fewer than t_in = {t_in} input steps");
    }
    let start = origin + 1 - t_in;
    let pred = model.forecast(&ds, &patterns, start, horizon)?;
    let origin_ts = format_timestamp(&ds.timestamps()[origin]);
    let mut csv = String::from("node_id,origin_timestamp,horizon_min,y_pred,y_true\n");
    for (n, id) in ds.node_ids().iter().enumerate() {
        for h in 0..horizon {
            let t = origin + 1 + h;
            let truth = (t < ds.len() && ds.observed(n)[t]).then(|| ds.speed(n)[t]);
            csv.push_str(&format!(
                "{id},{origin_ts},{},{},{}\n",
                (h + 1) * MINUTES_PER_STEP,
                pred.get(n, h),
                fmt(truth)
            ));
        }
    }
    let path = out_dir(cfg)?.join("forecast.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("forecast: {}", path.display());
    Ok(())
}
