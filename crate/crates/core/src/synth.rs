//! Synthetic road networks with daily regimes and congestion events.
//!
//! Every day draws one regime at random. A regime fixes the depth and timing
//! of the morning and evening slowdowns and a level offset for the whole
//! day, so the time-of-day average cannot know it but the morning's data
//! reveals it. Congestion events are abrupt drops that spread to the
//! upstream neighbour after a short lag.

use std::str::FromStr;

use chrono::{Duration, NaiveDate};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Distance;
use crate::train::data::{SeriesDataset, SLOTS_PER_DAY};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    Ring,
    /// Row-major grid with `ceil(sqrt(N))` columns.
    Grid,
}

impl FromStr for Topology {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Topology::Ring),
            "grid" => Ok(Topology::Grid),
            other => Err(Error::invalid(format!("unknown topology {other}; expected ring or grid"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub topology: Topology,
    pub nodes: usize,
    pub days: usize,
    pub regimes: usize,
    /// Standard deviation of the AR(1) measurement noise, speed units.
    pub noise: f64,
    /// Expected congestion events per node per hour.
    pub event_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topology: Topology::Ring,
            nodes: 10,
            days: 60,
            regimes: 3,
            noise: 1.0,
            event_rate: 0.02,
            seed: 0,
        }
    }
}

/// Smallest drop an event produces at its origin node.
pub const MIN_EVENT_DROP: f64 = 20.0;
const MAX_EVENT_DROP: f64 = 35.0;
/// Event duration range in 5-minute steps (30 to 90 minutes).
const EVENT_STEPS: (usize, usize) = (6, 18);
/// Upstream spill: lag in steps and fraction of the drop.
const SPILL_LAG: usize = 3;
const SPILL_FRACTION: f64 = 0.6;
const MIN_SPEED: f64 = 3.0;

#[derive(Debug, Clone, Copy)]
struct Regime {
    offset: f64,
    morning_depth: f64,
    morning_center: f64,
    morning_width: f64,
    evening_depth: f64,
    evening_center: f64,
    evening_width: f64,
}

/// Regime 0 is an ordinary weekday, 1 a light day, 2 a heavy evening; any
/// further regimes interpolate randomly between those extremes.
fn regimes(count: usize, rng: &mut ChaCha8Rng) -> Vec<Regime> {
    let fixed = [
        Regime {
            offset: 0.0,
            morning_depth: 22.0,
            morning_center: 8.0,
            morning_width: 1.2,
            evening_depth: 18.0,
            evening_center: 17.5,
            evening_width: 1.4,
        },
        Regime {
            offset: 4.0,
            morning_depth: 5.0,
            morning_center: 9.5,
            morning_width: 1.5,
            evening_depth: 6.0,
            evening_center: 15.0,
            evening_width: 2.0,
        },
        Regime {
            offset: -6.0,
            morning_depth: 14.0,
            morning_center: 7.5,
            morning_width: 1.0,
            evening_depth: 32.0,
            evening_center: 18.5,
            evening_width: 2.2,
        },
    ];
    (0..count)
        .map(|r| {
            fixed.get(r).copied().unwrap_or_else(|| Regime {
                offset: rng.gen_range(-6.0..4.0),
                morning_depth: rng.gen_range(5.0..25.0),
                morning_center: rng.gen_range(7.0..10.0),
                morning_width: rng.gen_range(0.8..2.0),
                evening_depth: rng.gen_range(5.0..32.0),
                evening_center: rng.gen_range(15.0..19.0),
                evening_width: rng.gen_range(1.0..2.5),
            })
        })
        .collect()
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let z = (hour - center) / width;
    (-0.5 * z * z).exp()
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub dataset: SeriesDataset,
    pub distances: Vec<Distance>,
    /// Regime index of every day.
    pub day_regimes: Vec<usize>,
    /// `(node, start step, drop)` of every event origin.
    pub events: Vec<(usize, usize, f64)>,
}

/// Directed road segments `(from, to)` and the upstream node of each node.
fn layout(topology: Topology, n: usize) -> (Vec<(usize, usize)>, Vec<Option<usize>>) {
    let mut edges = Vec::new();
    let mut upstream = vec![None; n];
    match topology {
        Topology::Ring => {
            for i in 0..n {
                let j = (i + 1) % n;
                if i != j {
                    edges.push((i, j));
                    edges.push((j, i));
                    upstream[j] = Some(i);
                }
            }
        }
        Topology::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            for i in 0..n {
                let c = i % cols;
                if c + 1 < cols && i + 1 < n {
                    edges.push((i, i + 1));
                    edges.push((i + 1, i));
                    upstream[i + 1] = Some(i);
                }
                if i + cols < n {
                    edges.push((i, i + cols));
                    edges.push((i + cols, i));
                    if c == 0 {
                        upstream[i + cols] = Some(i);
                    }
                }
            }
        }
    }
    edges.sort_unstable();
    edges.dedup();
    (edges, upstream)
}

fn segment_length(a: usize, b: usize) -> f64 {
    400.0 + 50.0 * ((a * 7 + b * 3) % 5) as f64
}

/// Shortest road distance for every ordered pair within `MAX_HOPS`
/// segments, the way sensor-distance tables list nearby pairs.
fn path_distances(n: usize, edges: &[(usize, usize)]) -> Vec<(usize, usize, f64)> {
    const MAX_HOPS: usize = 3;
    let mut out = Vec::new();
    for src in 0..n {
        let mut best = vec![f64::INFINITY; n];
        best[src] = 0.0;
        let mut frontier = vec![src];
        for _ in 0..MAX_HOPS {
            let mut next = Vec::new();
            for &u in &frontier {
                for &(a, b) in edges.iter().filter(|e| e.0 == u) {
                    let d = best[a] + segment_length(a, b);
                    if d < best[b] {
                        best[b] = d;
                        next.push(b);
                    }
                }
            }
            frontier = next;
        }
        out.extend((0..n).filter(|&j| j != src && best[j].is_finite()).map(|j| (src, j, best[j])));
    }
    out
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    if cfg.nodes == 0 || cfg.days == 0 || cfg.regimes == 0 {
        return Err(Error::invalid("nodes, days and regimes must be at least 1"));
    }
    if cfg.noise < 0.0 || !cfg.noise.is_finite() || cfg.event_rate < 0.0 || !cfg.event_rate.is_finite() {
        return Err(Error::invalid("noise and event_rate must be finite and non-negative"));
    }
    let (n, len) = (cfg.nodes, cfg.days * SLOTS_PER_DAY);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let regime_table = regimes(cfg.regimes, &mut rng);
    let (edges, upstream) = layout(cfg.topology, n);

    let free: Vec<f64> = (0..n).map(|_| rng.gen_range(60.0..70.0)).collect();
    let sensitivity: Vec<f64> = (0..n).map(|_| rng.gen_range(0.8..1.2)).collect();
    // slowdowns reach downstream nodes a little later
    let lag_hours: Vec<f64> = (0..n).map(|i| (i % 6) as f64 * 5.0 / 60.0).collect();
    let day_regimes: Vec<usize> = (0..cfg.days).map(|_| rng.gen_range(0..cfg.regimes)).collect();

    let mut speed = vec![vec![0.0; len]; n];
    for (node, series) in speed.iter_mut().enumerate() {
        for (t, v) in series.iter_mut().enumerate() {
            let reg = &regime_table[day_regimes[t / SLOTS_PER_DAY]];
            let hour = (t % SLOTS_PER_DAY) as f64 / 12.0 - lag_hours[node];
            let dip = reg.morning_depth * bump(hour, reg.morning_center, reg.morning_width)
                + reg.evening_depth * bump(hour, reg.evening_center, reg.evening_width);
            *v = free[node] + reg.offset - sensitivity[node] * dip;
        }
    }

    let p_event = cfg.event_rate / 12.0;
    let mut drops = vec![vec![0.0f64; len]; n];
    let mut events = Vec::new();
    for node in 0..n {
        let mut t = 0;
        while t < len {
            if p_event > 0.0 && rng.gen::<f64>() < p_event {
                let depth = rng.gen_range(MIN_EVENT_DROP..MAX_EVENT_DROP);
                let steps = rng.gen_range(EVENT_STEPS.0..=EVENT_STEPS.1);
                events.push((node, t, depth));
                for s in t..(t + steps).min(len) {
                    drops[node][s] = drops[node][s].max(depth);
                }
                // linear recovery over three steps
                for (i, s) in (t + steps..(t + steps + 3).min(len)).enumerate() {
                    drops[node][s] = drops[node][s].max(depth * (3 - i) as f64 / 4.0);
                }
                if let Some(up) = upstream[node] {
                    let spill = depth * SPILL_FRACTION;
                    for s in t + SPILL_LAG..(t + SPILL_LAG + steps).min(len) {
                        drops[up][s] = drops[up][s].max(spill);
                    }
                }
                t += steps;
            } else {
                t += 1;
            }
        }
    }

    for node in 0..n {
        let mut ar = 0.0;
        for t in 0..len {
            if cfg.noise > 0.0 {
                let e: f64 = rng.gen_range(-1.0..1.0) * 3f64.sqrt() * cfg.noise;
                ar = 0.7 * ar + (1.0 - 0.49f64).sqrt() * e;
            }
            let v = speed[node][t] - drops[node][t] + ar;
            speed[node][t] = v.max(MIN_SPEED);
        }
    }

    let t0 = NaiveDate::from_ymd_opt(2024, 1, 1)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time");
    let timestamps = (0..len).map(|i| t0 + Duration::minutes(5 * i as i64)).collect();
    let node_ids: Vec<String> = (0..n).map(|i| format!("s{i:03}")).collect();
    let distances = path_distances(n, &edges)
        .into_iter()
        .map(|(a, b, dist)| Distance {
            from: node_ids[a].clone(),
            to: node_ids[b].clone(),
            dist,
        })
        .collect();
    let dataset = SeriesDataset::new(node_ids, timestamps, speed)?;
    Ok(SynthData {
        dataset,
        distances,
        day_regimes,
        events,
    })
}
