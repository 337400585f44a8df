//! Speed matrix ingestion, missing-value filling, z-scoring, splitting and
//! windowing.

use std::ops::Range;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};

use crate::error::{Error, Result};

/// Time-of-day slots per day at 5-minute resolution.
pub const SLOTS_PER_DAY: usize = 288;
pub const MINUTES_PER_STEP: usize = 5;

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other}"))),
        }
    }
}

/// Contiguous 70/10/20 partition of the time axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    pub fn for_len(len: usize) -> Self {
        let n_train = len * 7 / 10;
        let n_val = len / 10;
        Splits {
            train: 0..n_train,
            val: n_train..n_train + n_val,
            test: n_train + n_val..len,
        }
    }

    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub fn new(mean: f64, std: f64) -> Result<Self> {
        if std <= 0.0 || !std.is_finite() || !mean.is_finite() {
            return Err(Error::invalid(format!("z-score needs a positive finite std, got {std}")));
        }
        Ok(ZScore { mean, std })
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Node x time speed matrix with timestamps and a missing-value mask.
#[derive(Debug, Clone)]
pub struct SeriesDataset {
    node_ids: Vec<String>,
    timestamps: Vec<NaiveDateTime>,
    slots: Vec<usize>,
    /// `[node][t]`; NaN marks a missing entry until [`fill_missing`] runs.
    ///
    /// [`fill_missing`]: SeriesDataset::fill_missing
    speed: Vec<Vec<f64>>,
    observed: Vec<Vec<bool>>,
    splits: Splits,
}

pub fn slot_of(ts: &NaiveDateTime) -> usize {
    (ts.hour() as usize * 60 + ts.minute() as usize) / MINUTES_PER_STEP
}

pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime> {
    let s = s.trim();
    for fmt in [
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(t);
        }
    }
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.naive_local())
        .map_err(|_| Error::invalid(format!("unparseable timestamp {s:?}")))
}

pub fn format_timestamp(ts: &NaiveDateTime) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

fn parse_cell(cell: &str) -> Result<f64> {
    let c = cell.trim();
    if c.is_empty() || c.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    let v: f64 = c
        .parse()
        .map_err(|_| Error::invalid(format!("bad speed value {c:?}")))?;
    // 0 is the conventional missing marker in loop-detector feeds.
    Ok(if v == 0.0 { f64::NAN } else { v })
}

impl SeriesDataset {
    /// `speed[node][t]` with NaN (or 0) for missing entries.
    pub fn new(node_ids: Vec<String>, timestamps: Vec<NaiveDateTime>, speed: Vec<Vec<f64>>) -> Result<Self> {
        if node_ids.is_empty() || timestamps.is_empty() {
            return Err(Error::invalid("dataset needs at least one node and one timestamp"));
        }
        if speed.len() != node_ids.len() || speed.iter().any(|s| s.len() != timestamps.len()) {
            return Err(Error::shape("SeriesDataset::new", "speed matrix does not match ids/timestamps"));
        }
        let speed: Vec<Vec<f64>> = speed
            .into_iter()
            .map(|row| row.into_iter().map(|v| if v == 0.0 || !v.is_finite() { f64::NAN } else { v }).collect())
            .collect();
        let observed = speed.iter().map(|r| r.iter().map(|v| !v.is_nan()).collect()).collect();
        let slots = timestamps.iter().map(slot_of).collect();
        let splits = Splits::for_len(timestamps.len());
        Ok(SeriesDataset {
            node_ids,
            timestamps,
            slots,
            speed,
            observed,
            splits,
        })
    }

    /// Reads a CSV whose first column is an ISO-8601 timestamp and whose
    /// remaining columns are one node each (header row = node ids).
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(Error::format(path, "need a timestamp column and at least one node column"));
        }
        let node_ids: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
        let mut timestamps = Vec::new();
        let mut speed = vec![Vec::new(); node_ids.len()];
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let at = |e: Error| Error::format(path, format!("row {}: {e}", line + 2));
            if rec.len() != headers.len() {
                return Err(at(Error::invalid("wrong column count")));
            }
            timestamps.push(parse_timestamp(&rec[0]).map_err(at)?);
            for (n, cell) in rec.iter().skip(1).enumerate() {
                speed[n].push(parse_cell(cell).map_err(at)?);
            }
        }
        Self::new(node_ids, timestamps, speed)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("timestamp");
        for id in &self.node_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        for t in 0..self.len() {
            out.push_str(&format_timestamp(&self.timestamps[t]));
            for n in 0..self.num_nodes() {
                out.push(',');
                if self.observed[n][t] {
                    out.push_str(&format!("{}", self.speed[n][t]));
                }
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn timestamps(&self) -> &[NaiveDateTime] {
        &self.timestamps
    }

    /// Time-of-day slot of every step.
    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn speed(&self, node: usize) -> &[f64] {
        &self.speed[node]
    }

    pub fn observed(&self, node: usize) -> &[bool] {
        &self.observed[node]
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn set_splits(&mut self, splits: Splits) -> Result<()> {
        if splits.test.end != self.len() || splits.train.start != 0 || splits.train.end != splits.val.start || splits.val.end != splits.test.start {
            return Err(Error::invalid("splits must tile the time axis contiguously"));
        }
        self.splits = splits;
        Ok(())
    }

    pub fn has_missing(&self) -> bool {
        self.speed.iter().flatten().any(|v| v.is_nan())
    }

    /// Per-node, per-slot mean over observed training entries (`None` for
    /// slots never observed).
    pub fn training_slot_means(&self) -> Vec<Vec<Option<f64>>> {
        let train = self.splits.train.clone();
        (0..self.num_nodes())
            .map(|n| {
                let mut sum = [0.0; SLOTS_PER_DAY];
                let mut count = [0usize; SLOTS_PER_DAY];
                for t in train.clone() {
                    if self.observed[n][t] {
                        sum[self.slots[t]] += self.speed[n][t];
                        count[self.slots[t]] += 1;
                    }
                }
                (0..SLOTS_PER_DAY)
                    .map(|s| (count[s] > 0).then(|| sum[s] / count[s] as f64))
                    .collect()
            })
            .collect()
    }

    /// Replaces each missing entry with the node's training time-of-day
    /// average, or by linear interpolation in time where that slot was
    /// never observed in training. The observation mask is kept.
    pub fn fill_missing(&mut self) -> Result<()> {
        let means = self.training_slot_means();
        for n in 0..self.num_nodes() {
            if !self.observed[n].iter().any(|&o| o) {
                return Err(Error::invalid(format!("node {} has no observations", self.node_ids[n])));
            }
            let mut unresolved = Vec::new();
            for t in 0..self.len() {
                if self.speed[n][t].is_nan() {
                    match means[n][self.slots[t]] {
                        Some(m) => self.speed[n][t] = m,
                        None => unresolved.push(t),
                    }
                }
            }
            if !unresolved.is_empty() {
                let obs: Vec<usize> = (0..self.len()).filter(|&t| self.observed[n][t]).collect();
                for t in unresolved {
                    self.speed[n][t] = interpolate(&obs, &self.speed[n], t);
                }
            }
        }
        Ok(())
    }

    /// μ and σ of the observed training entries.
    pub fn zscore_stats(&self) -> Result<ZScore> {
        let train = self.splits.train.clone();
        let vals: Vec<f64> = (0..self.num_nodes())
            .flat_map(|n| train.clone().filter(move |&t| self.observed[n][t]).map(move |t| (n, t)))
            .map(|(n, t)| self.speed[n][t])
            .collect();
        if vals.is_empty() {
            return Err(Error::invalid("training split has no observations"));
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        ZScore::new(mean, var.sqrt())
    }
}

/// Linear interpolation between the observed neighbours of `t`; nearest
/// value at the ends.
fn interpolate(obs: &[usize], series: &[f64], t: usize) -> f64 {
    let idx = obs.partition_point(|&o| o < t);
    match (idx.checked_sub(1).map(|i| obs[i]), obs.get(idx).copied()) {
        (Some(a), Some(b)) => {
            let w = (t - a) as f64 / (b - a) as f64;
            series[a] * (1.0 - w) + series[b] * w
        }
        (Some(a), None) => series[a],
        (None, Some(b)) => series[b],
        (None, None) => unreachable!("caller checked the node has observations"),
    }
}

/// Start indices of stride-1 windows (`t_in` inputs followed by `t_out`
/// targets) that fit entirely inside `range`.
pub fn window_starts(range: Range<usize>, t_in: usize, t_out: usize) -> Vec<usize> {
    let need = t_in + t_out;
    if range.len() < need {
        return Vec::new();
    }
    (range.start..=range.end - need).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn steps(days: usize) -> Vec<NaiveDateTime> {
        let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        (0..days * SLOTS_PER_DAY)
            .map(|i| start + chrono::Duration::minutes(5 * i as i64))
            .collect()
    }

    #[test]
    fn splits_are_contiguous_70_10_20() {
        let s = Splits::for_len(100);
        assert_eq!(s.train, 0..70);
        assert_eq!(s.val, 70..80);
        assert_eq!(s.test, 80..100);
    }

    #[test]
    fn window_counts() {
        assert_eq!(window_starts(10..46, 18, 18), vec![10]);
        assert_eq!(window_starts(0..41, 18, 18).len(), 6);
        assert!(window_starts(0..35, 18, 18).is_empty());
    }

    #[test]
    fn windows_match_index_enumeration() {
        let range = 7..60;
        let (t_in, t_out) = (5, 3);
        let mut brute = Vec::new();
        for s in 0..100 {
            let inputs: Vec<usize> = (s..s + t_in).collect();
            let targets: Vec<usize> = (s + t_in..s + t_in + t_out).collect();
            if inputs.iter().chain(&targets).all(|i| range.contains(i)) {
                brute.push(s);
            }
        }
        assert_eq!(window_starts(range, t_in, t_out), brute);
    }

    #[test]
    fn zscore_round_trip() {
        let z = ZScore::new(55.0, 12.5).unwrap();
        assert_eq!(z.apply(55.0), 0.0);
        assert_eq!(z.apply(67.5), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-100.0..200.0);
            assert!((z.invert(z.apply(x)) - x).abs() < 1e-12);
        }
        assert!(ZScore::new(1.0, 0.0).is_err());
    }

    #[test]
    fn fill_is_identity_without_missing() {
        let ts = steps(1);
        let speed = vec![(0..288).map(|i| 30.0 + i as f64 * 0.1).collect::<Vec<_>>()];
        let mut ds = SeriesDataset::new(vec!["a".into()], ts, speed.clone()).unwrap();
        ds.fill_missing().unwrap();
        assert_eq!(ds.speed(0), speed[0].as_slice());
    }

    #[test]
    fn fill_uses_training_slot_mean() {
        let ts = steps(4);
        let mut s = vec![50.0; 4 * 288];
        s[10] = 40.0;
        s[288 + 10] = 60.0;
        s[2 * 288 + 10] = f64::NAN;
        let mut ds = SeriesDataset::new(vec!["a".into()], ts, vec![s]).unwrap();
        ds.set_splits(Splits { train: 0..2 * 288 + 20, val: 2 * 288 + 20..3 * 288, test: 3 * 288..4 * 288 })
            .unwrap();
        ds.fill_missing().unwrap();
        assert_eq!(ds.speed(0)[2 * 288 + 10], 50.0);
        assert!(!ds.observed(0)[2 * 288 + 10]);
    }

    #[test]
    fn fill_matches_brute_force_average() {
        let ts = steps(6);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let raw: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..ts.len())
                    .map(|_| if rng.gen_bool(0.2) { f64::NAN } else { rng.gen_range(20.0..70.0) })
                    .collect()
            })
            .collect();
        let mut ds = SeriesDataset::new(vec!["a".into(), "b".into(), "c".into()], ts.clone(), raw.clone()).unwrap();
        ds.fill_missing().unwrap();
        let train_end = ds.splits().train.end;
        for n in 0..3 {
            for t in 0..ts.len() {
                if raw[n][t].is_nan() {
                    let slot = t % 288;
                    let obs: Vec<f64> = (0..train_end)
                        .filter(|&u| u % 288 == slot && !raw[n][u].is_nan())
                        .map(|u| raw[n][u])
                        .collect();
                    if !obs.is_empty() {
                        let m = obs.iter().sum::<f64>() / obs.len() as f64;
                        assert!((ds.speed(n)[t] - m).abs() < 1e-12);
                    }
                } else {
                    assert_eq!(ds.speed(n)[t], raw[n][t]);
                }
            }
        }
        assert!(!ds.has_missing());
    }

    #[test]
    fn fill_interpolates_unobserved_slots() {
        let ts = steps(1);
        let mut s: Vec<f64> = (0..288).map(|i| i as f64 + 1.0).collect();
        s[100] = f64::NAN;
        s[101] = f64::NAN;
        let mut ds = SeriesDataset::new(vec!["a".into()], ts, vec![s]).unwrap();
        ds.fill_missing().unwrap();
        assert!((ds.speed(0)[100] - 101.0).abs() < 1e-12);
        assert!((ds.speed(0)[101] - 102.0).abs() < 1e-12);
    }

    #[test]
    fn fully_missing_node_errors() {
        let ts = steps(1);
        let mut ds = SeriesDataset::new(
            vec!["a".into(), "b".into()],
            ts,
            vec![vec![1.0; 288], vec![f64::NAN; 288]],
        )
        .unwrap();
        assert!(ds.fill_missing().is_err());
    }

    #[test]
    fn csv_round_trip_with_missing_tokens() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.csv");
        std::fs::write(
            &p,
            "timestamp,n1,n2\n2024-01-01 00:00:00,50,NaN\n2024-01-01T00:05:00,,0\n2024-01-01T00:10:00,48.5,30\n",
        )
        .unwrap();
        let ds = SeriesDataset::from_csv(&p).unwrap();
        assert_eq!(ds.node_ids(), ["n1", "n2"]);
        assert_eq!(ds.observed(0), [true, false, true]);
        assert_eq!(ds.observed(1), [false, false, true]);
        assert_eq!(ds.slots(), [0, 1, 2]);
        let q = dir.path().join("out.csv");
        ds.write_csv(&q).unwrap();
        let again = SeriesDataset::from_csv(&q).unwrap();
        assert_eq!(again.observed(1), ds.observed(1));
        assert_eq!(again.speed(0)[2], 48.5);
    }
}
