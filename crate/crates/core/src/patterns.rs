//! Representative pattern keys: daily profiles, cyclic window sampling,
//! K-means undersampling, and cosine k-NN matching.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::train::data::{SeriesDataset, SLOTS_PER_DAY};

pub const DEFAULT_K: usize = 3;
pub const DEFAULT_NUM_PATTERNS: usize = 1000;
pub const DEFAULT_MAX_ITER: usize = 100;

const BANK_MAGIC: &[u8; 5] = b"PMPB1";

/// Time-of-day average speed of one node over the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyProfile {
    pub node_id: String,
    pub mean: Vec<f64>,
    pub count: Vec<usize>,
}

/// Averages observed training speeds per time-of-day slot; slots without
/// observations are linearly interpolated from the nearest observed slots,
/// wrapping around midnight.
pub fn compute_daily_profiles(dataset: &SeriesDataset) -> Result<Vec<DailyProfile>> {
    let train = dataset.splits().train.clone();
    let slots = dataset.slots();
    (0..dataset.num_nodes())
        .map(|n| {
            let mut sum = vec![0.0; SLOTS_PER_DAY];
            let mut count = vec![0usize; SLOTS_PER_DAY];
            let (speed, obs) = (dataset.speed(n), dataset.observed(n));
            for t in train.clone() {
                if obs[t] {
                    sum[slots[t]] += speed[t];
                    count[slots[t]] += 1;
                }
            }
            let seen: Vec<usize> = (0..SLOTS_PER_DAY).filter(|&s| count[s] > 0).collect();
            if seen.is_empty() {
                return Err(Error::invalid(format!(
                    "node {} has no training observations",
                    dataset.node_ids()[n]
                )));
            }
            let mut mean: Vec<f64> = (0..SLOTS_PER_DAY)
                .map(|s| if count[s] > 0 { sum[s] / count[s] as f64 } else { f64::NAN })
                .collect();
            for s in 0..SLOTS_PER_DAY {
                if count[s] == 0 {
                    mean[s] = cyclic_interpolate(&seen, &mean, s);
                }
            }
            Ok(DailyProfile {
                node_id: dataset.node_ids()[n].clone(),
                mean,
                count,
            })
        })
        .collect()
}

fn cyclic_interpolate(seen: &[usize], mean: &[f64], s: usize) -> f64 {
    let period = SLOTS_PER_DAY as isize;
    let idx = seen.partition_point(|&o| o < s);
    let (prev, next) = if idx == 0 {
        (seen[seen.len() - 1] as isize - period, seen[0] as isize)
    } else if idx == seen.len() {
        (seen[idx - 1] as isize, seen[0] as isize + period)
    } else {
        (seen[idx - 1] as isize, seen[idx] as isize)
    };
    let value = |p: isize| mean[p.rem_euclid(period) as usize];
    if next == prev {
        return value(prev);
    }
    let w = (s as isize - prev) as f64 / (next - prev) as f64;
    value(prev) * (1.0 - w) + value(next) * w
}

/// `x − mean(x)`
pub fn normalize_zero_based(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - mean).collect()
}

/// All cyclic stride-1 windows of length `t_prime` from every profile,
/// zero-based, with exact duplicates removed (first occurrence kept).
pub fn sample_windows(profiles: &[DailyProfile], t_prime: usize) -> Result<Vec<Vec<f64>>> {
    if t_prime == 0 || t_prime > SLOTS_PER_DAY {
        return Err(Error::invalid(format!(
            "pattern length must be in 1..={SLOTS_PER_DAY}, got {t_prime}"
        )));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for p in profiles {
        for start in 0..SLOTS_PER_DAY {
            let window: Vec<f64> = (0..t_prime)
                .map(|i| p.mean[(start + i) % SLOTS_PER_DAY])
                .collect();
            let z = normalize_zero_based(&window);
            // +0.0 so that -0.0 and 0.0 hash alike
            let key: Vec<u64> = z.iter().map(|v| (v + 0.0).to_bits()).collect();
            if seen.insert(key) {
                out.push(z);
            }
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid (squared Euclidean), lowest index on ties.
pub fn nearest_centroid(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// State observed at each Lloyd iteration, after the assignment step.
#[derive(Debug, Clone)]
pub struct KMeansIteration {
    pub iteration: usize,
    /// Centroids the assignment was made against.
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
}

#[derive(Debug, Clone)]
pub struct KMeansReport {
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Lloyd's K-means with k-means++ seeding under Euclidean distance. Stops
/// at an assignment fixpoint or after `max_iter` assignment steps. Empty
/// clusters keep their previous centroid.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    max_iter: usize,
    seed: u64,
    mut observer: impl FnMut(&KMeansIteration),
) -> Result<(Vec<Vec<f64>>, KMeansReport)> {
    if k == 0 {
        return Err(Error::invalid("number of clusters must be positive"));
    }
    if points.len() < k {
        return Err(Error::invalid(format!(
            "only {} distinct raw patterns for {k} clusters; use a smaller pattern count",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let dim = points[0].len();
    let mut assignments: Vec<usize> = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter.max(1) {
        iterations = it + 1;
        let mut inertia = 0.0;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, d) = nearest_centroid(p, &centroids);
            inertia += d;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        history.push(inertia);
        observer(&KMeansIteration {
            iteration: it,
            centroids: centroids.clone(),
            assignments: assignments.clone(),
            inertia,
        });
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &j) in points.iter().zip(&assignments) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok((
        centroids,
        KMeansReport {
            inertia_history: history,
            iterations,
            converged,
        },
    ))
}

fn kmeans_pp(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(k);
    let mut chosen = vec![false; points.len()];
    let first = rng.gen_range(0..points.len());
    chosen[first] = true;
    centroids.push(points[first].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = Some(i);
                    break;
                }
                target -= w;
            }
            // rounding can run off the end
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            chosen.iter().position(|&c| !c).expect("points.len() >= k")
        };
        chosen[pick] = true;
        centroids.push(points[pick].clone());
        let c = centroids.last().expect("just pushed");
        for (dist, p) in d2.iter_mut().zip(points) {
            *dist = dist.min(sq_dist(p, c));
        }
    }
    centroids
}

/// The key bank: zero-based length-`T'` patterns with stable ids.
#[derive(Debug)]
pub struct PatternSet {
    t_prime: usize,
    patterns: Vec<Vec<f64>>,
    norms: Vec<f64>,
    hash: [u8; 32],
    queries: AtomicUsize,
}

impl Clone for PatternSet {
    fn clone(&self) -> Self {
        PatternSet {
            t_prime: self.t_prime,
            patterns: self.patterns.clone(),
            norms: self.norms.clone(),
            hash: self.hash,
            queries: AtomicUsize::new(0),
        }
    }
}

impl PartialEq for PatternSet {
    fn eq(&self, other: &Self) -> bool {
        self.t_prime == other.t_prime && self.patterns == other.patterns
    }
}

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `1 − cos(a, b)`, clamped into [0, 2]; a zero vector on either side
/// counts as cosine 0.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    cosine_distance_with_norms(a, norm(a), b, norm(b))
}

fn cosine_distance_with_norms(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

/// k nearest keys of one node's input window.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// `(pattern id, distance)`, ascending by distance then id.
    pub neighbors: Vec<(usize, f64)>,
    /// `zero_based(window) − p₁`, speed units.
    pub noise: Vec<f64>,
}

impl MatchResult {
    /// Memory mixing weights `softmax(−d_j)` over the k matches.
    pub fn memory_weights(&self) -> Vec<(usize, f64)> {
        let neg: Vec<f64> = self.neighbors.iter().map(|&(_, d)| -d).collect();
        let mut w = neg;
        crate::numcore::softmax_in_place(&mut w);
        self.neighbors.iter().zip(w).map(|(&(id, _), w)| (id, w)).collect()
    }
}

impl PatternSet {
    pub fn new(t_prime: usize, patterns: Vec<Vec<f64>>) -> Result<Self> {
        if patterns.is_empty() {
            return Err(Error::invalid("pattern set is empty"));
        }
        if patterns.iter().any(|p| p.len() != t_prime) {
            return Err(Error::invalid(format!("every pattern must have length {t_prime}")));
        }
        if patterns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pattern set"));
        }
        let norms = patterns.iter().map(|p| norm(p)).collect();
        let hash = content_hash(t_prime, &patterns);
        Ok(PatternSet {
            t_prime,
            patterns,
            norms,
            hash,
            queries: AtomicUsize::new(0),
        })
    }

    pub fn t_prime(&self) -> usize {
        self.t_prime
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn pattern(&self, id: usize) -> &[f64] {
        &self.patterns[id]
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    pub fn hash(&self) -> [u8; 32] {
        self.hash
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash)
    }

    /// Number of [`knn_match`](Self::knn_match) calls served so far.
    pub fn query_count(&self) -> usize {
        self.queries.load(Ordering::Relaxed)
    }

    /// k nearest keys under `1 − cos` of the zero-based window. Ties break
    /// toward the lower id.
    pub fn knn_match(&self, window: &[f64], k: usize) -> Result<MatchResult> {
        if window.len() != self.t_prime {
            return Err(Error::shape(
                "knn_match",
                format!("window length {} vs pattern length {}", window.len(), self.t_prime),
            ));
        }
        if k == 0 || k > self.len() {
            return Err(Error::invalid(format!("k = {k} must be in 1..={}", self.len())));
        }
        if window.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("knn_match window"));
        }
        self.queries.fetch_add(1, Ordering::Relaxed);
        let z = normalize_zero_based(window);
        let nz = norm(&z);
        let mut best: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
        for (id, (p, &np)) in self.patterns.iter().zip(&self.norms).enumerate() {
            let d = cosine_distance_with_norms(&z, nz, p, np);
            if best.len() == k && d >= best[k - 1].1 {
                continue;
            }
            let pos = best.partition_point(|&(_, bd)| bd <= d);
            best.insert(pos, (id, d));
            best.truncate(k);
        }
        let nearest = &self.patterns[best[0].0];
        let noise = z.iter().zip(nearest).map(|(x, p)| x - p).collect();
        Ok(MatchResult {
            neighbors: best,
            noise,
        })
    }

    /// Binary bank: magic, `T'`, count, SHA-256 content hash, then
    /// row-major little-endian f64 values.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(64 + 8 * self.len() * self.t_prime);
        out.extend_from_slice(BANK_MAGIC);
        out.extend_from_slice(&(self.t_prime as u64).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.hash);
        for v in self.patterns.iter().flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |d: &str| Error::format(path, d.to_string());
        if bytes.len() < 53 || &bytes[..5] != BANK_MAGIC {
            return Err(bad("not a pattern bank (bad magic)"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes")) as usize;
        let (t_prime, count) = (u64_at(5), u64_at(13));
        let hash: [u8; 32] = bytes[21..53].try_into().expect("32 bytes");
        let body = &bytes[53..];
        if t_prime == 0 || body.len() != 8 * t_prime * count {
            return Err(bad("truncated pattern bank"));
        }
        let values: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let patterns = values.chunks(t_prime).map(<[f64]>::to_vec).collect();
        let set = PatternSet::new(t_prime, patterns)?;
        if set.hash != hash {
            return Err(bad("content hash does not match stored patterns"));
        }
        Ok(set)
    }

    /// `pattern_id,t0..t{T'-1}`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let cols: Vec<String> = (0..self.t_prime).map(|i| format!("t{i}")).collect();
        writeln!(out, "pattern_id,{}", cols.join(",")).expect("vec write");
        for (id, p) in self.patterns.iter().enumerate() {
            let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{id},{}", vals.join(",")).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Rows `|ℙ| x T'` as a tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.patterns).expect("patterns share a length")
    }
}

fn content_hash(t_prime: usize, patterns: &[Vec<f64>]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((t_prime as u64).to_le_bytes());
    h.update((patterns.len() as u64).to_le_bytes());
    for v in patterns.iter().flatten() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Clusters the raw windows into `num_patterns` re-zero-based centroids.
pub fn cluster_patterns(
    raw: &[Vec<f64>],
    num_patterns: usize,
    max_iter: usize,
    seed: u64,
) -> Result<(PatternSet, KMeansReport)> {
    let t_prime = raw
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::invalid("no raw patterns to cluster"))?;
    let (centroids, report) = kmeans(raw, num_patterns, max_iter, seed, |_| {})?;
    let patterns = centroids.iter().map(|c| normalize_zero_based(c)).collect();
    Ok((PatternSet::new(t_prime, patterns)?, report))
}

/// Outcome of the whole extraction pipeline.
#[derive(Debug, Clone)]
pub struct Extraction {
    pub raw: Vec<Vec<f64>>,
    pub set: PatternSet,
    pub report: KMeansReport,
    /// Set when fewer distinct raw windows than requested keys existed and
    /// the bank was shrunk to the raw count.
    pub shrunk_from: Option<usize>,
}

/// Profiles → windows → clusters. When the data has fewer distinct
/// windows than `num_patterns` and `allow_shrink` is set, every raw window
/// becomes a key instead of failing.
pub fn extract_patterns(
    dataset: &SeriesDataset,
    t_prime: usize,
    num_patterns: usize,
    max_iter: usize,
    seed: u64,
    allow_shrink: bool,
) -> Result<Extraction> {
    let profiles = compute_daily_profiles(dataset)?;
    let raw = sample_windows(&profiles, t_prime)?;
    let (target, shrunk_from) = if raw.len() < num_patterns && allow_shrink {
        (raw.len(), Some(num_patterns))
    } else {
        (num_patterns, None)
    };
    let (set, report) = cluster_patterns(&raw, target, max_iter, seed)?;
    Ok(Extraction {
        raw,
        set,
        report,
        shrunk_from,
    })
}

/// Histogram of cosine similarities between `reference` and every pattern
/// of `raw` and of `clustered`: rows `(bin_lo, bin_hi, raw_count,
/// clustered_count)` over `bins` equal bins on [-1, 1].
pub fn similarity_histogram(
    reference: &[f64],
    raw: &[Vec<f64>],
    clustered: &PatternSet,
    bins: usize,
) -> Vec<(f64, f64, usize, usize)> {
    let bin_of = |p: &[f64]| {
        let sim = 1.0 - cosine_distance(reference, p);
        (((sim + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1)
    };
    let mut raw_counts = vec![0; bins];
    let mut clu_counts = vec![0; bins];
    for p in raw {
        raw_counts[bin_of(p)] += 1;
    }
    for p in clustered.patterns() {
        clu_counts[bin_of(p)] += 1;
    }
    (0..bins)
        .map(|b| {
            let lo = -1.0 + 2.0 * b as f64 / bins as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / bins as f64;
            (lo, hi, raw_counts[b], clu_counts[b])
        })
        .collect()
}

pub fn write_similarity_histogram(path: &Path, rows: &[(f64, f64, usize, usize)]) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,raw_count,clustered_count\n");
    for (lo, hi, r, c) in rows {
        out.push_str(&format!("{lo},{hi},{r},{c}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;
    use proptest::prelude::*;
    use rand::Rng;

    fn steps(days: usize) -> Vec<chrono::NaiveDateTime> {
        let start = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        (0..days * SLOTS_PER_DAY)
            .map(|i| start + chrono::Duration::minutes(5 * i as i64))
            .collect()
    }

    fn profile(mean: Vec<f64>) -> DailyProfile {
        DailyProfile {
            node_id: "a".into(),
            count: vec![1; mean.len()],
            mean,
        }
    }

    fn random_patterns(n: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| normalize_zero_based(&(0..t).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>()))
            .collect()
    }

    /// Full scan + full sort.
    fn exhaustive(set: &PatternSet, window: &[f64], k: usize) -> Vec<(usize, f64)> {
        let z = normalize_zero_based(window);
        let mut all: Vec<(usize, f64)> = set
            .patterns()
            .iter()
            .enumerate()
            .map(|(i, p)| (i, cosine_distance(&z, p)))
            .collect();
        all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        all.truncate(k);
        all
    }

    #[test]
    fn zero_based_examples() {
        assert_eq!(normalize_zero_based(&[50.0, 50.0, 50.0]), vec![0.0; 3]);
        assert_eq!(normalize_zero_based(&[1.0, 2.0, 3.0]), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn profiles_constant_and_mean() {
        let ts = steps(2);
        let mut s = vec![33.0; 2 * 288];
        s[5] = 40.0;
        s[288 + 5] = 60.0;
        let mut ds = SeriesDataset::new(vec!["a".into()], ts, vec![s]).unwrap();
        ds.set_splits(crate::train::data::Splits { train: 0..576, val: 576..576, test: 576..576 })
            .unwrap();
        let p = compute_daily_profiles(&ds).unwrap();
        assert_eq!(p[0].mean[5], 50.0);
        assert_eq!(p[0].count[5], 2);
        assert!(p[0].mean.iter().enumerate().all(|(i, &v)| i == 5 || v == 33.0));
    }

    #[test]
    fn profiles_exclude_masked_and_interpolate_cyclically() {
        let ts = steps(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s: Vec<f64> = (0..ts.len()).map(|_| rng.gen_range(20.0..70.0)).collect();
        let raw = s.clone();
        // mask slot 7 on day 0, and slot 0 and 287 everywhere
        s[7] = f64::NAN;
        for d in 0..3 {
            s[d * 288] = f64::NAN;
            s[d * 288 + 287] = f64::NAN;
        }
        let mut ds = SeriesDataset::new(vec!["a".into()], ts, vec![s]).unwrap();
        ds.set_splits(crate::train::data::Splits { train: 0..864, val: 864..864, test: 864..864 })
            .unwrap();
        let p = compute_daily_profiles(&ds).unwrap().remove(0);
        assert!((p.mean[7] - (raw[288 + 7] + raw[576 + 7]) / 2.0).abs() < 1e-12);
        let m = |slot: usize| (0..3).map(|d| raw[d * 288 + slot]).sum::<f64>() / 3.0;
        assert!((p.mean[100] - m(100)).abs() < 1e-12);
        // 286 → (287, 0) → 1 across midnight: thirds
        let (a, b) = (m(286), m(1));
        assert!((p.mean[287] - (a + (b - a) / 3.0)).abs() < 1e-12);
        assert!((p.mean[0] - (a + 2.0 * (b - a) / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn profiles_need_observations() {
        let ts = steps(1);
        let ds = SeriesDataset::new(vec!["a".into()], ts, vec![vec![f64::NAN; 288]]).unwrap();
        assert!(compute_daily_profiles(&ds).is_err());
    }

    #[test]
    fn sample_windows_examples() {
        let flat = sample_windows(&[profile(vec![42.0; 288])], 18).unwrap();
        assert_eq!(flat.len(), 1);
        assert!(flat[0].iter().all(|&v| v == 0.0));

        // strictly increasing (nonperiodic) profile
        let inc: Vec<f64> = (0..288).map(|i| (i as f64).powf(1.3)).collect();
        let w = sample_windows(&[profile(inc.clone())], 18).unwrap();
        assert_eq!(w.len(), 288);
        for i in 0..w.len() {
            for j in i + 1..w.len() {
                assert!(w[i] != w[j]);
            }
        }
        let twice = sample_windows(&[profile(inc.clone()), profile(inc)], 18).unwrap();
        assert_eq!(twice.len(), 288);
        assert!(sample_windows(&[profile(vec![0.0; 288])], 289).is_err());
    }

    #[test]
    fn kmeans_recovers_blob_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let centers = [vec![5.0, -5.0, 0.0], vec![-4.0, 1.0, 3.0]];
        let mut raw = Vec::new();
        for c in &centers {
            for _ in 0..30 {
                raw.push(c.iter().map(|v| v + rng.gen_range(-1e-3..1e-3)).collect::<Vec<f64>>());
            }
        }
        let blob_mean = |b: usize| -> Vec<f64> {
            (0..3)
                .map(|i| raw[b * 30..(b + 1) * 30].iter().map(|p| p[i]).sum::<f64>() / 30.0)
                .collect()
        };
        let (cents, report) = kmeans(&raw, 2, 100, 1, |_| {}).unwrap();
        assert!(report.converged);
        for b in 0..2 {
            let m = blob_mean(b);
            let hit = cents.iter().any(|c| c.iter().zip(&m).all(|(x, y)| (x - y).abs() < 1e-6));
            assert!(hit, "{cents:?} vs {m:?}");
        }
    }

    #[test]
    fn kmeans_with_k_equal_count_returns_the_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = random_patterns(12, 5, &mut rng);
        let (set, _) = cluster_patterns(&raw, 12, 100, 9).unwrap();
        for p in &raw {
            assert!(set.patterns().iter().any(|c| c.iter().zip(p).all(|(a, b)| (a - b).abs() < 1e-12)));
        }
        assert!(cluster_patterns(&raw, 13, 100, 9).unwrap_err().to_string().contains("smaller"));
    }

    #[test]
    fn kmeans_inertia_monotone_and_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_patterns(300, 6, &mut rng);
        let (a, ra) = cluster_patterns(&raw, 10, 100, 3).unwrap();
        let (b, _) = cluster_patterns(&raw, 10, 100, 3).unwrap();
        assert_eq!(a.hash(), b.hash());
        for w in ra.inertia_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9 * w[0].abs());
        }
        for p in a.patterns() {
            assert!((p.iter().sum::<f64>() / p.len() as f64).abs() < 1e-9);
        }
    }

    #[test]
    fn knn_self_match_and_antipode() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let pats = random_patterns(20, 8, &mut rng);
        let set = PatternSet::new(8, pats.clone()).unwrap();
        let shifted: Vec<f64> = pats[13].iter().map(|v| v + 55.0).collect();
        let m = set.knn_match(&shifted, 3).unwrap();
        assert_eq!(m.neighbors[0].0, 13);
        assert!(m.neighbors[0].1 < 1e-12);
        assert!(m.noise.iter().all(|v| v.abs() < 1e-12));

        let single = PatternSet::new(8, vec![pats[2].clone()]).unwrap();
        let neg: Vec<f64> = pats[2].iter().map(|v| -v).collect();
        let m = single.knn_match(&neg, 1).unwrap();
        assert!((m.neighbors[0].1 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn knn_flat_window_ties_by_id() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = PatternSet::new(4, random_patterns(6, 4, &mut rng)).unwrap();
        let m = set.knn_match(&[3.0; 4], 3).unwrap();
        assert_eq!(m.neighbors, vec![(0, 1.0), (1, 1.0), (2, 1.0)]);
    }

    #[test]
    fn knn_matches_exhaustive_on_fifty_patterns() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = PatternSet::new(18, random_patterns(50, 18, &mut rng)).unwrap();
        for _ in 0..20 {
            let w: Vec<f64> = (0..18).map(|_| rng.gen_range(20.0..70.0)).collect();
            assert_eq!(set.knn_match(&w, 3).unwrap().neighbors, exhaustive(&set, &w, 3));
        }
    }

    #[test]
    fn knn_rejects_bad_arguments() {
        let set = PatternSet::new(3, vec![vec![-1.0, 0.0, 1.0]]).unwrap();
        assert!(set.knn_match(&[1.0, 2.0], 1).is_err());
        assert!(set.knn_match(&[1.0, 2.0, 3.0], 2).is_err());
        assert!(set.knn_match(&[1.0, f64::NAN, 3.0], 1).is_err());
    }

    #[test]
    fn memory_weights_are_softmax_of_negative_distance() {
        let m = MatchResult {
            neighbors: vec![(4, 0.1), (0, 0.4), (9, 0.9)],
            noise: vec![],
        };
        let e: Vec<f64> = [-0.1f64, -0.4, -0.9].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let w = m.memory_weights();
        for (i, &(id, wi)) in w.iter().enumerate() {
            assert_eq!(id, m.neighbors[i].0);
            assert!((wi - e[i] / s).abs() < 1e-15);
        }
    }

    #[test]
    fn bank_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = PatternSet::new(6, random_patterns(7, 6, &mut rng)).unwrap();
        let p = dir.path().join("bank.bin");
        set.write(&p).unwrap();
        let back = PatternSet::read(&p).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.hash(), set.hash());
        let mut bytes = std::fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        std::fs::write(&p, &bytes).unwrap();
        assert!(PatternSet::read(&p).is_err());
        set.write_csv(&dir.path().join("bank.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("bank.csv")).unwrap();
        assert!(text.starts_with("pattern_id,t0,t1,t2,t3,t4,t5\n0,"));
    }

    #[test]
    fn histogram_counts_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let raw = random_patterns(100, 5, &mut rng);
        let set = PatternSet::new(5, raw[..10].to_vec()).unwrap();
        let h = similarity_histogram(&raw[0], &raw, &set, 20);
        assert_eq!(h.iter().map(|r| r.2).sum::<usize>(), 100);
        assert_eq!(h.iter().map(|r| r.3).sum::<usize>(), 10);
        assert_eq!(h[19].2 >= 1, true); // self-similarity lands in the top bin
    }

    proptest! {
        #[test]
        fn knn_equals_exhaustive(seed in 0u64..10_000, k in 1usize..6, count in 6usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = PatternSet::new(7, random_patterns(count, 7, &mut rng)).unwrap();
            let w: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            prop_assert_eq!(set.knn_match(&w, k).unwrap().neighbors, exhaustive(&set, &w, k));
        }

        #[test]
        fn knn_is_scale_invariant(seed in 0u64..10_000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let set = PatternSet::new(7, random_patterns(30, 7, &mut rng)).unwrap();
            let w: Vec<f64> = (0..7).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let cw: Vec<f64> = w.iter().map(|v| v * c).collect();
            let a = set.knn_match(&w, 3).unwrap();
            let b = set.knn_match(&cw, 3).unwrap();
            for (x, y) in a.neighbors.iter().zip(&b.neighbors) {
                prop_assert!((x.1 - y.1).abs() < 1e-12);
            }
            // ids agree unless two distances are within rounding of each other
            let gaps_ok = a.neighbors.windows(2).all(|p| p[1].1 - p[0].1 > 1e-10);
            if gaps_ok {
                let ia: Vec<usize> = a.neighbors.iter().map(|n| n.0).collect();
                let ib: Vec<usize> = b.neighbors.iter().map(|n| n.0).collect();
                prop_assert_eq!(ia, ib);
            }
        }

        #[test]
        fn zero_based_has_zero_mean(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
            let z = normalize_zero_based(&v);
            prop_assert!((z.iter().sum::<f64>() / z.len() as f64).abs() < 1e-12);
        }
    }
}
