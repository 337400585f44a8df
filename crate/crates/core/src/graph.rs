//! Static weighted road graph with Gaussian-kernel edge weights.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const DEFAULT_KAPPA: f64 = 0.1;

/// One directed distance entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Distance {
    pub from: String,
    pub to: String,
    pub dist: f64,
}

#[derive(Debug, Clone)]
pub struct RoadGraph {
    node_ids: Vec<String>,
    sigma: f64,
    kappa: f64,
    adjacency: Tensor,
}

impl RoadGraph {
    /// Builds `A_ij = exp(-dist_ij² / σ²)` with entries below `kappa`
    /// zeroed. σ is the population standard deviation of every finite
    /// distance between known nodes unless `sigma` overrides it. Pairs
    /// without a distance get no edge; self loops always weigh 1.
    pub fn build(
        node_ids: Vec<String>,
        distances: &[Distance],
        kappa: f64,
        sigma: Option<f64>,
    ) -> Result<Self> {
        if node_ids.is_empty() {
            return Err(Error::invalid("road graph needs at least one node"));
        }
        let index: HashMap<&str, usize> = node_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect();
        if index.len() != node_ids.len() {
            return Err(Error::invalid("duplicate node id"));
        }
        let mut known = Vec::new();
        for d in distances {
            if d.dist.is_finite() && d.dist < 0.0 {
                return Err(Error::invalid(format!(
                    "negative distance {} from {} to {}",
                    d.dist, d.from, d.to
                )));
            }
            if let (Some(&i), Some(&j)) = (index.get(d.from.as_str()), index.get(d.to.as_str())) {
                if d.dist.is_finite() {
                    known.push((i, j, d.dist));
                }
            }
        }
        let sigma = match sigma {
            Some(s) if s > 0.0 && s.is_finite() => s,
            Some(s) => return Err(Error::invalid(format!("sigma override must be positive, got {s}"))),
            None => {
                let n = known.len() as f64;
                let mean = known.iter().map(|k| k.2).sum::<f64>() / n;
                let var = known.iter().map(|k| (k.2 - mean).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if known.is_empty() || s == 0.0 || !s.is_finite() {
                    return Err(Error::invalid(
                        "distance standard deviation is zero; pass an explicit sigma override",
                    ));
                }
                s
            }
        };
        let n = node_ids.len();
        let mut adjacency = Tensor::zeros(n, n);
        for &(i, j, dist) in &known {
            adjacency.set(i, j, kernel(dist, sigma, kappa));
        }
        for i in 0..n {
            adjacency.set(i, i, 1.0);
        }
        Ok(RoadGraph {
            node_ids,
            sigma,
            kappa,
            adjacency,
        })
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn adjacency(&self) -> &Tensor {
        &self.adjacency
    }

    pub fn normalized_adjacency(&self) -> Tensor {
        normalize_adjacency(&self.adjacency)
    }

    /// Restricts the graph to `ids`, in that order.
    pub fn reorder(&self, ids: &[String]) -> Result<RoadGraph> {
        let pos: Vec<usize> = ids
            .iter()
            .map(|id| {
                self.node_ids
                    .iter()
                    .position(|n| n == id)
                    .ok_or_else(|| Error::invalid(format!("node {id} not in road graph")))
            })
            .collect::<Result<_>>()?;
        let n = ids.len();
        let mut adjacency = Tensor::zeros(n, n);
        for (a, &i) in pos.iter().enumerate() {
            for (b, &j) in pos.iter().enumerate() {
                adjacency.set(a, b, self.adjacency.get(i, j));
            }
        }
        Ok(RoadGraph {
            node_ids: ids.to_vec(),
            sigma: self.sigma,
            kappa: self.kappa,
            adjacency,
        })
    }

    pub fn write_adjacency_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let header: Vec<&str> = std::iter::once("node_id")
            .chain(self.node_ids.iter().map(String::as_str))
            .collect();
        writeln!(out, "{}", header.join(",")).expect("vec write");
        for (i, id) in self.node_ids.iter().enumerate() {
            let row: Vec<String> = self.adjacency.row(i).iter().map(|v| v.to_string()).collect();
            writeln!(out, "{id},{}", row.join(",")).expect("vec write");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn kernel(dist: f64, sigma: f64, kappa: f64) -> f64 {
    let w = (-(dist * dist) / (sigma * sigma)).exp();
    if w < kappa {
        0.0
    } else {
        w
    }
}

/// Row-stochastic `D⁻¹A`; all-zero rows stay zero.
pub fn normalize_adjacency(a: &Tensor) -> Tensor {
    let mut out = a.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
    out
}

/// Reads `from,to,dist` rows.
pub fn read_distances(path: &Path) -> Result<Vec<Distance>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<&str> = headers.iter().map(str::trim).collect();
    if cols != ["from", "to", "dist"] {
        return Err(Error::format(path, format!("expected header from,to,dist, got {cols:?}")));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let dist = rec[2]
            .trim()
            .parse::<f64>()
            .map_err(|e| Error::format(path, format!("row {}: {e}", line + 2)))?;
        out.push(Distance {
            from: rec[0].trim().to_string(),
            to: rec[1].trim().to_string(),
            dist,
        });
    }
    Ok(out)
}

/// One node id per line; blank lines ignored.
pub fn read_node_ids(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_distances(path: &Path, distances: &[Distance]) -> Result<()> {
    let mut out = String::from("from,to,dist\n");
    for d in distances {
        out.push_str(&format!("{},{},{}\n", d.from, d.to, d.dist));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(from: &str, to: &str, dist: f64) -> Distance {
        Distance {
            from: from.into(),
            to: to.into(),
            dist,
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("n{i}")).collect()
    }

    #[test]
    fn kernel_values() {
        let dists = vec![d("n0", "n1", 1.0), d("n1", "n2", 3.0), d("n0", "n0", 0.0)];
        let g = RoadGraph::build(ids(3), &dists, 0.1, None).unwrap();
        // σ of {1, 3, 0}
        let mean = 4.0 / 3.0;
        let sigma = (((1.0 - mean) * (1.0f64 - mean) + (3.0 - mean) * (3.0 - mean) + mean * mean)
            / 3.0)
            .sqrt();
        assert!((g.sigma() - sigma).abs() < 1e-15);
        assert_eq!(g.adjacency().get(0, 0), 1.0);
        assert!((g.adjacency().get(0, 1) - (-1.0 / (sigma * sigma)).exp()).abs() < 1e-15);
        // exp(-9/σ²) ≈ 0.0067 < κ
        assert_eq!(g.adjacency().get(1, 2), 0.0);
        // directed: no reverse edge was given
        assert_eq!(g.adjacency().get(1, 0), 0.0);
    }

    #[test]
    fn distance_equal_to_sigma_gives_inverse_e() {
        let g = RoadGraph::build(ids(2), &[d("n0", "n1", 2.0)], 0.1, Some(2.0)).unwrap();
        assert!((g.adjacency().get(0, 1) - 0.367_879_441_171_442_3).abs() < 1e-15);
    }

    #[test]
    fn below_threshold_is_exactly_zero() {
        // exp(-x²) = 0.05 ⇒ x = sqrt(ln 20)
        let x = 20f64.ln().sqrt();
        let g = RoadGraph::build(ids(2), &[d("n0", "n1", x)], 0.1, Some(1.0)).unwrap();
        assert_eq!(g.adjacency().get(0, 1), 0.0);
    }

    #[test]
    fn identical_distances_need_override() {
        let dists = vec![d("n0", "n1", 5.0), d("n1", "n0", 5.0)];
        let err = RoadGraph::build(ids(2), &dists, 0.1, None).unwrap_err();
        assert!(err.to_string().contains("sigma override"));
        assert!(RoadGraph::build(ids(2), &dists, 0.1, Some(5.0)).is_ok());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_adjacency(&Tensor::eye(3)), Tensor::eye(3));
        let a = Tensor::from_rows(&[vec![2.0, 2.0, 0.0], vec![0.0, 0.0, 0.0], vec![1.0, 0.0, 3.0]])
            .unwrap();
        let n = normalize_adjacency(&a);
        assert_eq!(n.row(0), &[0.5, 0.5, 0.0]);
        assert_eq!(n.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_matches_per_row_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a = Tensor::new(vec![4, 4], data.clone()).unwrap();
        let n = normalize_adjacency(&a);
        for r in 0..4 {
            let s: f64 = data[r * 4..r * 4 + 4].iter().sum();
            for c in 0..4 {
                assert!((n.get(r, c) - data[r * 4 + c] / s).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_reorder() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let dists = vec![d("a", "b", 1.5), d("b", "c", 2.0), d("c", "a", 0.5)];
        write_distances(&p, &dists).unwrap();
        assert_eq!(read_distances(&p).unwrap(), dists);
        let ids_path = dir.path().join("ids.txt");
        std::fs::write(&ids_path, "a\nb\n\nc\n").unwrap();
        let node_ids = read_node_ids(&ids_path).unwrap();
        let g = RoadGraph::build(node_ids, &dists, 0.0, None).unwrap();
        let r = g.reorder(&["c".into(), "a".into()]).unwrap();
        assert_eq!(r.adjacency().get(0, 1), g.adjacency().get(2, 0));
        g.write_adjacency_csv(&dir.path().join("adj.csv")).unwrap();
    }

    proptest! {
        #[test]
        fn normalized_rows_sum_to_one_or_zero(data in prop::collection::vec(0.0f64..5.0, 25)) {
            let mut data = data;
            data[5..10].fill(0.0);
            let n = normalize_adjacency(&Tensor::new(vec![5, 5], data).unwrap());
            for r in 0..5 {
                let s: f64 = n.row(r).iter().sum();
                prop_assert!(s.abs() < 1e-12 || (s - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn kernel_is_monotone(a in 0.0f64..10.0, b in 0.0f64..10.0, sigma in 0.1f64..5.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(kernel(hi, sigma, 0.1) <= kernel(lo, sigma, 0.1));
        }
    }
}
