//! Metrics and oracles: fitting rate, recall@k, the p-stable collision
//! probability, timing and index size accounting.

use std::fmt;
use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{brute_knn, BallTree, KdTree};
use crate::e2lsh::E2lshIndex;
use crate::error::{Error, Result};
use crate::knn::Neighbor;
use crate::llsh::{HashMatrix, LlshIndex, LlshModel};
use crate::neural::Mlp;
use crate::quadrature::adaptive_simpson;
use crate::scalar::Scalar;
use crate::vecdata::Dataset;

/// Fraction of entries where `pred` and `labels` agree exactly.
pub fn fitting_rate(pred: &HashMatrix, labels: &HashMatrix) -> Result<f64> {
    if pred.rows() != labels.rows() || pred.cols() != labels.cols() {
        return Err(Error::ShapeMismatch(format!(
            "predictions {}x{} against labels {}x{}",
            pred.rows(),
            pred.cols(),
            labels.rows(),
            labels.cols()
        )));
    }
    let total = pred.data().len();
    if total == 0 {
        return Ok(1.0);
    }
    let same = pred.data().iter().zip(labels.data()).filter(|(a, b)| a == b).count();
    Ok(same as f64 / total as f64)
}

/// Exact neighbors of each query, sorted by `(distance, id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    depth: usize,
    neighbors: Vec<Vec<Neighbor>>,
}

impl GroundTruth {
    pub fn compute<T: Scalar, Q: Scalar>(ds: &Dataset<T>, queries: &Dataset<Q>, depth: usize) -> Result<Self> {
        Error::check_dim(ds.dim(), queries.dim())?;
        let neighbors = (0..queries.len())
            .into_par_iter()
            .map(|i| brute_knn(ds, queries.row(i), depth))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { depth, neighbors })
    }

    pub fn from_neighbors(depth: usize, neighbors: Vec<Vec<Neighbor>>) -> Self {
        Self { depth, neighbors }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, query: usize) -> &[Neighbor] {
        &self.neighbors[query]
    }
}

/// `|returned ∩ true top-k| / k`, averaged over queries. Only the first `k`
/// returned ids count; missing results are misses.
pub fn recall_at_k(results: &[Vec<Neighbor>], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 || k > truth.depth {
        return Err(Error::InvalidConfig(format!(
            "k = {k} must be in 1..={} (ground truth depth)",
            truth.depth
        )));
    }
    if results.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} result lists for {} queries",
            results.len(),
            truth.len()
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = results
        .iter()
        .zip(&truth.neighbors)
        .map(|(got, want)| {
            let want: Vec<u32> = want.iter().take(k).map(|n| n.id).collect();
            let hits = got.iter().take(k).filter(|n| want.contains(&n.id)).count();
            hits as f64 / k as f64
        })
        .sum();
    Ok(total / results.len() as f64)
}

/// Stable distribution of the projection vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    /// p = 1.
    Cauchy,
    /// p = 2.
    Gaussian,
}

impl Stability {
    /// Density of `|X|` for a standard p-stable `X`.
    pub fn abs_density(self, x: f64) -> f64 {
        match self {
            Stability::Cauchy => 2.0 / (std::f64::consts::PI * (1.0 + x * x)),
            Stability::Gaussian => 2.0 / (2.0 * std::f64::consts::PI).sqrt() * (-x * x / 2.0).exp(),
        }
    }
}

pub const COLLISION_TOLERANCE: f64 = 1e-9;

/// Probability that one hash function `floor((a·v + b) / r)` maps two points
/// at distance `c` to the same value:
/// `∫_0^r (1/c) f(t/c) (1 - t/r) dt`, where `f` is the density of `|X|`.
///
/// Evaluated in the scaled variable `s = t/c` on geometrically growing
/// panels, so both `c << r` and heavy Cauchy tails are handled.
pub fn collision_prob(c: f64, r: f64, p: Stability) -> Result<f64> {
    if !(c > 0.0 && c.is_finite() && r > 0.0 && r.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "collision probability needs c > 0 and r > 0 (got c={c}, r={r})"
        )));
    }
    let upper = r / c;
    let integrand = |s: f64| p.abs_density(s) * (1.0 - s / upper);
    let mut edges = vec![0.0];
    let mut e = 1.0f64.min(upper);
    while e < upper {
        edges.push(e);
        e *= 2.0;
    }
    edges.push(upper);
    edges.dedup();
    let panels = (edges.len() - 1) as f64;
    // |∫ dt| = c |∫ ds|, so the tolerance carries over unchanged in s
    let total: f64 = edges
        .windows(2)
        .map(|w| adaptive_simpson(integrand, w[0], w[1], COLLISION_TOLERANCE / panels))
        .sum();
    Ok(total.clamp(0.0, 1.0))
}

/// Median wall time of `reps` runs after `warmup` untimed runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub median_ns: u64,
    pub reps: usize,
}

pub const MIN_TIMING_REPS: usize = 5;

/// Runs `thunk` once untimed, then `reps` (at least 5) timed times on the
/// calling thread and reports the median.
pub fn time_op<R>(reps: usize, mut thunk: impl FnMut() -> R) -> Timing {
    let reps = reps.max(MIN_TIMING_REPS);
    std::hint::black_box(thunk());
    let mut samples: Vec<u64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            std::hint::black_box(thunk());
            start.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    Timing {
        median_ns: samples[reps / 2],
        reps,
    }
}

/// Deterministic byte accounting of a built artifact: parameter bytes at
/// their stored width, 12 bytes per table entry (8-byte fingerprint,
/// 4-byte id) and a 4-byte slot directory word per slot plus one.
pub trait IndexSize {
    fn index_size_bytes(&self) -> u64;
}

impl<T: Scalar> IndexSize for E2lshIndex<T> {
    fn index_size_bytes(&self) -> u64 {
        self.coefficient_bytes() + self.table_set().table_bytes()
    }
}

impl<T: Scalar> IndexSize for KdTree<T> {
    fn index_size_bytes(&self) -> u64 {
        self.size_bytes()
    }
}

impl<T: Scalar> IndexSize for BallTree<T> {
    fn index_size_bytes(&self) -> u64 {
        self.size_bytes()
    }
}

impl<T: Scalar> IndexSize for Mlp<T> {
    /// Parameters stored as `f32`.
    fn index_size_bytes(&self) -> u64 {
        4 * self.param_count() as u64
    }
}

impl IndexSize for LlshModel {
    fn index_size_bytes(&self) -> u64 {
        self.parameter_bytes()
    }
}

impl IndexSize for LlshIndex {
    fn index_size_bytes(&self) -> u64 {
        self.model().parameter_bytes() + self.table_set().coefficient_bytes() + self.table_set().table_bytes()
    }
}

/// One benchmark measurement for an (algorithm, dataset, config, seed) cell.
///
/// Optional metrics are `None` when they do not apply (e.g. fitting rate
/// for exact baselines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub algorithm: String,
    pub dataset: String,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
    pub topk: usize,
    pub queries: usize,
    pub recall: Option<f64>,
    pub fitting_rate: Option<f64>,
    pub build_ns: u64,
    pub train_ns: Option<u64>,
    pub query_ns: Option<u64>,
    pub hash_ns: Option<u64>,
    pub index_bytes: u64,
    pub mean_candidates: Option<f64>,
    pub config: String,
}

pub const REPORT_VERSION: u32 = 1;

impl BenchReport {
    pub const COLUMNS: [&'static str; 16] = [
        "algorithm",
        "dataset",
        "n",
        "dim",
        "seed",
        "topk",
        "queries",
        "recall",
        "fitting_rate",
        "build_ns",
        "train_ns",
        "query_ns",
        "hash_ns",
        "index_bytes",
        "mean_candidates",
        "config",
    ];

    /// `#` comment line naming the format version and columns, followed by
    /// the CSV header.
    pub fn csv_preamble() -> String {
        format!(
            "# llsh-bench-report v{REPORT_VERSION}: {}\n{}\n",
            Self::COLUMNS.join(","),
            Self::COLUMNS.join(",")
        )
    }

    /// One CSV line (with trailing newline) in [`BenchReport::COLUMNS`] order.
    pub fn to_csv_row(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.serialize(self)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn write_csv_row<W: Write>(&self, mut w: W) -> Result<()> {
        // one write per row so concurrent writers never interleave a row
        w.write_all(self.to_csv_row()?.as_bytes())?;
        Ok(())
    }

    /// Parses rows written by [`BenchReport::to_csv_row`]; `#` lines and the
    /// header are skipped.
    pub fn parse_csv(text: &str) -> Result<Vec<BenchReport>> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        r.deserialize().map(|row| row.map_err(Error::from)).collect()
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        write!(
            f,
            "{} on {} (seed {}): recall@{}={} fit={} build={}ns index={}B",
            self.algorithm,
            self.dataset,
            self.seed,
            self.topk,
            opt(self.recall),
            opt(self.fitting_rate),
            self.build_ns,
            self.index_bytes
        )
    }
}
