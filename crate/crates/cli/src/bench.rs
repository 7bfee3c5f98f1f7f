//! Benchmark cells: build an index per algorithm on a dataset with a
//! held-out query set, score it against brute force and emit one report row.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use llsh_core::baselines::{BallTree, BruteIndex, KdTree};
use llsh_core::e2lsh::E2lshIndex;
use llsh_core::eval::{recall_at_k, time_op, BenchReport, GroundTruth, IndexSize};
use llsh_core::llsh::{fit_model, LlshIndex};
use llsh_core::rng;
use llsh_core::vecdata::{self, DatasetSpec, Format};
use llsh_core::{Dataset, Neighbor};
use log::info;

use crate::config::{Algorithm, ReportFormat, RunConfig};
use crate::{CliError, CliResult};

/// Repetitions for hashing-time medians.
pub const HASH_TIMING_REPS: usize = 5;

/// Index points and held-out queries of one (cell, seed) pair.
pub struct Workload {
    pub label: String,
    pub base: Arc<Dataset>,
    pub queries: Dataset,
}

/// Loads or generates the data for `cell` and holds out `queries` rows.
pub fn workload(cell: &RunConfig, seed: u64) -> CliResult<Workload> {
    let split_seed = rng::derive_seed(seed, 0x5eed);
    let (all, label) = match &cell.data {
        Some(path) => {
            let ds = read_dataset(path)?;
            let take = (cell.n + cell.queries).min(ds.len());
            let rows: Vec<usize> = (0..take).collect();
            let label = path.display().to_string();
            (if take < ds.len() { ds.subset(&rows) } else { ds }, label)
        }
        None => {
            let spec = DatasetSpec::new(cell.kind, cell.n + cell.queries, cell.d, seed);
            let label = format!("{}(n={},d={})", cell.kind, cell.n, cell.d);
            (vecdata::generate(&spec)?, label)
        }
    };
    if cell.queries >= all.len() {
        return Err(CliError::Data(format!(
            "{label}: {} rows cannot supply {} held-out queries",
            all.len(),
            cell.queries
        )));
    }
    let (base, queries) = vecdata::split_off(&all, cell.queries, split_seed)?;
    Ok(Workload {
        label,
        base: Arc::new(base),
        queries,
    })
}

pub fn read_dataset(path: &Path) -> CliResult<Dataset> {
    if !path.exists() {
        return Err(CliError::Data(format!("{}: no such file", path.display())));
    }
    vecdata::read_vectors(path, Format::from_path(path)).map_err(|e| CliError::io(path, e))
}

/// Measurements of one algorithm on one workload.
struct Outcome {
    results: Vec<Vec<Neighbor>>,
    build_ns: u64,
    train_ns: Option<u64>,
    query_ns: u64,
    hash_ns: Option<u64>,
    index_bytes: u64,
    fitting_rate: Option<f64>,
    mean_candidates: Option<f64>,
}

fn answer(
    queries: &Dataset,
    mut query: impl FnMut(&[f32]) -> llsh_core::Result<Vec<Neighbor>>,
) -> CliResult<(Vec<Vec<Neighbor>>, u64)> {
    let start = Instant::now();
    let results = queries.rows().map(&mut query).collect::<llsh_core::Result<Vec<_>>>()?;
    let per_query = start.elapsed().as_nanos() as u64 / queries.len().max(1) as u64;
    Ok((results, per_query))
}

fn mean_candidates(
    queries: &Dataset,
    candidates: impl Fn(&[f32]) -> llsh_core::Result<Vec<usize>>,
) -> CliResult<f64> {
    let mut total = 0usize;
    for q in queries.rows() {
        total += candidates(q)?.len();
    }
    Ok(total as f64 / queries.len().max(1) as f64)
}

fn run_algorithm(cell: &RunConfig, algorithm: Algorithm, w: &Workload, seed: u64) -> CliResult<Outcome> {
    let topk = cell.topk;
    let outcome = match algorithm {
        Algorithm::Brute => {
            let start = Instant::now();
            let idx = BruteIndex::new(w.base.clone());
            let build_ns = start.elapsed().as_nanos() as u64;
            let (results, query_ns) = answer(&w.queries, |q| idx.query(q, topk))?;
            Outcome {
                results,
                build_ns,
                train_ns: None,
                query_ns,
                hash_ns: None,
                index_bytes: 0,
                fitting_rate: None,
                mean_candidates: Some(w.base.len() as f64),
            }
        }
        Algorithm::KdTree => {
            let start = Instant::now();
            let idx = KdTree::build(w.base.clone(), cell.leaf_size)?;
            let build_ns = start.elapsed().as_nanos() as u64;
            let (results, query_ns) = answer(&w.queries, |q| idx.query(q, topk))?;
            Outcome {
                results,
                build_ns,
                train_ns: None,
                query_ns,
                hash_ns: None,
                index_bytes: idx.index_size_bytes(),
                fitting_rate: None,
                mean_candidates: None,
            }
        }
        Algorithm::BallTree => {
            let start = Instant::now();
            let idx = BallTree::build(w.base.clone(), cell.leaf_size)?;
            let build_ns = start.elapsed().as_nanos() as u64;
            let (results, query_ns) = answer(&w.queries, |q| idx.query(q, topk))?;
            Outcome {
                results,
                build_ns,
                train_ns: None,
                query_ns,
                hash_ns: None,
                index_bytes: idx.index_size_bytes(),
                fitting_rate: None,
                mean_candidates: None,
            }
        }
        Algorithm::E2lsh => {
            let start = Instant::now();
            let idx = E2lshIndex::build(w.base.clone(), cell.e2lsh_params(), seed)?;
            let build_ns = start.elapsed().as_nanos() as u64;
            let (results, query_ns) = answer(&w.queries, |q| idx.query(q, topk))?;
            let hash = time_op(HASH_TIMING_REPS, || idx.hash_all(&w.queries));
            Outcome {
                results,
                build_ns,
                train_ns: None,
                query_ns,
                hash_ns: Some(hash.median_ns),
                index_bytes: idx.index_size_bytes(),
                fitting_rate: None,
                mean_candidates: Some(mean_candidates(&w.queries, |q| idx.candidates(q))?),
            }
        }
        Algorithm::Llsh | Algorithm::LlshEnsemble => {
            let cfg = cell.llsh_config(algorithm);
            let start = Instant::now();
            let (model, report) = fit_model(&w.base, &cfg, seed)?;
            let idx = LlshIndex::build(Arc::new(model), w.base.clone(), rng::derive_seed(seed, 6))?;
            let build_ns = start.elapsed().as_nanos() as u64;
            let (results, query_ns) = answer(&w.queries, |q| idx.query(q, topk))?;
            let model = idx.model().clone();
            let hash = time_op(HASH_TIMING_REPS, || model.hash_all(&w.queries));
            Outcome {
                results,
                build_ns,
                train_ns: Some(report.train_ns),
                query_ns,
                hash_ns: Some(hash.median_ns),
                index_bytes: idx.index_size_bytes(),
                fitting_rate: Some(report.holdout_fitting_rate),
                mean_candidates: Some(mean_candidates(&w.queries, |q| idx.candidates(q))?),
            }
        }
    };
    Ok(outcome)
}

/// Runs one algorithm on a prepared workload and scores it.
pub fn run_cell(
    cell: &RunConfig,
    algorithm: Algorithm,
    w: &Workload,
    truth: &GroundTruth,
    seed: u64,
) -> CliResult<BenchReport> {
    info!("{algorithm} on {} (seed {seed})", w.label);
    let o = run_algorithm(cell, algorithm, w, seed)?;
    let recall = recall_at_k(&o.results, truth, cell.topk)?;
    Ok(BenchReport {
        algorithm: algorithm.name().to_string(),
        dataset: w.label.clone(),
        n: w.base.len(),
        dim: w.base.dim(),
        seed,
        topk: cell.topk,
        queries: w.queries.len(),
        recall: Some(recall),
        fitting_rate: o.fitting_rate,
        build_ns: o.build_ns,
        train_ns: o.train_ns,
        query_ns: Some(o.query_ns),
        hash_ns: o.hash_ns,
        index_bytes: o.index_bytes,
        mean_candidates: o.mean_candidates,
        config: cell.echo(algorithm, seed),
    })
}

/// Every (cell, seed, algorithm) combination in order; rows are handed to
/// `emit` as soon as they are complete.
pub fn run_bench(cfg: &RunConfig, mut emit: impl FnMut(&BenchReport) -> CliResult<()>) -> CliResult<Vec<BenchReport>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for cell in cfg.cells() {
        for &seed in &cfg.seeds {
            let w = workload(&cell, seed)?;
            if cell.data.is_some() {
                for a in cfg.algorithms.iter().filter(|a| a.is_learned()) {
                    cell.llsh_config(*a).validate(w.base.dim())?;
                }
            }
            let truth = GroundTruth::compute(&w.base, &w.queries, cell.topk)?;
            for &algorithm in &cfg.algorithms {
                let row = run_cell(&cell, algorithm, &w, &truth, seed)?;
                emit(&row)?;
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

/// Writes complete rows to `out` in the chosen format.
pub struct ReportSink<W: Write> {
    out: W,
    format: ReportFormat,
}

impl<W: Write> ReportSink<W> {
    pub fn new(mut out: W, format: ReportFormat) -> CliResult<Self> {
        if format == ReportFormat::Csv {
            out.write_all(BenchReport::csv_preamble().as_bytes())?;
            out.flush()?;
        }
        Ok(Self { out, format })
    }

    pub fn write(&mut self, row: &BenchReport) -> CliResult<()> {
        let line = match self.format {
            ReportFormat::Csv => row.to_csv_row()?,
            ReportFormat::Json => row.to_json()? + "\n",
        };
        self.out.write_all(line.as_bytes())?;
        self.out.flush()?;
        Ok(())
    }
}
