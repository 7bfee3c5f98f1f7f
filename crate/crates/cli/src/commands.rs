//! Subcommand implementations.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use llsh_core::baselines::{BallTree, KdTree};
use llsh_core::e2lsh::{E2lshIndex, E2LX_MAGIC};
use llsh_core::eval::IndexSize;
use llsh_core::llsh::{fit_model, LlshIndex, LlshModel, LLIX_MAGIC, LLM_MAGIC};
use llsh_core::neural::{Mlp, MLP_MAGIC};
use llsh_core::rng;
use llsh_core::vecdata::{self, DatasetSpec, Distribution, Format, LLSHBIN_MAGIC};
use llsh_core::Dataset;
use serde_json::json;

use crate::bench::{read_dataset, run_bench, ReportSink};
use crate::config::{Algorithm, ReportFormat, RunConfig};
use crate::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "llsh", version, about = "E2LSH, learned LSH and exact kNN benchmarks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Build an index (and train the model for learned algorithms).
    Build(BuildArgs),
    /// Answer queries against a built index as JSON lines.
    Query(QueryArgs),
    /// Run benchmark cells and write report rows.
    Bench(BenchArgs),
    /// Describe a dataset, index or model file as JSON.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub kind: Distribution,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// key=value override, applied after the file (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        for (key, value) in extra {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub algorithm: Option<Algorithm>,
    /// Index output (E2LX for e2lsh, LLIX for learned algorithms).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the trained model (LLM1) here.
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[arg(long)]
    pub index: PathBuf,
    /// Dataset the index was built over.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub topk: usize,
    /// JSON-lines output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated algorithms.
    #[arg(long)]
    pub algorithms: Option<String>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Report output; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub format: Option<ReportFormat>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub path: PathBuf,
    /// Dataset an index file was built over.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Build(a) => cmd_build(&a, stdout),
        Command::Query(a) => cmd_query(&a, stdout),
        Command::Bench(a) => cmd_bench(&a, stdout),
        Command::Inspect(a) => cmd_inspect(&a, stdout),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<()> {
    let spec = DatasetSpec::new(a.kind, a.n, a.d, a.seed);
    let ds = vecdata::generate(&spec)?;
    vecdata::write_vectors(&ds, &a.out, Format::from_path(&a.out)).map_err(|e| CliError::io(&a.out, e))
}

pub fn cmd_build(a: &BuildArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = a.config.resolve(&[
        ("data", a.data.as_ref().map(|p| p.display().to_string())),
        ("algorithms", a.algorithm.map(|x| x.to_string())),
        ("seeds", a.seed.map(|s| s.to_string())),
    ])?;
    cfg.validate()?;
    let [algorithm] = cfg.algorithms[..] else {
        return Err(CliError::Usage("build takes exactly one algorithm".into()));
    };
    let data = cfg
        .data
        .clone()
        .ok_or_else(|| CliError::Usage("build needs --data".into()))?;
    let seed = cfg.seeds[0];
    let ds = Arc::new(read_dataset(&data)?);
    if algorithm.is_learned() {
        cfg.llsh_config(algorithm).validate(ds.dim())?;
    }
    if a.out.is_none() && matches!(algorithm, Algorithm::E2lsh | Algorithm::Llsh | Algorithm::LlshEnsemble) {
        return Err(CliError::Usage(format!("{algorithm} build needs --out")));
    }
    let start = Instant::now();
    let mut report = json!({
        "algorithm": algorithm.name(),
        "dataset": data.display().to_string(),
        "n": ds.len(),
        "dim": ds.dim(),
        "seed": seed,
        "config": cfg.echo(algorithm, seed),
    });
    match algorithm {
        Algorithm::E2lsh => {
            let idx = E2lshIndex::build(ds.clone(), cfg.e2lsh_params(), seed)?;
            report["build_ns"] = json!(start.elapsed().as_nanos() as u64);
            report["index_bytes"] = json!(idx.index_size_bytes());
            report["entries"] = json!(idx.table_set().total_entries());
            let out = a.out.as_ref().expect("checked above");
            let mut w = create(out)?;
            report["file_bytes"] = json!(idx.write_to(&mut w)?);
            w.flush().map_err(|e| CliError::io(out, e))?;
        }
        Algorithm::Llsh | Algorithm::LlshEnsemble => {
            let (model, fit) = fit_model(&ds, &cfg.llsh_config(algorithm), seed)?;
            let idx = LlshIndex::build(Arc::new(model), ds.clone(), rng::derive_seed(seed, 6))?;
            report["build_ns"] = json!(start.elapsed().as_nanos() as u64);
            report["train_ns"] = json!(fit.train_ns);
            report["fitting_rate"] = json!(fit.holdout_fitting_rate);
            report["train_fitting_rate"] = json!(fit.train_fitting_rate);
            report["holdout_rows"] = json!(fit.holdout_rows);
            report["degenerate_columns"] = json!(fit.units.degenerate_columns);
            report["autoencoder_mse"] = json!([fit.autoencoder.initial_mse, fit.autoencoder.final_mse]);
            report["index_bytes"] = json!(idx.index_size_bytes());
            report["entries"] = json!(idx.table_set().total_entries());
            let out = a.out.as_ref().expect("checked above");
            let mut w = create(out)?;
            report["file_bytes"] = json!(idx.write_to(&mut w)?);
            w.flush().map_err(|e| CliError::io(out, e))?;
            if let Some(path) = &a.model_out {
                let mut w = create(path)?;
                idx.model().write_to(&mut w)?;
                w.flush().map_err(|e| CliError::io(path, e))?;
            }
        }
        Algorithm::KdTree => {
            let idx = KdTree::build(ds.clone(), cfg.leaf_size)?;
            report["build_ns"] = json!(start.elapsed().as_nanos() as u64);
            report["index_bytes"] = json!(idx.index_size_bytes());
        }
        Algorithm::BallTree => {
            let idx = BallTree::build(ds.clone(), cfg.leaf_size)?;
            report["build_ns"] = json!(start.elapsed().as_nanos() as u64);
            report["index_bytes"] = json!(idx.index_size_bytes());
        }
        Algorithm::Brute => {
            report["build_ns"] = json!(0);
            report["index_bytes"] = json!(0);
        }
    }
    writeln!(stdout, "{report}")?;
    Ok(())
}

fn read_magic(path: &Path) -> CliResult<[u8; 4]> {
    let mut f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)
        .map_err(|_| CliError::Data(format!("{}: too short to identify", path.display())))?;
    Ok(magic)
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

enum AnyIndex {
    E2lsh(E2lshIndex),
    Llsh(LlshIndex),
}

fn load_index(path: &Path, ds: Arc<Dataset>) -> CliResult<AnyIndex> {
    let magic = read_magic(path)?;
    let with_path = |e: llsh_core::Error| CliError::io(path, e);
    if &magic == E2LX_MAGIC {
        Ok(AnyIndex::E2lsh(E2lshIndex::read_from(open(path)?, ds).map_err(with_path)?))
    } else if &magic == LLIX_MAGIC {
        Ok(AnyIndex::Llsh(LlshIndex::read_from(open(path)?, ds).map_err(with_path)?))
    } else {
        Err(CliError::Data(format!("{}: not an E2LX or LLIX index", path.display())))
    }
}

/// Like [`read_dataset`], but a CSV file without rows is an empty query set.
fn read_queries(path: &Path, dim: usize) -> CliResult<Dataset> {
    if Format::from_path(path) == Format::Csv {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        if text.trim().is_empty() {
            return Ok(Dataset::empty(dim)?);
        }
    }
    read_dataset(path)
}

pub fn cmd_query(a: &QueryArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if a.topk == 0 {
        return Err(CliError::Usage("topk must be positive".into()));
    }
    let ds = Arc::new(read_dataset(&a.data)?);
    let queries = read_queries(&a.queries, ds.dim())?;
    let index = load_index(&a.index, ds.clone())?;
    if !queries.is_empty() && queries.dim() != ds.dim() {
        return Err(CliError::Data(format!(
            "{}: queries have dimension {} but the index has {}",
            a.queries.display(),
            queries.dim(),
            ds.dim()
        )));
    }
    let mut lines = String::new();
    for (i, q) in queries.rows().enumerate() {
        let neighbors = match &index {
            AnyIndex::E2lsh(idx) => idx.query(q, a.topk)?,
            AnyIndex::Llsh(idx) => idx.query(q, a.topk)?,
        };
        lines.push_str(&json!({ "query": queries.id(i), "neighbors": neighbors }).to_string());
        lines.push('\n');
    }
    match &a.out {
        Some(path) => std::fs::write(path, lines).map_err(|e| CliError::io(path, e)),
        None => Ok(stdout.write_all(lines.as_bytes())?),
    }
}

pub fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = a.config.resolve(&[
        ("algorithms", a.algorithms.clone()),
        ("data", a.data.as_ref().map(|p| p.display().to_string())),
        ("seeds", a.seeds.clone()),
        ("out", a.out.as_ref().map(|p| p.display().to_string())),
        (
            "format",
            a.format.map(|f| match f {
                ReportFormat::Csv => "csv".to_string(),
                ReportFormat::Json => "json".to_string(),
            }),
        ),
    ])?;
    cfg.validate()?;
    match &cfg.out {
        Some(path) => {
            let mut sink = ReportSink::new(create(path)?, cfg.format)?;
            run_bench(&cfg, |row| sink.write(row))?;
        }
        None => {
            let mut sink = ReportSink::new(stdout, cfg.format)?;
            run_bench(&cfg, |row| sink.write(row))?;
        }
    }
    Ok(())
}

pub fn cmd_inspect(a: &InspectArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let magic = read_magic(&a.path)?;
    let with_path = |e: llsh_core::Error| CliError::io(&a.path, e);
    let file_bytes = std::fs::metadata(&a.path).map_err(|e| CliError::io(&a.path, e))?.len();
    let info = if &magic == LLSHBIN_MAGIC {
        let ds = read_dataset(&a.path)?;
        json!({ "kind": "dataset", "n": ds.len(), "dim": ds.dim() })
    } else if &magic == MLP_MAGIC {
        let net = Mlp::<f32>::read_from(open(&a.path)?).map_err(with_path)?;
        json!({ "kind": "mlp", "widths": net.widths(), "params": net.param_count() })
    } else if &magic == LLM_MAGIC {
        let model = LlshModel::read_from(open(&a.path)?).map_err(with_path)?;
        let s = model.shape();
        json!({
            "kind": "llsh-model", "dim": s.dim, "M": s.layers, "L": s.tables, "k": s.k,
            "m1": s.m1, "m2": s.m2, "m3": s.m3, "r": s.width,
            "params": model.param_count(), "parameter_bytes": model.parameter_bytes(),
        })
    } else if &magic == E2LX_MAGIC || &magic == LLIX_MAGIC {
        let data = a
            .data
            .as_ref()
            .ok_or_else(|| CliError::Usage("inspecting an index needs --data".into()))?;
        let ds = Arc::new(read_dataset(data)?);
        match load_index(&a.path, ds)? {
            AnyIndex::E2lsh(idx) => {
                let p = idx.params();
                json!({
                    "kind": "e2lsh-index", "dim": idx.dim(), "L": p.tables, "k": p.k, "r": p.width,
                    "table_len": idx.table_len(),
                    "entries": idx.table_set().total_entries(),
                    "entries_per_table": idx.table_set().tables().iter().map(|t| t.len()).collect::<Vec<_>>(),
                    "index_bytes": idx.index_size_bytes(),
                })
            }
            AnyIndex::Llsh(idx) => {
                let s = idx.model().shape();
                json!({
                    "kind": "llsh-index", "dim": idx.dim(), "L": s.tables, "k": s.k, "r": s.width,
                    "table_len": idx.table_len(),
                    "entries": idx.table_set().total_entries(),
                    "entries_per_table": idx.table_set().tables().iter().map(|t| t.len()).collect::<Vec<_>>(),
                    "index_bytes": idx.index_size_bytes(),
                })
            }
        }
    } else {
        return Err(CliError::Data(format!("{}: unrecognized file type", a.path.display())));
    };
    let mut info = info;
    info["file_bytes"] = json!(file_bytes);
    writeln!(stdout, "{info}")?;
    Ok(())
}
