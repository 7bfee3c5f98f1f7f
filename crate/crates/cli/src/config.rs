//! Flat `key=value` run configuration with command-line overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use llsh_core::e2lsh::E2lshParams;
use llsh_core::llsh::LlshConfig;
use llsh_core::vecdata::Distribution;

use crate::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    E2lsh,
    Llsh,
    LlshEnsemble,
    Brute,
    KdTree,
    BallTree,
}

impl Algorithm {
    pub const ALL: [Algorithm; 6] = [
        Algorithm::E2lsh,
        Algorithm::Llsh,
        Algorithm::LlshEnsemble,
        Algorithm::Brute,
        Algorithm::KdTree,
        Algorithm::BallTree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::E2lsh => "e2lsh",
            Algorithm::Llsh => "llsh",
            Algorithm::LlshEnsemble => "llsh-ensemble",
            Algorithm::Brute => "brute",
            Algorithm::KdTree => "kdtree",
            Algorithm::BallTree => "balltree",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, Algorithm::Llsh | Algorithm::LlshEnsemble)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown algorithm {s:?} (expected one of e2lsh, llsh, llsh-ensemble, brute, kdtree, balltree)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    L,
    K,
    M,
    N,
    D,
}

impl FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim() {
            "L" => Ok(SweepAxis::L),
            "K" | "k" => Ok(SweepAxis::K),
            "M" => Ok(SweepAxis::M),
            "n" => Ok(SweepAxis::N),
            "d" => Ok(SweepAxis::D),
            other => Err(CliError::Usage(format!(
                "unknown sweep axis {other:?} (expected L, K, M, n or d)"
            ))),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::L => "L",
            SweepAxis::K => "K",
            SweepAxis::M => "M",
            SweepAxis::N => "n",
            SweepAxis::D => "d",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(CliError::Usage(format!("unknown report format {other:?} (csv or json)"))),
        }
    }
}

/// Every parameter a `build` or `bench` run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub kind: Distribution,
    pub n: usize,
    pub d: usize,
    pub data: Option<PathBuf>,
    pub algorithms: Vec<Algorithm>,
    pub tables: usize,
    pub k: usize,
    pub r: f64,
    pub layers: usize,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
    pub ensemble_size: usize,
    pub standardize: bool,
    pub lr: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub ae_lr: f64,
    pub ae_epochs: usize,
    pub ae_patience: usize,
    pub leaf_size: usize,
    pub topk: usize,
    pub queries: usize,
    pub seeds: Vec<u64>,
    pub sweep: Option<SweepSpec>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        let llsh = LlshConfig::default();
        let e2 = E2lshParams::default();
        Self {
            kind: Distribution::Uniform,
            n: 10_000,
            d: 100,
            data: None,
            algorithms: vec![Algorithm::E2lsh],
            tables: e2.tables,
            k: e2.k,
            r: e2.width,
            layers: llsh.layers,
            m1: llsh.m1,
            m2: llsh.m2,
            m3: llsh.m3,
            ensemble_size: 3,
            standardize: llsh.standardize_inputs,
            lr: llsh.train.lr,
            epochs: llsh.train.max_epochs,
            patience: llsh.train.patience,
            batch_size: llsh.train.batch_size,
            ae_lr: llsh.autoencoder.lr,
            ae_epochs: llsh.autoencoder.max_epochs,
            ae_patience: llsh.autoencoder.patience,
            leaf_size: llsh_core::baselines::DEFAULT_LEAF_SIZE,
            topk: 10,
            queries: 1000,
            seeds: vec![0],
            sweep: None,
            out: None,
            format: ReportFormat::Csv,
        }
    }
}

/// Keys accepted in config files and `--set` overrides.
pub const KEYS: [&str; 30] = [
    "kind",
    "n",
    "d",
    "data",
    "algorithms",
    "L",
    "k",
    "r",
    "M",
    "m1",
    "m2",
    "m3",
    "ensemble_size",
    "standardize",
    "lr",
    "epochs",
    "patience",
    "batch_size",
    "ae_lr",
    "ae_epochs",
    "ae_patience",
    "leaf_size",
    "topk",
    "queries",
    "seeds",
    "sweep_axis",
    "sweep_values",
    "out",
    "format",
    "K",
];

fn parse_num<T: FromStr>(key: &str, value: &str) -> CliResult<T> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> CliResult<Vec<T>> {
    value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> CliResult<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(CliError::Usage(format!("invalid value {other:?} for {key} (true or false)"))),
    }
}

impl RunConfig {
    /// Applies one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let key = key.trim();
        match key {
            "kind" => self.kind = value.trim().parse().map_err(|e: llsh_core::Error| CliError::Usage(e.to_string()))?,
            "n" => self.n = parse_num(key, value)?,
            "d" => self.d = parse_num(key, value)?,
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "algorithms" => {
                self.algorithms = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<CliResult<_>>()?
            }
            "L" => self.tables = parse_num(key, value)?,
            "k" | "K" => self.k = parse_num(key, value)?,
            "r" => self.r = parse_num(key, value)?,
            "M" => self.layers = parse_num(key, value)?,
            "m1" => self.m1 = parse_num(key, value)?,
            "m2" => self.m2 = parse_num(key, value)?,
            "m3" => self.m3 = parse_num(key, value)?,
            "ensemble_size" => self.ensemble_size = parse_num(key, value)?,
            "standardize" => self.standardize = parse_bool(key, value)?,
            "lr" => self.lr = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "ae_lr" => self.ae_lr = parse_num(key, value)?,
            "ae_epochs" => self.ae_epochs = parse_num(key, value)?,
            "ae_patience" => self.ae_patience = parse_num(key, value)?,
            "leaf_size" => self.leaf_size = parse_num(key, value)?,
            "topk" => self.topk = parse_num(key, value)?,
            "queries" => self.queries = parse_num(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "sweep_axis" => {
                let axis = value.parse()?;
                let values = self.sweep.take().map(|s| s.values).unwrap_or_default();
                self.sweep = Some(SweepSpec { axis, values });
            }
            "sweep_values" => {
                let values = parse_list(key, value)?;
                let axis = self.sweep.as_ref().map_or(SweepAxis::L, |s| s.axis);
                self.sweep = Some(SweepSpec { axis, values });
            }
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "format" => self.format = value.parse()?,
            other => {
                return Err(CliError::Usage(format!(
                    "unknown config key {other:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies `key=value` text: one assignment per line, `#` comments and
    /// blank lines ignored. `origin` names the source in error messages.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> CliResult<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected key=value, got {line:?}", i + 1)))?;
            self.set(key, value)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {}", i + 1, strip_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> CliResult<()> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> CliResult<()> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {pair:?} is not key=value")))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.algorithms.is_empty() {
            return Err(CliError::Usage("no algorithms selected".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("no seeds given".into()));
        }
        if self.topk == 0 {
            return Err(CliError::Usage("topk must be positive".into()));
        }
        if self.data.is_none() && (self.n == 0 || self.d == 0) {
            return Err(CliError::Usage("n and d must be positive".into()));
        }
        if self.leaf_size == 0 {
            return Err(CliError::Usage("leaf_size must be positive".into()));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(CliError::Usage(format!("sweep over {} has no values", s.axis)));
            }
            if s.values.contains(&0) {
                return Err(CliError::Usage(format!("sweep over {} needs positive values", s.axis)));
            }
            if self.data.is_some() && s.axis == SweepAxis::D {
                return Err(CliError::Usage("cannot sweep d over a dataset file".into()));
            }
        }
        for cell in self.cells() {
            cell.e2lsh_params().validate()?;
            if self.algorithms.iter().any(|a| a.is_learned()) {
                if let Some(d) = cell.known_dim() {
                    for a in self.algorithms.iter().filter(|a| a.is_learned()) {
                        cell.llsh_config(*a).validate(d)?;
                    }
                }
            }
        }
        if self.algorithms.contains(&Algorithm::LlshEnsemble) && self.ensemble_size < 2 {
            return Err(CliError::Usage(format!(
                "llsh-ensemble needs ensemble_size >= 2, got {}",
                self.ensemble_size
            )));
        }
        Ok(())
    }

    /// One configuration per sweep value (or just `self`), sweep removed.
    pub fn cells(&self) -> Vec<RunConfig> {
        let Some(sweep) = &self.sweep else {
            return vec![RunConfig {
                sweep: None,
                ..self.clone()
            }];
        };
        sweep
            .values
            .iter()
            .map(|&v| {
                let mut c = RunConfig {
                    sweep: None,
                    ..self.clone()
                };
                match sweep.axis {
                    SweepAxis::L => c.tables = v,
                    SweepAxis::K => c.k = v,
                    SweepAxis::M => c.layers = v,
                    SweepAxis::N => c.n = v,
                    SweepAxis::D => c.d = v,
                }
                c
            })
            .collect()
    }

    fn known_dim(&self) -> Option<usize> {
        self.data.is_none().then_some(self.d)
    }

    pub fn e2lsh_params(&self) -> E2lshParams {
        E2lshParams {
            tables: self.tables,
            k: self.k,
            width: self.r,
            table_len: None,
        }
    }

    pub fn llsh_config(&self, algorithm: Algorithm) -> LlshConfig {
        let base = LlshConfig::default();
        LlshConfig {
            layers: self.layers,
            tables: self.tables,
            k: self.k,
            m1: self.m1,
            m2: self.m2,
            m3: self.m3,
            width: self.r,
            train: llsh_core::neural::TrainConfig {
                lr: self.lr,
                batch_size: self.batch_size,
                max_epochs: self.epochs,
                patience: self.patience,
                seed: 0,
            },
            autoencoder: llsh_core::neural::TrainConfig {
                lr: self.ae_lr,
                max_epochs: self.ae_epochs,
                patience: self.ae_patience,
                ..base.autoencoder
            },
            ensemble_size: if algorithm == Algorithm::LlshEnsemble {
                self.ensemble_size
            } else {
                1
            },
            standardize_inputs: self.standardize,
            ..base
        }
    }

    /// Canonical `key=value` echo of one cell for one seed, in [`KEYS`]
    /// order. Feeding it back through [`RunConfig::apply_text`] (with `;`
    /// replaced by newlines) reproduces the cell.
    pub fn echo(&self, algorithm: Algorithm, seed: u64) -> String {
        let mut parts = vec![format!("algorithms={algorithm}")];
        match &self.data {
            Some(p) => parts.push(format!("data={}", p.display())),
            None => parts.push(format!("kind={}", self.kind)),
        }
        parts.extend([
            format!("n={}", self.n),
            format!("d={}", self.d),
            format!("L={}", self.tables),
            format!("k={}", self.k),
            format!("r={}", self.r),
            format!("topk={}", self.topk),
            format!("queries={}", self.queries),
            format!("seeds={seed}"),
        ]);
        match algorithm {
            Algorithm::Llsh | Algorithm::LlshEnsemble => {
                parts.extend([
                    format!("M={}", self.layers),
                    format!("m1={}", self.m1),
                    format!("m2={}", self.m2),
                    format!("m3={}", self.m3),
                    format!("standardize={}", self.standardize),
                    format!("lr={}", self.lr),
                    format!("epochs={}", self.epochs),
                    format!("patience={}", self.patience),
                    format!("batch_size={}", self.batch_size),
                    format!("ae_lr={}", self.ae_lr),
                    format!("ae_epochs={}", self.ae_epochs),
                    format!("ae_patience={}", self.ae_patience),
                ]);
                if algorithm == Algorithm::LlshEnsemble {
                    parts.push(format!("ensemble_size={}", self.ensemble_size));
                }
            }
            Algorithm::KdTree | Algorithm::BallTree => parts.push(format!("leaf_size={}", self.leaf_size)),
            Algorithm::E2lsh | Algorithm::Brute => {}
        }
        parts.join(";")
    }
}

fn strip_prefix(e: &CliError) -> String {
    match e {
        CliError::Usage(m) | CliError::Data(m) => m.clone(),
    }
}
