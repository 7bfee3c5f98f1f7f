//! Datasets, synthetic generators and vector file I/O.
//!
//! Two on-disk formats are supported:
//!
//! * `llshbin`: magic `LLSH`, `u16` version 1, `u32` count, `u32` dim, then
//!   `count * dim` little-endian `f32` values in row-major order.
//! * CSV: one vector per line, comma separated decimal floats, no header.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution as _, Exp, LogNormal, Normal, StandardNormal};

use crate::error::{Error, Location, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::serial::{BinReader, BinWriter};

pub const LLSHBIN_MAGIC: &[u8; 4] = b"LLSH";
pub const LLSHBIN_VERSION: u16 = 1;
/// Header bytes of an `llshbin` file.
pub const LLSHBIN_HEADER_LEN: u64 = 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
enum RowLookup {
    /// ids are exactly `0..n` in row order.
    Identity,
    Map(HashMap<u32, u32>),
}

/// `n` vectors of dimension `dim`, each with a unique id.
///
/// Values are stored row-major. Datasets are immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    dim: usize,
    values: Vec<T>,
    ids: Vec<u32>,
    lookup: RowLookup,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(dim: usize, values: Vec<T>, ids: Vec<u32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("dimension must be positive".into()));
        }
        if values.len() != ids.len() * dim {
            return Err(Error::InvalidDataset(format!(
                "{} values do not form {} rows of dimension {dim}",
                values.len(),
                ids.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!(
                "non-finite value in row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        let lookup = if ids.iter().enumerate().all(|(i, &id)| id as usize == i) {
            RowLookup::Identity
        } else {
            let mut map = HashMap::with_capacity(ids.len());
            for (row, &id) in ids.iter().enumerate() {
                if map.insert(id, row as u32).is_some() {
                    return Err(Error::InvalidDataset(format!("duplicate id {id}")));
                }
            }
            RowLookup::Map(map)
        };
        Ok(Self {
            dim,
            values,
            ids,
            lookup,
        })
    }

    /// Rows with ids `0..n`.
    pub fn from_flat(dim: usize, values: Vec<T>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidDataset("dimension must be positive".into()));
        }
        let n = values.len() / dim;
        Self::new(dim, values, (0..n as u32).collect())
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::InvalidDataset(format!(
                    "row {i} has {} values, expected {dim}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::from_flat(dim, values)
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new(), Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn id(&self, row: usize) -> u32 {
        self.ids[row]
    }

    pub fn row_of_id(&self, id: u32) -> Option<usize> {
        match &self.lookup {
            RowLookup::Identity => ((id as usize) < self.ids.len()).then_some(id as usize),
            RowLookup::Map(m) => m.get(&id).map(|&r| r as usize),
        }
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    /// Selected rows, keeping their ids.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut values = Vec::with_capacity(rows.len() * self.dim);
        let mut ids = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.row(r));
            ids.push(self.ids[r]);
        }
        Self::new(self.dim, values, ids).expect("subset of a valid dataset")
    }

    /// New values of a possibly different dimension, same ids.
    pub fn with_values<U: Scalar>(&self, dim: usize, values: Vec<U>) -> Result<Dataset<U>> {
        Dataset::new(dim, values, self.ids.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        let values = self.values.iter().map(|&v| U::of_f64(v.as_f64())).collect();
        Dataset {
            dim: self.dim,
            values,
            ids: self.ids.clone(),
            lookup: self.lookup.clone(),
        }
    }
}

/// Per-coordinate distribution of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distribution {
    /// Uniform on [0, 1).
    Uniform,
    /// Standard normal.
    Normal,
    /// exp(N(0, 1)).
    Lognormal,
    /// Exponential with rate 1.
    Exponential,
}

impl Distribution {
    pub const ALL: [Distribution; 4] = [
        Distribution::Uniform,
        Distribution::Normal,
        Distribution::Lognormal,
        Distribution::Exponential,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Distribution::Uniform => "uniform",
            Distribution::Normal => "normal",
            Distribution::Lognormal => "lognormal",
            Distribution::Exponential => "exponential",
        }
    }

    /// Analytic CDF of one coordinate.
    pub fn cdf(self, x: f64) -> f64 {
        match self {
            Distribution::Uniform => x.clamp(0.0, 1.0),
            Distribution::Normal => normal_cdf(x),
            Distribution::Lognormal => {
                if x <= 0.0 {
                    0.0
                } else {
                    normal_cdf(x.ln())
                }
            }
            Distribution::Exponential => {
                if x <= 0.0 {
                    0.0
                } else {
                    1.0 - (-x).exp()
                }
            }
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distribution::ALL
            .into_iter()
            .find(|d| d.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown distribution {s:?} (expected uniform, normal, lognormal or exponential)"
                ))
            })
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSpec {
    pub kind: Distribution,
    pub n: usize,
    pub dim: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(kind: Distribution, n: usize, dim: usize, seed: u64) -> Self {
        Self { kind, n, dim, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "dataset spec needs n >= 1 and d >= 1 (got n={}, d={})",
                self.n, self.dim
            )));
        }
        if self.n > u32::MAX as usize {
            return Err(Error::InvalidConfig("n exceeds the u32 id space".into()));
        }
        Ok(())
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(n={},d={},seed={})", self.kind, self.n, self.dim, self.seed)
    }
}

/// I.i.d. coordinates drawn from `spec.kind`, ids `0..n`.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = rng::seeded(spec.seed);
    let total = spec.n * spec.dim;
    let values: Vec<f32> = match spec.kind {
        Distribution::Uniform => (0..total).map(|_| rng.random::<f64>() as f32).collect(),
        Distribution::Normal => (0..total)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                x as f32
            })
            .collect(),
        Distribution::Lognormal => {
            let dist = LogNormal::new(0.0, 1.0).expect("valid lognormal");
            (0..total).map(|_| dist.sample(&mut rng) as f32).collect()
        }
        Distribution::Exponential => {
            let dist = Exp::new(1.0).expect("valid exponential");
            (0..total).map(|_| dist.sample(&mut rng) as f32).collect()
        }
    };
    Dataset::from_flat(spec.dim, values)
}

/// Gaussian clusters around the given centers, `per_cluster` points each.
pub fn gaussian_clusters(centers: &[Vec<f32>], per_cluster: usize, sigma: f64, seed: u64) -> Result<Dataset> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut rng = rng::seeded(seed);
    let mut rows = Vec::with_capacity(centers.len() * per_cluster);
    for c in centers {
        for _ in 0..per_cluster {
            rows.push(c.iter().map(|&x| (x as f64 + normal.sample(&mut rng)) as f32).collect());
        }
    }
    Dataset::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    LlshBin,
    Csv,
}

impl Format {
    /// Guess from the file extension; anything but `.csv` is `llshbin`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::LlshBin,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "llshbin" | "bin" => Ok(Format::LlshBin),
            "csv" => Ok(Format::Csv),
            other => Err(Error::InvalidConfig(format!("unknown vector format {other:?}"))),
        }
    }
}

pub fn read_vectors(path: &Path, format: Format) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let reader = BufReader::new(file);
    match format {
        Format::LlshBin => read_llshbin(reader),
        Format::Csv => read_csv(reader),
    }
}

pub fn write_vectors(ds: &Dataset, path: &Path, format: Format) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        Format::LlshBin => write_llshbin(ds, &mut w)?,
        Format::Csv => write_csv(ds, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_llshbin<R: Read>(reader: R) -> Result<Dataset> {
    let mut r = BinReader::new(reader);
    r.magic(LLSHBIN_MAGIC)?;
    r.version(LLSHBIN_VERSION)?;
    let count = r.u32()? as usize;
    let dim_at = r.offset();
    let dim = r.u32()? as usize;
    if dim == 0 {
        return Err(Error::parse(Location::Byte(dim_at), "dimension must be positive"));
    }
    let mut values = Vec::with_capacity(count.saturating_mul(dim).min(1 << 28));
    for _ in 0..count * dim {
        let at = r.offset();
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(Error::parse(Location::Byte(at), "non-finite value"));
        }
        values.push(v);
    }
    r.finish()?;
    Dataset::from_flat(dim, values)
}

pub fn write_llshbin<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = BinWriter::new(writer);
    w.bytes(LLSHBIN_MAGIC)?;
    w.u16(LLSHBIN_VERSION)?;
    w.u32(ds.len() as u32)?;
    w.u32(ds.dim() as u32)?;
    let mut buf = Vec::with_capacity(ds.values().len() * 4);
    for v in ds.values() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.bytes(&buf)?;
    Ok(())
}

pub fn read_csv<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut dim = None;
    let mut values = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut width = 0;
        for field in line.split(',') {
            let field = field.trim();
            let v: f32 = field.parse().map_err(|_| {
                Error::parse(Location::Line(line_no), format!("not a number: {field:?}"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(Location::Line(line_no), "non-finite value"));
            }
            values.push(v);
            width += 1;
        }
        match dim {
            None => dim = Some(width),
            Some(d) if d != width => {
                return Err(Error::parse(
                    Location::Line(line_no),
                    format!("row has {width} fields, expected {d}"),
                ))
            }
            Some(_) => {}
        }
    }
    let dim = dim.ok_or_else(|| Error::InvalidDataset("csv input has no rows".into()))?;
    Dataset::from_flat(dim, values)
}

pub fn write_csv<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    let mut line = String::new();
    for row in ds.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            // Display is the shortest representation that parses back exactly.
            line.push_str(&v.to_string());
        }
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Random partition with `holdout_len` rows in the second part. Both parts
/// keep the original row order and ids.
pub fn split_off<T: Scalar>(ds: &Dataset<T>, holdout_len: usize, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if holdout_len > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot hold out {holdout_len} of {} rows",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng::seeded(seed));
    let (held, kept) = order.split_at_mut(holdout_len);
    held.sort_unstable();
    kept.sort_unstable();
    Ok((ds.subset(kept), ds.subset(held)))
}

/// Random partition with `round(fraction * n)` rows held out.
pub fn split<T: Scalar>(ds: &Dataset<T>, holdout_fraction: f64, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "holdout fraction must be in (0, 1), got {holdout_fraction}"
        )));
    }
    if ds.len() < 2 {
        return Err(Error::InvalidDataset("split needs at least two points".into()));
    }
    let holdout = (holdout_fraction * ds.len() as f64).round() as usize;
    split_off(ds, holdout, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(values: &[f32]) -> (f64, f64) {
        let n = values.len() as f64;
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
    fn ks_statistic(samples: &[f32], cdf: impl Fn(f64) -> f64) -> f64 {
        let mut s: Vec<f64> = samples.iter().map(|&v| v as f64).collect();
        s.sort_by(f64::total_cmp);
        let n = s.len() as f64;
        s.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn uniform_moments_match_table() {
        let ds = generate(&DatasetSpec::new(Distribution::Uniform, 100_000, 100, 3)).unwrap();
        let (m, s) = moments(ds.values());
        assert!((m - 0.5).abs() < 0.01, "mean {m}");
        assert!((s - 0.29).abs() < 0.01, "std {s}");
    }

    #[test]
    fn lognormal_moments_match_table() {
        let ds = generate(&DatasetSpec::new(Distribution::Lognormal, 100_000, 100, 3)).unwrap();
        let (m, s) = moments(ds.values());
        assert!((m - 1.65).abs() < 0.05, "mean {m}");
        assert!((s - 2.16).abs() < 0.05, "std {s}");
    }

    #[test]
    fn normal_and_exponential_moments() {
        let n = generate(&DatasetSpec::new(Distribution::Normal, 20_000, 50, 1)).unwrap();
        let (m, s) = moments(n.values());
        assert!(m.abs() < 0.01 && (s - 1.0).abs() < 0.01);
        let e = generate(&DatasetSpec::new(Distribution::Exponential, 20_000, 50, 1)).unwrap();
        let (m, s) = moments(e.values());
        assert!((m - 1.0).abs() < 0.02 && (s - 1.0).abs() < 0.02);
    }

    #[test]
    fn generators_pass_ks() {
        for kind in Distribution::ALL {
            let ds = generate(&DatasetSpec::new(kind, 100_000, 1, 11)).unwrap();
            let ks = ks_statistic(ds.values(), |x| kind.cdf(x));
            assert!(ks < 0.01, "{kind}: KS statistic {ks}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = DatasetSpec::new(Distribution::Exponential, 100, 7, 99);
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = DatasetSpec { seed: 100, ..spec };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(generate(&DatasetSpec::new(Distribution::Uniform, 0, 3, 1)).is_err());
        assert!(generate(&DatasetSpec::new(Distribution::Uniform, 3, 0, 1)).is_err());
        assert!("gamma".parse::<Distribution>().is_err());
        assert_eq!("Normal".parse::<Distribution>().unwrap(), Distribution::Normal);
    }

    #[test]
    fn dataset_rejects_bad_input() {
        assert!(Dataset::<f32>::new(2, vec![1.0, f32::NAN], vec![0]).is_err());
        assert!(Dataset::<f32>::new(2, vec![1.0, 2.0, 3.0, 4.0], vec![5, 5]).is_err());
        assert!(Dataset::<f32>::new(2, vec![1.0], vec![0]).is_err());
        let ds = Dataset::<f32>::new(1, vec![1.0, 2.0], vec![9, 4]).unwrap();
        assert_eq!(ds.row_of_id(4), Some(1));
        assert_eq!(ds.row_of_id(0), None);
    }

    #[test]
    fn csv_width_mismatch_names_line() {
        let mut text = String::new();
        text.push_str(&vec!["1.0"; 100].join(","));
        text.push('\n');
        text.push_str(&vec!["1.0"; 99].join(","));
        text.push('\n');
        match read_csv(text.as_bytes()) {
            Err(Error::Parse { at: Location::Line(2), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_header_and_non_finite_rejected() {
        assert!(matches!(
            read_csv("x,y\n1,2\n".as_bytes()),
            Err(Error::Parse { at: Location::Line(1), .. })
        ));
        assert!(matches!(
            read_csv("1,2\n1,inf\n".as_bytes()),
            Err(Error::Parse { at: Location::Line(2), .. })
        ));
    }

    #[test]
    fn empty_llshbin_keeps_dim() {
        let ds = Dataset::<f32>::empty(100).unwrap();
        let mut buf = Vec::new();
        write_llshbin(&ds, &mut buf).unwrap();
        assert_eq!(buf.len() as u64, LLSHBIN_HEADER_LEN);
        let back = read_llshbin(buf.as_slice()).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dim(), 100);
    }

    #[test]
    fn llshbin_errors_carry_byte_offsets() {
        let ds = Dataset::<f32>::from_flat(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_llshbin(&ds, &mut buf).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_llshbin(bad.as_slice()), Err(Error::Parse { at: Location::Byte(0), .. })));

        let mut nan = buf.clone();
        nan[14 + 8..14 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read_llshbin(nan.as_slice()), Err(Error::Parse { at: Location::Byte(22), .. })));

        let truncated = &buf[..buf.len() - 2];
        assert!(matches!(read_llshbin(truncated), Err(Error::Parse { .. })));

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(read_llshbin(trailing.as_slice()), Err(Error::Parse { .. })));
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let ds = Dataset::<f32>::from_flat(1, (0..10).map(|i| i as f32).collect()).unwrap();
        let (train, hold) = split(&ds, 0.1, 5).unwrap();
        assert_eq!((train.len(), hold.len()), (9, 1));
        let mut all: Vec<u32> = train.ids().iter().chain(hold.ids()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let (train2, hold2) = split(&ds, 0.1, 5).unwrap();
        assert_eq!(train, train2);
        assert_eq!(hold, hold2);
        // values follow ids
        for (id, row) in hold.ids().iter().zip(hold.rows()) {
            assert_eq!(row[0], *id as f32);
        }
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let ds = Dataset::<f32>::from_flat(1, vec![0.0, 1.0]).unwrap();
        assert!(split(&ds, 0.0, 1).is_err());
        assert!(split(&ds, 1.0, 1).is_err());
        let one = Dataset::<f32>::from_flat(1, vec![0.0]).unwrap();
        assert!(split(&one, 0.5, 1).is_err());
    }

    #[test]
    fn split_halves_are_balanced() {
        let ds = generate(&DatasetSpec::new(Distribution::Uniform, 10_000, 1, 17)).unwrap();
        let (a, b) = split(&ds, 0.5, 2).unwrap();
        for part in [a, b] {
            let (m, _) = moments(part.values());
            assert!((m - 0.5).abs() < 0.02, "mean {m}");
        }
    }

    #[test]
    fn normal_cdf_reference_points() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(1.96) - 0.975_002_1).abs() < 1e-6);
        assert!((normal_cdf(-1.0) - 0.158_655_25).abs() < 1e-6);
    }
}
