//! Learned LSH: an autoencoder compresses the input, `L` small networks
//! learn to reproduce E2LSH signatures of the compressed vectors, and their
//! rounded outputs are bucketed exactly like E2LSH signatures.

use std::io::{Read, Write};
use std::sync::Arc;
use std::time::Instant;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::e2lsh::{sample_families, sample_hashers, HashFamily, TableSet, PRIME};
use crate::error::{Error, Result};
use crate::knn::{self, Neighbor};
use crate::neural::{backprop, fit, DenseLayer, mse_grad, mse_loss, AdamState, Matrix, Mlp, TrainConfig, TrainReport};
use crate::rng;
use crate::scalar::Scalar;
use crate::serial::{BinReader, BinWriter};
use crate::vecdata::{self, Dataset};

pub const LLM_MAGIC: &[u8; 4] = b"LLM1";
pub const LLM_VERSION: u16 = 1;
pub const LLIX_MAGIC: &[u8; 4] = b"LLIX";
pub const LLIX_VERSION: u16 = 1;

/// Row-major integer matrix of hash values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i64>,
}

impl HashMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} hash matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i64] {
        &self.data
    }

    pub fn row(&self, r: usize) -> &[i64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [i64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Columns `start..start + width` of every row.
    pub fn column_block(&self, start: usize, width: usize) -> HashMatrix {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in 0..self.rows {
            data.extend_from_slice(&self.row(r)[start..start + width]);
        }
        HashMatrix {
            rows: self.rows,
            cols: width,
            data,
        }
    }

    pub fn gather(&self, rows: &[usize]) -> HashMatrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        HashMatrix {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LlshConfig {
    /// Layers per hash unit `M`.
    pub layers: usize,
    /// Number of units and tables `L`.
    pub tables: usize,
    /// Outputs per unit `k`.
    pub k: usize,
    pub m1: usize,
    pub m2: usize,
    /// Hidden width of each unit.
    pub m3: usize,
    /// Segment width `r` of the label-generating E2LSH.
    pub width: f64,
    /// Hash unit training.
    pub train: TrainConfig,
    /// Autoencoder training.
    pub autoencoder: TrainConfig,
    pub ensemble_size: usize,
    /// Train the autoencoder on per-feature standardized inputs and fold the
    /// scaling into the encoder's first layer afterwards.
    pub standardize_inputs: bool,
    /// Share of unit training rows used for early stopping.
    pub validation_fraction: f64,
}

impl Default for LlshConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            tables: 30,
            k: 10,
            m1: 32,
            m2: 16,
            m3: 8,
            width: 4.0,
            train: TrainConfig {
                lr: 1e-3,
                batch_size: 64,
                max_epochs: 600,
                patience: 50,
                seed: 0,
            },
            autoencoder: TrainConfig {
                lr: 1e-3,
                batch_size: 64,
                max_epochs: 60,
                patience: 5,
                seed: 0,
            },
            ensemble_size: 1,
            standardize_inputs: true,
            validation_fraction: 0.1,
        }
    }
}

impl LlshConfig {
    /// Checks the configuration for input dimension `dim`. Logs a warning
    /// when the learned parameters are not fewer than the E2LSH ones.
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.layers == 0 || self.tables == 0 || self.k == 0 || self.m3 == 0 {
            return Err(Error::InvalidConfig("M, L, k and m3 must be positive".into()));
        }
        if !(dim > self.m1 && self.m1 > self.m2 && self.m2 > 0) {
            return Err(Error::InvalidConfig(format!(
                "dimensions must satisfy d > m1 > m2 > 0 (d={dim}, m1={}, m2={})",
                self.m1, self.m2
            )));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::InvalidConfig(format!("width must be positive, got {}", self.width)));
        }
        if self.ensemble_size == 0 {
            return Err(Error::InvalidConfig("ensemble_size must be at least 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation_fraction must be in (0, 1), got {}",
                self.validation_fraction
            )));
        }
        self.train.validate()?;
        self.autoencoder.validate()?;
        let (p1, p2) = param_count(self, dim);
        if p1 >= p2 {
            warn!("learned parameters p1={p1} are not fewer than E2LSH parameters p2={p2}");
        }
        Ok(())
    }

    /// Layer widths of one hash unit.
    pub fn unit_widths(&self) -> Vec<usize> {
        let mut w = vec![self.m2];
        w.extend(std::iter::repeat_n(self.m3, self.layers.saturating_sub(1)));
        w.push(self.k);
        w
    }
}

/// Weight counts `(p1, p2)` of the learned pipeline and of E2LSH:
/// `p1 = d·m1 + m1·m2 + L·(m2·m3 + m3·k)` (for `M = 2`) and `p2 = d·k·L`.
/// Other `M` insert `M - 2` further `m3 × m3` layers per unit.
pub fn param_count(cfg: &LlshConfig, dim: usize) -> (u64, u64) {
    let d = dim as u64;
    let encoder = d * cfg.m1 as u64 + (cfg.m1 * cfg.m2) as u64;
    let unit: u64 = cfg
        .unit_widths()
        .windows(2)
        .map(|w| (w[0] * w[1]) as u64)
        .sum();
    (encoder + unit * cfg.tables as u64, d * (cfg.k * cfg.tables) as u64)
}

/// Encoder `d → m1 → m2` with a linear code layer and its mirrored decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    encoder: Mlp<f64>,
    decoder: Mlp<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderReport {
    pub initial_mse: f64,
    pub final_mse: f64,
    pub epochs: usize,
}

impl Autoencoder {
    pub fn new(encoder: Mlp<f64>, decoder: Mlp<f64>) -> Result<Self> {
        let mut mirrored = encoder.widths();
        mirrored.reverse();
        if decoder.widths() != mirrored {
            return Err(Error::ShapeMismatch(format!(
                "decoder {:?} does not mirror encoder {:?}",
                decoder.widths(),
                encoder.widths()
            )));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn init(dim: usize, m1: usize, m2: usize, seed: u64) -> Result<Self> {
        if !(dim > m1 && m1 > m2 && m2 > 0) {
            return Err(Error::InvalidConfig(format!(
                "dimensions must satisfy d > m1 > m2 > 0 (d={dim}, m1={m1}, m2={m2})"
            )));
        }
        let encoder = Mlp::init(&[dim, m1, m2], &mut rng::stream(seed, 0))?;
        let decoder = Mlp::init(&[m2, m1, dim], &mut rng::stream(seed, 1))?;
        Self::new(encoder, decoder)
    }

    pub fn encoder(&self) -> &Mlp<f64> {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp<f64> {
        &self.decoder
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn code_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn reconstruct(&self, x: &Matrix<f64>) -> Result<Matrix<f64>> {
        self.decoder.forward(&self.encoder.forward(x)?)
    }

    /// Encoded copy of `ds` with the same ids.
    pub fn encode<T: Scalar>(&self, ds: &Dataset<T>) -> Result<Dataset<f64>> {
        encode_with(&self.encoder, ds)
    }

    pub fn quantize_f32(&mut self) {
        self.encoder.quantize_f32();
        self.decoder.quantize_f32();
    }

    /// Rewrites an encoder trained on `(x - mean) / std` so that it accepts
    /// raw `x`, and the decoder so that it reconstructs raw `x`.
    pub fn fold_input_scaling(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let dim = self.input_dim();
        Error::check_dim(dim, mean.len())?;
        Error::check_dim(dim, std.len())?;
        let mut enc: Vec<DenseLayer<f64>> = self.encoder.layers().to_vec();
        let first = &enc[0];
        let mut weights = first.weights().to_vec();
        let mut bias = first.bias().to_vec();
        for (o, b) in bias.iter_mut().enumerate() {
            let w = &mut weights[o * dim..(o + 1) * dim];
            for ((w, m), s) in w.iter_mut().zip(mean).zip(std) {
                *w /= s;
                *b -= *w * m;
            }
        }
        enc[0] = DenseLayer::new(dim, first.outputs(), weights, bias)?;
        let mut dec: Vec<DenseLayer<f64>> = self.decoder.layers().to_vec();
        let last = dec.len() - 1;
        let layer = &dec[last];
        let inputs = layer.inputs();
        let mut weights = layer.weights().to_vec();
        let mut bias = layer.bias().to_vec();
        for (o, b) in bias.iter_mut().enumerate() {
            for w in &mut weights[o * inputs..(o + 1) * inputs] {
                *w *= std[o];
            }
            *b = *b * std[o] + mean[o];
        }
        dec[last] = DenseLayer::new(inputs, dim, weights, bias)?;
        self.encoder = Mlp::new(enc)?;
        self.decoder = Mlp::new(dec)?;
        Ok(())
    }

    /// Minibatch Adam on reconstruction MSE. The gradient flows through the
    /// decoder into the code layer and on through the encoder. Stops after
    /// `patience` epochs without a lower epoch loss and keeps the best
    /// parameters.
    pub fn train<T: Scalar>(&mut self, ds: &Dataset<T>, cfg: &TrainConfig) -> Result<AutoencoderReport> {
        cfg.validate()?;
        Error::check_dim(self.input_dim(), ds.dim())?;
        if ds.is_empty() {
            return Err(Error::InvalidDataset("cannot train on an empty dataset".into()));
        }
        let x = Matrix::<f64>::from_dataset(ds);
        let initial_mse = mse_loss(&self.reconstruct(&x)?, &x)?;
        let mut adam_enc = AdamState::new(self.encoder.param_count(), cfg.lr);
        let mut adam_dec = AdamState::new(self.decoder.param_count(), cfg.lr);
        let mut rng = rng::seeded(cfg.seed);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        let mut best = (f64::INFINITY, self.clone());
        let mut stale = 0;
        let mut epochs = 0;
        for _ in 0..cfg.max_epochs {
            epochs += 1;
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let xb = x.gather(chunk);
                let enc_trace = self.encoder.trace(&xb)?;
                let dec_trace = self.decoder.trace(enc_trace.output())?;
                total += mse_loss(dec_trace.output(), &xb)? * chunk.len() as f64;
                let delta = mse_grad(dec_trace.output(), &xb)?;
                let (g_dec, d_code) = backprop(&self.decoder, &dec_trace, delta, true)?;
                let d_code = d_code.expect("input gradient requested");
                let (g_enc, _) = backprop(&self.encoder, &enc_trace, d_code, false)?;
                adam_dec.step(&mut self.decoder, &g_dec)?;
                adam_enc.step(&mut self.encoder, &g_enc)?;
            }
            let loss = total / x.rows() as f64;
            debug!("autoencoder epoch {epochs}: loss {loss:.6}");
            if loss < best.0 {
                best = (loss, self.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
        *self = best.1;
        let final_mse = mse_loss(&self.reconstruct(&x)?, &x)?;
        Ok(AutoencoderReport {
            initial_mse,
            final_mse,
            epochs,
        })
    }
}

fn encode_with<T: Scalar>(encoder: &Mlp<f64>, ds: &Dataset<T>) -> Result<Dataset<f64>> {
    Error::check_dim(encoder.input_dim(), ds.dim())?;
    const CHUNK: usize = 4096;
    let out_dim = encoder.output_dim();
    let parts = (0..ds.len().div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let rows: Vec<usize> = (c * CHUNK..((c + 1) * CHUNK).min(ds.len())).collect();
            let x = Matrix::<f64>::from_dataset(&ds.subset(&rows));
            encoder.forward(&x).map(Matrix::into_data)
        })
        .collect::<Result<Vec<_>>>()?;
    ds.with_values(out_dim, parts.concat())
}

/// Signatures of every encoded vector under `L` freshly sampled families,
/// concatenated per row. The families are returned with the labels.
pub fn make_labels(encoded: &Dataset<f64>, cfg: &LlshConfig, seed: u64) -> Result<(HashMatrix, Vec<HashFamily>)> {
    if encoded.dim() != cfg.m2 {
        return Err(Error::DimensionMismatch {
            expected: cfg.m2,
            got: encoded.dim(),
        });
    }
    let families = sample_families(encoded.dim(), cfg.tables, cfg.k, cfg.width, seed);
    let labels = label_block(encoded, &families, cfg.k);
    Ok((labels, families))
}

fn label_block(encoded: &Dataset<f64>, families: &[HashFamily], k: usize) -> HashMatrix {
    let cols = families.len() * k;
    let mut out = HashMatrix::zeros(encoded.len(), cols);
    out.data
        .par_chunks_mut(cols.max(1))
        .zip(encoded.values().par_chunks(encoded.dim()))
        .for_each(|(row, v)| {
            for (g, o) in families.iter().zip(row.chunks_exact_mut(k)) {
                g.hash_into(v, o);
            }
        });
    out
}

/// Label seeds of an ensemble: instance 0 uses `seed` itself so a single
/// instance reproduces [`make_labels`].
pub fn ensemble_seeds(seed: u64, size: usize) -> Vec<u64> {
    (0..size)
        .map(|i| if i == 0 { seed } else { rng::derive_seed(seed, i as u64) })
        .collect()
}

/// Elementwise mean of the label blocks of `cfg.ensemble_size` independent
/// E2LSH instances, rounded half away from zero.
pub fn make_ensemble_labels(
    encoded: &Dataset<f64>,
    cfg: &LlshConfig,
    seed: u64,
) -> Result<(HashMatrix, Vec<Vec<HashFamily>>)> {
    if cfg.ensemble_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "an ensemble needs at least 2 instances, got {}",
            cfg.ensemble_size
        )));
    }
    ensemble_labels_from_seeds(encoded, cfg, &ensemble_seeds(seed, cfg.ensemble_size))
}

/// [`make_ensemble_labels`] with explicit instance seeds (any count ≥ 1).
pub fn ensemble_labels_from_seeds(
    encoded: &Dataset<f64>,
    cfg: &LlshConfig,
    seeds: &[u64],
) -> Result<(HashMatrix, Vec<Vec<HashFamily>>)> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("no ensemble seeds".into()));
    }
    let mut sums: Vec<i64> = Vec::new();
    let mut sets = Vec::with_capacity(seeds.len());
    let mut shape = (0, 0);
    for &s in seeds {
        let (block, families) = make_labels(encoded, cfg, s)?;
        if sums.is_empty() {
            shape = (block.rows, block.cols);
            sums = block.data;
        } else {
            for (acc, v) in sums.iter_mut().zip(&block.data) {
                *acc += v;
            }
        }
        sets.push(families);
    }
    let count = seeds.len() as f64;
    let data = sums.into_iter().map(|s| (s as f64 / count).round() as i64).collect();
    Ok((HashMatrix::new(shape.0, shape.1, data)?, sets))
}

/// `L` trained units with the per-column label statistics used to
/// standardize their targets.
#[derive(Debug, Clone, PartialEq)]
pub struct HashUnits {
    units: Vec<Mlp<f64>>,
    label_mean: Vec<f64>,
    label_std: Vec<f64>,
}

impl HashUnits {
    pub fn new(units: Vec<Mlp<f64>>, label_mean: Vec<f64>, label_std: Vec<f64>) -> Result<Self> {
        let first = units
            .first()
            .ok_or_else(|| Error::InvalidConfig("at least one hash unit is required".into()))?;
        let widths = first.widths();
        if units.iter().any(|u| u.widths() != widths) {
            return Err(Error::ShapeMismatch("hash units differ in shape".into()));
        }
        let cols = units.len() * first.output_dim();
        if label_mean.len() != cols || label_std.len() != cols {
            return Err(Error::ShapeMismatch(format!(
                "{cols} label columns but {} means and {} deviations",
                label_mean.len(),
                label_std.len()
            )));
        }
        if label_std.iter().any(|&s| !(s > 0.0 && s.is_finite())) || label_mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("label statistics must be finite with positive deviations".into()));
        }
        Ok(Self {
            units,
            label_mean,
            label_std,
        })
    }

    pub fn units(&self) -> &[Mlp<f64>] {
        &self.units
    }

    pub fn label_mean(&self) -> &[f64] {
        &self.label_mean
    }

    pub fn label_std(&self) -> &[f64] {
        &self.label_std
    }

    pub fn tables(&self) -> usize {
        self.units.len()
    }

    pub fn k(&self) -> usize {
        self.units[0].output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.units[0].input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.units.iter().map(Mlp::param_count).sum()
    }

    pub fn quantize_f32(&mut self) {
        self.units.iter_mut().for_each(Mlp::quantize_f32);
    }

    /// `L × k` hash matrix of one encoded vector.
    pub fn predict_hash<T: Scalar>(&self, v: &[T]) -> Result<HashMatrix> {
        Error::check_dim(self.input_dim(), v.len())?;
        let x: Vec<f64> = v.iter().map(|t| t.as_f64()).collect();
        let k = self.k();
        let mut out = HashMatrix::zeros(self.tables(), k);
        for (j, unit) in self.units.iter().enumerate() {
            let y = unit.forward_one(&x)?;
            let row = out.row_mut(j);
            for (c, (o, y)) in row.iter_mut().zip(y).enumerate() {
                *o = self.destandardize(j * k + c, y);
            }
        }
        Ok(out)
    }

    /// `n × (L·k)` predictions for a batch of encoded rows.
    pub fn predict_batch(&self, x: &Matrix<f64>) -> Result<HashMatrix> {
        Error::check_dim(self.input_dim(), x.cols())?;
        let k = self.k();
        let blocks = self
            .units
            .par_iter()
            .map(|u| u.forward(x))
            .collect::<Result<Vec<_>>>()?;
        let mut out = HashMatrix::zeros(x.rows(), self.tables() * k);
        for (j, block) in blocks.iter().enumerate() {
            for r in 0..x.rows() {
                let dst = &mut out.row_mut(r)[j * k..(j + 1) * k];
                for (c, (o, &y)) in dst.iter_mut().zip(block.row(r)).enumerate() {
                    *o = self.destandardize(j * k + c, y);
                }
            }
        }
        Ok(out)
    }

    #[inline]
    fn destandardize(&self, col: usize, y: f64) -> i64 {
        (y * self.label_std[col] + self.label_mean[col]).round() as i64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitsReport {
    pub units: Vec<TrainReport>,
    /// Label columns with zero variance; their deviation is set to 1.
    pub degenerate_columns: Vec<usize>,
}

fn column_stats(labels: &HashMatrix) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    let n = labels.rows.max(1) as f64;
    let mut mean = vec![0.0; labels.cols];
    for r in 0..labels.rows {
        for (m, &v) in mean.iter_mut().zip(labels.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; labels.cols];
    for r in 0..labels.rows {
        for ((s, &v), m) in var.iter_mut().zip(labels.row(r)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let mut degenerate = Vec::new();
    let std = var
        .into_iter()
        .enumerate()
        .map(|(c, s)| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                degenerate.push(c);
                1.0
            }
        })
        .collect();
    (mean, std, degenerate)
}

/// Trains the `L` units independently, unit `j` on label columns
/// `j·k .. (j+1)·k`. Targets are standardized per column. Early stopping
/// monitors the fitting rate on a validation split of the rows.
pub fn train_llsh(
    encoded: &Dataset<f64>,
    labels: &HashMatrix,
    cfg: &LlshConfig,
    seed: u64,
) -> Result<(HashUnits, UnitsReport)> {
    cfg.train.validate()?;
    Error::check_dim(cfg.m2, encoded.dim())?;
    if labels.rows != encoded.len() || labels.cols != cfg.tables * cfg.k {
        return Err(Error::ShapeMismatch(format!(
            "labels are {}x{}, expected {}x{}",
            labels.rows,
            labels.cols,
            encoded.len(),
            cfg.tables * cfg.k
        )));
    }
    if encoded.is_empty() {
        return Err(Error::InvalidDataset("cannot train on an empty dataset".into()));
    }
    let (label_mean, label_std, degenerate) = column_stats(labels);
    if !degenerate.is_empty() {
        warn!("{} label columns have zero variance", degenerate.len());
    }
    let x = Matrix::<f64>::from_dataset(encoded);
    let (fit_rows, val_rows) = validation_split(encoded.len(), cfg.validation_fraction, rng::derive_seed(seed, 0));
    let x_fit = x.gather(&fit_rows);
    let x_val = x.gather(&val_rows);
    let widths = cfg.unit_widths();
    let k = cfg.k;
    let results = (0..cfg.tables)
        .into_par_iter()
        .map(|j| {
            let cols = j * k..(j + 1) * k;
            let block = labels.column_block(j * k, k);
            let standardized = |rows: &[usize]| {
                let mut data = Vec::with_capacity(rows.len() * k);
                for &r in rows {
                    for (c, &v) in cols.clone().zip(block.row(r)) {
                        data.push((v as f64 - label_mean[c]) / label_std[c]);
                    }
                }
                Matrix::new(rows.len(), k, data)
            };
            let target = standardized(&fit_rows)?;
            let val_labels = block.gather(&val_rows);
            let (mean, std) = (&label_mean[cols.clone()], &label_std[cols.clone()]);
            let mut net = Mlp::init(&widths, &mut rng::stream(seed, 1 + j as u64))?;
            let train_cfg = TrainConfig {
                seed: rng::derive_seed(seed, 1 + j as u64),
                ..cfg.train
            };
            let report = fit(&mut net, &x_fit, &target, &train_cfg, |net| {
                block_fitting_rate(net, &x_val, &val_labels, mean, std)
            })?;
            Ok((net, report))
        })
        .collect::<Result<Vec<_>>>()?;
    let (units, reports): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((
        HashUnits::new(units, label_mean, label_std)?,
        UnitsReport {
            units: reports,
            degenerate_columns: degenerate,
        },
    ))
}

fn validation_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let held = (fraction * n as f64).round() as usize;
    if held == 0 || held >= n {
        let all: Vec<usize> = (0..n).collect();
        return (all.clone(), all);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let (val, fit) = order.split_at_mut(held);
    val.sort_unstable();
    fit.sort_unstable();
    (fit.to_vec(), val.to_vec())
}

fn block_fitting_rate(net: &Mlp<f64>, x: &Matrix<f64>, labels: &HashMatrix, mean: &[f64], std: &[f64]) -> f64 {
    let Ok(y) = net.forward(x) else {
        return 0.0;
    };
    let total = labels.data.len();
    if total == 0 {
        return 1.0;
    }
    let hits = y
        .data()
        .chunks_exact(labels.cols)
        .zip(labels.data.chunks_exact(labels.cols))
        .map(|(y, l)| {
            y.iter()
                .zip(l)
                .zip(mean.iter().zip(std))
                .filter(|((&y, &l), (&m, &s))| (y * s + m).round() as i64 == l)
                .count()
        })
        .sum::<usize>();
    hits as f64 / total as f64
}

/// Shape parameters echoed into the serialized model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelShape {
    pub dim: usize,
    pub layers: usize,
    pub tables: usize,
    pub k: usize,
    pub m1: usize,
    pub m2: usize,
    pub m3: usize,
    pub width: f64,
}

impl ModelShape {
    pub fn of(cfg: &LlshConfig, dim: usize) -> Self {
        Self {
            dim,
            layers: cfg.layers,
            tables: cfg.tables,
            k: cfg.k,
            m1: cfg.m1,
            m2: cfg.m2,
            m3: cfg.m3,
            width: cfg.width,
        }
    }
}

/// Encoder plus hash units: everything needed to hash a raw vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LlshModel {
    shape: ModelShape,
    encoder: Mlp<f64>,
    units: HashUnits,
}

impl LlshModel {
    pub fn new(shape: ModelShape, encoder: Mlp<f64>, units: HashUnits) -> Result<Self> {
        if encoder.widths() != [shape.dim, shape.m1, shape.m2] {
            return Err(Error::ShapeMismatch(format!(
                "encoder {:?} does not match d={}, m1={}, m2={}",
                encoder.widths(),
                shape.dim,
                shape.m1,
                shape.m2
            )));
        }
        let mut expected = vec![shape.m2];
        expected.extend(std::iter::repeat_n(shape.m3, shape.layers.saturating_sub(1)));
        expected.push(shape.k);
        if units.tables() != shape.tables || units.units[0].widths() != expected {
            return Err(Error::ShapeMismatch("hash units do not match the model shape".into()));
        }
        Ok(Self { shape, encoder, units })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn encoder(&self) -> &Mlp<f64> {
        &self.encoder
    }

    pub fn units(&self) -> &HashUnits {
        &self.units
    }

    pub fn dim(&self) -> usize {
        self.shape.dim
    }

    pub fn encode<T: Scalar>(&self, ds: &Dataset<T>) -> Result<Dataset<f64>> {
        encode_with(&self.encoder, ds)
    }

    /// `L × k` hash matrix of a raw vector.
    pub fn hash<T: Scalar>(&self, v: &[T]) -> Result<HashMatrix> {
        Error::check_dim(self.dim(), v.len())?;
        let x: Vec<f64> = v.iter().map(|t| t.as_f64()).collect();
        self.units.predict_hash(&self.encoder.forward_one(&x)?)
    }

    /// `n × (L·k)` hash matrix of a raw dataset, computed in batches.
    pub fn hash_all<T: Scalar>(&self, ds: &Dataset<T>) -> Result<HashMatrix> {
        let encoded = self.encode(ds)?;
        self.units.predict_batch(&Matrix::from_dataset(&encoded))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.units.param_count()
    }

    /// Network parameters at 4 bytes each plus the `f64` label statistics.
    pub fn parameter_bytes(&self) -> u64 {
        4 * self.param_count() as u64 + 16 * self.units.label_mean.len() as u64
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<u64> {
        let mut w = BinWriter::new(writer);
        self.write(&mut w)?;
        Ok(w.bytes_written())
    }

    pub(crate) fn write<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        let s = &self.shape;
        w.bytes(LLM_MAGIC)?;
        w.u16(LLM_VERSION)?;
        for v in [s.dim, s.layers, s.tables, s.k, s.m1, s.m2, s.m3] {
            w.u32(v as u32)?;
        }
        w.f64(s.width)?;
        self.encoder.write(w)?;
        for u in &self.units.units {
            u.write(w)?;
        }
        for &v in self.units.label_mean.iter().chain(&self.units.label_std) {
            w.f64(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut r = BinReader::new(reader);
        let model = Self::read(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub(crate) fn read<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.magic(LLM_MAGIC)?;
        r.version(LLM_VERSION)?;
        let mut dims = [0usize; 7];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let [dim, layers, tables, k, m1, m2, m3] = dims;
        if tables == 0 || tables > 1 << 16 || k == 0 {
            return Err(r.error(format!("implausible model shape L={tables}, k={k}")));
        }
        let width = r.finite_f64()?;
        let shape = ModelShape {
            dim,
            layers,
            tables,
            k,
            m1,
            m2,
            m3,
            width,
        };
        let encoder = Mlp::read(r)?;
        let units = (0..tables).map(|_| Mlp::read(r)).collect::<Result<Vec<_>>>()?;
        let cols = tables * k;
        let mean = (0..cols).map(|_| r.finite_f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..cols).map(|_| r.finite_f64()).collect::<Result<Vec<_>>>()?;
        let units = HashUnits::new(units, mean, std).map_err(|e| r.error(e.to_string()))?;
        Self::new(shape, encoder, units).map_err(|e| r.error(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub autoencoder: AutoencoderReport,
    pub units: UnitsReport,
    /// Fitting rate on the rows the units were trained on.
    pub train_fitting_rate: f64,
    /// Fitting rate on rows held out of every training step.
    pub holdout_fitting_rate: f64,
    pub holdout_rows: usize,
    pub train_ns: u64,
}

/// Per-feature mean and standard deviation; constant features get 1.
pub fn feature_stats<T: Scalar>(ds: &Dataset<T>) -> (Vec<f64>, Vec<f64>) {
    let n = ds.len().max(1) as f64;
    let mut mean = vec![0.0; ds.dim()];
    for row in ds.rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; ds.dim()];
    for row in ds.rows() {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v.as_f64() - m).powi(2);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

fn standardize<T: Scalar>(ds: &Dataset<T>, mean: &[f64], std: &[f64]) -> Result<Dataset<f64>> {
    let mut values = Vec::with_capacity(ds.values().len());
    for row in ds.rows() {
        values.extend(row.iter().zip(mean.iter().zip(std)).map(|(v, (m, s))| (v.as_f64() - m) / s));
    }
    ds.with_values(ds.dim(), values)
}

pub const HOLDOUT_FRACTION: f64 = 0.1;

/// Full training pipeline on `ds`: hold out 10% of the rows, train the
/// autoencoder and quantize its encoder, label the encoded rows (ensembled
/// when `ensemble_size > 1`), train and quantize the units, and measure the
/// fitting rate on the holdout.
pub fn fit_model(ds: &Dataset, cfg: &LlshConfig, seed: u64) -> Result<(LlshModel, FitReport)> {
    cfg.validate(ds.dim())?;
    let start = Instant::now();
    let (train, holdout) = vecdata::split(ds, HOLDOUT_FRACTION, rng::derive_seed(seed, 1))?;
    let mut ae = Autoencoder::init(ds.dim(), cfg.m1, cfg.m2, rng::derive_seed(seed, 2))?;
    let ae_cfg = TrainConfig {
        seed: rng::derive_seed(seed, 3),
        ..cfg.autoencoder
    };
    let ae_report = if cfg.standardize_inputs {
        let (mean, std) = feature_stats(&train);
        let scaled = standardize(&train, &mean, &std)?;
        let report = ae.train(&scaled, &ae_cfg)?;
        ae.fold_input_scaling(&mean, &std)?;
        report
    } else {
        ae.train(&train, &ae_cfg)?
    };
    ae.quantize_f32();
    let enc_train = ae.encode(&train)?;
    let enc_holdout = ae.encode(&holdout)?;
    let label_seed = rng::derive_seed(seed, 4);
    let seeds = ensemble_seeds(label_seed, cfg.ensemble_size);
    let (labels, families) = ensemble_labels_from_seeds(&enc_train, cfg, &seeds)?;
    let holdout_labels = if families.len() == 1 {
        label_block(&enc_holdout, &families[0], cfg.k)
    } else {
        ensemble_labels_from_seeds(&enc_holdout, cfg, &seeds)?.0
    };
    let (mut units, units_report) = train_llsh(&enc_train, &labels, cfg, rng::derive_seed(seed, 5))?;
    units.quantize_f32();
    let train_fr = crate::eval::fitting_rate(&units.predict_batch(&Matrix::from_dataset(&enc_train))?, &labels)?;
    let holdout_fr =
        crate::eval::fitting_rate(&units.predict_batch(&Matrix::from_dataset(&enc_holdout))?, &holdout_labels)?;
    let model = LlshModel::new(ModelShape::of(cfg, ds.dim()), ae.encoder, units)?;
    Ok((
        model,
        FitReport {
            autoencoder: ae_report,
            units: units_report,
            train_fitting_rate: train_fr,
            holdout_fitting_rate: holdout_fr,
            holdout_rows: holdout.len(),
            train_ns: start.elapsed().as_nanos() as u64,
        },
    ))
}

/// Learned-hash index: predicted signatures bucketed with E2LSH slot and
/// fingerprint hashing, candidates ranked in the original space.
#[derive(Debug, Clone)]
pub struct LlshIndex {
    model: Arc<LlshModel>,
    table_len: u64,
    tables: TableSet,
    dataset: Arc<Dataset>,
}

impl LlshIndex {
    /// Bucket hashers come from streams of `seed`; table length is `n`.
    pub fn build(model: Arc<LlshModel>, dataset: Arc<Dataset>, seed: u64) -> Result<Self> {
        Error::check_dim(model.dim(), dataset.dim())?;
        if dataset.is_empty() {
            return Err(Error::InvalidDataset("cannot index an empty dataset".into()));
        }
        let shape = model.shape();
        let table_len = dataset.len() as u64;
        let hashers = sample_hashers(shape.tables, shape.k, table_len, seed);
        let hashes = model.hash_all(dataset.as_ref())?;
        let signatures: Vec<Vec<i64>> = (0..shape.tables)
            .map(|j| hashes.column_block(j * shape.k, shape.k).data)
            .collect();
        let tables = TableSet::build(hashers, &signatures, dataset.ids())?;
        Ok(Self {
            model,
            table_len,
            tables,
            dataset,
        })
    }

    pub fn model(&self) -> &Arc<LlshModel> {
        &self.model
    }

    pub fn table_set(&self) -> &TableSet {
        &self.tables
    }

    pub fn dataset(&self) -> &Arc<Dataset> {
        &self.dataset
    }

    pub fn table_len(&self) -> u64 {
        self.table_len
    }

    pub fn dim(&self) -> usize {
        self.dataset.dim()
    }

    /// Dataset rows colliding with `q` in at least one table.
    pub fn candidates<Q: Scalar>(&self, q: &[Q]) -> Result<Vec<usize>> {
        let sig = self.model.hash(q)?;
        let ids = self.tables.candidate_ids(sig.data());
        Ok(ids.into_iter().filter_map(|id| self.dataset.row_of_id(id)).collect())
    }

    /// Up to `topk` candidates by original-space distance, ties by id.
    pub fn query<Q: Scalar>(&self, q: &[Q], topk: usize) -> Result<Vec<Neighbor>> {
        let rows = self.candidates(q)?;
        Ok(knn::rank_rows(&self.dataset, q, rows, topk))
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<u64> {
        let mut w = BinWriter::new(writer);
        w.bytes(LLIX_MAGIC)?;
        w.u16(LLIX_VERSION)?;
        w.u32(self.dim() as u32)?;
        w.u64(self.table_len)?;
        w.u64(self.dataset.len() as u64)?;
        self.model.write(&mut w)?;
        self.tables.write(&mut w)?;
        Ok(w.bytes_written())
    }

    /// Reads an index written by [`LlshIndex::write_to`] for `dataset`.
    pub fn read_from<R: Read>(reader: R, dataset: Arc<Dataset>) -> Result<Self> {
        let mut r = BinReader::new(reader);
        r.magic(LLIX_MAGIC)?;
        r.version(LLIX_VERSION)?;
        let dim = r.u32()? as usize;
        let table_len = r.u64()?;
        let n_points = r.u64()?;
        Error::check_dim(dim, dataset.dim())?;
        if n_points != dataset.len() as u64 {
            return Err(Error::Format(format!(
                "index covers {n_points} points but dataset has {}",
                dataset.len()
            )));
        }
        if table_len == 0 || table_len > PRIME {
            return Err(r.error(format!("table length {table_len} out of range")));
        }
        let model = LlshModel::read(&mut r)?;
        if model.dim() != dim {
            return Err(r.error("model dimension differs from index dimension"));
        }
        let shape = model.shape();
        let tables = TableSet::read(&mut r, shape.tables, shape.k, table_len, &dataset)?;
        r.finish()?;
        Ok(Self {
            model: Arc::new(model),
            table_len,
            tables,
            dataset,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::fitting_rate;
    use crate::vecdata::{generate, DatasetSpec, Distribution};

    fn small_cfg() -> LlshConfig {
        LlshConfig {
            tables: 4,
            k: 3,
            m1: 6,
            m2: 4,
            m3: 5,
            train: TrainConfig {
                lr: 1e-2,
                max_epochs: 30,
                patience: 5,
                ..LlshConfig::default().train
            },
            autoencoder: TrainConfig {
                max_epochs: 10,
                patience: 3,
                ..LlshConfig::default().autoencoder
            },
            ..LlshConfig::default()
        }
    }

    fn uniform(n: usize, dim: usize, seed: u64) -> Dataset {
        generate(&DatasetSpec::new(Distribution::Uniform, n, dim, seed)).unwrap()
    }

    fn random_encoded(n: usize, dim: usize, seed: u64) -> Dataset<f64> {
        uniform(n, dim, seed).cast()
    }

    #[test]
    fn param_count_examples() {
        let cfg = LlshConfig::default();
        assert_eq!(param_count(&cfg, 100), (9952, 30000));
        let none = LlshConfig { tables: 0, ..cfg };
        assert_eq!(param_count(&none, 100), (100 * 32 + 32 * 16, 0));
        let three = LlshConfig { layers: 3, ..cfg };
        assert_eq!(param_count(&three, 100).0, 9952 + 30 * 64);
    }

    #[test]
    fn config_validation() {
        let cfg = LlshConfig::default();
        assert!(cfg.validate(100).is_ok());
        assert!(cfg.validate(32).is_err());
        assert!(LlshConfig { m2: 32, ..cfg }.validate(100).is_err());
        assert!(LlshConfig { ensemble_size: 0, ..cfg }.validate(100).is_err());
        assert!(LlshConfig { width: 0.0, ..cfg }.validate(100).is_err());
        // p1 >= p2 only warns
        assert!(LlshConfig { m3: 64, ..cfg }.validate(100).is_ok());
    }

    #[test]
    fn autoencoder_shapes_and_determinism() {
        let ds = uniform(200, 10, 1);
        let cfg = TrainConfig {
            max_epochs: 5,
            ..LlshConfig::default().autoencoder
        };
        let train = |seed| {
            let mut ae = Autoencoder::init(10, 6, 3, seed).unwrap();
            ae.train(&ds, &cfg).unwrap();
            ae
        };
        let a = train(7);
        assert_eq!(a, train(7));
        let enc = a.encode(&ds).unwrap();
        assert_eq!((enc.len(), enc.dim()), (200, 3));
        assert_eq!(enc.ids(), ds.ids());
        assert_eq!(enc, a.encode(&ds).unwrap());
        assert!(a.encode(&uniform(3, 9, 1)).is_err());
        assert!(Autoencoder::init(10, 10, 3, 0).is_err());
        assert!(Autoencoder::init(10, 6, 6, 0).is_err());
    }

    #[test]
    fn autoencoder_reduces_reconstruction_error() {
        let ds = uniform(2000, 40, 2);
        let mut ae = Autoencoder::init(40, 16, 8, 3).unwrap();
        let report = ae.train(&ds, &LlshConfig::default().autoencoder).unwrap();
        assert!(report.final_mse < report.initial_mse / 2.0, "{report:?}");
        let enc = ae.encode(&ds).unwrap();
        for c in 0..8 {
            let col: Vec<f64> = enc.rows().map(|r| r[c]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            assert!(var > 0.0, "code column {c} collapsed");
        }
    }

    #[test]
    fn folded_scaling_matches_standardized_inputs() {
        let ds = generate(&DatasetSpec::new(Distribution::Lognormal, 100, 10, 3)).unwrap();
        let mut ae = Autoencoder::init(10, 6, 3, 1).unwrap();
        let (mean, std) = feature_stats(&ds);
        let scaled = standardize(&ds, &mean, &std).unwrap();
        let raw = Matrix::<f64>::from_dataset(&ds);
        let z = Matrix::<f64>::from_dataset(&scaled);
        let codes = ae.encoder().forward(&z).unwrap();
        let recon = ae.reconstruct(&z).unwrap();
        ae.fold_input_scaling(&mean, &std).unwrap();
        let folded = ae.encoder().forward(&raw).unwrap();
        for (a, b) in codes.data().iter().zip(folded.data()) {
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
        let folded_recon = ae.reconstruct(&raw).unwrap();
        for (r, (z, f)) in recon.data().iter().zip(folded_recon.data()).enumerate() {
            let expected = z * std[r % 10] + mean[r % 10];
            assert!((expected - f).abs() < 1e-9 * (1.0 + expected.abs()));
        }
        assert!(ae.fold_input_scaling(&mean[..3], &std).is_err());
    }

    #[test]
    fn feature_stats_examples() {
        let ds = Dataset::<f64>::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let (mean, std) = feature_stats(&ds);
        assert_eq!(mean, vec![2.0, 5.0]);
        assert_eq!(std, vec![1.0, 1.0], "constant feature keeps unit scale");
    }

    #[test]
    fn labels_match_family_hashes() {
        let cfg = small_cfg();
        let enc = random_encoded(50, cfg.m2, 4);
        let (labels, families) = make_labels(&enc, &cfg, 9).unwrap();
        assert_eq!((labels.rows(), labels.cols()), (50, cfg.tables * cfg.k));
        assert_eq!(families.len(), cfg.tables);
        for i in 0..enc.len() {
            let expected: Vec<i64> = families.iter().flat_map(|g| g.hash(enc.row(i)).unwrap()).collect();
            assert_eq!(labels.row(i), expected.as_slice());
        }
        assert!(make_labels(&random_encoded(5, cfg.m2 + 1, 1), &cfg, 0).is_err());
    }

    #[test]
    fn duplicate_points_share_labels() {
        let cfg = small_cfg();
        let row = vec![0.3, -1.2, 2.5, 0.0];
        let enc = Dataset::<f64>::from_rows(&[row.clone(), vec![1.0; 4], row]).unwrap();
        let (labels, _) = make_labels(&enc, &cfg, 1).unwrap();
        assert_eq!(labels.row(0), labels.row(2));
    }

    #[test]
    fn ensemble_labels() {
        let cfg = LlshConfig {
            ensemble_size: 3,
            ..small_cfg()
        };
        let enc = random_encoded(40, cfg.m2, 5);
        let (basic, _) = make_labels(&enc, &cfg, 11).unwrap();
        let (single, _) = ensemble_labels_from_seeds(&enc, &cfg, &[11]).unwrap();
        assert_eq!(single, basic);
        let (same, sets) = ensemble_labels_from_seeds(&enc, &cfg, &[11, 11, 11]).unwrap();
        assert_eq!(same, basic);
        assert_eq!(sets.len(), 3);
        let (mixed, sets) = make_ensemble_labels(&enc, &cfg, 11).unwrap();
        assert_eq!((mixed.rows(), mixed.cols()), (basic.rows(), basic.cols()));
        assert_eq!(sets.len(), 3);
        // independent oracle: average the three blocks and round
        let blocks: Vec<HashMatrix> = ensemble_seeds(11, 3)
            .into_iter()
            .map(|s| make_labels(&enc, &cfg, s).unwrap().0)
            .collect();
        for (i, &v) in mixed.data().iter().enumerate() {
            let mean = blocks.iter().map(|b| b.data()[i] as f64).sum::<f64>() / 3.0;
            assert_eq!(v, mean.round() as i64);
        }
        let one = LlshConfig {
            ensemble_size: 1,
            ..cfg
        };
        assert!(make_ensemble_labels(&enc, &one, 11).is_err());
    }

    #[test]
    fn half_away_from_zero_rounding_of_ensemble_means() {
        let cfg = LlshConfig {
            tables: 1,
            k: 1,
            m2: 1,
            width: 1.0,
            ..small_cfg()
        };
        // two families hashing to -1 and -2, then to 1 and 2
        let fam = |a: f64| vec![HashFamily::new(vec![crate::e2lsh::StableHashFunction::new(vec![a], 0.5, 1.0).unwrap()]).unwrap()];
        let enc = Dataset::<f64>::from_rows(&[vec![-1.2], vec![1.2]]).unwrap();
        let a = label_block(&enc, &fam(1.0), cfg.k);
        let b = label_block(&enc, &fam(2.0), cfg.k);
        assert_eq!(a.data(), &[-1, 1]);
        assert_eq!(b.data(), &[-2, 2]);
        let mean: Vec<i64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| ((x + y) as f64 / 2.0).round() as i64)
            .collect();
        assert_eq!(mean, vec![-2, 2]);
    }

    #[test]
    fn zero_unit_predicts_rounded_mean() {
        let unit = Mlp::<f64>::zeros(&[2, 3, 2]).unwrap();
        let units = HashUnits::new(vec![unit], vec![1.5, -2.5], vec![1.0, 3.0]).unwrap();
        let h = units.predict_hash(&[0.7f64, 0.1]).unwrap();
        assert_eq!(h.data(), &[2, -3]);
        assert_eq!(h, units.predict_hash(&[0.7f64, 0.1]).unwrap());
        assert!(units.predict_hash(&[0.0f64]).is_err());
        assert!(HashUnits::new(vec![Mlp::zeros(&[2, 2]).unwrap()], vec![0.0; 2], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn batch_prediction_matches_single() {
        let cfg = small_cfg();
        let enc = random_encoded(30, cfg.m2, 6);
        let (labels, _) = make_labels(&enc, &cfg, 2).unwrap();
        let (units, _) = train_llsh(&enc, &labels, &cfg, 3).unwrap();
        let batch = units.predict_batch(&Matrix::from_dataset(&enc)).unwrap();
        for i in 0..enc.len() {
            assert_eq!(batch.row(i), units.predict_hash(enc.row(i)).unwrap().data());
        }
    }

    #[test]
    fn constant_labels_are_fit_exactly() {
        let cfg = small_cfg();
        let enc = random_encoded(60, cfg.m2, 7);
        let labels = HashMatrix::new(60, cfg.tables * cfg.k, vec![3; 60 * cfg.tables * cfg.k]).unwrap();
        let (units, report) = train_llsh(&enc, &labels, &cfg, 1).unwrap();
        assert_eq!(report.degenerate_columns.len(), cfg.tables * cfg.k);
        let pred = units.predict_batch(&Matrix::from_dataset(&enc)).unwrap();
        assert_eq!(fitting_rate(&pred, &labels).unwrap(), 1.0);
    }

    #[test]
    fn unit_training_ignores_other_columns() {
        let cfg = LlshConfig {
            tables: 2,
            ..small_cfg()
        };
        let enc = random_encoded(80, cfg.m2, 8);
        let (labels, _) = make_labels(&enc, &cfg, 4).unwrap();
        let (a, _) = train_llsh(&enc, &labels, &cfg, 5).unwrap();
        let mut changed = labels.clone();
        for r in 0..changed.rows() {
            for v in &mut changed.row_mut(r)[cfg.k..] {
                *v += 7 * (r as i64 % 3);
            }
        }
        let (b, _) = train_llsh(&enc, &changed, &cfg, 5).unwrap();
        assert_eq!(a.units()[0], b.units()[0]);
        assert_eq!(a.label_mean()[..cfg.k], b.label_mean()[..cfg.k]);
        assert_ne!(a.units()[1], b.units()[1]);
        assert!(train_llsh(&enc, &labels.column_block(0, cfg.k), &cfg, 5).is_err());
    }

    #[test]
    fn self_consistent_labels_fit_perfectly() {
        let cfg = small_cfg();
        let enc = random_encoded(40, cfg.m2, 9);
        let (labels, _) = make_labels(&enc, &cfg, 1).unwrap();
        let (units, _) = train_llsh(&enc, &labels, &cfg, 2).unwrap();
        let x = Matrix::from_dataset(&enc);
        let own = units.predict_batch(&x).unwrap();
        assert_eq!(fitting_rate(&units.predict_batch(&x).unwrap(), &own).unwrap(), 1.0);
        let rate = fitting_rate(&own, &labels).unwrap();
        assert!((0.0..=1.0).contains(&rate));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_cfg();
        let ds = uniform(300, 10, 3);
        let (a, ra) = fit_model(&ds, &cfg, 42).unwrap();
        let (b, rb) = fit_model(&ds, &cfg, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.holdout_fitting_rate, rb.holdout_fitting_rate);
        assert_eq!(ra.holdout_rows, 30);
        assert!((0.0..=1.0).contains(&ra.holdout_fitting_rate));
    }

    fn small_model() -> (LlshModel, Arc<Dataset>) {
        let ds = uniform(400, 10, 21);
        let (model, _) = fit_model(&ds, &small_cfg(), 1).unwrap();
        (model, Arc::new(ds))
    }

    #[test]
    fn model_round_trip() {
        let (model, _) = small_model();
        let mut buf = Vec::new();
        let written = model.write_to(&mut buf).unwrap();
        assert_eq!(written, buf.len() as u64);
        assert_eq!(LlshModel::read_from(buf.as_slice()).unwrap(), model);
        buf.push(0);
        assert!(LlshModel::read_from(buf.as_slice()).is_err());
        assert!(LlshModel::read_from(&buf[..buf.len() - 9]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(LlshModel::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn model_rejects_mismatched_parts() {
        let (model, _) = small_model();
        let mut shape = model.shape();
        shape.m1 += 1;
        assert!(LlshModel::new(shape, model.encoder().clone(), model.units().clone()).is_err());
        let wrong = Mlp::new(vec![DenseLayer::zeros(4, 3)]).unwrap();
        let units = HashUnits::new(vec![wrong; 4], vec![0.0; 12], vec![1.0; 12]).unwrap();
        assert!(LlshModel::new(model.shape(), model.encoder().clone(), units).is_err());
    }

    #[test]
    fn index_contains_every_point_in_every_table() {
        let (model, ds) = small_model();
        let idx = LlshIndex::build(Arc::new(model), ds.clone(), 3).unwrap();
        assert_eq!(idx.table_set().total_entries(), 4 * ds.len());
        assert_eq!(idx.table_len(), ds.len() as u64);
        for i in [0, 17, 399] {
            let res = idx.query(ds.row(i), 1).unwrap();
            assert_eq!(res[0].id, ds.id(i));
            assert_eq!(res[0].distance, 0.0);
        }
        assert!(idx.query(&[0.0f32; 3], 1).is_err());
        let again = LlshIndex::build(idx.model().clone(), ds.clone(), 3).unwrap();
        assert_eq!(again.table_set(), idx.table_set());
    }

    #[test]
    fn identical_points_share_buckets() {
        let (model, _) = small_model();
        let mut rows: Vec<Vec<f32>> = uniform(20, 10, 5).rows().map(<[f32]>::to_vec).collect();
        rows.push(rows[3].clone());
        let ds = Arc::new(Dataset::from_rows(&rows).unwrap());
        let idx = LlshIndex::build(Arc::new(model), ds.clone(), 1).unwrap();
        let cands = idx.candidates(ds.row(3)).unwrap();
        assert!(cands.contains(&3) && cands.contains(&20));
    }

    #[test]
    fn query_results_are_sorted_candidates() {
        let (model, ds) = small_model();
        let idx = LlshIndex::build(Arc::new(model), ds.clone(), 2).unwrap();
        let q = uniform(1, 10, 99);
        let res = idx.query(q.row(0), 10).unwrap();
        let cands = idx.candidates(q.row(0)).unwrap();
        assert_eq!(res.len(), cands.len().min(10));
        assert!(res.windows(2).all(|w| (w[0].distance, w[0].id) <= (w[1].distance, w[1].id)));
        assert!(res.iter().all(|n| cands.contains(&ds.row_of_id(n.id).unwrap())));
    }

    #[test]
    fn index_round_trip() {
        let (model, ds) = small_model();
        let idx = LlshIndex::build(Arc::new(model), ds.clone(), 4).unwrap();
        let mut buf = Vec::new();
        idx.write_to(&mut buf).unwrap();
        let back = LlshIndex::read_from(buf.as_slice(), ds.clone()).unwrap();
        assert_eq!(back.table_set(), idx.table_set());
        assert_eq!(back.model().as_ref(), idx.model().as_ref());
        let q = uniform(1, 10, 7);
        assert_eq!(back.query(q.row(0), 5).unwrap(), idx.query(q.row(0), 5).unwrap());
        let other = Arc::new(uniform(399, 10, 1));
        assert!(LlshIndex::read_from(buf.as_slice(), other).is_err());
        assert!(LlshIndex::read_from(&buf[..buf.len() - 1], ds).is_err());
    }

    #[test]
    fn model_byte_accounting() {
        let (model, _) = small_model();
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let params = model.param_count() as u64;
        assert_eq!(model.parameter_bytes(), 4 * params + 16 * 12);
        // header, layer shapes and magic words are the only other bytes
        assert!(buf.len() as u64 > model.parameter_bytes());
        assert!((buf.len() as u64) < model.parameter_bytes() + 200);
    }
}
