//! Dense ReLU networks trained with Adam on mean squared error.
//!
//! Gradients are derived by hand (reverse accumulation through dense layers
//! and ReLU); [`finite_diff_grad`] is an independent central-difference
//! oracle for small networks.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;
use crate::serial::{BinReader, BinWriter};
use crate::vecdata::Dataset;

pub const MLP_MAGIC: &[u8; 4] = b"MLP1";

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values do not form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn from_dataset<U: Scalar>(ds: &Dataset<U>) -> Self {
        Self {
            rows: ds.len(),
            cols: ds.dim(),
            data: ds.values().iter().map(|&v| T::of_f64(v.as_f64())).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies the given rows into a new matrix.
    pub fn gather(&self, rows: &[usize]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Self {
            rows: rows.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..start + width`.
    pub fn column_block(&self, start: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(self.rows * width);
        for r in self.iter_rows() {
            data.extend_from_slice(&r[start..start + width]);
        }
        Self {
            rows: self.rows,
            cols: width,
            data,
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = W x + b` with `W` stored `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    inputs: usize,
    outputs: usize,
    weights: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn new(inputs: usize, outputs: usize, weights: Vec<T>, bias: Vec<T>) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::ShapeMismatch("layer dimensions must be positive".into()));
        }
        if weights.len() != inputs * outputs || bias.len() != outputs {
            return Err(Error::ShapeMismatch(format!(
                "layer {inputs}->{outputs} given {} weights and {} biases",
                weights.len(),
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("non-finite layer parameter".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
        })
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    /// Glorot-uniform weights in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn glorot(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| T::of_f64(rng.random_range(-limit..limit)))
            .collect();
        Self {
            inputs,
            outputs,
            weights,
            bias: vec![T::zero(); outputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn apply(&self, x: &[T], out: &mut [T]) {
        for (o, (w, &b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.bias))
        {
            *o = dot(w, x) + b;
        }
    }
}

/// Dense layers with ReLU between them and identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(layers: Vec<DenseLayer<T>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs != w[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer output {} does not feed input {}",
                    w[0].outputs, w[1].inputs
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialized network with the given widths
    /// (`[input, hidden..., output]`).
    pub fn init(widths: &[usize], rng: &mut Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid layer widths {widths:?}")));
        }
        Self::new(widths.windows(2).map(|w| DenseLayer::glorot(w[0], w[1], rng)).collect())
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid layer widths {widths:?}")));
        }
        Self::new(widths.windows(2).map(|w| DenseLayer::zeros(w[0], w[1])).collect())
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        Error::check_dim(self.input_dim(), x.cols())?;
        let mut acts = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            acts = self.layer_forward(layer, &acts, i + 1 < self.layers.len());
        }
        Ok(acts)
    }

    pub fn forward_one(&self, x: &[T]) -> Result<Vec<T>> {
        Error::check_dim(self.input_dim(), x.len())?;
        let mut cur = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = vec![T::zero(); layer.outputs];
            layer.apply(&cur, &mut next);
            if i + 1 < self.layers.len() {
                relu_in_place(&mut next);
            }
            cur = next;
        }
        Ok(cur)
    }

    fn layer_forward(&self, layer: &DenseLayer<T>, x: &Matrix<T>, hidden: bool) -> Matrix<T> {
        let mut out = Matrix::zeros(x.rows(), layer.outputs);
        for r in 0..x.rows() {
            let o = out.row_mut(r);
            layer.apply(x.row(r), o);
            if hidden {
                relu_in_place(o);
            }
        }
        out
    }

    /// All parameters in canonical order: per layer, weights then biases.
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[T]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, network has {}",
                params.len(),
                self.param_count()
            )));
        }
        let mut it = params.iter().copied();
        for s in self.param_slices_mut() {
            for (p, v) in s.iter_mut().zip(&mut it) {
                *p = v;
            }
        }
        Ok(())
    }

    fn param_slices_mut(&mut self) -> impl Iterator<Item = &mut [T]> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of_f64(x.as_f64())).collect();
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    weights: conv(&l.weights),
                    bias: conv(&l.bias),
                })
                .collect(),
        }
    }

    /// Rounds every parameter to `f32` precision, as stored on disk.
    pub fn quantize_f32(&mut self) {
        for s in self.param_slices_mut() {
            for p in s {
                *p = p.quantize_f32();
            }
        }
    }

    /// Serialized size in bytes.
    pub fn blob_len(&self) -> u64 {
        4 + 4 + 8 * self.layers.len() as u64 + 4 * self.param_count() as u64
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<u64> {
        let mut w = BinWriter::new(writer);
        self.write(&mut w)?;
        Ok(w.bytes_written())
    }

    pub(crate) fn write<W: Write>(&self, w: &mut BinWriter<W>) -> Result<()> {
        w.bytes(MLP_MAGIC)?;
        w.u32(self.layers.len() as u32)?;
        for l in &self.layers {
            w.u32(l.inputs as u32)?;
            w.u32(l.outputs as u32)?;
        }
        for l in &self.layers {
            for &v in l.weights.iter().chain(&l.bias) {
                w.f32(v.as_f64() as f32)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut r = BinReader::new(reader);
        let net = Self::read(&mut r)?;
        r.finish()?;
        Ok(net)
    }

    pub(crate) fn read<R: Read>(r: &mut BinReader<R>) -> Result<Self> {
        r.magic(MLP_MAGIC)?;
        let count = r.u32()? as usize;
        if count == 0 || count > 1024 {
            return Err(r.error(format!("implausible layer count {count}")));
        }
        let dims = (0..count)
            .map(|_| Ok((r.u32()? as usize, r.u32()? as usize)))
            .collect::<Result<Vec<_>>>()?;
        let mut layers = Vec::with_capacity(count);
        for (inputs, outputs) in dims {
            let at = r.offset();
            let mut read_n = |n: usize| -> Result<Vec<T>> {
                (0..n)
                    .map(|_| {
                        let v = r.f32()?;
                        if v.is_finite() {
                            Ok(T::of_f64(v as f64))
                        } else {
                            Err(r.error("non-finite parameter"))
                        }
                    })
                    .collect()
            };
            let weights = read_n(inputs * outputs)?;
            let bias = read_n(outputs)?;
            layers.push(
                DenseLayer::new(inputs, outputs, weights, bias)
                    .map_err(|e| Error::parse(crate::error::Location::Byte(at), e.to_string()))?,
            );
        }
        Self::new(layers).map_err(|e| r.error(e.to_string()))
    }
}

#[inline]
fn relu_in_place<T: Scalar>(v: &mut [T]) {
    for x in v {
        if *x < T::zero() {
            *x = T::zero();
        }
    }
}

fn check_pair<T: Scalar>(y: &Matrix<T>, target: &Matrix<T>) -> Result<()> {
    if y.rows() != target.rows() || y.cols() != target.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} predictions against {}x{} targets",
            y.rows(),
            y.cols(),
            target.rows(),
            target.cols()
        )));
    }
    Ok(())
}

/// Mean of squared differences over every entry.
pub fn mse_loss<T: Scalar>(y: &Matrix<T>, target: &Matrix<T>) -> Result<T> {
    check_pair(y, target)?;
    if y.data().is_empty() {
        return Ok(T::zero());
    }
    let sum = y
        .data()
        .iter()
        .zip(target.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(sum / T::of_f64(y.data().len() as f64))
}

/// Parameter gradients in the canonical order of [`Mlp::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T>(pub Vec<T>);

impl<T: Scalar> Gradients<T> {
    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    /// Largest `|a - b| / max(|a|, |b|, floor)` over all entries.
    pub fn max_relative_error(&self, other: &Self, floor: T) -> T {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(&a, &b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
            .fold(T::zero(), T::max)
    }
}

/// Activations of every layer for one batch, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    acts: Vec<Matrix<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn output(&self) -> &Matrix<T> {
        &self.acts[self.acts.len() - 1]
    }
}

impl<T: Scalar> Mlp<T> {
    pub fn trace(&self, x: &Matrix<T>) -> Result<Trace<T>> {
        Error::check_dim(self.input_dim(), x.cols())?;
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(x.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let next = self.layer_forward(layer, &acts[i], i + 1 < n_layers);
            acts.push(next);
        }
        Ok(Trace { acts })
    }
}

/// Reverse accumulation from `delta`, the loss gradient with respect to the
/// network output. Also returns the gradient with respect to the input when
/// `input_grad` is set.
pub fn backprop<T: Scalar>(
    net: &Mlp<T>,
    trace: &Trace<T>,
    mut delta: Matrix<T>,
    input_grad: bool,
) -> Result<(Gradients<T>, Option<Matrix<T>>)> {
    let out = trace.output();
    if delta.rows() != out.rows() || delta.cols() != out.cols() {
        return Err(Error::ShapeMismatch("output gradient does not match trace".into()));
    }
    let n_layers = net.layers.len();
    let mut grads: Vec<(Vec<T>, Vec<T>)> = Vec::with_capacity(n_layers);
    let mut d_input = None;
    for l in (0..n_layers).rev() {
        let layer = &net.layers[l];
        let input = &trace.acts[l];
        let mut dw = vec![T::zero(); layer.weights.len()];
        let mut db = vec![T::zero(); layer.outputs];
        for r in 0..input.rows() {
            let a = input.row(r);
            for (o, &d) in delta.row(r).iter().enumerate() {
                if d != T::zero() {
                    axpy(&mut dw[o * layer.inputs..(o + 1) * layer.inputs], d, a);
                    db[o] += d;
                }
            }
        }
        if l > 0 || input_grad {
            let mut prev = Matrix::zeros(input.rows(), layer.inputs);
            for r in 0..input.rows() {
                let dst = prev.row_mut(r);
                for (o, &d) in delta.row(r).iter().enumerate() {
                    if d != T::zero() {
                        axpy(dst, d, &layer.weights[o * layer.inputs..(o + 1) * layer.inputs]);
                    }
                }
                if l > 0 {
                    // ReLU'(z) = 0 for z <= 0; the stored activation is max(z, 0)
                    for (g, &a) in dst.iter_mut().zip(input.row(r)) {
                        if a <= T::zero() {
                            *g = T::zero();
                        }
                    }
                }
            }
            if l > 0 {
                delta = prev;
            } else {
                d_input = Some(prev);
            }
        }
        grads.push((dw, db));
    }
    grads.reverse();
    let mut flat = Vec::with_capacity(net.param_count());
    for (dw, db) in grads {
        flat.extend(dw);
        flat.extend(db);
    }
    Ok((Gradients(flat), d_input))
}

/// Gradient of the mean squared error with respect to `y`.
pub fn mse_grad<T: Scalar>(y: &Matrix<T>, target: &Matrix<T>) -> Result<Matrix<T>> {
    check_pair(y, target)?;
    let scale = T::of_f64(2.0 / y.data().len().max(1) as f64);
    let data = y
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| scale * (a - b))
        .collect();
    Matrix::new(y.rows(), y.cols(), data)
}

/// MSE loss and its exact gradient for the batch `x` against `target`.
/// The ReLU derivative at 0 is taken as 0.
pub fn backward<T: Scalar>(net: &Mlp<T>, x: &Matrix<T>, target: &Matrix<T>) -> Result<(T, Gradients<T>)> {
    Error::check_dim(net.input_dim(), x.cols())?;
    if target.rows() != x.rows() || target.cols() != net.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "targets are {}x{}, expected {}x{}",
            target.rows(),
            target.cols(),
            x.rows(),
            net.output_dim()
        )));
    }
    let trace = net.trace(x)?;
    let loss = mse_loss(trace.output(), target)?;
    let delta = mse_grad(trace.output(), target)?;
    let (grads, _) = backprop(net, &trace, delta, false)?;
    Ok((loss, grads))
}

/// Central differences `(L(p + eps) - L(p - eps)) / 2 eps` per parameter.
pub fn finite_diff_grad<T: Scalar>(net: &Mlp<T>, x: &Matrix<T>, target: &Matrix<T>, eps: T) -> Result<Gradients<T>> {
    let base = net.params();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    let mut params = base.clone();
    let two_eps = eps + eps;
    for i in 0..base.len() {
        params[i] = base[i] + eps;
        probe.set_params(&params)?;
        let up = mse_loss(&probe.forward(x)?, target)?;
        params[i] = base[i] - eps;
        probe.set_params(&params)?;
        let down = mse_loss(&probe.forward(x)?, target)?;
        params[i] = base[i];
        out.push((up - down) / two_eps);
    }
    Ok(Gradients(out))
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u32,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
            t: 0,
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Updates `params` in place.
    pub fn update(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer state does not match parameters".into()));
        }
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t as i32);
        let c2 = one - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (one - self.beta1) * g;
            *v = self.beta2 * *v + (one - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn step(&mut self, net: &mut Mlp<T>, grads: &Gradients<T>) -> Result<()> {
        if grads.0.len() != net.param_count() {
            return Err(Error::ShapeMismatch("gradient does not match network".into()));
        }
        if self.m.len() != net.param_count() {
            return Err(Error::ShapeMismatch("optimizer state does not match network".into()));
        }
        self.t += 1;
        let one = T::one();
        let c1 = one - self.beta1.powi(self.t as i32);
        let c2 = one - self.beta2.powi(self.t as i32);
        let mut i = 0;
        for s in net.param_slices_mut() {
            for p in s {
                let g = grads.0[i];
                let m = &mut self.m[i];
                let v = &mut self.v[i];
                *m = self.beta1 * *m + (one - self.beta1) * g;
                *v = self.beta2 * *v + (one - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                i += 1;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without improvement of the monitored score before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_score: f64,
    pub initial_loss: f64,
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minibatch Adam on MSE.
///
/// After every epoch `score` evaluates the network (higher is better, ties
/// broken by lower epoch loss). The best parameters are restored at the end;
/// training stops early once `patience` epochs pass without improvement.
pub fn fit<T: Scalar>(
    net: &mut Mlp<T>,
    x: &Matrix<T>,
    target: &Matrix<T>,
    cfg: &TrainConfig,
    mut score: impl FnMut(&Mlp<T>) -> f64,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_pair(&Matrix::<T>::zeros(x.rows(), net.output_dim()), target)?;
    Error::check_dim(net.input_dim(), x.cols())?;
    let mut rng = rng::seeded(cfg.seed);
    let mut adam = AdamState::new(net.param_count(), T::of_f64(cfg.lr));
    let initial_loss = mse_loss(&net.forward(x)?, target)?.as_f64();
    let mut best = (score(net), net.params(), 0usize);
    let mut best_loss = initial_loss;
    let mut order: Vec<usize> = (0..x.rows()).collect();
    let mut epoch_losses = Vec::new();
    let mut stale = 0;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.gather(chunk);
            let yb = target.gather(chunk);
            let (loss, grads) = backward(net, &xb, &yb)?;
            total += loss.as_f64() * chunk.len() as f64;
            adam.step(net, &grads)?;
        }
        let loss = total / x.rows().max(1) as f64;
        epoch_losses.push(loss);
        let s = score(net);
        if s > best.0 || (s == best.0 && loss < best_loss) {
            best = (s, net.params(), epoch);
            best_loss = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    net.set_params(&best.1)?;
    Ok(TrainReport {
        epochs: epoch_losses.len(),
        best_epoch: best.2,
        best_score: best.0,
        initial_loss,
        epoch_losses,
    })
}
