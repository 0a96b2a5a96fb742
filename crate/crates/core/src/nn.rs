//! Dense feed-forward classifier with softmax cross-entropy and mini-batch SGD.
//!
//! Parameters live in one flat vector so that aggregation and similarity code
//! can treat a model as a plain point in parameter space. Layer `l` occupies a
//! contiguous block: the `fan_out x fan_in` weight matrix (row-major) followed
//! by `fan_out` biases. Hidden layers use ReLU; the last layer emits logits.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::InferenceMatrix;
use crate::error::{FlisError, Result};
use crate::rng;

/// Row-major dense matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(FlisError::invalid(
                "matrix",
                format!("{} values cannot fill a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(FlisError::invalid("matrix", "rows have unequal lengths"));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    /// Frobenius norm.
    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Flat parameter vector of a dense network plus its layer shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    weights: Vec<f64>,
    shape: Vec<(usize, usize)>,
    activation: Activation,
}

fn expected_len(shape: &[(usize, usize)]) -> usize {
    shape.iter().map(|&(i, o)| i * o + o).sum()
}

fn validate_shape(shape: &[(usize, usize)]) -> Result<()> {
    if shape.is_empty() {
        return Err(FlisError::invalid("shape", "a model needs at least one layer"));
    }
    if shape.iter().any(|&(i, o)| i == 0 || o == 0) {
        return Err(FlisError::invalid("shape", "layer dimensions must be positive"));
    }
    if shape.windows(2).any(|w| w[0].1 != w[1].0) {
        return Err(FlisError::invalid("shape", "consecutive layers do not chain"));
    }
    Ok(())
}

impl ModelParams {
    pub fn new(weights: Vec<f64>, shape: Vec<(usize, usize)>) -> Result<Self> {
        validate_shape(&shape)?;
        let want = expected_len(&shape);
        if weights.len() != want {
            return Err(FlisError::invalid(
                "weights",
                format!("expected {want} parameters for shape {shape:?}, got {}", weights.len()),
            ));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(FlisError::invalid("weights", "parameters must be finite"));
        }
        Ok(ModelParams { weights, shape, activation: Activation::Relu })
    }

    pub fn zeros(shape: Vec<(usize, usize)>) -> Result<Self> {
        validate_shape(&shape)?;
        let n = expected_len(&shape);
        Ok(ModelParams { weights: vec![0.0; n], shape, activation: Activation::Relu })
    }

    /// Builds the shape of an MLP from a list of layer widths, e.g. `[16, 32, 8]`.
    pub fn mlp_shape(widths: &[usize]) -> Vec<(usize, usize)> {
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(shape: Vec<(usize, usize)>, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(shape)?;
        let mut rng = rng::stream(seed, rng::TAG_INIT, &[]);
        let mut offset = 0;
        for &(fan_in, fan_out) in &model.shape {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in &mut model.weights[offset..offset + fan_in * fan_out] {
                *w = rng.random_range(-limit..limit);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(model)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn shape(&self) -> &[(usize, usize)] {
        &self.shape
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.weights.len()
    }

    pub fn input_dim(&self) -> usize {
        self.shape[0].0
    }

    pub fn num_classes(&self) -> usize {
        self.shape[self.shape.len() - 1].1
    }

    /// Same architecture, new parameter values.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        ModelParams::new(weights, self.shape.clone())
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let offset: usize = self.shape[..l].iter().map(|&(i, o)| i * o + o).sum();
        let (fan_in, fan_out) = self.shape[l];
        let w = &self.weights[offset..offset + fan_in * fan_out];
        let b = &self.weights[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        (w, b)
    }
}

/// Feature matrix with integer class labels.
///
/// `ids` records the index of each sample in the corpus it was drawn from, so
/// that disjointness between client and server datasets can be audited.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledData {
    features: Matrix,
    labels: Vec<usize>,
    ids: Vec<usize>,
    num_classes: usize,
}

impl LabeledData {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ids = (0..labels.len()).collect();
        Self::with_ids(features, labels, ids, num_classes)
    }

    pub fn with_ids(features: Matrix, labels: Vec<usize>, ids: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() || ids.len() != labels.len() {
            return Err(FlisError::invalid(
                "labels",
                format!("{} feature rows, {} labels, {} ids", features.rows(), labels.len(), ids.len()),
            ));
        }
        if num_classes == 0 {
            return Err(FlisError::invalid("num_classes", "must be at least 1"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(FlisError::invalid("labels", format!("label {bad} is not below {num_classes}")));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(FlisError::invalid("features", "feature values must be finite"));
        }
        Ok(LabeledData { features, labels, ids, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Rows at `indices`, in that order, keeping their ids.
    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        LabeledData {
            features: Matrix { rows: indices.len(), cols: d, data },
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Sorted distinct labels present.
    pub fn label_set(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &y in &self.labels {
            seen[y] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    OneHot,
    Soft,
}

impl Default for InferenceMode {
    fn default() -> Self {
        InferenceMode::OneHot
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

/// Logits of every row; keeps hidden pre-activations when `cache` is given.
fn logits_rows(model: &ModelParams, x: &[f64], rows: usize, mut cache: Option<&mut Vec<Vec<f64>>>) -> Vec<f64> {
    let mut input = x.to_vec();
    let last = model.shape.len() - 1;
    for (l, &(fan_in, fan_out)) in model.shape.iter().enumerate() {
        let (w, b) = model.layer(l);
        let mut z = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let a = &input[r * fan_in..(r + 1) * fan_in];
            let out = &mut z[r * fan_out..(r + 1) * fan_out];
            for (o, slot) in out.iter_mut().enumerate() {
                let wr = &w[o * fan_in..(o + 1) * fan_in];
                *slot = b[o] + wr.iter().zip(a).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        if let Some(c) = cache.as_deref_mut() {
            c.push(input);
        }
        input = if l < last { z.iter().map(|&v| v.max(0.0)).collect() } else { z };
    }
    input
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn check_input(model: &ModelParams, cols: usize) -> Result<()> {
    if cols != model.input_dim() {
        return Err(FlisError::InputShape { expected: model.input_dim(), found: cols });
    }
    Ok(())
}

/// Per-row class probabilities.
pub fn forward(model: &ModelParams, features: &Matrix) -> Result<Matrix> {
    check_input(model, features.cols())?;
    let c = model.num_classes();
    let mut out = logits_rows(model, features.as_slice(), features.rows(), None);
    for row in out.chunks_mut(c) {
        softmax_in_place(row);
    }
    Matrix::new(features.rows(), c, out)
}

/// Mean softmax cross-entropy.
pub fn loss(model: &ModelParams, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(FlisError::EmptyInput("loss needs at least one sample"));
    }
    check_input(model, data.dim())?;
    let c = model.num_classes();
    let logits = logits_rows(model, data.features.as_slice(), data.len(), None);
    let total: f64 = logits
        .chunks(c)
        .zip(&data.labels)
        .map(|(row, &y)| log_sum_exp(row) - row[y])
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean cross-entropy and its gradient over the given rows.
fn loss_and_gradient(model: &ModelParams, x: &[f64], labels: &[usize]) -> (f64, Vec<f64>) {
    let rows = labels.len();
    let c = model.num_classes();
    let mut inputs = Vec::with_capacity(model.shape.len());
    let logits = logits_rows(model, x, rows, Some(&mut inputs));

    let inv = 1.0 / rows as f64;
    let mut total = 0.0;
    // dL/dz for the output layer
    let mut delta = logits.clone();
    for (r, row) in delta.chunks_mut(c).enumerate() {
        let y = labels[r];
        total += log_sum_exp(&logits[r * c..(r + 1) * c]) - logits[r * c + y];
        softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }

    let mut grad = vec![0.0; model.param_count()];
    let mut offsets = Vec::with_capacity(model.shape.len());
    let mut acc = 0;
    for &(i, o) in &model.shape {
        offsets.push(acc);
        acc += i * o + o;
    }

    for l in (0..model.shape.len()).rev() {
        let (fan_in, fan_out) = model.shape[l];
        let a = &inputs[l];
        let off = offsets[l];
        {
            let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let ar = &a[r * fan_in..(r + 1) * fan_in];
                for (o, &dv) in d.iter().enumerate() {
                    if dv == 0.0 {
                        continue;
                    }
                    gb[o] += dv;
                    for (g, &av) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(ar) {
                        *g += dv * av;
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let (w, _) = model.layer(l);
        let mut prev = vec![0.0; rows * fan_in];
        for r in 0..rows {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            let p = &mut prev[r * fan_in..(r + 1) * fan_in];
            for (o, &dv) in d.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                for (pv, &wv) in p.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *pv += dv * wv;
                }
            }
            // ReLU mask: the input of layer l is relu(z_{l-1}), positive iff z > 0
            for (pv, &av) in p.iter_mut().zip(&a[r * fan_in..(r + 1) * fan_in]) {
                if av <= 0.0 {
                    *pv = 0.0;
                }
            }
        }
        delta = prev;
    }
    (total * inv, grad)
}

/// Mean loss and analytic gradient over a whole dataset.
pub fn gradient(model: &ModelParams, data: &LabeledData) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(FlisError::EmptyInput("gradient needs at least one sample"));
    }
    check_input(model, data.dim())?;
    Ok(loss_and_gradient(model, data.features.as_slice(), &data.labels))
}

/// Local mini-batch SGD starting from `model`.
///
/// Runs `epochs * ceil(M / batch)` steps; the sample order of each epoch is
/// drawn from `seed`. A batch size larger than the dataset is clamped to it.
pub fn client_update(model: &ModelParams, train: &LabeledData, cfg: &TrainConfig, seed: u64) -> Result<ModelParams> {
    if train.is_empty() {
        return Err(FlisError::EmptyInput("client training set is empty"));
    }
    check_input(model, train.dim())?;
    if cfg.epochs == 0 {
        return Err(FlisError::invalid("epochs", "must be at least 1"));
    }
    if cfg.batch_size == 0 {
        return Err(FlisError::invalid("batch_size", "must be at least 1"));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(FlisError::invalid("lr", "must be finite and non-negative"));
    }
    let m = train.len();
    let batch = cfg.batch_size.min(m);
    let d = train.dim();
    let mut current = model.clone();
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = rng::stream(seed, rng::TAG_TRAIN, &[]);
    let mut step = 0;
    let mut xb = Vec::with_capacity(batch * d);
    let mut yb = Vec::with_capacity(batch);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            xb.clear();
            yb.clear();
            for &i in chunk {
                xb.extend_from_slice(train.features.row(i));
                yb.push(train.labels[i]);
            }
            let (_, grad) = loss_and_gradient(&current, &xb, &yb);
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(FlisError::Diverged { step });
            }
            for (w, g) in current.weights.iter_mut().zip(&grad) {
                *w -= cfg.lr * g;
            }
            if current.weights.iter().any(|w| !w.is_finite()) {
                return Err(FlisError::Diverged { step });
            }
            step += 1;
        }
    }
    Ok(current)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 predictions per row.
pub fn predict(model: &ModelParams, features: &Matrix) -> Result<Vec<usize>> {
    check_input(model, features.cols())?;
    let c = model.num_classes();
    let logits = logits_rows(model, features.as_slice(), features.rows(), None);
    Ok(logits.chunks(c).map(argmax).collect())
}

/// Top-1 accuracy in `[0, 1]`.
pub fn accuracy(model: &ModelParams, data: &LabeledData) -> Result<f64> {
    if data.is_empty() {
        return Err(FlisError::EmptyInput("accuracy needs at least one sample"));
    }
    let pred = predict(model, &data.features)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Outputs of `model` on the server dataset, either as probabilities or as the
/// one-hot indicator of each row's argmax.
pub fn inference_matrix(model: &ModelParams, server_data: &LabeledData, mode: InferenceMode) -> Result<InferenceMatrix> {
    if server_data.is_empty() {
        return Err(FlisError::EmptyInput("server dataset is empty"));
    }
    let mut probs = forward(model, &server_data.features)?;
    if mode == InferenceMode::OneHot {
        for r in 0..probs.rows() {
            let row = probs.row_mut(r);
            let k = argmax(row);
            row.iter_mut().for_each(|v| *v = 0.0);
            row[k] = 1.0;
        }
    }
    Ok(InferenceMatrix::new(probs, 0))
}
