//! Predictive models (linear, MLP) with loss values, exact reverse-mode
//! parameter gradients, and Hessian-vector products.
//!
//! Gradients are computed by backpropagation: the loss derivative with
//! respect to the predictions is pulled back through the layers as a
//! vector-Jacobian product, so the full prediction Jacobian is never
//! materialized. Hessian-vector products push a tangent direction forward
//! through the same primal/adjoint passes (forward-over-reverse), which gives
//! exact `H v` for twice-differentiable activations; `relu` is rejected
//! rather than approximated.
//!
//! Parameter flattening order (fixed so checkpoints are portable): layer by
//! layer from the input, weight matrix first (row-major, input-unit major),
//! then the bias vector. The `linear` model is a pure weight matrix
//! `y_hat = X W` with no bias, so its parameter count equals
//! `input_dim * output_dim`.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use thiserror::Error;

use crate::numkernel::Matrix;
use crate::rng::RngStream;
use crate::synthdata::Dataset;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("loss is not twice differentiable: {0}")]
    Smoothness(String),
    #[error("checkpoint io error on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint parse error: {0}")]
    CheckpointParse(String),
}

/// Flat vector of model weights in the documented layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(p: usize) -> Self {
        ParamVector(vec![0.0; p])
    }

    pub fn from_vec(v: Vec<f64>) -> Self {
        ParamVector(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::numkernel::dot(&self.0, &other.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Returns `self + c * other`.
    pub fn add_scaled(&self, c: f64, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| a + c * b)
                .collect(),
        )
    }

    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        self.add_scaled(-1.0, other)
    }

    pub fn scale(&self, c: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * c).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// `(1 / 2n) ||Y - Y_hat||_F^2`
    HalfMseNormalized,
    /// `(1 / 2) ||Y - Y_hat||_F^2`
    SquaredErrorHalf,
    /// Mean over rows of `-sum_c y_c log softmax(y_hat)_c`
    CrossEntropy,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::HalfMseNormalized => "half-mse-normalized",
            LossKind::SquaredErrorHalf => "squared-error-half",
            LossKind::CrossEntropy => "cross-entropy",
        }
    }
}

/// Architecture plus loss convention for one predictive model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub dropout_rate: f64,
    pub loss: LossKind,
}

impl ModelSpec {
    /// Pure linear model `y_hat = X W`, no bias, no hidden layers.
    pub fn linear(input: usize, output: usize, loss: LossKind) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            layer_widths: vec![input, output],
            activation: Activation::Tanh,
            dropout_rate: 0.0,
            loss,
        }
    }

    /// MLP with the given widths (input, hidden..., output). Dropout applies
    /// to hidden activations only.
    pub fn mlp(
        layer_widths: Vec<usize>,
        activation: Activation,
        dropout_rate: f64,
        loss: LossKind,
    ) -> Result<Self, ModelError> {
        if layer_widths.len() < 3 {
            return Err(ModelError::InvalidSpec(
                "mlp needs at least one hidden layer; use linear otherwise".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(ModelError::InvalidSpec(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(ModelError::InvalidSpec("zero-width layer".into()));
        }
        Ok(ModelSpec {
            kind: ModelKind::Mlp,
            layer_widths,
            activation,
            dropout_rate,
            loss,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.layer_widths[1..self.layer_widths.len() - 1]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    /// Total flattened parameter count.
    pub fn param_count(&self) -> usize {
        match self.kind {
            ModelKind::Linear => self.input_dim() * self.output_dim(),
            ModelKind::Mlp => self
                .layer_widths
                .windows(2)
                .map(|w| w[0] * w[1] + w[1])
                .sum(),
        }
    }

    fn check_theta(&self, theta: &ParamVector) -> Result<(), ModelError> {
        if theta.len() != self.param_count() {
            return Err(ModelError::Dimension(format!(
                "parameter vector has length {} but spec implies {}",
                theta.len(),
                self.param_count()
            )));
        }
        Ok(())
    }

    fn check_inputs(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.cols() != self.input_dim() {
            return Err(ModelError::Dimension(format!(
                "input has {} columns but spec expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_targets(&self, y: &Matrix) -> Result<(), ModelError> {
        if y.cols() != self.output_dim() {
            return Err(ModelError::Dimension(format!(
                "targets have {} columns but spec expects {}",
                y.cols(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    fn check_mask(&self, mask: Option<&DropoutMask>) -> Result<(), ModelError> {
        if let Some(m) = mask {
            let widths: Vec<usize> = m.keep.iter().map(|layer| layer.len()).collect();
            if widths != self.hidden_widths() {
                return Err(ModelError::Dimension(format!(
                    "dropout mask shape {:?} does not match hidden widths {:?}",
                    widths,
                    self.hidden_widths()
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ModelKind::Linear => write!(
                f,
                "linear[{}->{}] loss={}",
                self.input_dim(),
                self.output_dim(),
                self.loss.name()
            ),
            ModelKind::Mlp => write!(
                f,
                "mlp{:?} {} drop={} loss={}",
                self.layer_widths,
                self.activation.name(),
                self.dropout_rate,
                self.loss.name()
            ),
        }
    }
}

/// Per-hidden-unit Bernoulli keep indicators (shared across rows of a batch)
/// plus the keep probability used for inverted-dropout scaling.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub keep: Vec<Vec<bool>>,
    pub keep_prob: f64,
    pub seed: u64,
}

impl DropoutMask {
    /// All-keep mask (forward with it equals the maskless forward).
    pub fn all_keep(spec: &ModelSpec) -> Self {
        DropoutMask {
            keep: spec.hidden_widths().iter().map(|&w| vec![true; w]).collect(),
            keep_prob: 1.0 - spec.dropout_rate,
            seed: 0,
        }
    }
}

/// Samples iid Bernoulli(1 - dropout_rate) keep indicators per hidden unit
/// from the stream `(seed, "dropout-mask")`.
pub fn sample_dropout_mask(spec: &ModelSpec, seed: u64) -> DropoutMask {
    let keep_prob = 1.0 - spec.dropout_rate;
    let mut rng = RngStream::new(seed, "dropout-mask");
    let keep = spec
        .hidden_widths()
        .iter()
        .map(|&w| (0..w).map(|_| rng.bernoulli(keep_prob)).collect())
        .collect();
    DropoutMask {
        keep,
        keep_prob,
        seed,
    }
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
    }
}

/// Derivative expressed through the activation value where possible.
fn activate_prime(act: Activation, z: f64, a: f64) -> f64 {
    match act {
        Activation::Tanh => 1.0 - a * a,
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    let mut out = Matrix::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(r, c, a.get(r, c) * b.get(r, c));
        }
    }
    out
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out[c] += m.get(r, c);
        }
    }
    out
}

/// Row-wise softmax with max subtraction.
fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut denom = 0.0;
        for c in 0..logits.cols() {
            let e = (row[c] - max).exp();
            out.set(r, c, e);
            denom += e;
        }
        for c in 0..logits.cols() {
            let v = out.get(r, c) / denom;
            out.set(r, c, v);
        }
    }
    out
}

struct LayerView<'a> {
    w: &'a [f64], // in x out, row-major
    b: &'a [f64],
    w_in: usize,
    w_out: usize,
}

fn layer_views<'a>(spec: &ModelSpec, theta: &'a ParamVector) -> Vec<LayerView<'a>> {
    let mut views = Vec::with_capacity(spec.num_layers());
    let mut offset = 0usize;
    let flat = theta.as_slice();
    for l in 0..spec.num_layers() {
        let w_in = spec.layer_widths[l];
        let w_out = spec.layer_widths[l + 1];
        let w = &flat[offset..offset + w_in * w_out];
        offset += w_in * w_out;
        let b = match spec.kind {
            ModelKind::Linear => &flat[0..0],
            ModelKind::Mlp => {
                let b = &flat[offset..offset + w_out];
                offset += w_out;
                b
            }
        };
        views.push(LayerView { w, b, w_in, w_out });
    }
    views
}

/// `X W + 1 b^T` for one layer.
fn affine(x: &Matrix, layer: &LayerView) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), layer.w_out);
    for r in 0..x.rows() {
        let xr = x.row(r);
        for j in 0..layer.w_out {
            let mut v = if layer.b.is_empty() { 0.0 } else { layer.b[j] };
            for (i, &xi) in xr.iter().enumerate() {
                v += xi * layer.w[i * layer.w_out + j];
            }
            out.set(r, j, v);
        }
    }
    out
}

/// `D W^T` used when pulling adjoints back through a layer.
fn backprop_through(delta: &Matrix, layer: &LayerView) -> Matrix {
    let mut out = Matrix::zeros(delta.rows(), layer.w_in);
    for r in 0..delta.rows() {
        let dr = delta.row(r);
        for i in 0..layer.w_in {
            let mut v = 0.0;
            for j in 0..layer.w_out {
                v += dr[j] * layer.w[i * layer.w_out + j];
            }
            out.set(r, i, v);
        }
    }
    out
}

struct ForwardCache {
    /// Inputs consumed by each layer: `inputs[0] = X`, then post-activation,
    /// post-dropout hidden activations.
    inputs: Vec<Matrix>,
    /// Pre-dropout activation values per hidden layer (for derivative terms).
    hidden_acts: Vec<Matrix>,
    /// Pre-activations per hidden layer.
    hidden_zs: Vec<Matrix>,
    predictions: Matrix,
}

fn run_forward(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Matrix,
    mask: Option<&DropoutMask>,
) -> Result<ForwardCache, ModelError> {
    spec.check_theta(theta)?;
    spec.check_inputs(x)?;
    spec.check_mask(mask)?;
    let layers = layer_views(spec, theta);
    let mut inputs = vec![x.clone()];
    let mut hidden_acts = Vec::new();
    let mut hidden_zs = Vec::new();
    for (l, layer) in layers.iter().enumerate() {
        let z = affine(inputs.last().unwrap(), layer);
        let is_output = l + 1 == layers.len();
        if is_output {
            return Ok(ForwardCache {
                inputs,
                hidden_acts,
                hidden_zs,
                predictions: z,
            });
        }
        let mut a = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                a.set(r, c, activate(spec.activation, z.get(r, c)));
            }
        }
        let fed = match mask {
            Some(m) => {
                let keep = &m.keep[l];
                let inv = 1.0 / m.keep_prob;
                let mut dropped = Matrix::zeros(a.rows(), a.cols());
                for c in 0..a.cols() {
                    if keep[c] {
                        for r in 0..a.rows() {
                            dropped.set(r, c, a.get(r, c) * inv);
                        }
                    }
                }
                dropped
            }
            None => a.clone(),
        };
        hidden_zs.push(z);
        hidden_acts.push(a);
        inputs.push(fed);
    }
    unreachable!("loop always returns at the output layer");
}

/// Model predictions for the given weights. With a mask present, kept hidden
/// units are scaled by `1 / keep_prob` (inverted dropout); with the mask
/// absent there is no scaling.
pub fn forward(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Matrix,
    mask: Option<&DropoutMask>,
) -> Result<Matrix, ModelError> {
    Ok(run_forward(spec, theta, x, mask)?.predictions)
}

fn loss_from_predictions(loss: LossKind, predictions: &Matrix, y: &Matrix) -> f64 {
    let n = y.rows() as f64;
    match loss {
        LossKind::HalfMseNormalized | LossKind::SquaredErrorHalf => {
            let mut sq = 0.0;
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    let d = predictions.get(r, c) - y.get(r, c);
                    sq += d * d;
                }
            }
            match loss {
                LossKind::HalfMseNormalized => sq / (2.0 * n),
                _ => 0.5 * sq,
            }
        }
        LossKind::CrossEntropy => {
            let mut total = 0.0;
            for r in 0..y.rows() {
                let row = predictions.row(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let log_denom = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                for c in 0..y.cols() {
                    let yv = y.get(r, c);
                    if yv != 0.0 {
                        total -= yv * (row[c] - max - log_denom);
                    }
                }
            }
            total / n
        }
    }
}

/// Derivative of the loss with respect to the predictions.
fn loss_delta(loss: LossKind, predictions: &Matrix, y: &Matrix) -> Matrix {
    let n = y.rows() as f64;
    match loss {
        LossKind::HalfMseNormalized | LossKind::SquaredErrorHalf => {
            let scale = match loss {
                LossKind::HalfMseNormalized => 1.0 / n,
                _ => 1.0,
            };
            let mut d = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    d.set(r, c, scale * (predictions.get(r, c) - y.get(r, c)));
                }
            }
            d
        }
        LossKind::CrossEntropy => {
            let s = softmax_rows(predictions);
            let mut d = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    d.set(r, c, (s.get(r, c) - y.get(r, c)) / n);
                }
            }
            d
        }
    }
}

/// Empirical loss at `theta` under the spec's loss convention.
pub fn loss_value(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    mask: Option<&DropoutMask>,
) -> Result<f64, ModelError> {
    spec.check_targets(&data.y)?;
    let cache = run_forward(spec, theta, &data.x, mask)?;
    Ok(loss_from_predictions(spec.loss, &cache.predictions, &data.y))
}

/// Exact loss gradient by reverse accumulation.
pub fn loss_grad(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    mask: Option<&DropoutMask>,
) -> Result<ParamVector, ModelError> {
    spec.check_targets(&data.y)?;
    let cache = run_forward(spec, theta, &data.x, mask)?;
    let layers = layer_views(spec, theta);
    let mut grad = vec![0.0; theta.len()];
    let mut delta = loss_delta(spec.loss, &cache.predictions, &data.y);
    let mut offset = theta.len();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let input = &cache.inputs[l];
        // Bias gradient then weight gradient, writing blocks back to front.
        if !layer.b.is_empty() {
            offset -= layer.w_out;
            let bsum = column_sums(&delta);
            grad[offset..offset + layer.w_out].copy_from_slice(&bsum);
        }
        offset -= layer.w_in * layer.w_out;
        for i in 0..layer.w_in {
            for j in 0..layer.w_out {
                let mut v = 0.0;
                for r in 0..input.rows() {
                    v += input.get(r, i) * delta.get(r, j);
                }
                grad[offset + i * layer.w_out + j] = v;
            }
        }
        if l > 0 {
            let mut e = backprop_through(&delta, layer);
            let hidden = l - 1;
            let z = &cache.hidden_zs[hidden];
            let a = &cache.hidden_acts[hidden];
            if let Some(m) = mask {
                let keep = &m.keep[hidden];
                let inv = 1.0 / m.keep_prob;
                for c in 0..e.cols() {
                    let factor = if keep[c] { inv } else { 0.0 };
                    for r in 0..e.rows() {
                        e.set(r, c, e.get(r, c) * factor);
                    }
                }
            }
            for r in 0..e.rows() {
                for c in 0..e.cols() {
                    let ap = activate_prime(spec.activation, z.get(r, c), a.get(r, c));
                    e.set(r, c, e.get(r, c) * ap);
                }
            }
            delta = e;
        }
    }
    debug_assert_eq!(offset, 0);
    Ok(ParamVector(grad))
}

/// Hessian-vector product `H(theta) v` with `H` the loss Hessian.
///
/// Computed by pushing the tangent direction `v` through the forward and
/// adjoint passes (equivalent to double backpropagation). The loss must be
/// twice differentiable in the parameters, so `relu` MLPs are rejected.
/// Dropout is never active here: the Hessian refers to the deterministic loss.
pub fn loss_hvp(
    spec: &ModelSpec,
    theta: &ParamVector,
    data: &Dataset,
    v: &ParamVector,
) -> Result<ParamVector, ModelError> {
    if spec.kind == ModelKind::Mlp && spec.activation == Activation::Relu {
        return Err(ModelError::Smoothness(
            "relu second derivatives are not defined; use tanh or a linear model".into(),
        ));
    }
    spec.check_theta(theta)?;
    spec.check_theta(v)?;
    spec.check_inputs(&data.x)?;
    spec.check_targets(&data.y)?;

    let layers = layer_views(spec, theta);
    let tangents = layer_views(spec, v);
    let x = &data.x;
    let y = &data.y;

    // Forward pass with tangents.
    let mut inputs = vec![x.clone()];
    let mut input_dots = vec![Matrix::zeros(x.rows(), x.cols())];
    let mut hidden_as: Vec<Matrix> = Vec::new();
    let mut hidden_a_dots: Vec<Matrix> = Vec::new();
    let mut predictions = Matrix::zeros(0, 0);
    let mut predictions_dot = Matrix::zeros(0, 0);
    for (l, (layer, tan)) in layers.iter().zip(&tangents).enumerate() {
        let a_prev = inputs.last().unwrap();
        let a_prev_dot = input_dots.last().unwrap();
        let z = affine(a_prev, layer);
        // z_dot = a_prev_dot W + a_prev W_dot + b_dot
        let mut z_dot = affine(a_prev_dot, layer);
        if !layer.b.is_empty() {
            // affine() added the primal bias to the tangent path; swap it for b_dot.
            for r in 0..z_dot.rows() {
                for j in 0..layer.w_out {
                    let v = z_dot.get(r, j) - layer.b[j] + tan.b[j];
                    z_dot.set(r, j, v);
                }
            }
        }
        for r in 0..a_prev.rows() {
            let ar = a_prev.row(r);
            for j in 0..layer.w_out {
                let mut acc = 0.0;
                for (i, &ai) in ar.iter().enumerate() {
                    acc += ai * tan.w[i * layer.w_out + j];
                }
                let cur = z_dot.get(r, j);
                z_dot.set(r, j, cur + acc);
            }
        }
        if l + 1 == layers.len() {
            predictions = z;
            predictions_dot = z_dot;
            break;
        }
        // Hidden tanh layer: a = tanh(z), a_dot = (1 - a^2) z_dot.
        let mut a = Matrix::zeros(z.rows(), z.cols());
        let mut a_dot = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                let t = z.get(r, c).tanh();
                a.set(r, c, t);
                a_dot.set(r, c, (1.0 - t * t) * z_dot.get(r, c));
            }
        }
        hidden_as.push(a.clone());
        hidden_a_dots.push(a_dot.clone());
        inputs.push(a);
        input_dots.push(a_dot);
    }

    // Adjoint seeds and their tangents.
    let n = y.rows() as f64;
    let mut delta = loss_delta(spec.loss, &predictions, y);
    let mut delta_dot = match spec.loss {
        LossKind::HalfMseNormalized => predictions_dot.scale(1.0 / n),
        LossKind::SquaredErrorHalf => predictions_dot.clone(),
        LossKind::CrossEntropy => {
            let s = softmax_rows(&predictions);
            let mut d = Matrix::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let mut inner = 0.0;
                for c in 0..y.cols() {
                    inner += s.get(r, c) * predictions_dot.get(r, c);
                }
                for c in 0..y.cols() {
                    let sv = s.get(r, c);
                    d.set(r, c, sv * (predictions_dot.get(r, c) - inner) / n);
                }
            }
            d
        }
    };

    let mut hv = vec![0.0; theta.len()];
    let mut offset = theta.len();
    for l in (0..layers.len()).rev() {
        let layer = &layers[l];
        let tan = &tangents[l];
        let input = &inputs[l];
        let input_dot = &input_dots[l];
        if !layer.b.is_empty() {
            offset -= layer.w_out;
            let bsum = column_sums(&delta_dot);
            hv[offset..offset + layer.w_out].copy_from_slice(&bsum);
        }
        offset -= layer.w_in * layer.w_out;
        // d(dW)/dv = input_dot^T delta + input^T delta_dot
        for i in 0..layer.w_in {
            for j in 0..layer.w_out {
                let mut acc = 0.0;
                for r in 0..input.rows() {
                    acc += input_dot.get(r, i) * delta.get(r, j)
                        + input.get(r, i) * delta_dot.get(r, j);
                }
                hv[offset + i * layer.w_out + j] = acc;
            }
        }
        if l > 0 {
            let e = backprop_through(&delta, layer);
            let mut e_dot = backprop_through(&delta_dot, layer);
            // plus delta W_dot^T
            for r in 0..delta.rows() {
                let dr = delta.row(r);
                for i in 0..layer.w_in {
                    let mut acc = 0.0;
                    for j in 0..layer.w_out {
                        acc += dr[j] * tan.w[i * layer.w_out + j];
                    }
                    let cur = e_dot.get(r, i);
                    e_dot.set(r, i, cur + acc);
                }
            }
            let hidden = l - 1;
            let a = &hidden_as[hidden];
            let a_dot = &hidden_a_dots[hidden];
            let mut new_delta = Matrix::zeros(e.rows(), e.cols());
            let mut new_delta_dot = Matrix::zeros(e.rows(), e.cols());
            for r in 0..e.rows() {
                for c in 0..e.cols() {
                    let t = a.get(r, c);
                    let phi1 = 1.0 - t * t;
                    // phi'' in terms of the activation: -2 t (1 - t^2);
                    // phi''(z) z_dot = -2 t a_dot since a_dot = phi'(z) z_dot.
                    let phi2_zdot = -2.0 * t * a_dot.get(r, c);
                    new_delta.set(r, c, e.get(r, c) * phi1);
                    new_delta_dot
                        .set(r, c, e_dot.get(r, c) * phi1 + e.get(r, c) * phi2_zdot);
                }
            }
            delta = new_delta;
            delta_dot = new_delta_dot;
        }
    }
    debug_assert_eq!(offset, 0);
    Ok(ParamVector(hv))
}

/// Smallest absolute hidden pre-activation over all units and rows. Used to
/// keep finite-difference probes away from relu kinks; returns infinity for
/// models without hidden layers.
pub fn min_preactivation_margin(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Matrix,
) -> Result<f64, ModelError> {
    let cache = run_forward(spec, theta, x, None)?;
    let mut margin = f64::INFINITY;
    for z in &cache.hidden_zs {
        for r in 0..z.rows() {
            for c in 0..z.cols() {
                margin = margin.min(z.get(r, c).abs());
            }
        }
    }
    Ok(margin)
}

/// Seeded MLP initialization: weights uniform on
/// `+- sqrt(6 / (fan_in + fan_out))`, biases zero. Linear models start at
/// zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    match spec.kind {
        ModelKind::Linear => ParamVector::zeros(spec.param_count()),
        ModelKind::Mlp => {
            let mut rng = RngStream::new(seed, "init");
            let mut flat = Vec::with_capacity(spec.param_count());
            for w in spec.layer_widths.windows(2) {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                for _ in 0..fan_in * fan_out {
                    flat.push(rng.uniform_in(-bound, bound));
                }
                flat.extend(std::iter::repeat(0.0).take(fan_out));
            }
            ParamVector(flat)
        }
    }
}
