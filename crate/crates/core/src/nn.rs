//! A small fully-connected softmax classifier with hand-derived gradients,
//! plus the finite-difference oracle and the smoothness-gap probe used by the
//! verification suites.
//!
//! Parameter layout: for each layer in order, the weight matrix `rows x cols`
//! row-major, then the bias vector of length `rows` (when present). All math
//! is f64 and fully deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg;
use crate::tasks::Example;

/// Shape of one dense layer's parameter block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub rows: usize,
    pub cols: usize,
    pub has_bias: bool,
}

impl LayerShape {
    pub fn param_count(&self) -> usize {
        self.rows * self.cols + if self.has_bias { self.rows } else { 0 }
    }
}

/// Flattened model parameters with their layer-shape metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shapes: Vec<LayerShape>) -> Result<Self> {
        let expected: usize = shapes.iter().map(LayerShape::param_count).sum();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                what: "ParamVector",
                expected,
                got: values.len(),
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("ParamVector"));
        }
        Ok(ParamVector { values, shapes })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same shapes, new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values, self.shapes.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh() * z.tanh(),
        }
    }
}

/// Widths and activation of a fully-connected classifier. The final width is
/// the number of output logits; hidden layers use the activation, the output
/// layer is linear (softmax applied by the loss / `forward`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    layer_widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(
                "need at least input and output widths".into(),
            ));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidSpec("zero layer width".into()));
        }
        Ok(MlpSpec {
            layer_widths,
            activation,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        (1..self.layer_widths.len())
            .map(|l| LayerShape {
                rows: self.layer_widths[l],
                cols: self.layer_widths[l - 1],
                has_bias: true,
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(LayerShape::param_count).sum()
    }

    /// Seeded init: each layer's weights and biases uniform in `[-s, s]`
    /// with `s = 1/sqrt(fan_in)`.
    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for shape in self.shapes() {
            let s = 1.0 / (shape.cols as f64).sqrt();
            for _ in 0..shape.param_count() {
                values.push(rng.gen_range(-s..=s));
            }
        }
        ParamVector::new(values, self.shapes()).expect("init matches own shapes")
    }

    pub fn zero_params(&self) -> ParamVector {
        ParamVector::new(vec![0.0; self.param_count()], self.shapes()).unwrap()
    }
}

/// Loss value and its gradient with respect to the flattened parameters.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Output-head selection: a single shared softmax over all logits, or one
/// softmax slice per task (`classes_per_task` logits each, chosen by the
/// example's `task_id`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    Single,
    PerTask { classes_per_task: usize },
}

impl HeadSelect {
    /// Logit range and global target index for one example.
    fn slice(&self, out_dim: usize, e: &Example) -> Result<(usize, usize, usize)> {
        match *self {
            HeadSelect::Single => {
                if e.label >= out_dim {
                    return Err(Error::Usage(format!(
                        "label {} out of range for {out_dim} outputs",
                        e.label
                    )));
                }
                Ok((0, out_dim, e.label))
            }
            HeadSelect::PerTask { classes_per_task } => {
                let lo = e.task_id * classes_per_task;
                let hi = lo + classes_per_task;
                if hi > out_dim {
                    return Err(Error::Usage(format!(
                        "head for task {} needs logits {lo}..{hi}, model has {out_dim}",
                        e.task_id
                    )));
                }
                if e.label >= classes_per_task {
                    return Err(Error::Usage(format!(
                        "label {} out of range for head width {classes_per_task}",
                        e.label
                    )));
                }
                Ok((lo, hi, lo + e.label))
            }
        }
    }
}

fn check_model(params: &ParamVector, spec: &MlpSpec) -> Result<()> {
    if params.shapes() != spec.shapes().as_slice() {
        return Err(Error::ShapeMismatch {
            what: "params vs spec",
            expected: spec.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

/// Offsets of each layer's parameter block in the flattened vector.
fn layer_offsets(shapes: &[LayerShape]) -> Vec<usize> {
    let mut offsets = Vec::with_capacity(shapes.len());
    let mut off = 0;
    for s in shapes {
        offsets.push(off);
        off += s.param_count();
    }
    offsets
}

/// Affine map of one layer: `W x + b`.
fn affine(values: &[f64], off: usize, shape: &LayerShape, x: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(shape.rows);
    let bias_off = off + shape.rows * shape.cols;
    for r in 0..shape.rows {
        let row = &values[off + r * shape.cols..off + (r + 1) * shape.cols];
        let mut acc = if shape.has_bias {
            values[bias_off + r]
        } else {
            0.0
        };
        acc += linalg::dot(row, x);
        out.push(acc);
    }
    out
}

/// Pre-activations of every layer for one input.
fn forward_pass(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Vec<Vec<f64>> {
    let shapes = spec.shapes();
    let offsets = layer_offsets(&shapes);
    let mut zs = Vec::with_capacity(shapes.len());
    let mut a = input.to_vec();
    for (l, shape) in shapes.iter().enumerate() {
        let z = affine(params.values(), offsets[l], shape, &a);
        if l + 1 < shapes.len() {
            a = z.iter().map(|&v| spec.activation.apply(v)).collect();
        }
        zs.push(z);
    }
    zs
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Class probabilities for one input (softmax over all output logits).
pub fn forward(params: &ParamVector, spec: &MlpSpec, input: &[f64]) -> Result<Vec<f64>> {
    check_model(params, spec)?;
    if input.len() != spec.input_dim() {
        return Err(Error::ShapeMismatch {
            what: "forward input",
            expected: spec.input_dim(),
            got: input.len(),
        });
    }
    let zs = forward_pass(params, spec, input);
    Ok(softmax(zs.last().unwrap()))
}

/// Mean cross-entropy and its exact analytic gradient over a batch, with a
/// shared softmax head.
pub fn loss_and_grad(params: &ParamVector, spec: &MlpSpec, batch: &[Example]) -> Result<LossGrad> {
    loss_and_grad_head(params, spec, batch, HeadSelect::Single)
}

/// As [`loss_and_grad`], with explicit head selection.
pub fn loss_and_grad_head(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &[Example],
    head: HeadSelect,
) -> Result<LossGrad> {
    check_model(params, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss_and_grad"));
    }
    let shapes = spec.shapes();
    let offsets = layer_offsets(&shapes);
    let n_layers = shapes.len();
    let mut grad = vec![0.0; params.len()];
    let mut total_loss = 0.0;

    for e in batch {
        if e.features.len() != spec.input_dim() {
            return Err(Error::ShapeMismatch {
                what: "example features",
                expected: spec.input_dim(),
                got: e.features.len(),
            });
        }
        let (lo, hi, target) = head.slice(spec.output_dim(), e)?;
        let zs = forward_pass(params, spec, &e.features);

        // activations feeding each layer: a[0] = input, a[l] = act(z_{l-1})
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
        acts.push(e.features.clone());
        for z in zs.iter().take(n_layers - 1) {
            acts.push(z.iter().map(|&v| spec.activation.apply(v)).collect());
        }

        let logits = &zs[n_layers - 1][lo..hi];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total_loss += log_z - zs[n_layers - 1][target];

        // delta at the output: softmax(slice) - onehot, zero outside the head
        let mut delta = vec![0.0; spec.output_dim()];
        for (j, &z) in zs[n_layers - 1][lo..hi].iter().enumerate() {
            delta[lo + j] = (z - log_z).exp();
        }
        delta[target] -= 1.0;

        for l in (0..n_layers).rev() {
            let shape = &shapes[l];
            let off = offsets[l];
            let bias_off = off + shape.rows * shape.cols;
            let a_in = &acts[l];
            for r in 0..shape.rows {
                let d = delta[r];
                if d != 0.0 {
                    let g_row = &mut grad[off + r * shape.cols..off + (r + 1) * shape.cols];
                    for (gc, &ac) in g_row.iter_mut().zip(a_in) {
                        *gc += d * ac;
                    }
                    if shape.has_bias {
                        grad[bias_off + r] += d;
                    }
                }
            }
            if l > 0 {
                let z_prev = &zs[l - 1];
                let mut next = vec![0.0; shape.cols];
                for (r, &d) in delta.iter().enumerate().take(shape.rows) {
                    if d != 0.0 {
                        let row = &params.values()[off + r * shape.cols..off + (r + 1) * shape.cols];
                        for (nc, &w) in next.iter_mut().zip(row) {
                            *nc += d * w;
                        }
                    }
                }
                for (nc, &z) in next.iter_mut().zip(z_prev) {
                    *nc *= spec.activation.derivative(z);
                }
                delta = next;
            }
        }
    }

    let inv = 1.0 / batch.len() as f64;
    for g in &mut grad {
        *g *= inv;
    }
    Ok(LossGrad {
        loss: total_loss * inv,
        grad,
    })
}

/// Mean cross-entropy over a batch without the gradient.
pub fn batch_loss(params: &ParamVector, spec: &MlpSpec, batch: &[Example]) -> Result<f64> {
    batch_loss_head(params, spec, batch, HeadSelect::Single)
}

pub fn batch_loss_head(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &[Example],
    head: HeadSelect,
) -> Result<f64> {
    check_model(params, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("batch_loss"));
    }
    let mut total = 0.0;
    for e in batch {
        let (lo, hi, target) = head.slice(spec.output_dim(), e)?;
        let zs = forward_pass(params, spec, &e.features);
        let out = zs.last().unwrap();
        let logits = &out[lo..hi];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
        total += log_z - out[target];
    }
    Ok(total / batch.len() as f64)
}

/// Central-difference gradient of an arbitrary scalar function.
pub fn central_difference<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut point = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Central-difference estimate of the batch-loss gradient, coordinate by
/// coordinate. Test oracle for [`loss_and_grad`].
pub fn finite_diff_grad(
    params: &ParamVector,
    spec: &MlpSpec,
    batch: &[Example],
    h: f64,
) -> Result<Vec<f64>> {
    check_model(params, spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("finite_diff_grad"));
    }
    let shapes = params.shapes().to_vec();
    let mut err = None;
    let grad = central_difference(
        |vals| {
            let p = ParamVector::new(vals.to_vec(), shapes.clone()).expect("same shapes");
            match batch_loss(&p, spec, batch) {
                Ok(l) => l,
                Err(e) => {
                    err = Some(e);
                    f64::NAN
                }
            }
        },
        params.values(),
        h,
    );
    match err {
        Some(e) => Err(e),
        None => Ok(grad),
    }
}

/// Smoothness-gap probe: `|f(x) - f(y) - <grad f(y), x - y>| - (L/2) ||x-y||^2`.
/// A nonpositive value certifies the L-smoothness inequality for this pair.
/// The objective handle returns `(value, gradient)` at a point.
pub fn lsmooth_gap<F>(mut objective: F, x: &[f64], y: &[f64], l: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    assert!(l > 0.0, "smoothness constant must be positive");
    assert_eq!(x.len(), y.len(), "point dimensions must agree");
    let (fx, _) = objective(x);
    let (fy, gy) = objective(y);
    let diff = linalg::sub(x, y);
    (fx - fy - linalg::dot(&gy, &diff)).abs() - 0.5 * l * linalg::norm_sq(&diff)
}
