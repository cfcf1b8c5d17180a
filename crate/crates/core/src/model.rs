//! Multiclass classifier used as the local learning model of each client.
//!
//! A fully connected network with ReLU hidden layers and a softmax output,
//! trained by minibatch SGD on mean cross-entropy. With no hidden layers it
//! reduces to multinomial logistic regression. Parameters live in a flat
//! [`ParamVector`] so aggregation operators never see the layer structure.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FlError, Result};
use crate::seed;

/// Probability floor inside the cross-entropy log.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Empty for logistic regression.
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, num_classes, Vec::new())
    }

    pub fn mlp(input_dim: usize, num_classes: usize, hidden_dims: Vec<usize>) -> Self {
        Self {
            input_dim,
            num_classes,
            hidden_dims,
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(FlError::InvalidSpec("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(FlError::InvalidSpec("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.num_classes)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    /// Per-tensor shapes: `[fan_in, fan_out]` weight then `[fan_out]` bias.
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![i, o], vec![o]])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Flat model parameters with the tensor shapes they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<Vec<usize>>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, shapes: Vec<Vec<usize>>) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if total != values.len() {
            return Err(FlError::Shape {
                expected: format!("{total} elements from {shapes:?}"),
                found: format!("{} elements", values.len()),
            });
        }
        Ok(Self { values, shapes })
    }

    /// A single one-dimensional tensor.
    pub fn from_flat(values: Vec<f64>) -> Self {
        let shapes = vec![vec![values.len()]];
        Self { values, shapes }
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            values: vec![0.0; spec.param_count()],
            shapes: spec.shapes(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same shapes, new values. Caller guarantees the length.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self {
            values,
            shapes: self.shapes.clone(),
        }
    }

    pub fn check_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.shapes != other.shapes || self.values.len() != other.values.len() {
            return Err(FlError::Shape {
                expected: format!("{:?}", self.shapes),
                found: format!("{:?}", other.shapes),
            });
        }
        Ok(())
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        spec.validate()?;
        let shapes = spec.shapes();
        if self.shapes != shapes {
            return Err(FlError::Shape {
                expected: format!("{shapes:?}"),
                found: format!("{:?}", self.shapes),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(FlError::InvalidTrainConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(FlError::InvalidTrainConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(FlError::InvalidTrainConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Fan-in scaled uniform initialization, zero biases.
pub fn init_model(spec: &ModelSpec, seed: u64) -> ParamVector {
    let mut rng = seed::rng(seed);
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_dims() {
        let bound = (6.0 / fan_in as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector {
        values,
        shapes: spec.shapes(),
    }
}

struct Layer<'a> {
    weight: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

fn layers<'a>(params: &'a ParamVector, spec: &ModelSpec) -> Vec<Layer<'a>> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(i, o)| {
            let weight = ArrayView2::from_shape((i, o), &params.values[offset..offset + i * o])
                .expect("shape checked against spec");
            offset += i * o;
            let bias = ArrayView1::from(&params.values[offset..offset + o]);
            offset += o;
            Layer { weight, bias }
        })
        .collect()
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_features(features: &ArrayView2<'_, f64>, spec: &ModelSpec) -> Result<()> {
    if features.ncols() != spec.input_dim {
        return Err(FlError::Shape {
            expected: format!("{} feature columns", spec.input_dim),
            found: format!("{} feature columns", features.ncols()),
        });
    }
    Ok(())
}

/// Pre-activations and activations of every layer; the last activation
/// holds the softmax probabilities.
fn forward_pass(
    layers: &[Layer<'_>],
    features: ArrayView2<'_, f64>,
) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let mut pre = Vec::with_capacity(layers.len());
    let mut act: Vec<Array2<f64>> = Vec::with_capacity(layers.len());
    for (l, layer) in layers.iter().enumerate() {
        let z = if l == 0 {
            features.dot(&layer.weight)
        } else {
            act[l - 1].dot(&layer.weight)
        } + layer.bias;
        let a = if l + 1 == layers.len() {
            let mut p = z.clone();
            softmax_rows(&mut p);
            p
        } else {
            z.mapv(|v| v.max(0.0))
        };
        pre.push(z);
        act.push(a);
    }
    (pre, act)
}

/// Class probabilities, one row per sample.
pub fn forward(params: &ParamVector, spec: &ModelSpec, features: &Array2<f64>) -> Result<Array2<f64>> {
    params.check_spec(spec)?;
    check_features(&features.view(), spec)?;
    let layers = layers(params, spec);
    let (_, mut act) = forward_pass(&layers, features.view());
    Ok(act.pop().expect("at least one layer"))
}

/// Mean cross-entropy over the batch and its gradient with respect to every
/// parameter, in [`ParamVector`] layout.
pub fn loss_and_gradient(
    params: &ParamVector,
    spec: &ModelSpec,
    features: ArrayView2<'_, f64>,
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    params.check_spec(spec)?;
    check_features(&features, spec)?;
    if features.nrows() != labels.len() {
        return Err(FlError::InvalidDataset(format!(
            "{} rows but {} labels",
            features.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(FlError::EmptyData);
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(FlError::InvalidDataset(format!("label {y} out of range")));
    }
    let m = labels.len() as f64;
    let layers = layers(params, spec);
    let (pre, act) = forward_pass(&layers, features);

    let probs = act.last().expect("at least one layer");
    let loss = labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -probs[[r, y]].max(PROB_FLOOR).ln())
        .sum::<f64>()
        / m;

    let mut delta = probs.clone();
    for (r, &y) in labels.iter().enumerate() {
        delta[[r, y]] -= 1.0;
    }
    delta.mapv_inplace(|v| v / m);

    let mut grads: Vec<(Array2<f64>, Array1<f64>)> = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        let gw = if l == 0 {
            features.t().dot(&delta)
        } else {
            act[l - 1].t().dot(&delta)
        };
        let gb = delta.sum_axis(Axis(0));
        if l > 0 {
            let mut back = delta.dot(&layers[l].weight.t());
            back.zip_mut_with(&pre[l - 1], |d, &z| {
                if z <= 0.0 {
                    *d = 0.0;
                }
            });
            delta = back;
        }
        grads.push((gw, gb));
    }
    grads.reverse();

    let mut flat = Vec::with_capacity(params.len());
    for (gw, gb) in grads {
        flat.extend(gw.iter());
        flat.extend(gb.iter());
    }
    Ok((loss, flat))
}

/// Mean cross-entropy of the model on a dataset.
pub fn loss(params: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    Ok(loss_and_gradient(params, spec, data.features().view(), data.labels())?.0)
}

/// Minibatch SGD for `cfg.epochs` passes over `data`, reshuffling every
/// epoch. The input parameters are left untouched.
pub fn train_local(
    params: &ParamVector,
    spec: &ModelSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<ParamVector> {
    cfg.validate()?;
    params.check_spec(spec)?;
    if data.is_empty() {
        return Err(FlError::EmptyData);
    }
    let mut current = params.clone();
    let mut rng = seed::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_labels = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = data.features().select(Axis(0), chunk);
            batch_labels.clear();
            batch_labels.extend(chunk.iter().map(|&i| data.labels()[i]));
            let (loss, grad) = loss_and_gradient(&current, spec, batch.view(), &batch_labels)?;
            if !loss.is_finite() {
                return Err(FlError::Divergence { epoch, step });
            }
            for (p, g) in current.values.iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            if !current.is_finite() {
                return Err(FlError::Divergence { epoch, step });
            }
        }
    }
    Ok(current)
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate_accuracy(params: &ParamVector, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(FlError::EmptyData);
    }
    params.check_spec(spec)?;
    check_features(&data.features().view(), spec)?;
    let layers = layers(params, spec);
    const CHUNK: usize = 4096;
    let mut correct = 0usize;
    for start in (0..data.len()).step_by(CHUNK) {
        let end = (start + CHUNK).min(data.len());
        let (_, act) = forward_pass(&layers, data.features().slice(s![start..end, ..]));
        let probs = act.last().expect("at least one layer");
        correct += probs
            .rows()
            .into_iter()
            .zip(&data.labels()[start..end])
            .filter(|(row, &y)| argmax(row.view()) == y)
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}
