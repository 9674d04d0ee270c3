//! Fully-connected classifier used for every tree node and for the flat
//! baseline: ReLU hidden layers, softmax output, binary cross-entropy over
//! the softmax vector, reverse-mode gradients and Adam/SGD training.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedStream;
use crate::scalar::Real;

/// Probability clamp that keeps the log terms of the loss finite.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Softmax,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Softmax => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Softmax),
            t => Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
        }
    }
}

/// Transform applied to a raw feature vector before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScaling {
    #[default]
    Identity,
    /// Divide by the Euclidean norm (zero vectors pass through).
    UnitNorm,
}

impl InputScaling {
    fn tag(self) -> u8 {
        match self {
            InputScaling::Identity => 0,
            InputScaling::UnitNorm => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(InputScaling::Identity),
            1 => Ok(InputScaling::UnitNorm),
            t => Err(Error::Checkpoint(format!("unknown input scaling tag {t}"))),
        }
    }

    fn apply_rows<T: Real>(self, x: &mut Array2<T>) {
        if self == InputScaling::UnitNorm {
            for mut row in x.rows_mut() {
                let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if n > T::zero() {
                    row.mapv_inplace(|v| v / n);
                }
            }
        }
    }
}

/// Layer widths `[input, hidden..., output]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    sizes: Vec<usize>,
}

impl LayerSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 3 {
            return Err(Error::Config(format!("need input, at least one hidden and an output layer; got {sizes:?}")));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("layer widths must be positive: {sizes:?}")));
        }
        if *sizes.last().expect("len >= 3") < 2 {
            return Err(Error::Config("output layer needs at least 2 classes".into()));
        }
        Ok(Self { sizes })
    }

    /// `input -> hidden... -> outputs`.
    pub fn with_hidden(input: usize, hidden: &[usize], outputs: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    /// Multiply-accumulate count of one forward pass.
    pub fn mac_count(&self) -> u64 {
        self.sizes.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    /// He-uniform for ReLU layers, Glorot-uniform for the softmax layer.
    #[default]
    HeGlorot,
    Zeros,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weights: Array2<T>,
    pub bias: Array1<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlnn<T> {
    spec: LayerSpec,
    layers: Vec<Dense<T>>,
    scaling: InputScaling,
}

/// Per-parameter gradients, shaped like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Elementwise binary cross-entropy averaged over the output classes.
    #[default]
    Bce,
    /// Categorical cross-entropy; ablation only.
    CategoricalCe,
}

impl<T: Real> Mlnn<T> {
    pub fn new(spec: LayerSpec, init: InitScheme, stream: SeedStream) -> Self {
        let mut rng = stream.rng();
        let n = spec.sizes.len() - 1;
        let layers = spec
            .sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let activation = if k + 1 == n { Activation::Softmax } else { Activation::Relu };
                let limit = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Softmax => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weights = match init {
                    InitScheme::Zeros => Array2::zeros((fan_out, fan_in)),
                    InitScheme::HeGlorot => {
                        Array2::from_shape_simple_fn((fan_out, fan_in), || T::of(rng.random_range(-limit..limit)))
                    }
                };
                Dense { weights, bias: Array1::zeros(fan_out), activation }
            })
            .collect();
        Self { spec, layers, scaling: InputScaling::Identity }
    }

    pub fn zeros(spec: LayerSpec) -> Self {
        Self::new(spec, InitScheme::Zeros, SeedStream::new(0))
    }

    /// Builds a model from explicit layers; shapes must chain and the last
    /// layer must be the only softmax.
    pub fn from_layers(layers: Vec<Dense<T>>, scaling: InputScaling) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        let mut sizes = vec![layers[0].weights.ncols()];
        for (k, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weights.dim();
            if inp != *sizes.last().expect("non-empty") {
                return Err(Error::Dimension { expected: *sizes.last().expect("non-empty"), got: inp });
            }
            if layer.bias.len() != out {
                return Err(Error::Dimension { expected: out, got: layer.bias.len() });
            }
            let want = if k + 1 == layers.len() { Activation::Softmax } else { Activation::Relu };
            if layer.activation != want {
                return Err(Error::Config(format!("layer {k} must use {want:?}")));
            }
            sizes.push(out);
        }
        let spec = LayerSpec::new(sizes)?;
        Ok(Self { spec, layers, scaling })
    }

    /// Zero weights with a unit output bias on `class`: always predicts it.
    pub fn constant(spec: LayerSpec, class: usize) -> Result<Self> {
        if class >= spec.output_size() {
            return Err(Error::Label(format!("class {class} out of range for {} outputs", spec.output_size())));
        }
        let mut m = Self::zeros(spec);
        m.layers.last_mut().expect("at least one layer").bias[class] = T::one();
        Ok(m)
    }

    pub fn with_scaling(mut self, scaling: InputScaling) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Dense<T>] {
        &self.layers
    }

    pub fn scaling(&self) -> InputScaling {
        self.scaling
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, len: usize) -> Result<()> {
        if len != self.spec.input_size() {
            return Err(Error::Dimension { expected: self.spec.input_size(), got: len });
        }
        Ok(())
    }

    /// Class probabilities for one feature vector.
    pub fn forward(&self, features: &[T]) -> Result<Array1<T>> {
        self.check_input(features.len())?;
        let x = ArrayView2::from_shape((1, features.len()), features).expect("contiguous slice");
        Ok(self.forward_batch(x)?.row(0).to_owned())
    }

    /// Row-wise class probabilities for a batch of feature vectors.
    pub fn forward_batch(&self, inputs: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(inputs.ncols())?;
        let mut acts = self.activations(inputs);
        Ok(acts.pop().expect("at least one layer"))
    }

    /// Returns `[g^0, g^1, ..., g^K]` where `g^0` is the scaled input.
    fn activations(&self, inputs: ArrayView2<T>) -> Vec<Array2<T>> {
        let mut x = inputs.to_owned();
        self.scaling.apply_rows(&mut x);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for layer in &self.layers {
            let prev = acts.last().expect("non-empty");
            let mut q = prev.dot(&layer.weights.t());
            q += &layer.bias;
            match layer.activation {
                Activation::Relu => q.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() }),
                Activation::Softmax => softmax_rows(&mut q),
            }
            acts.push(q);
        }
        acts
    }

    /// Argmax of the output probabilities; ties resolve to the lowest index.
    pub fn predict_class(&self, features: &[T]) -> Result<usize> {
        Ok(argmax(self.forward(features)?.view()))
    }

    pub fn predict_classes(&self, inputs: ArrayView2<T>) -> Result<Vec<usize>> {
        let probs = self.forward_batch(inputs)?;
        Ok(probs.rows().into_iter().map(argmax).collect())
    }

    /// Gradients of the per-sample loss for a single example.
    pub fn backprop_gradients(&self, features: &[T], target: &[T], loss: LossKind) -> Result<Gradients<T>> {
        self.check_input(features.len())?;
        if target.len() != self.spec.output_size() {
            return Err(Error::Dimension { expected: self.spec.output_size(), got: target.len() });
        }
        let x = ArrayView2::from_shape((1, features.len()), features).expect("contiguous");
        let z = ArrayView2::from_shape((1, target.len()), target).expect("contiguous");
        Ok(self.batch_gradients(x, z, loss).1)
    }

    /// Mean loss and mean gradients over a batch.
    fn batch_gradients(&self, x: ArrayView2<T>, targets: ArrayView2<T>, loss: LossKind) -> (T, Gradients<T>) {
        let acts = self.activations(x);
        let probs = acts.last().expect("output");
        let n = T::of_usize(x.nrows());
        let mut total = T::zero();
        let mut delta = Array2::zeros(probs.raw_dim());
        for ((p, z), mut d) in probs.rows().into_iter().zip(targets.rows()).zip(delta.rows_mut()) {
            total += sample_loss(p, z, loss);
            logit_gradient(p, z, loss, d.view_mut());
        }
        delta.mapv_inplace(|v| v / n);

        let k = self.layers.len();
        let mut gw = Vec::with_capacity(k);
        let mut gb = Vec::with_capacity(k);
        for idx in (0..k).rev() {
            gw.push(delta.t().dot(&acts[idx]));
            gb.push(delta.sum_axis(Axis(0)));
            if idx > 0 {
                let mut back = delta.dot(&self.layers[idx].weights);
                ndarray::Zip::from(&mut back).and(&acts[idx]).for_each(|b, &a| {
                    if a <= T::zero() {
                        *b = T::zero();
                    }
                });
                delta = back;
            }
        }
        gw.reverse();
        gb.reverse();
        (total / n, Gradients { weights: gw, biases: gb })
    }

    /// Mean loss over a dataset.
    pub fn dataset_loss(&self, data: &Dataset<T>, loss: LossKind) -> Result<T> {
        let probs = self.forward_batch(data.inputs.view())?;
        let total: T = probs.rows().into_iter().zip(data.targets.rows()).map(|(p, z)| sample_loss(p, z, loss)).sum();
        Ok(total / T::of_usize(data.len().max(1)))
    }

    /// Fraction of rows whose predicted class equals the target's argmax.
    pub fn accuracy(&self, data: &Dataset<T>) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict_classes(data.inputs.view())?;
        let hits = pred.iter().zip(data.targets.rows()).filter(|(&p, z)| p == argmax(z.view())).count();
        Ok(hits as f64 / data.len() as f64)
    }

    pub fn parameters_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.spec.parameter_count());
        for l in &self.layers {
            out.extend(l.weights.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    fn visit_params_mut(&mut self, mut f: impl FnMut(usize, &mut T)) {
        let mut i = 0;
        for l in &mut self.layers {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                f(i, v);
                i += 1;
            }
        }
    }

    pub fn set_parameters_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.spec.parameter_count() {
            return Err(Error::Dimension { expected: self.spec.parameter_count(), got: values.len() });
        }
        self.visit_params_mut(|i, v| *v = values[i]);
        Ok(())
    }
}

impl<T: Real> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }
}

fn softmax_rows<T: Real>(q: &mut Array2<T>) {
    for mut row in q.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: T = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

pub fn argmax<T: Real>(v: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn clamp_prob<T: Real>(p: T) -> T {
    if p.is_nan() {
        return p;
    }
    let eps = T::of(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

fn sample_loss<T: Real>(p: ArrayView1<T>, z: ArrayView1<T>, loss: LossKind) -> T {
    match loss {
        LossKind::Bce => {
            let l = T::of_usize(p.len());
            let s: T = p
                .iter()
                .zip(z.iter())
                .map(|(&p, &z)| {
                    let p = clamp_prob(p);
                    z * p.ln() + (T::one() - z) * (T::one() - p).ln()
                })
                .sum();
            -s / l
        }
        LossKind::CategoricalCe => {
            let mass: T = z.sum();
            let s: T = p.iter().zip(z.iter()).map(|(&p, &z)| z * clamp_prob(p).ln()).sum();
            -s / mass.max(T::one())
        }
    }
}

/// Gradient of the per-sample loss with respect to the softmax logits.
fn logit_gradient<T: Real>(p: ArrayView1<T>, z: ArrayView1<T>, loss: LossKind, mut out: ndarray::ArrayViewMut1<T>) {
    match loss {
        LossKind::Bce => {
            let eps = T::of(PROB_EPS);
            let l = T::of_usize(p.len());
            // dL/dp_i, zero where the clamp is active
            let g: Vec<T> = p
                .iter()
                .zip(z.iter())
                .map(|(&p, &z)| {
                    if p <= eps || p >= T::one() - eps {
                        T::zero()
                    } else {
                        -(z / p - (T::one() - z) / (T::one() - p)) / l
                    }
                })
                .collect();
            let dot: T = g.iter().zip(p.iter()).map(|(&g, &p)| g * p).sum();
            for (i, o) in out.iter_mut().enumerate() {
                *o = p[i] * (g[i] - dot);
            }
        }
        LossKind::CategoricalCe => {
            let mass: T = z.sum();
            let norm = mass.max(T::one());
            for (i, o) in out.iter_mut().enumerate() {
                *o = (p[i] * mass - z[i]) / norm;
            }
        }
    }
}

/// Binary cross-entropy of a probability vector against a one-hot target,
/// with probabilities clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss<T: Real>(predicted: &[T], target: &[T]) -> Result<T> {
    if predicted.len() != target.len() {
        return Err(Error::Dimension { expected: predicted.len(), got: target.len() });
    }
    Ok(sample_loss(ArrayView1::from(predicted), ArrayView1::from(target), LossKind::Bce))
}

/// Feature rows paired with target rows (one-hot or multi-hot).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Array2<T>,
    targets: Array2<T>,
}

impl<T: Real> Dataset<T> {
    pub fn new(inputs: Array2<T>, targets: Array2<T>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::Dimension { expected: inputs.nrows(), got: targets.nrows() });
        }
        Ok(Self { inputs, targets })
    }

    /// Builds one-hot targets from class indices.
    pub fn from_classes(inputs: Array2<T>, classes: &[usize], num_classes: usize) -> Result<Self> {
        Self::from_class_sets(inputs, &classes.iter().map(|&c| vec![c]).collect::<Vec<_>>(), num_classes)
    }

    /// Multi-hot targets: row `i` has ones at every index in `sets[i]`.
    pub fn from_class_sets(inputs: Array2<T>, sets: &[Vec<usize>], num_classes: usize) -> Result<Self> {
        let mut targets = Array2::zeros((sets.len(), num_classes));
        for (row, set) in sets.iter().enumerate() {
            for &c in set {
                if c >= num_classes {
                    return Err(Error::Label(format!("class {c} out of range 0..{num_classes}")));
                }
                targets[[row, c]] = T::one();
            }
        }
        Self::new(inputs, targets)
    }

    pub fn inputs(&self) -> &Array2<T> {
        &self.inputs
    }

    pub fn targets(&self) -> &Array2<T> {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.targets.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub init: InitScheme,
    pub loss: LossKind,
    pub seed: u64,
    /// Stop once an epoch's mean loss falls to this value.
    pub stop_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 100,
            optimizer: Optimizer::default(),
            init: InitScheme::default(),
            loss: LossKind::default(),
            seed: 0,
            stop_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and non-negative: {}", self.learning_rate)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be positive".into()));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            let ok = (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0;
            if !ok {
                return Err(Error::Config("Adam needs beta1, beta2 in [0, 1) and eps > 0".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Mlnn<T>,
    /// Mean minibatch loss of each completed epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch training. Shuffling and initialisation draw from `cfg.seed`,
/// so identical inputs give bit-identical models.
pub fn train<T: Real>(mut model: Mlnn<T>, data: &Dataset<T>, cfg: &TrainConfig) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("training set has no rows".into()));
    }
    model.check_input(data.feature_dim())?;
    if data.num_classes() != model.spec.output_size() {
        return Err(Error::Dimension { expected: model.spec.output_size(), got: data.num_classes() });
    }

    let n = data.len();
    let batch = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeedStream::new(cfg.seed).named("shuffle").rng();
    let lr = T::of(cfg.learning_rate);
    let count = model.spec.parameter_count();
    let (mut m1, mut m2) = match cfg.optimizer {
        Optimizer::Adam { .. } => (vec![T::zero(); count], vec![T::zero(); count]),
        Optimizer::Sgd => (Vec::new(), Vec::new()),
    };
    let mut step: i32 = 0;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut xb = Array2::<T>::zeros((batch, data.feature_dim()));
    let mut zb = Array2::<T>::zeros((batch, data.num_classes()));

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            let rows = chunk.len();
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&data.inputs.row(i));
                zb.row_mut(r).assign(&data.targets.row(i));
            }
            let (loss, grads) = model.batch_gradients(xb.slice(s![..rows, ..]), zb.slice(s![..rows, ..]), cfg.loss);
            epoch_loss += loss.to64();
            batches += 1;
            let g = grads.flat();
            step += 1;
            match cfg.optimizer {
                Optimizer::Sgd => model.visit_params_mut(|i, p| *p -= lr * g[i]),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    let c1 = T::one() - b1.powi(step);
                    let c2 = T::one() - b2.powi(step);
                    let e = T::of(eps);
                    model.visit_params_mut(|i, p| {
                        m1[i] = b1 * m1[i] + (T::one() - b1) * g[i];
                        m2[i] = b2 * m2[i] + (T::one() - b2) * g[i] * g[i];
                        let mh = m1[i] / c1;
                        let vh = m2[i] / c2;
                        *p -= lr * mh / (vh.sqrt() + e);
                    });
                }
            }
        }
        let mean = epoch_loss / batches as f64;
        if !mean.is_finite() || !model.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean });
        }
        history.push(mean);
        if cfg.stop_loss.is_some_and(|t| mean <= t) {
            break;
        }
    }
    Ok(TrainOutcome { model, loss_history: history })
}

const MAGIC: &[u8; 8] = b"TDNNMLNN";
pub const CHECKPOINT_VERSION: u32 = 1;

impl<T: Real> Mlnn<T> {
    /// Binary checkpoint: magic, version, input scaling tag, layer widths,
    /// activation tags, then every weight matrix (row-major) and bias as
    /// little-endian `f64`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[self.scaling.tag()])?;
        w.write_all(&(self.spec.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.spec.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for l in &self.layers {
            w.write_all(&[l.activation.tag()])?;
        }
        for v in self.parameters_flat() {
            w.write_all(&v.to64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a model checkpoint".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version} (expected {CHECKPOINT_VERSION})")));
        }
        let mut tag = [0u8; 1];
        read_exact(&mut r, &mut tag, "input scaling")?;
        let scaling = InputScaling::from_tag(tag[0])?;
        let k = read_u32(&mut r, "layer count")? as usize;
        if !(3..=1024).contains(&k) {
            return Err(Error::Checkpoint(format!("implausible layer count {k}")));
        }
        let mut sizes = Vec::with_capacity(k);
        for _ in 0..k {
            sizes.push(read_u32(&mut r, "layer width")? as usize);
        }
        let spec = LayerSpec::new(sizes).map_err(|e| Error::Checkpoint(format!("shape: {e}")))?;
        let mut layers = Vec::with_capacity(k - 1);
        let mut acts = Vec::with_capacity(k - 1);
        for _ in 0..k - 1 {
            read_exact(&mut r, &mut tag, "activation")?;
            acts.push(Activation::from_tag(tag[0])?);
        }
        for (w, activation) in spec.sizes.windows(2).zip(acts) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = Array2::from_shape_vec((fan_out, fan_in), read_f64s(&mut r, fan_in * fan_out)?)
                .expect("length matches shape");
            let bias = Array1::from(read_f64s(&mut r, fan_out)?);
            layers.push(Dense { weights, bias, activation });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after parameters", rest.len())));
        }
        Self::from_layers(layers, scaling).map_err(|e| Error::Checkpoint(format!("shape: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    /// Loads and checks the layer widths against `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &LayerSpec) -> Result<Self> {
        let m = Self::load(path)?;
        if m.spec() != expected {
            return Err(Error::Checkpoint(format!("shape mismatch: file has {:?}, expected {:?}", m.spec.sizes, expected.sizes)));
        }
        Ok(m)
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read, T: Real>(r: &mut R, n: usize) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        read_exact(r, &mut b, "parameters")?;
        out.push(T::of(f64::from_le_bytes(b)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(sizes: &[usize]) -> LayerSpec {
        LayerSpec::new(sizes.to_vec()).unwrap()
    }

    #[test]
    fn layer_spec_validation() {
        assert!(LayerSpec::new(vec![4, 3]).is_err());
        assert!(LayerSpec::new(vec![4, 0, 3]).is_err());
        assert!(LayerSpec::new(vec![4, 3, 1]).is_err());
        let s = spec(&[4, 3, 2]);
        assert_eq!(s.mac_count(), 12 + 6);
        assert_eq!(s.parameter_count(), 15 + 8);
    }

    #[test]
    fn zero_model_outputs_uniform() {
        let m = Mlnn::<f64>::zeros(spec(&[5, 4, 7]));
        let p = m.forward(&[1.0, -2.0, 3.0, 0.5, 9.0]).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 7.0).abs() < 1e-15));
        assert_eq!(m.predict_class(&[0.0; 5]).unwrap(), 0);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = Mlnn::<f64>::zeros(spec(&[5, 4, 3]));
        assert!(matches!(m.forward(&[0.0; 4]), Err(Error::Dimension { expected: 5, got: 4 })));
    }

    #[test]
    fn hand_computed_forward() {
        // x = [1, 2]; hidden q = W1 x + b1 = [1*1 + 2*(-1) + 0.5, 0.5*1 + 0.25*2 - 0.25] = [-0.5, 0.75]
        // relu -> [0, 0.75]; logits = W2 h + b2 = [2*0 + 1*0.75 + 0, -1*0 + 0.5*0.75 + 0.1] = [0.75, 0.475]
        // softmax: p0 = 1 / (1 + exp(0.475 - 0.75))
        let layers = vec![
            Dense {
                weights: Array2::from_shape_vec((2, 2), vec![1.0, -1.0, 0.5, 0.25]).unwrap(),
                bias: Array1::from(vec![0.5, -0.25]),
                activation: Activation::Relu,
            },
            Dense {
                weights: Array2::from_shape_vec((2, 2), vec![2.0, 1.0, -1.0, 0.5]).unwrap(),
                bias: Array1::from(vec![0.0, 0.1]),
                activation: Activation::Softmax,
            },
        ];
        let m = Mlnn::from_layers(layers, InputScaling::Identity).unwrap();
        let p = m.forward(&[1.0, 2.0]).unwrap();
        let p0 = 1.0 / (1.0 + (0.475f64 - 0.75).exp());
        assert!((p[0] - p0).abs() < 1e-12);
        assert!((p[1] - (1.0 - p0)).abs() < 1e-12);
    }

    #[test]
    fn from_layers_rejects_bad_shapes() {
        let relu = |o, i| Dense { weights: Array2::<f64>::zeros((o, i)), bias: Array1::zeros(o), activation: Activation::Relu };
        let soft = |o, i| Dense { weights: Array2::<f64>::zeros((o, i)), bias: Array1::zeros(o), activation: Activation::Softmax };
        assert!(Mlnn::from_layers(vec![relu(3, 2), soft(2, 4)], InputScaling::Identity).is_err());
        assert!(Mlnn::from_layers(vec![relu(3, 2), relu(2, 3)], InputScaling::Identity).is_err());
        assert!(Mlnn::from_layers(vec![relu(3, 2), soft(2, 3)], InputScaling::Identity).is_ok());
    }

    #[test]
    fn bce_examples() {
        let l = bce_loss(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let perfect = bce_loss(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!(perfect >= 0.0 && perfect < 1e-11);
        let a: f64 = bce_loss(&[0.2, 0.7, 0.1], &[0.0, 1.0, 0.0]).unwrap();
        let b = bce_loss(&[0.1, 0.2, 0.7], &[0.0, 0.0, 1.0]).unwrap();
        assert!((a - b).abs() < 1e-15);
        assert!(bce_loss(&[0.5, 0.5], &[1.0]).is_err());
    }

    #[test]
    fn zero_input_zero_weights_give_zero_hidden_gradients() {
        let m = Mlnn::<f64>::zeros(spec(&[3, 4, 4, 2]));
        let g = m.backprop_gradients(&[0.0; 3], &[1.0, 0.0], LossKind::Bce).unwrap();
        for w in &g.weights[..2] {
            assert!(w.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn gradient_shapes_mirror_parameters() {
        let m = Mlnn::<f64>::new(spec(&[6, 5, 3]), InitScheme::HeGlorot, SeedStream::new(1));
        let g = m.backprop_gradients(&[0.1; 6], &[0.0, 0.0, 1.0], LossKind::Bce).unwrap();
        for (gw, l) in g.weights.iter().zip(m.layers()) {
            assert_eq!(gw.dim(), l.weights.dim());
        }
        for (gb, l) in g.biases.iter().zip(m.layers()) {
            assert_eq!(gb.len(), l.bias.len());
        }
        assert!(m.backprop_gradients(&[0.1; 6], &[1.0, 0.0], LossKind::Bce).is_err());
    }

    #[test]
    fn categorical_gradient_matches_finite_difference() {
        let m = Mlnn::<f64>::new(spec(&[4, 6, 3]), InitScheme::HeGlorot, SeedStream::new(8));
        let x = [0.3, -0.7, 1.1, 0.2];
        let z = [0.0, 1.0, 0.0];
        let g = m.backprop_gradients(&x, &z, LossKind::CategoricalCe).unwrap().flat();
        let base = m.parameters_flat();
        let loss_at = |p: &[f64]| {
            let mut mm = m.clone();
            mm.set_parameters_flat(p).unwrap();
            sample_loss(mm.forward(&x).unwrap().view(), ArrayView1::from(&z[..]), LossKind::CategoricalCe)
        };
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += 1e-5;
            let up = loss_at(&p);
            p[i] -= 2e-5;
            let down = loss_at(&p);
            let fd = (up - down) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-6 + 1e-4 * fd.abs(), "param {i}: fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let m = Mlnn::<f64>::new(spec(&[2, 4, 2]), InitScheme::HeGlorot, SeedStream::new(3));
        let data = Dataset::from_classes(Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap(), &[0, 1], 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 5, ..TrainConfig::default() };
        let out = train(m.clone(), &data, &cfg).unwrap();
        assert_eq!(out.model, m);
        let sgd = TrainConfig { optimizer: Optimizer::Sgd, ..cfg };
        assert_eq!(train(m.clone(), &data, &sgd).unwrap().model, m);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let m = Mlnn::<f64>::zeros(spec(&[2, 3, 2]));
        let empty = Dataset::new(Array2::zeros((0, 2)), Array2::zeros((0, 2))).unwrap();
        assert!(matches!(train(m.clone(), &empty, &TrainConfig::default()), Err(Error::EmptyDataset(_))));
        let wrong = Dataset::from_classes(Array2::zeros((1, 2)), &[0], 3).unwrap();
        assert!(train(m.clone(), &wrong, &TrainConfig::default()).is_err());
        let data = Dataset::from_classes(Array2::zeros((1, 2)), &[0], 2).unwrap();
        let bad = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train(m, &data, &bad).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let m = Mlnn::<f64>::new(spec(&[2, 8, 2]), InitScheme::HeGlorot, SeedStream::new(3));
        let x = Array2::from_shape_vec((2, 2), vec![1.0, -1.0, -1.0, 1.0]).unwrap();
        let data = Dataset::from_classes(x, &[0, 1], 2).unwrap();
        let cfg = TrainConfig { learning_rate: 1e300, optimizer: Optimizer::Sgd, epochs: 3, ..TrainConfig::default() };
        assert!(matches!(train(m, &data, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn unit_norm_scaling_is_scale_invariant() {
        let m = Mlnn::<f64>::new(spec(&[3, 5, 4]), InitScheme::HeGlorot, SeedStream::new(2)).with_scaling(InputScaling::UnitNorm);
        let a = m.forward(&[0.3, -1.0, 2.0]).unwrap();
        let b = m.forward(&[0.6, -2.0, 4.0]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_rejections() {
        let m = Mlnn::<f64>::new(spec(&[5, 4, 3, 2]), InitScheme::HeGlorot, SeedStream::new(4)).with_scaling(InputScaling::UnitNorm);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(Mlnn::<f64>::read_from(buf.as_slice()).unwrap(), m);

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Mlnn::<f64>::read_from(bad.as_slice()), Err(Error::Checkpoint(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(Mlnn::<f64>::read_from(bad.as_slice()).unwrap_err().to_string().contains("version"));
        let truncated = &buf[..buf.len() - 3];
        assert!(Mlnn::<f64>::read_from(truncated).unwrap_err().to_string().contains("truncated"));
        let mut long = buf.clone();
        long.push(0);
        assert!(Mlnn::<f64>::read_from(long.as_slice()).is_err());

        let f32_model: Mlnn<f32> = Mlnn::read_from(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        f32_model.write_to(&mut again).unwrap();
        let back: Mlnn<f32> = Mlnn::read_from(again.as_slice()).unwrap();
        assert_eq!(back, f32_model);
    }

    #[test]
    fn argmax_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v: Vec<f64> = (0..7).map(|_| (rng.random_range(0..4) as f64) / 4.0).collect();
            let mut best = 0;
            for i in 0..v.len() {
                if v[i] > v[best] {
                    best = i;
                }
            }
            assert_eq!(argmax(ArrayView1::from(&v[..])), best);
        }
    }
}
