//! Feedforward encoder `h_k = act(W_k h_{k-1} + b_k)`, k = 1..L, topped by a
//! linear classification head, with exact reverse-mode gradients.
//!
//! Layers are indexed from 1 at the input side. `representations(.., L)` is
//! the encoder output that feeds the head.

use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, Matrix};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output `y = act(x)`.
    #[inline]
    pub fn derivative(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    #[serde(default)]
    pub activation: Activation,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidParameter(
                "encoder dimensions must be at least 1".into(),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::InvalidParameter(
                "encoder needs at least one layer".into(),
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Affine map `W x + b` with `W` stored out×in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Matrix::zeros(outputs, inputs),
            bias: vec![0.0; outputs],
        }
    }

    /// Glorot-uniform weights in ±√(6/(fan_in+fan_out)), zero bias.
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = glorot_limit(inputs, outputs);
        let weight = Matrix::from_fn(outputs, inputs, |_, _| rng.random_range(-limit..=limit));
        Self {
            weight,
            bias: vec![0.0; outputs],
        }
    }

    #[inline]
    pub fn inputs(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn outputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs());
        self.weight
            .row_iter()
            .zip(&self.bias)
            .map(|(r, b)| dot(r, x) + b)
            .collect()
    }

    /// Accumulates ∂/∂W += d_out·xᵀ and ∂/∂b += d_out into `grad`; returns Wᵀ·d_out.
    pub fn backprop(&self, x: &[f64], d_out: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut d_in = vec![0.0; self.inputs()];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, x, grad.weight.row_mut(o));
            grad.bias[o] += g;
            axpy(g, self.weight.row(o), &mut d_in);
        }
        d_in
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.weight.shape() == other.weight.shape() && self.bias.len() == other.bias.len()
    }
}

pub fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// All trainable parameters of an encoder plus head. Also used as the
/// gradient container, since gradients share the parameter layout.
///
/// Flat order: for each layer its weight (row-major) then its bias, then the
/// head weight and head bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSnapshot {
    pub layers: Vec<Dense>,
    pub head: Dense,
}

impl ParameterSnapshot {
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
            head: Dense::zeros(self.head.inputs(), self.head.outputs()),
        }
    }

    fn tensors(&self) -> impl Iterator<Item = (&[f64], bool)> {
        self.layers
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|d| [(d.weight.data(), false), (d.bias.as_slice(), true)])
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = (&mut [f64], bool)> {
        self.layers
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|d| {
                let Dense { weight, bias } = d;
                [(weight.data_mut(), false), (bias.as_mut_slice(), true)]
            })
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(|(t, _)| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|(t, _)| t.iter().copied()).collect()
    }

    /// `true` at every flat index that belongs to a bias vector.
    pub fn bias_mask(&self) -> Vec<bool> {
        self.tensors()
            .flat_map(|(t, b)| std::iter::repeat_n(b, t.len()))
            .collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {} values, snapshot has {}",
                values.len(),
                self.num_params()
            )));
        }
        let mut it = values.iter();
        for (t, _) in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> f64 {
        let mut i = index;
        for (t, _) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn set(&mut self, index: usize, value: f64) {
        let mut i = index;
        for (t, _) in self.tensors_mut() {
            if i < t.len() {
                t[i] = value;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn is_compatible(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.same_shape(b))
            && self.head.same_shape(&other.head)
    }

    /// self += scale·other
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        assert!(self.is_compatible(other), "incompatible snapshots");
        let src: Vec<&[f64]> = other.tensors().map(|(t, _)| t).collect();
        for ((dst, _), s) in self.tensors_mut().zip(src) {
            axpy(scale, s, dst);
        }
    }

    /// Bitwise equality (distinguishes -0.0 from 0.0, unlike `==`).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.is_compatible(other)
            && self
                .to_flat()
                .iter()
                .zip(other.to_flat())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// h_1..h_L
    pub hidden: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One term of a composite loss understood by [`EncoderModel::backward`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "term", rename_all = "snake_case")]
pub enum LossTerm {
    /// weight · mean cross-entropy over the batch.
    CrossEntropy { weight: f64 },
    /// Adds a constant; contributes no gradient.
    Constant { value: f64 },
    /// weight · Σ_j ‖h_layer(x_j)‖².
    RepresentationSq { layer: usize, weight: f64 },
}

impl FromStr for LossTerm {
    type Err = Error;

    /// `ce`, `ce*0.5`, `const:1.5`, `sq@2`, `sq@2*0.1`
    fn from_str(s: &str) -> Result<Self> {
        let (body, weight) = match s.split_once('*') {
            Some((b, w)) => (
                b,
                w.parse::<f64>()
                    .map_err(|_| Error::UnknownLossComponent(s.to_string()))?,
            ),
            None => (s, 1.0),
        };
        if body == "ce" {
            return Ok(LossTerm::CrossEntropy { weight });
        }
        if let Some(v) = body.strip_prefix("const:") {
            let value = v
                .parse::<f64>()
                .map_err(|_| Error::UnknownLossComponent(s.to_string()))?;
            return Ok(LossTerm::Constant { value });
        }
        if let Some(l) = body.strip_prefix("sq@") {
            let layer = l
                .parse::<usize>()
                .map_err(|_| Error::UnknownLossComponent(s.to_string()))?;
            return Ok(LossTerm::RepresentationSq { layer, weight });
        }
        Err(Error::UnknownLossComponent(s.to_string()))
    }
}

/// Parses `+`-separated loss terms, e.g. `ce+sq@1*0.1`.
pub fn parse_loss_spec(s: &str) -> Result<Vec<LossTerm>> {
    s.split('+').map(|t| t.trim().parse()).collect()
}

#[derive(Clone, Debug)]
pub struct Backward {
    pub loss: f64,
    pub grads: ParameterSnapshot,
    /// Total ∂loss/∂h_layer for every layer requested, in request order (N×hidden).
    pub representation_grads: Vec<Matrix>,
}

/// Upstream gradients for one sample, fed into [`EncoderModel::backprop_sample`].
#[derive(Clone, Debug, Default)]
pub struct SampleSeed {
    pub d_logits: Option<Vec<f64>>,
    /// (layer, ∂loss/∂h_layer) pairs; layers 1-based.
    pub d_hidden: Vec<(usize, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParameterSnapshot,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: EncoderConfig,
    params: ParameterSnapshot,
}

impl EncoderModel {
    /// Glorot-uniform weights, zero biases; deterministic in `config.seed`.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut layers = Vec::with_capacity(config.num_layers);
        let mut fan_in = config.input_dim;
        for _ in 0..config.num_layers {
            layers.push(Dense::glorot(fan_in, config.hidden_dim, &mut rng));
            fan_in = config.hidden_dim;
        }
        let head = Dense::glorot(config.hidden_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            params: ParameterSnapshot { layers, head },
        })
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn snapshot(&self) -> ParameterSnapshot {
        self.params.clone()
    }

    pub fn restore(&mut self, snapshot: &ParameterSnapshot) -> Result<()> {
        if !self.params.is_compatible(snapshot) {
            return Err(Error::Incompatible(
                "snapshot does not match the model layout".into(),
            ));
        }
        self.params = snapshot.clone();
        Ok(())
    }

    /// Replaces the head with a fresh Glorot head for `num_classes` outputs.
    pub fn reset_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) {
        self.config.num_classes = num_classes;
        self.params.head = Dense::glorot(self.config.hidden_dim, num_classes, rng);
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, encoder expects {}",
                x.len(),
                self.config.input_dim
            )));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.config.num_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                value: layer,
                min: 1,
                max: self.config.num_layers,
            });
        }
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_input(x)?;
        let act = self.config.activation;
        let mut hidden = Vec::with_capacity(self.params.layers.len());
        let mut h = x.to_vec();
        for layer in &self.params.layers {
            h = layer.apply(&h).into_iter().map(|v| act.apply(v)).collect();
            hidden.push(h.clone());
        }
        Ok(hidden)
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let hidden = self.encode(x)?;
        let logits = self.params.head.apply(hidden.last().expect("L >= 1"));
        let probs = softmax(&logits);
        Ok(ForwardTrace {
            hidden,
            logits,
            probs,
        })
    }

    pub fn predict(&self, inputs: &Matrix) -> Result<Vec<usize>> {
        inputs
            .row_iter()
            .map(|x| self.forward(x).map(|t| argmax(&t.logits)))
            .collect()
    }

    /// Row j = h_layer(x_j).
    pub fn representations(&self, inputs: &Matrix, layer: usize) -> Result<Matrix> {
        self.check_layer(layer)?;
        let d = self.config.hidden_dim;
        let mut data = Vec::with_capacity(inputs.rows() * d);
        for x in inputs.row_iter() {
            let mut hidden = self.encode(x)?;
            data.append(&mut hidden[layer - 1]);
        }
        Matrix::new(inputs.rows(), d, data)
    }

    /// Reverse pass for one sample. Accumulates parameter gradients into
    /// `grads`, records ∂/∂h_k for every layer in `tap` (1-based; written into
    /// the matching slot of `taps`), and returns ∂/∂x.
    pub fn backprop_sample(
        &self,
        x: &[f64],
        trace: &ForwardTrace,
        seed: &SampleSeed,
        grads: &mut ParameterSnapshot,
        tap: &[usize],
        taps: &mut [Vec<f64>],
    ) -> Vec<f64> {
        let l = self.params.layers.len();
        let act = self.config.activation;
        let mut d_h = vec![0.0; self.config.hidden_dim];
        if let Some(d_logits) = &seed.d_logits {
            d_h = self
                .params
                .head
                .backprop(&trace.hidden[l - 1], d_logits, &mut grads.head);
        }
        for k in (0..l).rev() {
            for (layer, g) in &seed.d_hidden {
                if *layer == k + 1 {
                    axpy(1.0, g, &mut d_h);
                }
            }
            for (slot, &layer) in tap.iter().enumerate() {
                if layer == k + 1 {
                    taps[slot].clone_from(&d_h);
                }
            }
            let h = &trace.hidden[k];
            let d_pre: Vec<f64> = d_h
                .iter()
                .zip(h)
                .map(|(g, &y)| g * act.derivative(y))
                .collect();
            let input = if k == 0 { x } else { &trace.hidden[k - 1] };
            d_h = self.params.layers[k].backprop(input, &d_pre, &mut grads.layers[k]);
        }
        d_h
    }

    /// Exact gradient of a composite loss over a batch.
    pub fn backward(
        &self,
        inputs: &Matrix,
        labels: &[usize],
        spec: &[LossTerm],
        tap_layers: &[usize],
    ) -> Result<Backward> {
        if inputs.rows() == 0 {
            return Err(Error::InvalidParameter("empty batch".into()));
        }
        if labels.len() != inputs.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} inputs",
                labels.len(),
                inputs.rows()
            )));
        }
        for &l in tap_layers {
            self.check_layer(l)?;
        }
        for term in spec {
            if let LossTerm::RepresentationSq { layer, .. } = term {
                self.check_layer(*layer)?;
            }
        }
        let n = inputs.rows();
        let mut loss = 0.0;
        let mut grads = self.params.zeros_like();
        let d = self.config.hidden_dim;
        let mut rep_grads = vec![Matrix::zeros(n, d); tap_layers.len()];
        let mut taps = vec![vec![0.0; d]; tap_layers.len()];
        for (j, (x, &y)) in inputs.row_iter().zip(labels).enumerate() {
            if y >= self.config.num_classes {
                return Err(Error::InvalidParameter(format!(
                    "label {y} >= num_classes {}",
                    self.config.num_classes
                )));
            }
            let trace = self.forward(x)?;
            let mut seed = SampleSeed::default();
            for term in spec {
                match *term {
                    LossTerm::CrossEntropy { weight } => {
                        let w = weight / n as f64;
                        loss -= w * log_softmax(&trace.logits)[y];
                        let dl = seed
                            .d_logits
                            .get_or_insert_with(|| vec![0.0; trace.logits.len()]);
                        for (c, p) in trace.probs.iter().enumerate() {
                            dl[c] += w * (p - if c == y { 1.0 } else { 0.0 });
                        }
                    }
                    LossTerm::Constant { value } => {
                        if j == 0 {
                            loss += value;
                        }
                    }
                    LossTerm::RepresentationSq { layer, weight } => {
                        let h = &trace.hidden[layer - 1];
                        loss += weight * h.iter().map(|v| v * v).sum::<f64>();
                        seed.d_hidden
                            .push((layer, h.iter().map(|v| 2.0 * weight * v).collect()));
                    }
                }
            }
            self.backprop_sample(x, &trace, &seed, &mut grads, tap_layers, &mut taps);
            for (m, t) in rep_grads.iter_mut().zip(&taps) {
                m.row_mut(j).copy_from_slice(t);
            }
        }
        Ok(Backward {
            loss,
            grads,
            representation_grads: rep_grads,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported model format version {}",
                file.format_version
            )));
        }
        file.config.validate()?;
        let reference = EncoderModel::init(file.config.clone())?;
        if !reference.params.is_compatible(&file.params) {
            return Err(Error::Incompatible(
                "stored parameters do not match the stored config".into(),
            ));
        }
        Ok(Self {
            config: file.config,
            params: file.params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn config(layers: usize, seed: u64) -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            hidden_dim: 5,
            num_layers: layers,
            activation: Activation::Tanh,
            num_classes: 3,
            seed,
        }
    }

    fn random_inputs(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = EncoderModel::init(config(3, 7)).unwrap();
        let b = EncoderModel::init(config(3, 7)).unwrap();
        assert!(a.params.bitwise_eq(&b.params));
        let c = EncoderModel::init(config(3, 8)).unwrap();
        assert!(!a.params.bitwise_eq(&c.params));

        let mut cfg = config(2, 1);
        cfg.input_dim = 4;
        cfg.hidden_dim = 4;
        let m = EncoderModel::init(cfg).unwrap();
        let limit = (6.0f64 / 8.0).sqrt();
        for l in &m.params.layers {
            assert!(l.weight.data().iter().all(|w| w.abs() <= limit));
            assert!(l.bias.iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn glorot_mean_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Dense::glorot(200, 500, &mut rng);
        let w = layer.weight.data();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        // Uniform(-a, a) has variance a²/3.
        let a = glorot_limit(200, 500);
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn zero_model_gives_uniform_probabilities() {
        let mut m = EncoderModel::init(config(2, 0)).unwrap();
        m.params.set_flat(&vec![0.0; m.params.num_params()]).unwrap();
        let t = m.forward(&[0.0; 4]).unwrap();
        assert!(t.hidden.iter().flatten().all(|&h| h == 0.0));
        for p in &t.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_neuron_tanh() {
        let cfg = EncoderConfig {
            input_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            activation: Activation::Tanh,
            num_classes: 2,
            seed: 0,
        };
        let mut m = EncoderModel::init(cfg).unwrap();
        m.params.layers[0].weight = Matrix::identity(1);
        let t = m.forward(&[0.5]).unwrap();
        assert!((t.hidden[0][0] - 0.462117).abs() < 1e-6);
    }

    /// Independent evaluator: explicit index loops, no shared helpers.
    fn naive_logits(m: &EncoderModel, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in &m.params.layers {
            let w = &layer.weight;
            let mut next = vec![0.0; w.rows()];
            for i in 0..w.rows() {
                let mut s = layer.bias[i];
                for j in 0..w.cols() {
                    s += w.get(i, j) * h[j];
                }
                next[i] = match m.config.activation {
                    Activation::Tanh => s.tanh(),
                    Activation::Relu => {
                        if s > 0.0 {
                            s
                        } else {
                            0.0
                        }
                    }
                };
            }
            h = next;
        }
        let w = &m.params.head.weight;
        (0..w.rows())
            .map(|i| m.params.head.bias[i] + (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum::<f64>())
            .collect()
    }

    #[test]
    fn forward_matches_naive_evaluator() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut cfg = config(3, 5);
            cfg.activation = act;
            let m = EncoderModel::init(cfg).unwrap();
            let xs = random_inputs(10, 4, 9);
            for x in xs.row_iter() {
                let t = m.forward(x).unwrap();
                for (a, b) in t.logits.iter().zip(naive_logits(&m, x)) {
                    assert!((a - b).abs() < 1e-12);
                }
                let s: f64 = t.probs.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(t.probs.iter().all(|&p| p >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let l = [0.3, -1.2, 2.5];
        let shifted: Vec<f64> = l.iter().map(|v| v + 17.0).collect();
        for (a, b) in softmax(&l).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = EncoderModel::init(config(1, 0)).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = EncoderModel::init(config(2, 1)).unwrap();
        let xs = random_inputs(3, 4, 1);
        let b = m
            .backward(&xs, &[0, 1, 2], &[LossTerm::Constant { value: 4.2 }], &[])
            .unwrap();
        assert_eq!(b.loss, 4.2);
        assert!(b.grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn cross_entropy_logit_gradient_at_uniform() {
        // Zero head ⇒ uniform prediction over 2 classes; ∂CE/∂logit = p − onehot.
        let cfg = EncoderConfig {
            input_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            activation: Activation::Tanh,
            num_classes: 2,
            seed: 0,
        };
        let mut m = EncoderModel::init(cfg).unwrap();
        m.params.layers[0].weight = Matrix::identity(1);
        m.params.head = Dense::zeros(1, 2);
        let xs = Matrix::from_rows(&[[0.5]]).unwrap();
        let b = m
            .backward(&xs, &[0], &[LossTerm::CrossEntropy { weight: 1.0 }], &[])
            .unwrap();
        // ∂/∂bias_c equals ∂/∂logit_c.
        assert!((b.grads.head.bias[0] + 0.5).abs() < 1e-15);
        assert!((b.grads.head.bias[1] - 0.5).abs() < 1e-15);
        assert!((b.loss - 2f64.ln()).abs() < 1e-15);
    }

    fn loss_at(m: &EncoderModel, xs: &Matrix, ys: &[usize], spec: &[LossTerm]) -> f64 {
        m.backward(xs, ys, spec, &[]).unwrap().loss
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let mut cfg = config(3, 11);
            cfg.activation = act;
            let mut m = EncoderModel::init(cfg).unwrap();
            // Nonzero biases so every coordinate is exercised.
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let flat: Vec<f64> = m.params.to_flat().iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
            m.params.set_flat(&flat).unwrap();
            let xs = random_inputs(4, 4, 12);
            let ys = [0, 2, 1, 2];
            let spec = parse_loss_spec("ce+sq@2*0.3+const:1").unwrap();
            let b = m.backward(&xs, &ys, &spec, &[]).unwrap();
            let g = b.grads.to_flat();
            let h = 1e-5;
            for i in 0..m.params.num_params() {
                let orig = m.params.get(i);
                m.params.set(i, orig + h);
                let up = loss_at(&m, &xs, &ys, &spec);
                m.params.set(i, orig - h);
                let down = loss_at(&m, &xs, &ys, &spec);
                m.params.set(i, orig);
                let fd = (up - down) / (2.0 * h);
                let err = (fd - g[i]).abs() / (fd.abs().max(g[i].abs()).max(1e-6));
                assert!(err <= 1e-4 || (fd - g[i]).abs() < 1e-9, "param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn representation_grads_are_total_derivatives() {
        let m = EncoderModel::init(config(3, 4)).unwrap();
        let xs = random_inputs(2, 4, 5);
        let ys = [1, 0];
        let spec = parse_loss_spec("ce+sq@1*0.2").unwrap();
        let b = m.backward(&xs, &ys, &spec, &[1, 3]).unwrap();
        // ∂/∂h_3 of the CE term equals W_headᵀ(p − y)/n.
        let t = m.forward(xs.row(0)).unwrap();
        let mut d_logits = t.probs.clone();
        d_logits[1] -= 1.0;
        let expect = m.params.head.weight.tr_matvec(&d_logits).unwrap();
        for (a, e) in b.representation_grads[1].row(0).iter().zip(expect) {
            assert!((a - e / 2.0).abs() < 1e-14);
        }
        assert_eq!(b.representation_grads[0].shape(), (2, 5));
    }

    #[test]
    fn unknown_loss_component() {
        assert!(matches!(
            parse_loss_spec("ce+hinge"),
            Err(Error::UnknownLossComponent(_))
        ));
        let m = EncoderModel::init(config(2, 0)).unwrap();
        let xs = random_inputs(1, 4, 0);
        assert!(m
            .backward(&xs, &[0], &[LossTerm::RepresentationSq { layer: 3, weight: 1.0 }], &[])
            .is_err());
    }

    #[test]
    fn representations_match_trace() {
        let m = EncoderModel::init(config(3, 2)).unwrap();
        let mut xs = random_inputs(5, 4, 3);
        let dup = xs.row(0).to_vec();
        xs.row_mut(4).copy_from_slice(&dup);
        for layer in 1..=3 {
            let z = m.representations(&xs, layer).unwrap();
            for (j, x) in xs.row_iter().enumerate() {
                assert_eq!(z.row(j), m.forward(x).unwrap().hidden[layer - 1].as_slice());
            }
            assert_eq!(z.row(0), z.row(4));
        }
        assert!(matches!(
            m.representations(&xs, 0),
            Err(Error::OutOfRange { .. })
        ));
        assert!(m.representations(&xs, 4).is_err());
    }

    #[test]
    fn snapshot_restore_and_save_roundtrip() {
        let mut m = EncoderModel::init(config(2, 9)).unwrap();
        let snap = m.snapshot();
        let x = [0.1, -0.2, 0.3, 0.4];
        let before = m.forward(&x).unwrap().logits;
        m.params.set(0, 3.0);
        m.restore(&snap).unwrap();
        let after = m.forward(&x).unwrap().logits;
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));

        let json = m.to_json().unwrap();
        let back = EncoderModel::from_json(&json).unwrap();
        assert!(back.params.bitwise_eq(&m.params));
        assert!(EncoderModel::from_json(&json.replace("\"format_version\": 1", "\"format_version\": 9")).is_err());
    }

    #[test]
    fn bias_mask_layout() {
        let m = EncoderModel::init(config(1, 0)).unwrap();
        let mask = m.params.bias_mask();
        assert_eq!(mask.len(), m.params.num_params());
        // layer weight 5x4, bias 5, head weight 3x5, bias 3
        assert_eq!(mask.iter().filter(|&&b| b).count(), 8);
        assert!(!mask[0] && mask[20] && !mask[25] && mask[40]);
    }
}
