//! Fine-tuning regularizers.
//!
//! Each loss returns its value together with exact gradients. Losses are sums
//! over the rows they are given (matching the textbook definitions); the
//! training loop divides per-sample terms by the batch size.
//!
//! | kind          | penalty                                                  |
//! |---------------|----------------------------------------------------------|
//! | `capcort_i`   | Σ‖z_pre − z_fin‖² at a chosen encoder layer               |
//! | `capcort_mlp` | Σ‖z_pre − φ(z_fin)‖² with a jointly trained MLP φ          |
//! | `wc`          | Σ over non-bias parameters of ‖θ_fin − θ_pre‖²            |
//! | `r3f`         | Σ KL(f(x)‖f(x+ε)) + KL(f(x+ε)‖f(x)), ε ~ N(0, δI)         |
//! | `da`          | CE(f(x+ε), y), added with weight λ                         |
//! | `reinit`      | no penalty; top-k layers and the head are redrawn        |
//! | `mescl`       | center-relaxed supervised contrastive loss               |

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::net::{log_softmax, softmax, Dense, EncoderModel, ParameterSnapshot, SampleSeed};

/// Standard deviation of the Gaussian used by [`reinit_top_k`].
pub const REINIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    CapcortI,
    CapcortMlp,
    #[serde(rename = "wc")]
    WeightConsolidation,
    R3f,
    #[serde(rename = "da")]
    DataAugment,
    Reinit,
    Mescl,
    #[default]
    None,
}

impl RegularizerKind {
    pub fn name(self) -> &'static str {
        match self {
            RegularizerKind::CapcortI => "capcort_i",
            RegularizerKind::CapcortMlp => "capcort_mlp",
            RegularizerKind::WeightConsolidation => "wc",
            RegularizerKind::R3f => "r3f",
            RegularizerKind::DataAugment => "da",
            RegularizerKind::Reinit => "reinit",
            RegularizerKind::Mescl => "mescl",
            RegularizerKind::None => "none",
        }
    }

    /// λ search grid used for heldout selection.
    pub fn default_lambda_grid(self) -> Vec<f64> {
        match self {
            RegularizerKind::CapcortI
            | RegularizerKind::CapcortMlp
            | RegularizerKind::WeightConsolidation => vec![0.01, 0.05, 0.1, 0.5],
            RegularizerKind::DataAugment => vec![0.05, 0.1, 0.2, 0.4, 0.8],
            RegularizerKind::R3f => vec![0.1, 0.5, 1.0, 5.0],
            // CE weight in λ·CE + (1−λ)·SCL.
            RegularizerKind::Mescl => vec![0.5, 0.7, 0.9],
            RegularizerKind::Reinit | RegularizerKind::None => vec![0.0],
        }
    }
}

fn default_mlp_depth() -> usize {
    2
}
fn default_delta() -> f64 {
    1e-5
}
fn default_temperature() -> f64 {
    0.3
}
fn default_reinit_k() -> usize {
    2
}
fn default_center_updates() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    #[serde(default)]
    pub lambda: f64,
    /// Encoder layer regularized by CAPCORT-I (1-based). Defaults to the top layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    #[serde(default = "default_mlp_depth")]
    pub mlp_depth: usize,
    #[serde(default = "default_delta")]
    pub noise_delta: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_reinit_k")]
    pub reinit_k: usize,
    #[serde(default = "default_center_updates")]
    pub center_updates: usize,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self::new(RegularizerKind::None, 0.0)
    }
}

impl RegularizerSpec {
    pub fn new(kind: RegularizerKind, lambda: f64) -> Self {
        Self {
            kind,
            lambda,
            layer: None,
            mlp_depth: default_mlp_depth(),
            noise_delta: default_delta(),
            temperature: default_temperature(),
            reinit_k: default_reinit_k(),
            center_updates: default_center_updates(),
        }
    }

    pub fn none() -> Self {
        Self::new(RegularizerKind::None, 0.0)
    }

    pub fn with_layer(mut self, layer: usize) -> Self {
        self.layer = Some(layer);
        self
    }

    /// Layer whose representations the penalty reads, given an L-layer encoder.
    pub fn target_layer(&self, num_layers: usize) -> usize {
        match self.kind {
            RegularizerKind::CapcortI => self.layer.unwrap_or(num_layers),
            _ => num_layers,
        }
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be a finite nonnegative number, got {}", self.lambda));
        }
        if !(self.noise_delta >= 0.0) {
            return bad(format!("noise_delta must be >= 0, got {}", self.noise_delta));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be > 0, got {}", self.temperature));
        }
        if self.mlp_depth == 0 {
            return bad("mlp_depth must be >= 1".into());
        }
        if let Some(layer) = self.layer {
            if layer == 0 || layer > num_layers {
                return Err(Error::OutOfRange {
                    what: "layer",
                    value: layer,
                    min: 1,
                    max: num_layers,
                });
            }
        }
        if self.kind == RegularizerKind::Reinit && (self.reinit_k == 0 || self.reinit_k > num_layers) {
            return Err(Error::OutOfRange {
                what: "reinit_k",
                value: self.reinit_k,
                min: 1,
                max: num_layers,
            });
        }
        if self.kind == RegularizerKind::Mescl && self.lambda > 1.0 {
            return bad(format!("mescl lambda weighs CE against SCL and must be <= 1, got {}", self.lambda));
        }
        Ok(())
    }

    /// Whether this spec adds nothing on top of plain cross-entropy.
    pub fn is_inactive(&self) -> bool {
        match self.kind {
            RegularizerKind::None => true,
            RegularizerKind::Reinit | RegularizerKind::Mescl => false,
            _ => self.lambda == 0.0,
        }
    }
}

fn check_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{what}: {}x{} vs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    Ok(())
}

/// Σⱼ‖z_preʲ − z_finʲ‖² and its gradient 2(z_fin − z_pre) with respect to z_fin.
pub fn capcort_i_loss(z_fin: &Matrix, z_pre: &Matrix) -> Result<(f64, Matrix)> {
    check_same_shape(z_fin, z_pre, "capcort_i")?;
    let diff = z_fin.sub(z_pre)?;
    Ok((diff.frobenius_sq(), diff.scale(2.0)))
}

/// Regularization head φ: `Linear → tanh → … → Linear`, width equal to the
/// representation dimension. Depth counts linear layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpHead {
    pub layers: Vec<Dense>,
}

impl MlpHead {
    pub fn glorot<R: Rng + ?Sized>(dim: usize, depth: usize, rng: &mut R) -> Self {
        Self {
            layers: (0..depth.max(1)).map(|_| Dense::glorot(dim, dim, rng)).collect(),
        }
    }

    /// Single linear layer W = I, b = 0.
    pub fn identity(dim: usize) -> Self {
        Self {
            layers: vec![Dense {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
            }],
        }
    }

    pub fn zeros(dim: usize, depth: usize) -> Self {
        Self {
            layers: (0..depth.max(1)).map(|_| Dense::zeros(dim, dim)).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Returns the input of every linear layer followed by the final output.
    pub fn forward_trace(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(z.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = layer.apply(acts.last().expect("nonempty"));
            if i < last {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(out);
        }
        acts
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        self.forward_trace(z).pop().expect("nonempty")
    }

    /// Accumulates parameter gradients into `grads`; returns ∂/∂z.
    pub fn backprop(&self, acts: &[Vec<f64>], d_out: &[f64], grads: &mut MlpHead) -> Vec<f64> {
        let last = self.layers.len() - 1;
        let mut d = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // acts[i + 1] is the tanh output of layer i.
                for (g, y) in d.iter_mut().zip(&acts[i + 1]) {
                    *g *= 1.0 - y * y;
                }
            }
            d = self.layers[i].backprop(&acts[i], &d, &mut grads.layers[i]);
        }
        d
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs(), l.outputs()))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn bias_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(std::iter::repeat_n(false, l.weight.data().len()));
            out.extend(std::iter::repeat_n(true, l.bias.len()));
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "flat vector has {} values, head has {}",
                values.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.data().len();
            l.weight.data_mut().copy_from_slice(&values[offset..offset + w]);
            offset += w;
            let b = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MlpLoss {
    pub loss: f64,
    /// ∂loss/∂z_fin, one row per sample.
    pub d_z_fin: Matrix,
    pub d_head: MlpHead,
}

/// Σⱼ‖z_preʲ − φ(z_finʲ)‖² at the current φ.
pub fn capcort_mlp_loss(z_fin: &Matrix, z_pre: &Matrix, head: &MlpHead) -> Result<MlpLoss> {
    check_same_shape(z_fin, z_pre, "capcort_mlp")?;
    if head.dim() != z_fin.cols() {
        return Err(Error::Dimension(format!(
            "head width {} does not match representation dim {}",
            head.dim(),
            z_fin.cols()
        )));
    }
    let mut loss = 0.0;
    let mut d_z_fin = Matrix::zeros(z_fin.rows(), z_fin.cols());
    let mut d_head = head.zeros_like();
    for j in 0..z_fin.rows() {
        let acts = head.forward_trace(z_fin.row(j));
        let out = acts.last().expect("nonempty");
        let resid: Vec<f64> = out.iter().zip(z_pre.row(j)).map(|(o, p)| o - p).collect();
        loss += dot(&resid, &resid);
        let d_out: Vec<f64> = resid.iter().map(|r| 2.0 * r).collect();
        let d_in = head.backprop(&acts, &d_out, &mut d_head);
        d_z_fin.row_mut(j).copy_from_slice(&d_in);
    }
    Ok(MlpLoss {
        loss,
        d_z_fin,
        d_head,
    })
}

/// Σ over non-bias coordinates of (θ_fin − θ_pre)²; gradient 2(θ_fin − θ_pre)
/// on those coordinates and zero on biases.
pub fn wc_loss(fin: &ParameterSnapshot, pre: &ParameterSnapshot) -> Result<(f64, ParameterSnapshot)> {
    if !fin.is_compatible(pre) {
        return Err(Error::Incompatible(
            "weight consolidation needs identically shaped snapshots".into(),
        ));
    }
    let mut grad = fin.zeros_like();
    let mut loss = 0.0;
    let pairs = fin
        .layers
        .iter()
        .zip(&pre.layers)
        .zip(grad.layers.iter_mut())
        .chain(std::iter::once(((&fin.head, &pre.head), &mut grad.head)));
    for ((f, p), g) in pairs {
        for ((a, b), o) in f
            .weight
            .data()
            .iter()
            .zip(p.weight.data())
            .zip(g.weight.data_mut())
        {
            let d = a - b;
            loss += d * d;
            *o = 2.0 * d;
        }
    }
    Ok((loss, grad))
}

/// KL(p‖q) + KL(q‖p).
pub fn symmetric_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| (a - b) * (a.ln() - b.ln()))
        .sum()
}

/// Symmetric KL between softmax(a) and softmax(b) with its gradients in a and b.
pub fn symmetric_kl_logits(a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let lp = log_softmax(a);
    let lq = log_softmax(b);
    let p: Vec<f64> = lp.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = lq.iter().map(|v| v.exp()).collect();
    let kl_pq: f64 = p.iter().zip(&lp).zip(&lq).map(|((pi, a), b)| pi * (a - b)).sum();
    let kl_qp: f64 = q.iter().zip(&lq).zip(&lp).map(|((qi, a), b)| qi * (a - b)).sum();
    let da = (0..a.len())
        .map(|j| p[j] * (lp[j] - lq[j]) + p[j] - q[j] - p[j] * kl_pq)
        .collect();
    let db = (0..b.len())
        .map(|j| q[j] * (lq[j] - lp[j]) + q[j] - p[j] - q[j] * kl_qp)
        .collect();
    (kl_pq + kl_qp, da, db)
}

/// Gaussian input noise with covariance δI (standard deviation √δ).
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, cols: usize, delta: f64, rng: &mut R) -> Matrix {
    let std = delta.sqrt();
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

/// Symmetric-KL smoothness penalty for a fixed noise draw; gradients flow
/// through both the clean and the perturbed branch.
pub fn r3f_loss_with_noise(
    model: &EncoderModel,
    inputs: &Matrix,
    noise: &Matrix,
) -> Result<(f64, ParameterSnapshot)> {
    check_same_shape(inputs, noise, "r3f noise")?;
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for (x, e) in inputs.row_iter().zip(noise.row_iter()) {
        let xn: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
        let clean = model.forward(x)?;
        let noisy = model.forward(&xn)?;
        let (l, da, db) = symmetric_kl_logits(&clean.logits, &noisy.logits);
        loss += l;
        let seed = SampleSeed {
            d_logits: Some(da),
            d_hidden: vec![],
        };
        model.backprop_sample(x, &clean, &seed, &mut grads, &[], &mut []);
        let seed = SampleSeed {
            d_logits: Some(db),
            d_hidden: vec![],
        };
        model.backprop_sample(&xn, &noisy, &seed, &mut grads, &[], &mut []);
    }
    Ok((loss, grads))
}

pub fn r3f_loss<R: Rng + ?Sized>(
    model: &EncoderModel,
    inputs: &Matrix,
    delta: f64,
    rng: &mut R,
) -> Result<(f64, ParameterSnapshot)> {
    let noise = sample_noise(inputs.rows(), inputs.cols(), delta, rng);
    r3f_loss_with_noise(model, inputs, &noise)
}

/// Σ CE(f(x), y) + λ·Σ CE(f(x+ε), y) for a fixed noise draw.
pub fn da_loss_with_noise(
    model: &EncoderModel,
    inputs: &Matrix,
    labels: &[usize],
    lambda: f64,
    noise: &Matrix,
) -> Result<(f64, ParameterSnapshot)> {
    check_same_shape(inputs, noise, "da noise")?;
    if labels.len() != inputs.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} inputs",
            labels.len(),
            inputs.rows()
        )));
    }
    let mut grads = model.params.zeros_like();
    let mut loss = 0.0;
    for ((x, e), &y) in inputs.row_iter().zip(noise.row_iter()).zip(labels) {
        loss += ce_sample(model, x, y, 1.0, &mut grads)?;
        if lambda != 0.0 {
            let xn: Vec<f64> = x.iter().zip(e).map(|(a, b)| a + b).collect();
            loss += lambda * ce_sample(model, &xn, y, lambda, &mut grads)?;
        }
    }
    Ok((loss, grads))
}

pub fn da_loss<R: Rng + ?Sized>(
    model: &EncoderModel,
    inputs: &Matrix,
    labels: &[usize],
    lambda: f64,
    delta: f64,
    rng: &mut R,
) -> Result<(f64, ParameterSnapshot)> {
    let noise = sample_noise(inputs.rows(), inputs.cols(), delta, rng);
    da_loss_with_noise(model, inputs, labels, lambda, &noise)
}

/// Cross-entropy of one sample; accumulates `weight`·∂CE into `grads`.
fn ce_sample(
    model: &EncoderModel,
    x: &[f64],
    y: usize,
    weight: f64,
    grads: &mut ParameterSnapshot,
) -> Result<f64> {
    let trace = model.forward(x)?;
    let ce = -log_softmax(&trace.logits)[y];
    let d_logits = softmax(&trace.logits)
        .iter()
        .enumerate()
        .map(|(c, p)| weight * (p - if c == y { 1.0 } else { 0.0 }))
        .collect();
    let seed = SampleSeed {
        d_logits: Some(d_logits),
        d_hidden: vec![],
    };
    model.backprop_sample(x, &trace, &seed, grads, &[], &mut []);
    Ok(ce)
}

/// Redraws the top-k encoder layers from N(0, 0.02²) with zero biases, and the
/// classification head the same way. Layers 1..=L−k are left untouched.
pub fn reinit_top_k<R: Rng + ?Sized>(model: &mut EncoderModel, k: usize, rng: &mut R) -> Result<()> {
    let l = model.num_layers();
    if k == 0 || k > l {
        return Err(Error::OutOfRange {
            what: "reinit_k",
            value: k,
            min: 1,
            max: l,
        });
    }
    let normal = Normal::new(0.0, REINIT_STD).expect("valid std");
    let redraw = |d: &mut Dense, rng: &mut R| {
        d.weight.data_mut().iter_mut().for_each(|w| *w = normal.sample(rng));
        d.bias.iter_mut().for_each(|b| *b = 0.0);
    };
    for layer in &mut model.params.layers[l - k..] {
        redraw(layer, rng);
    }
    redraw(&mut model.params.head, rng);
    Ok(())
}

/// Class centers for the memory-efficient contrastive loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SclState {
    /// Row j = mean embedding of class j at the last refresh.
    pub centers: Matrix,
    pub counts: Vec<usize>,
    /// Classes with fewer than two members are excluded from the loss.
    pub active: Vec<bool>,
    /// Optimizer steps (0-based) before which the centers are refreshed.
    pub schedule: Vec<usize>,
    pub refreshes: usize,
}

impl SclState {
    /// `updates` refresh points spread evenly over `total_steps`, the first at step 0.
    pub fn new(num_classes: usize, dim: usize, updates: usize, total_steps: usize) -> Self {
        let updates = updates.max(1);
        let mut schedule: Vec<usize> = (0..updates)
            .map(|i| i * total_steps / updates)
            .collect();
        schedule.dedup();
        Self {
            centers: Matrix::zeros(num_classes, dim),
            counts: vec![0; num_classes],
            active: vec![false; num_classes],
            schedule,
            refreshes: 0,
        }
    }

    pub fn due(&self, step: usize) -> bool {
        self.schedule.binary_search(&step).is_ok()
    }

    /// Recomputes centers from the current training-set embeddings. Returns
    /// the classes that were excluded (empty or singleton).
    pub fn refresh(&mut self, embeddings: &Matrix, labels: &[usize]) -> Result<Vec<usize>> {
        if labels.len() != embeddings.rows() {
            return Err(Error::Dimension(format!(
                "{} labels for {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        let classes = self.counts.len();
        let dim = self.centers.cols();
        if embeddings.cols() != dim {
            return Err(Error::Dimension(format!(
                "embedding dim {} vs center dim {dim}",
                embeddings.cols()
            )));
        }
        let mut sums = Matrix::zeros(classes, dim);
        let mut counts = vec![0usize; classes];
        for (z, &y) in embeddings.row_iter().zip(labels) {
            if y >= classes {
                return Err(Error::InvalidParameter(format!("label {y} >= {classes}")));
            }
            counts[y] += 1;
            for (s, v) in sums.row_mut(y).iter_mut().zip(z) {
                *s += v;
            }
        }
        let mut excluded = Vec::new();
        for c in 0..classes {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for v in sums.row_mut(c) {
                    *v *= inv;
                }
            }
            self.active[c] = counts[c] >= 2;
            if !self.active[c] {
                excluded.push(c);
            }
        }
        if !excluded.is_empty() {
            warn!("contrastive loss excludes classes with fewer than two members: {excluded:?}");
        }
        self.centers = sums;
        self.counts = counts;
        self.refreshes += 1;
        Ok(excluded)
    }
}

/// Center-relaxed supervised contrastive loss, centers held constant.
///
/// For sample i of class y, with sₖ = ⟨zᵢ, cₖ⟩/τ and multiplicities
/// mₖ = |Cₖ| − [k = y] (every other training sample, grouped by class):
///
/// ```text
/// ℓᵢ = −sᵧ + log Σₖ mₖ·exp(sₖ)
/// ```
///
/// which is the pairwise form −1/(|Cᵧ|−1) Σ_{j≠i, yⱼ=y} log(exp(⟨zᵢ,c_{yⱼ}⟩/τ) /
/// Σ_{k≠i} exp(⟨zᵢ,c_{yₖ}⟩/τ)) with every partner replaced by its class center.
/// Samples of inactive classes contribute nothing.
pub fn mescl_loss(
    embeddings: &Matrix,
    labels: &[usize],
    state: &SclState,
    temperature: f64,
) -> Result<(f64, Matrix)> {
    if labels.len() != embeddings.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} embeddings",
            labels.len(),
            embeddings.rows()
        )));
    }
    if embeddings.cols() != state.centers.cols() {
        return Err(Error::Dimension(format!(
            "embedding dim {} vs center dim {}",
            embeddings.cols(),
            state.centers.cols()
        )));
    }
    if state.active.iter().filter(|&&a| a).count() < 2 {
        return Err(Error::InvalidParameter(
            "contrastive loss needs at least two classes with two or more members".into(),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(embeddings.rows(), embeddings.cols());
    for (i, (z, &y)) in embeddings.row_iter().zip(labels).enumerate() {
        if y >= state.active.len() || !state.active[y] {
            continue;
        }
        let classes: Vec<usize> = (0..state.active.len()).filter(|&k| state.active[k]).collect();
        let s: Vec<f64> = classes
            .iter()
            .map(|&k| dot(z, state.centers.row(k)) / temperature)
            .collect();
        let m = s.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let weights: Vec<f64> = classes
            .iter()
            .zip(&s)
            .map(|(&k, &sk)| {
                let mult = state.counts[k] - usize::from(k == y);
                mult as f64 * (sk - m).exp()
            })
            .collect();
        let total: f64 = weights.iter().sum();
        let sy = s[classes.iter().position(|&k| k == y).expect("active")];
        loss += -sy + m + total.ln();
        let g = grad.row_mut(i);
        for (v, c) in g.iter_mut().zip(state.centers.row(y)) {
            *v -= c / temperature;
        }
        for (&k, w) in classes.iter().zip(&weights) {
            let p = w / total;
            for (v, c) in g.iter_mut().zip(state.centers.row(k)) {
                *v += p * c / temperature;
            }
        }
    }
    Ok((loss, grad))
}
