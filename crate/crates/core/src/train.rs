//! Fine-tuning with L_total = L_CE + λ·L_reg, AdamW updates, multi-task
//! pretraining and failed-run detection.

use std::hash::{DefaultHasher, Hash, Hasher};

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{metric, Dataset, DatasetManifest, MetricKind, Split, SplitTag};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{log_softmax, Dense, EncoderConfig, EncoderModel, LossTerm, ParameterSnapshot, SampleSeed};
use crate::regularize::{
    capcort_i_loss, capcort_mlp_loss, da_loss_with_noise, mescl_loss, r3f_loss_with_noise,
    reinit_top_k, sample_noise, wc_loss, MlpHead, RegularizerKind, RegularizerSpec, SclState,
};

/// Heldout margin over the majority baseline below which a run counts as failed.
pub const DEFAULT_FAILED_MARGIN: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay, applied to non-bias coordinates only.
    pub weight_decay: f64,
    pub bias_correction: bool,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            bias_correction: true,
        }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be > 0, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon must be > 0, got {}", self.epsilon));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub params: AdamParams,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(params: AdamParams, len: usize) -> Self {
        Self {
            params,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; `is_bias[i]` exempts coordinate i from weight decay.
    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], is_bias: &[bool]) {
        assert_eq!(theta.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        assert_eq!(is_bias.len(), self.m.len());
        let p = self.params;
        self.t += 1;
        let (c1, c2) = if p.bias_correction {
            (1.0 - p.beta1.powi(self.t), 1.0 - p.beta2.powi(self.t))
        } else {
            (1.0, 1.0)
        };
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
            self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
            if !is_bias[i] {
                theta[i] -= p.learning_rate * p.weight_decay * theta[i];
            }
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            theta[i] -= p.learning_rate * m_hat / (v_hat.sqrt() + p.epsilon);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamParams,
    pub regularizer: RegularizerSpec,
    pub seed: u64,
    /// Cap epochs at 3 for 10k–100k training samples and 2 above.
    pub large_dataset_rule: bool,
    pub failed_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 4,
            optimizer: AdamParams::default(),
            regularizer: RegularizerSpec::none(),
            seed: 0,
            large_dataset_rule: true,
            failed_margin: DEFAULT_FAILED_MARGIN,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.regularizer.validate(num_layers)
    }

    pub fn effective_epochs(&self, train_size: usize) -> usize {
        if !self.large_dataset_rule {
            return self.epochs;
        }
        match train_size {
            n if n > 100_000 => self.epochs.min(2),
            n if n >= 10_000 => self.epochs.min(3),
            _ => self.epochs,
        }
    }
}

/// Loss and gradients of one mini-batch objective.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub grads: ParameterSnapshot,
    /// Gradient for the CAPCORT-MLP head φ, when present.
    pub phi_grads: Option<MlpHead>,
}

/// Stochastic inputs of the objective, drawn outside so the objective itself
/// is a deterministic function of the parameters.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObjectiveContext<'a> {
    /// Frozen pre-trained model (CAPCORT and WC reference).
    pub pre: Option<&'a EncoderModel>,
    pub phi: Option<&'a MlpHead>,
    pub scl: Option<&'a SclState>,
    /// Input perturbation for R3F and DA (same shape as the batch).
    pub noise: Option<&'a Matrix>,
}

fn missing(what: &str) -> Error {
    Error::InvalidParameter(format!("objective needs {what}"))
}

/// L_total for one mini-batch of size B:
///
/// * CE is averaged over the batch;
/// * per-sample penalties (CAPCORT, R3F) enter as λ·Σ/B;
/// * WC enters as λ·‖θ − θ_pre‖² over encoder weights;
/// * DA is (Σ CE + λ Σ CE_noisy)/B;
/// * MeSCL is λ·CE + (1 − λ)·Σ SCL/B.
pub fn total_loss(
    model: &EncoderModel,
    spec: &RegularizerSpec,
    ctx: ObjectiveContext<'_>,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<BatchLoss> {
    let n = inputs.rows();
    if n == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let kind = if spec.is_inactive() { RegularizerKind::None } else { spec.kind };
    let lambda = spec.lambda;
    let inv_n = 1.0 / n as f64;

    if kind == RegularizerKind::DataAugment {
        let noise = ctx.noise.ok_or_else(|| missing("a noise draw"))?;
        let (l, g) = da_loss_with_noise(model, inputs, labels, lambda, noise)?;
        let mut grads = g.zeros_like();
        grads.add_scaled(&g, inv_n);
        return Ok(BatchLoss {
            loss: l * inv_n,
            grads,
            phi_grads: None,
        });
    }

    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} inputs", labels.len())));
    }
    let traces = inputs
        .row_iter()
        .map(|x| model.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let ce_weight = if kind == RegularizerKind::Mescl { lambda } else { 1.0 };
    let mut loss = 0.0;
    let mut phi_grads = None;

    // Per-sample gradient rows injected at a hidden layer.
    let mut injected: Option<(usize, Matrix)> = None;
    let rep = |layer: usize| {
        Matrix::from_fn(n, model.config.hidden_dim, |j, k| traces[j].hidden[layer - 1][k])
    };
    match kind {
        RegularizerKind::CapcortI => {
            let pre = ctx.pre.ok_or_else(|| missing("the pre-trained model"))?;
            let layer = spec.target_layer(model.num_layers());
            let (l, g) = capcort_i_loss(&rep(layer), &pre.representations(inputs, layer)?)?;
            loss += lambda * l * inv_n;
            injected = Some((layer, g.scale(lambda * inv_n)));
        }
        RegularizerKind::CapcortMlp => {
            let pre = ctx.pre.ok_or_else(|| missing("the pre-trained model"))?;
            let phi = ctx.phi.ok_or_else(|| missing("the head phi"))?;
            let layer = model.num_layers();
            let out = capcort_mlp_loss(&rep(layer), &pre.representations(inputs, layer)?, phi)?;
            loss += lambda * out.loss * inv_n;
            injected = Some((layer, out.d_z_fin.scale(lambda * inv_n)));
            let mut flat = out.d_head.to_flat();
            flat.iter_mut().for_each(|v| *v *= lambda * inv_n);
            let mut g = phi.zeros_like();
            g.set_flat(&flat)?;
            phi_grads = Some(g);
        }
        RegularizerKind::Mescl => {
            let scl = ctx.scl.ok_or_else(|| missing("class centers"))?;
            let layer = model.num_layers();
            let (l, g) = mescl_loss(&rep(layer), labels, scl, spec.temperature)?;
            let w = (1.0 - lambda) * inv_n;
            loss += w * l;
            injected = Some((layer, g.scale(w)));
        }
        _ => {}
    }

    let mut grads = model.params.zeros_like();
    for (j, ((x, &y), trace)) in inputs.row_iter().zip(labels).zip(&traces).enumerate() {
        if y >= trace.logits.len() {
            return Err(Error::InvalidParameter(format!(
                "label {y} >= num_classes {}",
                trace.logits.len()
            )));
        }
        let w = ce_weight * inv_n;
        loss -= w * log_softmax(&trace.logits)[y];
        let d_logits = trace
            .probs
            .iter()
            .enumerate()
            .map(|(c, p)| w * (p - if c == y { 1.0 } else { 0.0 }))
            .collect();
        let seed = SampleSeed {
            d_logits: Some(d_logits),
            d_hidden: injected
                .as_ref()
                .map(|(layer, g)| vec![(*layer, g.row(j).to_vec())])
                .unwrap_or_default(),
        };
        model.backprop_sample(x, trace, &seed, &mut grads, &[], &mut []);
    }

    match kind {
        RegularizerKind::WeightConsolidation => {
            let pre = ctx.pre.ok_or_else(|| missing("the pre-trained model"))?;
            // The head has no pre-trained counterpart; compare it with itself.
            let reference = ParameterSnapshot {
                layers: pre.params.layers.clone(),
                head: model.params.head.clone(),
            };
            let (l, g) = wc_loss(&model.params, &reference)?;
            loss += lambda * l;
            grads.add_scaled(&g, lambda);
        }
        RegularizerKind::R3f => {
            let noise = ctx.noise.ok_or_else(|| missing("a noise draw"))?;
            let (l, g) = r3f_loss_with_noise(model, inputs, noise)?;
            loss += lambda * l * inv_n;
            grads.add_scaled(&g, lambda * inv_n);
        }
        _ => {}
    }
    Ok(BatchLoss {
        loss,
        grads,
        phi_grads,
    })
}

/// Metrics after one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch objective over the epoch.
    pub train_loss: f64,
    pub train_metric: f64,
    pub dev_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub config: TrainConfig,
    pub dataset: DatasetManifest,
    pub metric: MetricKind,
    /// Digest of the frozen pre-trained parameters.
    pub pre_digest: String,
    pub final_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub steps: usize,
    pub dev_metric: f64,
    pub heldout_metric: f64,
    pub majority_baseline: f64,
    pub failed: bool,
    #[serde(skip)]
    pub model: Option<EncoderModel>,
    #[serde(skip)]
    pub phi: Option<MlpHead>,
}

impl TrainingRun {
    pub fn model(&self) -> &EncoderModel {
        self.model.as_ref().expect("model is only absent on deserialized runs")
    }
}

/// Hex digest of the exact parameter bits.
pub fn snapshot_digest(params: &ParameterSnapshot) -> String {
    let mut h = DefaultHasher::new();
    for v in params.to_flat() {
        v.to_bits().hash(&mut h);
    }
    format!("{:016x}", h.finish())
}

pub fn evaluate(model: &EncoderModel, split: &Split, kind: MetricKind) -> Result<f64> {
    metric(&model.predict(&split.features)?, &split.labels, kind)
}

/// Inclusive: a heldout metric exactly at baseline + margin counts as failed.
pub fn is_failed(heldout_metric: f64, majority_baseline: f64, margin: f64) -> bool {
    heldout_metric <= majority_baseline + margin
}

pub fn detect_failed(run: &TrainingRun, ds: &Dataset) -> bool {
    is_failed(
        run.heldout_metric,
        ds.majority_baseline(SplitTag::Heldout),
        run.config.failed_margin,
    )
}

fn batch(split: &Split, idx: &[usize]) -> (Matrix, Vec<usize>) {
    let s = split.select(idx);
    (s.features, s.labels)
}

/// Fine-tunes a copy of `pre` on `ds` with a fresh classification head.
pub fn finetune(pre: &EncoderModel, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainingRun> {
    cfg.validate(pre.num_layers())?;
    ds.validate()?;
    if ds.input_dim() != pre.config.input_dim {
        return Err(Error::Dimension(format!(
            "dataset has {} features, encoder expects {}",
            ds.input_dim(),
            pre.config.input_dim
        )));
    }
    let spec = &cfg.regularizer;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = pre.clone();
    model.reset_head(ds.num_classes, &mut rng);
    if spec.kind == RegularizerKind::Reinit {
        reinit_top_k(&mut model, spec.reinit_k, &mut rng)?;
    }
    let dim = model.config.hidden_dim;
    let mut phi = (spec.kind == RegularizerKind::CapcortMlp && !spec.is_inactive())
        .then(|| MlpHead::glorot(dim, spec.mlp_depth, &mut rng));

    let n = ds.train.len();
    let epochs = cfg.effective_epochs(n);
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let mut scl = (spec.kind == RegularizerKind::Mescl).then(|| {
        SclState::new(ds.num_classes, dim, spec.center_updates, epochs * steps_per_epoch)
    });
    let needs_noise = !spec.is_inactive()
        && matches!(spec.kind, RegularizerKind::R3f | RegularizerKind::DataAugment);

    let enc_len = model.params.num_params();
    let mut mask = model.params.bias_mask();
    let mut theta = model.params.to_flat();
    if let Some(p) = &phi {
        mask.extend(p.bias_mask());
        theta.extend(p.to_flat());
    }
    let mut opt = AdamW::new(cfg.optimizer, theta.len());
    let pre_digest = snapshot_digest(&pre.params);

    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(epochs);
    let mut step = 0;
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            if let Some(state) = scl.as_mut() {
                if state.due(step) {
                    let emb = model.representations(&ds.train.features, model.num_layers())?;
                    state.refresh(&emb, &ds.train.labels)?;
                }
            }
            let (x, y) = batch(&ds.train, idx);
            let noise = needs_noise.then(|| sample_noise(x.rows(), x.cols(), spec.noise_delta, &mut rng));
            let ctx = ObjectiveContext {
                pre: Some(pre),
                phi: phi.as_ref(),
                scl: scl.as_ref(),
                noise: noise.as_ref(),
            };
            let out = total_loss(&model, spec, ctx, &x, &y)?;
            let mut grad = out.grads.to_flat();
            if let Some(g) = &out.phi_grads {
                grad.extend(g.to_flat());
            }
            if !out.loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NanLoss {
                    step,
                    epoch,
                    detail: format!(
                        "{} objective is {} on a batch of {}",
                        spec.kind.name(),
                        out.loss,
                        idx.len()
                    ),
                });
            }
            epoch_loss += out.loss;
            opt.step(&mut theta, &grad, &mask);
            model.params.set_flat(&theta[..enc_len])?;
            if let Some(p) = phi.as_mut() {
                p.set_flat(&theta[enc_len..])?;
            }
            step += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / steps_per_epoch as f64,
            train_metric: evaluate(&model, &ds.train, ds.metric)?,
            dev_metric: evaluate(&model, &ds.dev, ds.metric)?,
        };
        debug!(
            "{} {} epoch {}: loss {:.4} train {:.4} dev {:.4}",
            ds.name,
            spec.kind.name(),
            rec.epoch,
            rec.train_loss,
            rec.train_metric,
            rec.dev_metric
        );
        history.push(rec);
    }

    let heldout_metric = evaluate(&model, &ds.heldout, ds.metric)?;
    let majority_baseline = ds.majority_baseline(SplitTag::Heldout);
    Ok(TrainingRun {
        config: cfg.clone(),
        dataset: ds.manifest(),
        metric: ds.metric,
        pre_digest,
        final_digest: snapshot_digest(&model.params),
        dev_metric: history.last().map_or(0.0, |r| r.dev_metric),
        epochs: history,
        steps: step,
        heldout_metric,
        majority_baseline,
        failed: is_failed(heldout_metric, majority_baseline, cfg.failed_margin),
        model: Some(model),
        phi,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Multi-task pretraining: one shared encoder, one head per task, summed
/// mean cross-entropies. Returns the encoder with the first task's head.
pub fn pretrain(
    model_cfg: &EncoderConfig,
    tasks: &[Dataset],
    cfg: &PretrainConfig,
) -> Result<EncoderModel> {
    if tasks.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "pretraining needs at least two teacher tasks, got {}",
            tasks.len()
        )));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidParameter("batch size must be >= 1".into()));
    }
    let mut model_cfg = model_cfg.clone();
    model_cfg.num_classes = tasks[0].num_classes;
    let mut model = EncoderModel::init(model_cfg)?;
    for t in tasks {
        if t.input_dim() != model.config.input_dim {
            return Err(Error::Dimension(format!(
                "task {} has {} features, encoder expects {}",
                t.name,
                t.input_dim(),
                model.config.input_dim
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hidden = model.config.hidden_dim;
    let mut heads: Vec<Dense> = vec![model.params.head.clone()];
    heads.extend(tasks[1..].iter().map(|t| Dense::glorot(hidden, t.num_classes, &mut rng)));

    let head_len = |d: &Dense| d.weight.data().len() + d.bias.len();
    let enc_len = model.params.num_params() - head_len(&model.params.head);
    let flatten = |layers: &ParameterSnapshot, heads: &[Dense]| {
        let mut v = layers.to_flat();
        v.truncate(enc_len);
        for h in heads {
            v.extend_from_slice(h.weight.data());
            v.extend_from_slice(&h.bias);
        }
        v
    };
    let mut theta = flatten(&model.params, &heads);
    let mut mask = model.params.bias_mask();
    mask.truncate(enc_len);
    for h in &heads {
        mask.extend(std::iter::repeat_n(false, h.weight.data().len()));
        mask.extend(std::iter::repeat_n(true, h.bias.len()));
    }
    let params = AdamParams {
        learning_rate: cfg.learning_rate,
        weight_decay: 0.0,
        ..AdamParams::default()
    };
    params.validate()?;
    let mut opt = AdamW::new(params, theta.len());

    let longest = tasks.iter().map(|t| t.train.len()).max().unwrap_or(0);
    let steps = longest.div_ceil(cfg.batch_size);
    let ce = [LossTerm::CrossEntropy { weight: 1.0 }];
    let mut orders: Vec<Vec<usize>> = tasks.iter().map(|t| (0..t.train.len()).collect()).collect();
    for epoch in 0..cfg.epochs {
        for o in &mut orders {
            o.shuffle(&mut rng);
        }
        for s in 0..steps {
            let mut grad_layers: Option<ParameterSnapshot> = None;
            let mut head_grads = Vec::with_capacity(tasks.len());
            let mut loss = 0.0;
            for (t, task) in tasks.iter().enumerate() {
                let o = &orders[t];
                let idx: Vec<usize> = (0..cfg.batch_size)
                    .map(|i| o[(s * cfg.batch_size + i) % o.len()])
                    .collect();
                let (x, y) = batch(&task.train, &idx);
                model.params.head = heads[t].clone();
                model.config.num_classes = task.num_classes;
                let b = model.backward(&x, &y, &ce, &[])?;
                loss += b.loss;
                head_grads.push(b.grads.head.clone());
                match grad_layers.as_mut() {
                    Some(g) => {
                        for (acc, l) in g.layers.iter_mut().zip(&b.grads.layers) {
                            acc.weight = acc.weight.add(&l.weight)?;
                            acc.bias.iter_mut().zip(&l.bias).for_each(|(a, v)| *a += v);
                        }
                    }
                    None => grad_layers = Some(b.grads),
                }
            }
            if !loss.is_finite() {
                return Err(Error::NanLoss {
                    step: epoch * steps + s,
                    epoch,
                    detail: "pretraining objective is non-finite".into(),
                });
            }
            let grad = flatten(&grad_layers.expect("at least two tasks"), &head_grads);
            opt.step(&mut theta, &grad, &mask);
            let mut offset = 0;
            for layer in &mut model.params.layers {
                for v in layer.weight.data_mut().iter_mut().chain(layer.bias.iter_mut()) {
                    *v = theta[offset];
                    offset += 1;
                }
            }
            for h in &mut heads {
                for v in h.weight.data_mut().iter_mut().chain(h.bias.iter_mut()) {
                    *v = theta[offset];
                    offset += 1;
                }
            }
        }
        debug!("pretrain epoch {} done", epoch + 1);
    }
    model.params.head = heads.swap_remove(0);
    model.config.num_classes = tasks[0].num_classes;
    Ok(model)
}
