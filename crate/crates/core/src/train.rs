//! Two-phase training: a patient-unspecific base model (40 epochs,
//! batch 128), then patient-specific retraining (10 epochs, batch 8),
//! both with AdamW, class-weighted cross-entropy, optional
//! quantization-aware training, and threshold moving at decision time.

use crate::metrics::ConfusionMatrix;
use crate::preprocess::FragmentSet;
use crate::tcresnet::{backward, Gradients, TcResNetModel};
use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("labels contain a single class")]
    SingleClass,
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    DivergedLoss { epoch: usize, step: usize },
    #[error("retrain set is empty")]
    EmptyRetrainSet,
    #[error(transparent)]
    Model(#[from] crate::tcresnet::ModelError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_base: usize,
    pub batch_base: usize,
    pub epochs_retrain: usize,
    pub batch_retrain: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Threshold-moving weight on the ictal probability.
    pub seizure_weight: f64,
    pub qat_bits: Option<u8>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_base: 40,
            batch_base: 128,
            epochs_retrain: 10,
            batch_retrain: 8,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seizure_weight: 2.0,
            qat_bits: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Confusion of the model on its training data in the last epoch,
    /// with threshold moving applied; the HMM emission estimate reads
    /// this directly.
    pub train_confusion: ConfusionMatrix,
    pub val_accuracy: Option<f64>,
    pub val_sensitivity: Option<f64>,
    pub val_specificity: Option<f64>,
    pub selected_weight: Option<u32>,
    pub selected_weight_fallback: bool,
}

/// Inverse-frequency class weights normalized to mean 1:
/// `w_c = n_total / (2 * n_c)`, then divided by their mean.
pub fn class_weights(labels: &[u8]) -> Result<(f64, f64), TrainError> {
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(TrainError::SingleClass);
    }
    let total = labels.len() as f64;
    let w_neg = total / (2.0 * n_neg as f64);
    let w_pos = total / (2.0 * n_pos as f64);
    let mean = (w_neg + w_pos) / 2.0;
    Ok((w_neg / mean, w_pos / mean))
}

/// Decide ictal iff `w * p_ictal >= p_non_ictal`; `w = 1` is argmax.
pub fn apply_threshold_moving(probs: [f64; 2], w: f64) -> u8 {
    u8::from(w * probs[1] >= probs[0])
}

/// Smallest candidate weight whose training sensitivity exceeds 0.9;
/// falls back to the largest candidate (flagged) if none qualifies.
pub fn select_weight(evals: &[(u32, f64)]) -> (u32, bool) {
    let mut sorted: Vec<(u32, f64)> = evals.to_vec();
    sorted.sort_by_key(|e| e.0);
    for &(w, sens) in &sorted {
        if sens > 0.9 {
            return (w, false);
        }
    }
    (sorted.last().map(|e| e.0).unwrap_or(5), true)
}

/// Weighted softmax cross-entropy, PyTorch reduction: the weighted sum
/// of per-sample losses divided by the sum of the weights. Returns the
/// loss and its gradient w.r.t. the logits.
pub fn weighted_ce_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[u8],
    weights: (f64, f64),
) -> (f64, Array2<f64>) {
    let n = labels.len();
    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut weight_sum = 0.0;
    for i in 0..n {
        let z0 = logits[(i, 0)];
        let z1 = logits[(i, 1)];
        let m = z0.max(z1);
        let e0 = (z0 - m).exp();
        let e1 = (z1 - m).exp();
        let sum = e0 + e1;
        let (p0, p1) = (e0 / sum, e1 / sum);
        let y = usize::from(labels[i] != 0);
        let w = if y == 1 { weights.1 } else { weights.0 };
        let p_true = if y == 1 { p1 } else { p0 };
        loss += -w * p_true.max(1e-300).ln();
        weight_sum += w;
        dlogits[(i, 0)] = w * (p0 - if y == 0 { 1.0 } else { 0.0 });
        dlogits[(i, 1)] = w * (p1 - if y == 1 { 1.0 } else { 0.0 });
    }
    dlogits.mapv_inplace(|g| g / weight_sum);
    (loss / weight_sum, dlogits)
}

/// AdamW with decoupled weight decay over the model's trainable tensors.
pub struct AdamW {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig, model: &TcResNetModel) -> Self {
        let sizes = trainable_tensors(model)
            .iter()
            .map(|t| t.len())
            .collect::<Vec<_>>();
        AdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step(&mut self, model: &mut TcResNetModel, grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let mut params = trainable_tensors_mut(model);
        let grads = gradient_tensors(grads);
        for ((tensor, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, p) in tensor.iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                **p = **p - self.lr * self.weight_decay * **p
                    - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

fn trainable_tensors(model: &TcResNetModel) -> Vec<Vec<&f64>> {
    vec![
        model.conv0.weight.iter().collect(),
        model.conv1.weight.iter().collect(),
        model.bn1.gamma.iter().collect(),
        model.bn1.beta.iter().collect(),
        model.conv2.weight.iter().collect(),
        model.bn2.gamma.iter().collect(),
        model.bn2.beta.iter().collect(),
        model.conv_sc.weight.iter().collect(),
        model.bn_sc.gamma.iter().collect(),
        model.bn_sc.beta.iter().collect(),
        model.linear.weight.iter().collect(),
    ]
}

fn trainable_tensors_mut(model: &mut TcResNetModel) -> Vec<Vec<&mut f64>> {
    vec![
        model.conv0.weight.iter_mut().collect(),
        model.conv1.weight.iter_mut().collect(),
        model.bn1.gamma.iter_mut().collect(),
        model.bn1.beta.iter_mut().collect(),
        model.conv2.weight.iter_mut().collect(),
        model.bn2.gamma.iter_mut().collect(),
        model.bn2.beta.iter_mut().collect(),
        model.conv_sc.weight.iter_mut().collect(),
        model.bn_sc.gamma.iter_mut().collect(),
        model.bn_sc.beta.iter_mut().collect(),
        model.linear.weight.iter_mut().collect(),
    ]
}

fn gradient_tensors(grads: &Gradients) -> Vec<Vec<f64>> {
    vec![
        grads.conv0_w.iter().copied().collect(),
        grads.conv1_w.iter().copied().collect(),
        grads.bn1_gamma.to_vec(),
        grads.bn1_beta.to_vec(),
        grads.conv2_w.iter().copied().collect(),
        grads.bn2_gamma.to_vec(),
        grads.bn2_beta.to_vec(),
        grads.conv_sc_w.iter().copied().collect(),
        grads.bn_sc_gamma.to_vec(),
        grads.bn_sc_beta.to_vec(),
        grads.linear_w.iter().copied().collect(),
    ]
}

fn batch_tensor(set: &FragmentSet, idx: &[usize]) -> (Array3<f64>, Vec<u8>) {
    let (_, c, t) = set.data.dim();
    let mut x = Array3::<f64>::zeros((idx.len(), c, t));
    let mut labels = Vec::with_capacity(idx.len());
    for (row, &i) in idx.iter().enumerate() {
        for ch in 0..c {
            for s in 0..t {
                x[(row, ch, s)] = set.data[(i, ch, s)] as f64;
            }
        }
        labels.push(set.labels[i]);
    }
    (x, labels)
}

/// Per-fragment class probabilities from the float model.
pub fn predict_probs(
    model: &TcResNetModel,
    set: &FragmentSet,
    qat_bits: Option<u8>,
) -> Result<Vec<[f64; 2]>, TrainError> {
    let mut out = Vec::with_capacity(set.len());
    let chunk = 256;
    let mut i = 0;
    while i < set.len() {
        let idx: Vec<usize> = (i..set.len().min(i + chunk)).collect();
        let (x, _) = batch_tensor(set, &idx);
        let logits = model.forward_eval(x.view(), qat_bits)?;
        for row in logits.axis_iter(Axis(0)) {
            out.push(crate::tcresnet::quantized::softmax2([row[0], row[1]]));
        }
        i += chunk;
    }
    Ok(out)
}

fn confusion_with_threshold(probs: &[[f64; 2]], labels: &[u8], w: f64) -> ConfusionMatrix {
    let predicted: Vec<u8> = probs.iter().map(|&p| apply_threshold_moving(p, w)).collect();
    ConfusionMatrix::from_labels(&predicted, labels)
}

fn run_epochs(
    model: &mut TcResNetModel,
    set: &FragmentSet,
    epochs: usize,
    batch_size: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>, TrainError> {
    let weights = class_weights(&set.labels)?;
    let mut opt = AdamW::new(cfg, model);
    let mut order: Vec<usize> = (0..set.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, batch) in order.chunks(batch_size).enumerate() {
            let (x, labels) = batch_tensor(set, batch);
            let (logits, tape) = model.forward_train(x.view(), cfg.qat_bits, rng)?;
            let (loss, dlogits) = weighted_ce_loss(logits.view(), &labels, weights);
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, step });
            }
            let grads = backward(model, &tape, &dlogits);
            opt.step(model, &grads);
            epoch_loss += loss;
            steps += 1;
        }
        losses.push(epoch_loss / steps.max(1) as f64);
    }
    Ok(losses)
}

fn build_report(
    model: &TcResNetModel,
    train_set: &FragmentSet,
    val_set: Option<&FragmentSet>,
    cfg: &TrainConfig,
    losses: Vec<f64>,
    select_w: bool,
) -> Result<TrainReport, TrainError> {
    let probs = predict_probs(model, train_set, cfg.qat_bits)?;
    let (selected, fallback) = if select_w {
        let evals: Vec<(u32, f64)> = (1..=5)
            .map(|w| {
                let cm = confusion_with_threshold(&probs, &train_set.labels, w as f64);
                let sens = crate::metrics::rates(&cm).sensitivity.unwrap_or(0.0);
                (w, sens)
            })
            .collect();
        let (w, fb) = select_weight(&evals);
        (Some(w), fb)
    } else {
        (None, false)
    };
    let train_confusion = confusion_with_threshold(&probs, &train_set.labels, cfg.seizure_weight);
    let (mut val_acc, mut val_sens, mut val_spec) = (None, None, None);
    if let Some(val) = val_set {
        if !val.is_empty() {
            let vprobs = predict_probs(model, val, cfg.qat_bits)?;
            let cm = confusion_with_threshold(&vprobs, &val.labels, cfg.seizure_weight);
            let r = crate::metrics::rates(&cm);
            val_acc = r.accuracy;
            val_sens = r.sensitivity;
            val_spec = r.specificity;
        }
    }
    Ok(TrainReport {
        epoch_losses: losses,
        train_confusion,
        val_accuracy: val_acc,
        val_sensitivity: val_sens,
        val_specificity: val_spec,
        selected_weight: selected,
        selected_weight_fallback: fallback,
    })
}

/// Train the patient-unspecific base model on the pooled dev split.
pub fn train_base(
    dev_train: &FragmentSet,
    dev_val: Option<&FragmentSet>,
    cfg: &TrainConfig,
) -> Result<(TcResNetModel, TrainReport), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = crate::tcresnet::build_tcresnet4(cfg.seed);
    let losses = run_epochs(&mut model, dev_train, cfg.epochs_base, cfg.batch_base, cfg, &mut rng)?;
    let report = build_report(&model, dev_train, dev_val, cfg, losses, true)?;
    Ok((model, report))
}

/// Retrain a copy of the base model on one patient's retrain split. All
/// layers stay trainable; only the batch size and epoch count differ
/// from base training.
pub fn retrain_patient(
    base: &TcResNetModel,
    retrain_train: &FragmentSet,
    retrain_val: Option<&FragmentSet>,
    cfg: &TrainConfig,
) -> Result<(TcResNetModel, TrainReport), TrainError> {
    if retrain_train.is_empty() {
        return Err(TrainError::EmptyRetrainSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut model = base.clone();
    let losses = if cfg.epochs_retrain > 0 {
        run_epochs(&mut model, retrain_train, cfg.epochs_retrain, cfg.batch_retrain, cfg, &mut rng)?
    } else {
        Vec::new()
    };
    let report = build_report(&model, retrain_train, retrain_val, cfg, losses, false)?;
    Ok((model, report))
}
