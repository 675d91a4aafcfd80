//! The TC-ResNet4 graph: a 16-channel, 128-sample fragment goes through
//! an entry convolution, one temporal-convolution residual block, global
//! average pooling and a 2-way linear head.
//!
//! ```text
//! input 16x128
//!   └─ conv k3 s2 ─► 16x64 ──┬─ conv k9 s2 ─ BN ─ hardtanh ─ conv k9 s1 ─ BN ─┐
//!                            └─ conv k1 s2 ─ BN ─ relu ────────────────────────(+)─ hardtanh
//!                                                                               │
//!                                       logits 2 ◄─ linear ◄─ dropout ◄─ GAP ◄──┘ 24x32
//! ```
//!
//! Parameter accounting follows the deployed form: batch-norm scale and
//! shift fold into the adjacent convolution, so the five weight tensors
//! count 768 + 3456 + 5184 + 384 + 48 = 9840 parameters.

pub mod checkpoint;
pub mod ops;
pub mod quantized;

use crate::quant::{self, QuantSpec};
use ndarray::{Array1, Array2, Array3, ArrayView3};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("batch norm has no fitted running statistics")]
    UnfittedBatchNorm,
    #[error("model is already folded")]
    AlreadyFolded,
    #[error("operation requires a folded model")]
    NotFolded,
    #[error("integer accumulator exceeded its width")]
    SaturationOverflow,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub const IN_CHANNELS: usize = 16;
pub const IN_LENGTH: usize = 128;
pub const BLOCK_CHANNELS: usize = 24;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    pub weight: Array3<f64>, // (out, in, k)
    pub bias: Option<Array1<f64>>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dLayer {
    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len + 2 * self.padding - self.weight.dim().2) / self.stride + 1
    }

    pub fn weight_params(&self) -> usize {
        self.weight.len()
    }

    pub fn macs(&self, in_len: usize) -> u64 {
        let (out_ch, in_ch, k) = self.weight.dim();
        (self.out_len(in_len) * out_ch * in_ch * k) as u64
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
    pub fitted: bool,
}

impl BatchNormLayer {
    fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            fitted: false,
        }
    }

    fn update_running(&mut self, mean: &Array1<f64>, var: &Array1<f64>, count: usize) {
        let unbias = count as f64 / (count as f64 - 1.0).max(1.0);
        for ch in 0..self.gamma.len() {
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch] * unbias;
        }
        self.fitted = true;
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Array2<f64>, // (out, in)
}

/// The full model. `strict_input_length` switches the entry convolution
/// to unpadded mode (output length 63 instead of 64); the padded form is
/// the one whose MAC total matches the 337,968 figure.
#[derive(Debug, Clone)]
pub struct TcResNetModel {
    pub conv0: Conv1dLayer,
    pub conv1: Conv1dLayer,
    pub bn1: BatchNormLayer,
    pub conv2: Conv1dLayer,
    pub bn2: BatchNormLayer,
    pub conv_sc: Conv1dLayer,
    pub bn_sc: BatchNormLayer,
    pub linear: LinearLayer,
    pub dropout_p: f64,
    pub strict_input_length: bool,
    pub folded: bool,
}

fn kaiming_uniform(shape: (usize, usize, usize), fan_in: usize, rng: &mut impl Rng) -> Array3<f64> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut w = Array3::zeros(shape);
    w.mapv_inplace(|_| rng.random_range(-bound..bound));
    w
}

/// Build the TC-ResNet4 with Kaiming-uniform weights.
pub fn build_tcresnet4(seed: u64) -> TcResNetModel {
    build_tcresnet4_with(seed, false)
}

pub fn build_tcresnet4_with(seed: u64, strict_input_length: bool) -> TcResNetModel {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let conv0 = Conv1dLayer {
        weight: kaiming_uniform((IN_CHANNELS, IN_CHANNELS, 3), IN_CHANNELS * 3, &mut rng),
        bias: None,
        stride: 2,
        padding: if strict_input_length { 0 } else { 1 },
    };
    let conv1 = Conv1dLayer {
        weight: kaiming_uniform((BLOCK_CHANNELS, IN_CHANNELS, 9), IN_CHANNELS * 9, &mut rng),
        bias: None,
        stride: 2,
        padding: 4,
    };
    let conv2 = Conv1dLayer {
        weight: kaiming_uniform((BLOCK_CHANNELS, BLOCK_CHANNELS, 9), BLOCK_CHANNELS * 9, &mut rng),
        bias: None,
        stride: 1,
        padding: 4,
    };
    let conv_sc = Conv1dLayer {
        weight: kaiming_uniform((BLOCK_CHANNELS, IN_CHANNELS, 1), IN_CHANNELS, &mut rng),
        bias: None,
        stride: 2,
        padding: 0,
    };
    let bound = (6.0 / BLOCK_CHANNELS as f64).sqrt();
    let mut lin = Array2::zeros((N_CLASSES, BLOCK_CHANNELS));
    lin.mapv_inplace(|_| rng.random_range(-bound..bound));
    TcResNetModel {
        conv0,
        conv1,
        bn1: BatchNormLayer::new(BLOCK_CHANNELS),
        conv2,
        bn2: BatchNormLayer::new(BLOCK_CHANNELS),
        conv_sc,
        bn_sc: BatchNormLayer::new(BLOCK_CHANNELS),
        linear: LinearLayer { weight: lin },
        dropout_p: 0.5,
        strict_input_length,
        folded: false,
    }
}

/// One row of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub output: (usize, usize),
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Input,
    Conv1d,
    BatchNorm1d,
    Hardtanh,
    Relu,
    ResidualAdd,
    GlobalAvgPool,
    Dropout,
    Linear,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Input => "Input",
            LayerKind::Conv1d => "Conv1d",
            LayerKind::BatchNorm1d => "BatchNorm1d",
            LayerKind::Hardtanh => "Hardtanh",
            LayerKind::Relu => "ReLU",
            LayerKind::ResidualAdd => "TCResidualBlock",
            LayerKind::GlobalAvgPool => "GlobalAveragePooling1d",
            LayerKind::Dropout => "Dropout",
            LayerKind::Linear => "Linear",
        }
    }
}

impl TcResNetModel {
    pub fn entry_out_len(&self) -> usize {
        self.conv0.out_len(IN_LENGTH)
    }

    pub fn block_out_len(&self) -> usize {
        self.conv1.out_len(self.entry_out_len())
    }

    /// Architecture rows in execution order. Batch-norm rows carry zero
    /// parameters: their scale/shift is deploy-time-folded state, not
    /// deployed weights.
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let l0 = self.entry_out_len();
        let l1 = self.block_out_len();
        let c = BLOCK_CHANNELS;
        let mut rows = vec![
            LayerSpec { kind: LayerKind::Input, output: (IN_CHANNELS, IN_LENGTH), params: 0, macs: 0 },
            LayerSpec {
                kind: LayerKind::Conv1d,
                output: (IN_CHANNELS, l0),
                params: self.conv0.weight_params(),
                macs: self.conv0.macs(IN_LENGTH),
            },
            LayerSpec {
                kind: LayerKind::Conv1d,
                output: (c, l1),
                params: self.conv1.weight_params(),
                macs: self.conv1.macs(l0),
            },
            LayerSpec { kind: LayerKind::BatchNorm1d, output: (c, l1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::Hardtanh, output: (c, l1), params: 0, macs: 0 },
            LayerSpec {
                kind: LayerKind::Conv1d,
                output: (c, l1),
                params: self.conv2.weight_params(),
                macs: self.conv2.macs(l1),
            },
            LayerSpec { kind: LayerKind::BatchNorm1d, output: (c, l1), params: 0, macs: 0 },
            LayerSpec {
                kind: LayerKind::Conv1d,
                output: (c, l1),
                params: self.conv_sc.weight_params(),
                macs: self.conv_sc.macs(l0),
            },
            LayerSpec { kind: LayerKind::BatchNorm1d, output: (c, l1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::Relu, output: (c, l1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::Hardtanh, output: (c, l1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::ResidualAdd, output: (c, l1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::GlobalAvgPool, output: (c, 1), params: 0, macs: 0 },
            LayerSpec { kind: LayerKind::Dropout, output: (c, 1), params: 0, macs: 0 },
            LayerSpec {
                kind: LayerKind::Linear,
                output: (N_CLASSES, 1),
                params: self.linear.weight.len(),
                macs: self.linear.weight.len() as u64,
            },
        ];
        if self.folded {
            rows.retain(|r| r.kind != LayerKind::BatchNorm1d);
        }
        rows
    }

    pub fn param_count(&self) -> usize {
        self.layer_specs().iter().map(|l| l.params).sum()
    }

    pub fn mac_count(&self) -> u64 {
        self.layer_specs().iter().map(|l| l.macs).sum()
    }

    /// The shape sequence a fragment passes through:
    /// input, entry conv, block stages, pool, logits.
    pub fn shape_trace(&self) -> Vec<(usize, usize)> {
        let l0 = self.entry_out_len();
        let l1 = self.block_out_len();
        vec![
            (IN_CHANNELS, IN_LENGTH),
            (IN_CHANNELS, l0),
            (BLOCK_CHANNELS, l1),
            (BLOCK_CHANNELS, l1),
            (BLOCK_CHANNELS, l1),
            (BLOCK_CHANNELS, 1),
            (N_CLASSES, 1),
        ]
    }

    fn check_input(&self, x: &ArrayView3<'_, f64>) -> Result<(), ModelError> {
        let (_, c, l) = x.dim();
        if c != IN_CHANNELS || l != IN_LENGTH {
            return Err(ModelError::ShapeMismatch {
                expected: format!("(N, {IN_CHANNELS}, {IN_LENGTH})"),
                got: format!("{:?}", x.dim()),
            });
        }
        Ok(())
    }

    /// Training forward pass. Updates batch-norm running statistics,
    /// samples a dropout mask from `rng`, applies fake quantization to
    /// weights and features when `qat_bits` is set, and returns the
    /// logits plus the tape [`backward`] consumes.
    pub fn forward_train(
        &mut self,
        x: ArrayView3<'_, f64>,
        qat_bits: Option<u8>,
        rng: &mut impl Rng,
    ) -> Result<(Array2<f64>, Tape), ModelError> {
        self.check_input(&x)?;
        if self.folded {
            return Err(ModelError::AlreadyFolded);
        }
        let fq = |arr: &mut Array3<f64>| {
            if let Some(bits) = qat_bits {
                let spec = fit3(arr, bits);
                quant::fake_quant_slice(arr.as_slice_mut().unwrap(), spec);
            }
        };

        let mut x0 = x.to_owned();
        fq(&mut x0);
        let qw = qat_bits.map(|bits| QatWeights::from_model(self, bits));
        let w0 = qw.as_ref().map(|q| &q.conv0).unwrap_or(&self.conv0.weight);
        let w1 = qw.as_ref().map(|q| &q.conv1).unwrap_or(&self.conv1.weight);
        let w2 = qw.as_ref().map(|q| &q.conv2).unwrap_or(&self.conv2.weight);
        let wsc = qw.as_ref().map(|q| &q.conv_sc).unwrap_or(&self.conv_sc.weight);
        let wlin = qw.as_ref().map(|q| &q.linear).unwrap_or(&self.linear.weight);

        let mut a_q = ops::conv1d_forward(x0.view(), w0.view(), None, self.conv0.stride, self.conv0.padding);
        fq(&mut a_q);

        let b = ops::conv1d_forward(a_q.view(), w1.view(), None, self.conv1.stride, self.conv1.padding);
        let (c, bn1_cache, m1, v1) =
            ops::batchnorm_forward_train(b.view(), self.bn1.gamma.view(), self.bn1.beta.view(), self.bn1.eps);
        self.bn1.update_running(&m1, &v1, bn1_cache.count);
        let mut d_q = ops::hardtanh_forward(c.view());
        fq(&mut d_q);

        let e = ops::conv1d_forward(d_q.view(), w2.view(), None, self.conv2.stride, self.conv2.padding);
        let (f, bn2_cache, m2, v2) =
            ops::batchnorm_forward_train(e.view(), self.bn2.gamma.view(), self.bn2.beta.view(), self.bn2.eps);
        self.bn2.update_running(&m2, &v2, bn2_cache.count);
        let mut f_q = f;
        fq(&mut f_q);

        let g = ops::conv1d_forward(a_q.view(), wsc.view(), None, self.conv_sc.stride, self.conv_sc.padding);
        let (h, bn_sc_cache, m3, v3) =
            ops::batchnorm_forward_train(g.view(), self.bn_sc.gamma.view(), self.bn_sc.beta.view(), self.bn_sc.eps);
        self.bn_sc.update_running(&m3, &v3, bn_sc_cache.count);
        let mut i_q = ops::relu_forward(h.view());
        fq(&mut i_q);

        let s = &f_q + &i_q;
        let mut u_q = ops::hardtanh_forward(s.view());
        fq(&mut u_q);

        let mut p = ops::global_avg_pool_forward(u_q.view());
        if let Some(bits) = qat_bits {
            let spec = quant::fit_spec_to_max(p.iter().fold(0.0f64, |m, v| m.max(v.abs())), bits);
            quant::fake_quant_slice(p.as_slice_mut().unwrap(), spec);
        }

        // Inverted dropout: scale kept units so eval needs no rescaling.
        let keep = 1.0 - self.dropout_p;
        let mask = if self.dropout_p > 0.0 {
            p.mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        } else {
            Array2::ones(p.dim())
        };
        let pd = &p * &mask;

        let logits = ops::linear_forward(pd.view(), wlin.view(), None);
        let block_len = self.block_out_len();
        Ok((
            logits,
            Tape {
                x0,
                a_q,
                bn1_cache,
                c,
                d_q,
                bn2_cache,
                bn_sc_cache,
                h,
                s,
                pd,
                dropout_mask: mask,
                block_len,
                qat_weights: qw,
            },
        ))
    }

    /// Inference forward pass (float). Uses running batch-norm
    /// statistics (or folded weights), no dropout; `qat_bits` applies
    /// the same fake quantization as training.
    pub fn forward_eval(
        &self,
        x: ArrayView3<'_, f64>,
        qat_bits: Option<u8>,
    ) -> Result<Array2<f64>, ModelError> {
        self.check_input(&x)?;
        if !self.folded && !(self.bn1.fitted && self.bn2.fitted && self.bn_sc.fitted) {
            return Err(ModelError::UnfittedBatchNorm);
        }
        let fq = |arr: &mut Array3<f64>| {
            if let Some(bits) = qat_bits {
                let spec = fit3(arr, bits);
                quant::fake_quant_slice(arr.as_slice_mut().unwrap(), spec);
            }
        };
        let qw = qat_bits.map(|bits| QatWeights::from_model(self, bits));
        let w0 = qw.as_ref().map(|q| &q.conv0).unwrap_or(&self.conv0.weight);
        let w1 = qw.as_ref().map(|q| &q.conv1).unwrap_or(&self.conv1.weight);
        let w2 = qw.as_ref().map(|q| &q.conv2).unwrap_or(&self.conv2.weight);
        let wsc = qw.as_ref().map(|q| &q.conv_sc).unwrap_or(&self.conv_sc.weight);
        let wlin = qw.as_ref().map(|q| &q.linear).unwrap_or(&self.linear.weight);

        let bn = |layer: &BatchNormLayer, t: &Array3<f64>| -> Array3<f64> {
            if self.folded {
                t.clone()
            } else {
                ops::batchnorm_forward_eval(
                    t.view(),
                    layer.gamma.view(),
                    layer.beta.view(),
                    layer.running_mean.view(),
                    layer.running_var.view(),
                    layer.eps,
                )
            }
        };

        let mut x0 = x.to_owned();
        fq(&mut x0);
        let mut a = ops::conv1d_forward(
            x0.view(),
            w0.view(),
            self.conv0.bias.as_ref().map(|b| b.view()),
            self.conv0.stride,
            self.conv0.padding,
        );
        fq(&mut a);

        let b = ops::conv1d_forward(
            a.view(),
            w1.view(),
            self.conv1.bias.as_ref().map(|b| b.view()),
            self.conv1.stride,
            self.conv1.padding,
        );
        let mut d = ops::hardtanh_forward(bn(&self.bn1, &b).view());
        fq(&mut d);
        let e = ops::conv1d_forward(
            d.view(),
            w2.view(),
            self.conv2.bias.as_ref().map(|b| b.view()),
            self.conv2.stride,
            self.conv2.padding,
        );
        let mut f = bn(&self.bn2, &e);
        fq(&mut f);

        let g = ops::conv1d_forward(
            a.view(),
            wsc.view(),
            self.conv_sc.bias.as_ref().map(|b| b.view()),
            self.conv_sc.stride,
            self.conv_sc.padding,
        );
        let mut i = ops::relu_forward(bn(&self.bn_sc, &g).view());
        fq(&mut i);

        let mut u = ops::hardtanh_forward((&f + &i).view());
        fq(&mut u);
        let mut p = ops::global_avg_pool_forward(u.view());
        if let Some(bits) = qat_bits {
            let spec = quant::fit_spec_to_max(p.iter().fold(0.0f64, |m, v| m.max(v.abs())), bits);
            quant::fake_quant_slice(p.as_slice_mut().unwrap(), spec);
        }
        Ok(ops::linear_forward(p.view(), wlin.view(), None))
    }

    /// Fold each conv+BN pair into a biased convolution. Float outputs
    /// match the unfolded eval forward to well under 1e-5.
    pub fn fold_batchnorm(&self) -> Result<TcResNetModel, ModelError> {
        if self.folded {
            return Err(ModelError::AlreadyFolded);
        }
        if !(self.bn1.fitted && self.bn2.fitted && self.bn_sc.fitted) {
            return Err(ModelError::UnfittedBatchNorm);
        }
        let fold = |conv: &Conv1dLayer, bn: &BatchNormLayer| -> Conv1dLayer {
            let mut w = conv.weight.clone();
            let out_ch = w.dim().0;
            let mut bias = Array1::<f64>::zeros(out_ch);
            for co in 0..out_ch {
                let inv_std = 1.0 / (bn.running_var[co] + bn.eps).sqrt();
                let scale = bn.gamma[co] * inv_std;
                w.index_axis_mut(ndarray::Axis(0), co).mapv_inplace(|v| v * scale);
                bias[co] = bn.beta[co] - bn.running_mean[co] * scale;
            }
            Conv1dLayer { weight: w, bias: Some(bias), stride: conv.stride, padding: conv.padding }
        };
        Ok(TcResNetModel {
            conv0: self.conv0.clone(),
            conv1: fold(&self.conv1, &self.bn1),
            bn1: self.bn1.clone(),
            conv2: fold(&self.conv2, &self.bn2),
            bn2: self.bn2.clone(),
            conv_sc: fold(&self.conv_sc, &self.bn_sc),
            bn_sc: self.bn_sc.clone(),
            linear: self.linear.clone(),
            dropout_p: self.dropout_p,
            strict_input_length: self.strict_input_length,
            folded: true,
        })
    }

    /// All model state in a fixed order, as (name, shape, values). Conv
    /// biases appear only on folded models.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        for (name, l) in [
            ("conv0", &self.conv0),
            ("conv1", &self.conv1),
            ("conv2", &self.conv2),
            ("conv_sc", &self.conv_sc),
        ] {
            out.push((
                format!("{name}.weight"),
                l.weight.shape().to_vec(),
                l.weight.iter().copied().collect(),
            ));
            if let Some(b) = &l.bias {
                out.push((format!("{name}.bias"), vec![b.len()], b.to_vec()));
            }
        }
        out.push((
            "linear.weight".to_string(),
            self.linear.weight.shape().to_vec(),
            self.linear.weight.iter().copied().collect(),
        ));
        for (name, bn) in [("bn1", &self.bn1), ("bn2", &self.bn2), ("bn_sc", &self.bn_sc)] {
            out.push((format!("{name}.gamma"), vec![bn.gamma.len()], bn.gamma.to_vec()));
            out.push((format!("{name}.beta"), vec![bn.beta.len()], bn.beta.to_vec()));
            out.push((
                format!("{name}.running_mean"),
                vec![bn.running_mean.len()],
                bn.running_mean.to_vec(),
            ));
            out.push((
                format!("{name}.running_var"),
                vec![bn.running_var.len()],
                bn.running_var.to_vec(),
            ));
        }
        out
    }
}

/// Fake-quantized copies of the weight tensors used for one QAT forward
/// pass. Specs are refit per pass, so no weight ever clamps and the
/// straight-through gradient is the identity.
#[derive(Debug, Clone)]
pub struct QatWeights {
    pub bits: u8,
    pub conv0: Array3<f64>,
    pub conv1: Array3<f64>,
    pub conv2: Array3<f64>,
    pub conv_sc: Array3<f64>,
    pub linear: Array2<f64>,
}

impl QatWeights {
    fn from_model(model: &TcResNetModel, bits: u8) -> Self {
        let fq3 = |w: &Array3<f64>| {
            let mut out = w.clone();
            let spec = fit3(&out, bits);
            quant::fake_quant_slice(out.as_slice_mut().unwrap(), spec);
            out
        };
        let mut linear = model.linear.weight.clone();
        let spec = quant::fit_spec_to_max(
            linear.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            bits,
        );
        quant::fake_quant_slice(linear.as_slice_mut().unwrap(), spec);
        QatWeights {
            bits,
            conv0: fq3(&model.conv0.weight),
            conv1: fq3(&model.conv1.weight),
            conv2: fq3(&model.conv2.weight),
            conv_sc: fq3(&model.conv_sc.weight),
            linear,
        }
    }
}

fn fit3(arr: &Array3<f64>, bits: u8) -> QuantSpec {
    quant::fit_spec_to_max(arr.iter().fold(0.0f64, |m, v| m.max(v.abs())), bits)
}

/// Activations cached by [`TcResNetModel::forward_train`].
pub struct Tape {
    x0: Array3<f64>,
    a_q: Array3<f64>,
    bn1_cache: ops::BnCache,
    c: Array3<f64>,
    d_q: Array3<f64>,
    bn2_cache: ops::BnCache,
    bn_sc_cache: ops::BnCache,
    h: Array3<f64>,
    s: Array3<f64>,
    pd: Array2<f64>,
    dropout_mask: Array2<f64>,
    block_len: usize,
    qat_weights: Option<QatWeights>,
}

/// Parameter gradients, mirroring the model's trainable tensors.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv0_w: Array3<f64>,
    pub conv1_w: Array3<f64>,
    pub bn1_gamma: Array1<f64>,
    pub bn1_beta: Array1<f64>,
    pub conv2_w: Array3<f64>,
    pub bn2_gamma: Array1<f64>,
    pub bn2_beta: Array1<f64>,
    pub conv_sc_w: Array3<f64>,
    pub bn_sc_gamma: Array1<f64>,
    pub bn_sc_beta: Array1<f64>,
    pub linear_w: Array2<f64>,
}

/// Backpropagate `dlogits` through the tape, producing parameter
/// gradients. With QAT active the convolutions were computed with the
/// fake-quantized weights; the straight-through estimator passes those
/// gradients to the float weights unchanged.
pub fn backward(model: &TcResNetModel, tape: &Tape, dlogits: &Array2<f64>) -> Gradients {
    let qw = tape.qat_weights.as_ref();
    let w1 = qw.map(|q| &q.conv1).unwrap_or(&model.conv1.weight);
    let w2 = qw.map(|q| &q.conv2).unwrap_or(&model.conv2.weight);
    let wsc = qw.map(|q| &q.conv_sc).unwrap_or(&model.conv_sc.weight);
    let wlin = qw.map(|q| &q.linear).unwrap_or(&model.linear.weight);

    let (dpd, dlinear_w, _) = ops::linear_backward(tape.pd.view(), wlin.view(), dlogits.view());
    let dp = &dpd * &tape.dropout_mask;
    let du = ops::global_avg_pool_backward(dp.view(), tape.block_len);
    let ds = ops::hardtanh_backward(tape.s.view(), du.view());

    // Main path.
    let (df, dg2, db2) = {
        let (de, dgamma, dbeta) = ops::batchnorm_backward(&tape.bn2_cache, model.bn2.gamma.view(), ds.view());
        (de, dgamma, dbeta)
    };
    let (dd_q, dconv2_w, _) =
        ops::conv1d_backward(tape.d_q.view(), w2.view(), df.view(), model.conv2.stride, model.conv2.padding);
    let dc = ops::hardtanh_backward(tape.c.view(), dd_q.view());
    let (db_, dg1, db1) = ops::batchnorm_backward(&tape.bn1_cache, model.bn1.gamma.view(), dc.view());
    let (da_main, dconv1_w, _) =
        ops::conv1d_backward(tape.a_q.view(), w1.view(), db_.view(), model.conv1.stride, model.conv1.padding);

    // Shortcut path.
    let di = ops::relu_backward(tape.h.view(), ds.view());
    let (dg_, dgsc, dbsc) = ops::batchnorm_backward(&tape.bn_sc_cache, model.bn_sc.gamma.view(), di.view());
    let (da_sc, dconv_sc_w, _) =
        ops::conv1d_backward(tape.a_q.view(), wsc.view(), dg_.view(), model.conv_sc.stride, model.conv_sc.padding);

    let da = &da_main + &da_sc;
    let w0 = qw.map(|q| &q.conv0).unwrap_or(&model.conv0.weight);
    let (_, dconv0_w, _) =
        ops::conv1d_backward(tape.x0.view(), w0.view(), da.view(), model.conv0.stride, model.conv0.padding);

    Gradients {
        conv0_w: dconv0_w,
        conv1_w: dconv1_w,
        bn1_gamma: dg1,
        bn1_beta: db1,
        conv2_w: dconv2_w,
        bn2_gamma: dg2,
        bn2_beta: db2,
        conv_sc_w: dconv_sc_w,
        bn_sc_gamma: dgsc,
        bn_sc_beta: dbsc,
        linear_w: dlinear_w,
    }
}
