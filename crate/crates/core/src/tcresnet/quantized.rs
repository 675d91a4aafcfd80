//! Bit-true fixed-point inference for the folded TC-ResNet4.
//!
//! Every tensor is an integer code array with a power-of-two scale.
//! Products accumulate in i64; one requantization (an exact shift with
//! round-half-to-even) follows each layer, with the activation applied
//! as a clamp in the output code domain. Because all scales are powers
//! of two, the f64 reference path in [`forward_fakequant`] performs the
//! same arithmetic exactly, so the two routes agree code for code.

use super::{ModelError, TcResNetModel, IN_CHANNELS, IN_LENGTH, N_CLASSES};
use crate::quant::{self, QuantSpec};
use ndarray::{Array1, Array2, Array3, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

/// Bound on intermediate accumulators; far above anything a 10-bit
/// model can produce, so hitting it means a genuine defect.
const ACC_LIMIT: i64 = 1 << 40;

/// Feature quantization points through the graph.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeatureSpecs {
    pub input: QuantSpec,
    pub entry: QuantSpec,
    pub ht1: QuantSpec,
    pub main: QuantSpec,
    pub shortcut: QuantSpec,
    pub block: QuantSpec,
    pub pool: QuantSpec,
}

#[derive(Debug, Clone)]
pub struct QConv {
    pub codes: Array3<i64>,
    pub spec: QuantSpec,
    pub bias_codes: Option<Array1<i64>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct QLinear {
    pub codes: Array2<i64>,
    pub spec: QuantSpec,
}

/// The deployable quantized model.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub bits: u8,
    pub conv0: QConv,
    pub conv1: QConv,
    pub conv2: QConv,
    pub conv_sc: QConv,
    pub linear: QLinear,
    pub features: FeatureSpecs,
}

/// Activation applied during requantization, as a clamp on output codes.
#[derive(Clone, Copy)]
enum Act {
    None,
    /// Clamp to the codes representing [-1, 1].
    Hardtanh,
    /// Clamp to non-negative codes.
    Relu,
}

fn act_bounds(act: Act, spec: QuantSpec) -> (i64, i64) {
    let (mut lo, mut hi) = (spec.qmin(), spec.qmax());
    match act {
        Act::None => {}
        Act::Relu => lo = lo.max(0),
        Act::Hardtanh => {
            let e = spec.scale_exp;
            // |value| <= 1  <=>  |code| <= 2^-e (for e <= 0; for e > 0
            // only code 0 satisfies it).
            let bound = if e <= 0 { 1i64 << (-e) } else { 0 };
            lo = lo.max(-bound);
            hi = hi.min(bound);
        }
    }
    (lo, hi)
}

/// Round-half-to-even rescale of an integer accumulator by 2^shift.
fn rhe_shift(acc: i64, shift: i32) -> i64 {
    if shift >= 0 {
        acc.checked_shl(shift as u32).expect("requantization overflow")
    } else {
        let k = (-shift) as u32;
        let q = acc >> k;
        let r = acc - (q << k);
        let half = 1i64 << (k - 1);
        if r > half || (r == half && q & 1 != 0) {
            q + 1
        } else {
            q
        }
    }
}

/// Quantize a float fragment with the model's input spec.
pub fn quantize_input(fragment: ArrayView2<'_, f64>, spec: QuantSpec) -> Array2<i64> {
    fragment.mapv(|v| spec.quantize_value(v))
}

/// Calibrate feature scales by running the folded float model over
/// `fragments` and fitting each point's spec to the observed |max|.
pub fn quantize_model(
    model: &TcResNetModel,
    bits: u8,
    calib: ArrayView3<'_, f64>,
) -> Result<QuantizedModel, ModelError> {
    if !model.folded {
        return Err(ModelError::NotFolded);
    }
    let fit_w = |w: &Array3<f64>| {
        let spec = quant::fit_spec(w.view().into_dyn(), bits);
        (quant::quantize(w.view().into_dyn(), spec)
            .codes
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap(), spec)
    };
    let (c0, s0) = fit_w(&model.conv0.weight);
    let (c1, s1) = fit_w(&model.conv1.weight);
    let (c2, s2) = fit_w(&model.conv2.weight);
    let (csc, ssc) = fit_w(&model.conv_sc.weight);
    let lin_spec = quant::fit_spec(model.linear.weight.view().into_dyn(), bits);
    let lin_codes = quant::quantize(model.linear.weight.view().into_dyn(), lin_spec)
        .codes
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();

    // Feature ranges from the float folded forward.
    let mut maxes = [0.0f64; 7];
    let track = |m: &mut f64, arr: &Array3<f64>| {
        *m = arr.iter().fold(*m, |acc, v| acc.max(v.abs()));
    };
    let n = calib.dim().0;
    for i in 0..n {
        let x = calib.index_axis(ndarray::Axis(0), i).to_owned().insert_axis(ndarray::Axis(0));
        maxes[0] = x.iter().fold(maxes[0], |a, v| a.max(v.abs()));
        let a = super::ops::conv1d_forward(
            x.view(),
            model.conv0.weight.view(),
            model.conv0.bias.as_ref().map(|b| b.view()),
            model.conv0.stride,
            model.conv0.padding,
        );
        track(&mut maxes[1], &a);
        let b = super::ops::conv1d_forward(
            a.view(),
            model.conv1.weight.view(),
            model.conv1.bias.as_ref().map(|b| b.view()),
            model.conv1.stride,
            model.conv1.padding,
        );
        let d = super::ops::hardtanh_forward(b.view());
        track(&mut maxes[2], &d);
        let e = super::ops::conv1d_forward(
            d.view(),
            model.conv2.weight.view(),
            model.conv2.bias.as_ref().map(|b| b.view()),
            model.conv2.stride,
            model.conv2.padding,
        );
        track(&mut maxes[3], &e);
        let g = super::ops::conv1d_forward(
            a.view(),
            model.conv_sc.weight.view(),
            model.conv_sc.bias.as_ref().map(|b| b.view()),
            model.conv_sc.stride,
            model.conv_sc.padding,
        );
        let i_ = super::ops::relu_forward(g.view());
        track(&mut maxes[4], &i_);
        let u = super::ops::hardtanh_forward((&e + &i_).view());
        track(&mut maxes[5], &u);
        let p = super::ops::global_avg_pool_forward(u.view());
        maxes[6] = p.iter().fold(maxes[6], |a, v| a.max(v.abs()));
    }
    let features = FeatureSpecs {
        input: quant::fit_spec_to_max(maxes[0], bits),
        entry: quant::fit_spec_to_max(maxes[1], bits),
        ht1: quant::fit_spec_to_max(maxes[2], bits),
        main: quant::fit_spec_to_max(maxes[3], bits),
        shortcut: quant::fit_spec_to_max(maxes[4], bits),
        block: quant::fit_spec_to_max(maxes[5], bits),
        pool: quant::fit_spec_to_max(maxes[6], bits),
    };

    // Biases live at the accumulator scale (input scale * weight scale)
    // so they add directly into the accumulator.
    let qbias = |bias: &Option<Array1<f64>>, in_spec: QuantSpec, w_spec: QuantSpec| {
        bias.as_ref().map(|b| {
            let acc = QuantSpec::new(32, in_spec.scale_exp + w_spec.scale_exp);
            b.mapv(|v| acc.quantize_value(v))
        })
    };
    Ok(QuantizedModel {
        bits,
        conv0: QConv {
            bias_codes: qbias(&model.conv0.bias, features.input, s0),
            codes: c0,
            spec: s0,
            stride: model.conv0.stride,
            padding: model.conv0.padding,
        },
        conv1: QConv {
            bias_codes: qbias(&model.conv1.bias, features.entry, s1),
            codes: c1,
            spec: s1,
            stride: model.conv1.stride,
            padding: model.conv1.padding,
        },
        conv2: QConv {
            bias_codes: qbias(&model.conv2.bias, features.ht1, s2),
            codes: c2,
            spec: s2,
            stride: model.conv2.stride,
            padding: model.conv2.padding,
        },
        conv_sc: QConv {
            bias_codes: qbias(&model.conv_sc.bias, features.entry, ssc),
            codes: csc,
            spec: ssc,
            stride: model.conv_sc.stride,
            padding: model.conv_sc.padding,
        },
        linear: QLinear { codes: lin_codes, spec: lin_spec },
        features,
    })
}

/// Integer convolution: full-kernel MACs (padding taps count, matching
/// the static accounting), bias at accumulator scale, then requantize
/// with activation clamped in the output code domain.
#[allow(clippy::too_many_arguments)]
fn qconv(
    x: &Array2<i64>,
    in_spec: QuantSpec,
    conv: &QConv,
    out_spec: QuantSpec,
    act: Act,
    macs: &mut u64,
) -> Result<Array2<i64>, ModelError> {
    let (in_ch, len) = x.dim();
    let (out_ch, w_in, k) = conv.codes.dim();
    assert_eq!(in_ch, w_in);
    let out_len = (len + 2 * conv.padding - k) / conv.stride + 1;
    let acc_exp = in_spec.scale_exp + conv.spec.scale_exp;
    let shift = acc_exp - out_spec.scale_exp;
    let (lo, hi) = act_bounds(act, out_spec);
    let mut y = Array2::<i64>::zeros((out_ch, out_len));
    for co in 0..out_ch {
        for t in 0..out_len {
            let start = (t * conv.stride) as isize - conv.padding as isize;
            let mut acc: i64 = conv.bias_codes.as_ref().map(|b| b[co]).unwrap_or(0);
            for ci in 0..in_ch {
                for j in 0..k {
                    let idx = start + j as isize;
                    let xv = if idx >= 0 && (idx as usize) < len {
                        x[(ci, idx as usize)]
                    } else {
                        0
                    };
                    acc += conv.codes[(co, ci, j)] * xv;
                    *macs += 1;
                }
            }
            if acc.abs() > ACC_LIMIT {
                return Err(ModelError::SaturationOverflow);
            }
            y[(co, t)] = rhe_shift(acc, shift).clamp(lo, hi);
        }
    }
    Ok(y)
}

/// Result of one integer inference.
pub struct QuantizedOutput {
    pub logit_codes: [i64; 2],
    pub logit_spec: QuantSpec,
    pub macs: u64,
}

impl QuantizedOutput {
    pub fn logits(&self) -> [f64; 2] {
        let s = self.logit_spec.scale();
        [self.logit_codes[0] as f64 * s, self.logit_codes[1] as f64 * s]
    }

    pub fn argmax(&self) -> usize {
        usize::from(self.logit_codes[1] > self.logit_codes[0])
    }
}

/// Integer-only forward pass over one quantized fragment.
pub fn forward_quantized(
    model: &QuantizedModel,
    input_codes: ArrayView2<'_, i64>,
) -> Result<QuantizedOutput, ModelError> {
    let (c, l) = input_codes.dim();
    if c != IN_CHANNELS || l != IN_LENGTH {
        return Err(ModelError::ShapeMismatch {
            expected: format!("({IN_CHANNELS}, {IN_LENGTH})"),
            got: format!("({c}, {l})"),
        });
    }
    let f = &model.features;
    let mut macs = 0u64;
    let x = input_codes.to_owned();
    let a = qconv(&x, f.input, &model.conv0, f.entry, Act::None, &mut macs)?;
    let d = qconv(&a, f.entry, &model.conv1, f.ht1, Act::Hardtanh, &mut macs)?;
    let m = qconv(&d, f.ht1, &model.conv2, f.main, Act::None, &mut macs)?;
    let s = qconv(&a, f.entry, &model.conv_sc, f.shortcut, Act::Relu, &mut macs)?;

    // Residual add at the finer of the two operand scales, then the
    // block hardtanh during requantization to the block spec.
    let e_m = f.main.scale_exp;
    let e_s = f.shortcut.scale_exp;
    let e_add = e_m.min(e_s);
    let (lo, hi) = act_bounds(Act::Hardtanh, f.block);
    let shift = e_add - f.block.scale_exp;
    let (ch, len) = m.dim();
    let mut u = Array2::<i64>::zeros((ch, len));
    for i in 0..ch {
        for t in 0..len {
            let sum = (m[(i, t)] << (e_m - e_add)) + (s[(i, t)] << (e_s - e_add));
            if sum.abs() > ACC_LIMIT {
                return Err(ModelError::SaturationOverflow);
            }
            u[(i, t)] = rhe_shift(sum, shift).clamp(lo, hi);
        }
    }

    // Global average pool: sum is exact at scale 2^(e_block - 5) for the
    // 32-long block, then requantize to the pool spec.
    let gap_exp = f.block.scale_exp - (len.trailing_zeros() as i32);
    assert!(len.is_power_of_two(), "pool length must be a power of two");
    let mut p = Array1::<i64>::zeros(ch);
    for i in 0..ch {
        let sum: i64 = (0..len).map(|t| u[(i, t)]).sum();
        p[i] = rhe_shift(sum, gap_exp - f.pool.scale_exp)
            .clamp(f.pool.qmin(), f.pool.qmax());
    }

    let logit_exp = f.pool.scale_exp + model.linear.spec.scale_exp;
    let mut logit_codes = [0i64; 2];
    for (o, code) in logit_codes.iter_mut().enumerate() {
        let mut acc = 0i64;
        for i in 0..ch {
            acc += model.linear.codes[(o, i)] * p[i];
            macs += 1;
        }
        if acc.abs() > ACC_LIMIT {
            return Err(ModelError::SaturationOverflow);
        }
        *code = acc;
    }
    let _ = N_CLASSES;
    Ok(QuantizedOutput {
        logit_codes,
        logit_spec: QuantSpec::new(32, logit_exp),
        macs,
    })
}

/// f64 reference path: identical arithmetic to [`forward_quantized`]
/// expressed through fake quantization on dequantized tensors. Returns
/// the logits (at the same scale as the integer route).
pub fn forward_fakequant(
    model: &QuantizedModel,
    fragment: ArrayView2<'_, f64>,
) -> Result<[f64; 2], ModelError> {
    let (c, l) = fragment.dim();
    if c != IN_CHANNELS || l != IN_LENGTH {
        return Err(ModelError::ShapeMismatch {
            expected: format!("({IN_CHANNELS}, {IN_LENGTH})"),
            got: format!("({c}, {l})"),
        });
    }
    let f = &model.features;
    let deq3 = |codes: &Array3<i64>, spec: QuantSpec| codes.mapv(|v| v as f64 * spec.scale());

    // Fake-quantize with the activation folded into the code clamp, the
    // float mirror of the integer requantization step.
    let fq_act = |arr: &Array2<f64>, spec: QuantSpec, act: Act| -> Array2<f64> {
        let (lo, hi) = act_bounds(act, spec);
        let scale = spec.scale();
        arr.mapv(|v| {
            let code = (v / scale).round_ties_even();
            let code = if code.is_nan() { 0.0 } else { code };
            code.clamp(lo as f64, hi as f64) * scale
        })
    };
    let conv = |x: &Array2<f64>, qc: &QConv, in_spec: QuantSpec| -> Array2<f64> {
        let w = deq3(&qc.codes, qc.spec);
        let acc_scale = (in_spec.scale_exp + qc.spec.scale_exp) as f64;
        let bias = qc
            .bias_codes
            .as_ref()
            .map(|b| b.mapv(|v| v as f64 * acc_scale.exp2()));
        let x3 = x.clone().insert_axis(ndarray::Axis(0));
        super::ops::conv1d_forward(x3.view(), w.view(), bias.as_ref().map(|b| b.view()), qc.stride, qc.padding)
            .index_axis_move(ndarray::Axis(0), 0)
    };

    let x = fq_act(&fragment.to_owned(), f.input, Act::None);
    let a = fq_act(&conv(&x, &model.conv0, f.input), f.entry, Act::None);
    let d = fq_act(&conv(&a, &model.conv1, f.entry), f.ht1, Act::Hardtanh);
    let m = fq_act(&conv(&d, &model.conv2, f.ht1), f.main, Act::None);
    let s = fq_act(&conv(&a, &model.conv_sc, f.entry), f.shortcut, Act::Relu);
    let u = fq_act(&(&m + &s), f.block, Act::Hardtanh);

    let len = u.dim().1;
    let mut p = Array1::<f64>::zeros(u.dim().0);
    for i in 0..u.dim().0 {
        p[i] = (0..len).map(|t| u[(i, t)]).sum::<f64>() / len as f64;
    }
    let pool_scale = f.pool.scale();
    let p = p.mapv(|v| {
        let code = (v / pool_scale).round_ties_even();
        code.clamp(f.pool.qmin() as f64, f.pool.qmax() as f64) * pool_scale
    });

    let w = model.linear.codes.mapv(|v| v as f64 * model.linear.spec.scale());
    let mut logits = [0.0f64; 2];
    for (o, slot) in logits.iter_mut().enumerate() {
        *slot = (0..p.len()).map(|i| w[(o, i)] * p[i]).sum();
    }
    Ok(logits)
}

/// Softmax over a 2-logit pair; index 1 is the ictal probability.
pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    [e0 / (e0 + e1), e1 / (e0 + e1)]
}
