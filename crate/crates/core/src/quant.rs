//! Uniform symmetric fixed-point quantization with power-of-two scales.
//!
//! Values are stored as signed integer codes times a power-of-two scale,
//! which is what a shift-based MAC array consumes. Rounding is
//! half-to-even throughout so repeated requantization carries no bias.

use ndarray::{ArrayD, ArrayViewD};
use serde::{Deserialize, Serialize};

/// Per-tensor quantization parameters: bit width plus a power-of-two scale.
///
/// Codes live in the signed range `[-2^(bits-1), 2^(bits-1) - 1]` and the
/// represented value is always `code * scale`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    /// Base-2 exponent of the scale; `scale = 2^scale_exp`.
    pub scale_exp: i32,
}

impl QuantSpec {
    pub fn new(bits: u8, scale_exp: i32) -> Self {
        assert!((2..=32).contains(&bits), "unsupported bit width {bits}");
        Self { bits, scale_exp }
    }

    pub fn scale(&self) -> f64 {
        (self.scale_exp as f64).exp2()
    }

    /// Most negative representable code.
    pub fn qmin(&self) -> i64 {
        -(1i64 << (self.bits - 1))
    }

    /// Most positive representable code.
    pub fn qmax(&self) -> i64 {
        (1i64 << (self.bits - 1)) - 1
    }

    /// Quantize a single value: round-half-to-even then clamp into range.
    pub fn quantize_value(&self, v: f64) -> i64 {
        let c = (v / self.scale()).round_ties_even();
        let c = if c.is_nan() { 0.0 } else { c };
        (c as i64).clamp(self.qmin(), self.qmax())
    }

    pub fn dequantize_code(&self, code: i64) -> f64 {
        code as f64 * self.scale()
    }

    /// True when `v` would survive quantization without saturating.
    pub fn in_range(&self, v: f64) -> bool {
        let c = (v / self.scale()).round_ties_even();
        c >= self.qmin() as f64 && c <= self.qmax() as f64
    }
}

/// A quantized tensor: integer codes plus the spec that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    pub codes: ArrayD<i64>,
    pub spec: QuantSpec,
    /// Number of values clamped during quantization.
    pub saturated: usize,
}

impl QTensor {
    pub fn dequantize(&self) -> ArrayD<f64> {
        let s = self.spec.scale();
        self.codes.mapv(|c| c as f64 * s)
    }
}

/// Fit a per-tensor symmetric spec: the smallest power-of-two scale such
/// that `max|v| / scale <= qmax`. An all-zero tensor gets scale 1.
pub fn fit_spec(values: ArrayViewD<'_, f64>, bits: u8) -> QuantSpec {
    assert!(!values.is_empty(), "cannot fit a spec to an empty tensor");
    let max_abs = values.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    fit_spec_to_max(max_abs, bits)
}

/// Fit on a precomputed `max|v|` (used by activation calibration).
pub fn fit_spec_to_max(max_abs: f64, bits: u8) -> QuantSpec {
    let qmax = ((1i64 << (bits - 1)) - 1) as f64;
    if max_abs == 0.0 || !max_abs.is_finite() {
        return QuantSpec::new(bits, 0);
    }
    // Start below the target and walk up; float log2 alone can land one
    // power off at exact boundaries.
    let mut exp = (max_abs / qmax).log2().floor() as i32 - 1;
    while max_abs / (exp as f64).exp2() > qmax {
        exp += 1;
    }
    QuantSpec::new(bits, exp)
}

/// Quantize a tensor under `spec`, counting saturated entries.
pub fn quantize(values: ArrayViewD<'_, f64>, spec: QuantSpec) -> QTensor {
    let scale = spec.scale();
    let (qmin, qmax) = (spec.qmin(), spec.qmax());
    let mut saturated = 0usize;
    let codes = values.mapv(|v| {
        let c = (v / scale).round_ties_even();
        let c = if c.is_nan() { 0.0 } else { c };
        let c = c as i64;
        if c < qmin || c > qmax {
            saturated += 1;
        }
        c.clamp(qmin, qmax)
    });
    QTensor { codes, spec, saturated }
}

pub fn dequantize(q: &QTensor) -> ArrayD<f64> {
    q.dequantize()
}

/// Forward fake quantization: `dequantize(quantize(v))` element-wise.
pub fn fake_quant(values: ArrayViewD<'_, f64>, spec: QuantSpec) -> ArrayD<f64> {
    let scale = spec.scale();
    let (qmin, qmax) = (spec.qmin() as f64, spec.qmax() as f64);
    values.mapv(|v| {
        let c = (v / scale).round_ties_even();
        let c = if c.is_nan() { 0.0 } else { c };
        c.clamp(qmin, qmax) * scale
    })
}

/// In-place [`fake_quant`] over a raw slice (hot path for the forward
/// passes).
pub fn fake_quant_slice(values: &mut [f64], spec: QuantSpec) {
    let scale = spec.scale();
    let (qmin, qmax) = (spec.qmin() as f64, spec.qmax() as f64);
    for v in values {
        let c = (*v / scale).round_ties_even();
        let c = if c.is_nan() { 0.0 } else { c };
        *v = c.clamp(qmin, qmax) * scale;
    }
}

/// Straight-through gradient mask for [`fake_quant`]: 1 where the value
/// was representable, 0 where it clamped.
pub fn fake_quant_grad_mask(values: ArrayViewD<'_, f64>, spec: QuantSpec) -> ArrayD<f64> {
    values.mapv(|v| if spec.in_range(v) { 1.0 } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;
    use proptest::prelude::*;

    fn dyn1(v: &[f64]) -> ArrayD<f64> {
        arr1(v).into_dyn()
    }

    #[test]
    fn fit_spec_integral_fit() {
        let spec = fit_spec(dyn1(&[-7.0, 3.0, 7.0]).view(), 4);
        assert_eq!(spec.scale_exp, 0);
        assert_eq!(spec.scale(), 1.0);
    }

    #[test]
    fn fit_spec_fractional_max() {
        // Enumerating powers of two: 0.9/0.125 = 7.2 > 7 fails, 0.9/0.25 fits.
        let spec = fit_spec(dyn1(&[0.9, -0.1]).view(), 4);
        assert_eq!(spec.scale(), 0.25);
    }

    #[test]
    fn fit_spec_all_zero_convention() {
        let spec = fit_spec(dyn1(&[0.0, 0.0]).view(), 4);
        assert_eq!(spec.scale(), 1.0);
    }

    #[test]
    fn fit_spec_enumeration_oracle() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let bits = *[2u8, 4, 6, 8, 10].choose(&mut rng).unwrap();
            let max: f64 = rng.random_range(1e-6..1e4);
            let spec = fit_spec_to_max(max, bits);
            let qmax = ((1i64 << (bits - 1)) - 1) as f64;
            // Brute-force: smallest exponent in a wide range that fits.
            let want = (-60..=60)
                .find(|e| max / (*e as f64).exp2() <= qmax)
                .unwrap();
            assert_eq!(spec.scale_exp, want, "max={max} bits={bits}");
        }
    }

    #[test]
    fn quantize_rounding_and_clamp() {
        let spec = QuantSpec::new(4, -2); // scale 0.25
        let q = quantize(dyn1(&[0.0, 0.6, 100.0]).view(), spec);
        assert_eq!(q.codes.as_slice().unwrap(), &[0, 2, 7]);
        assert_eq!(q.saturated, 1);
        let d = q.dequantize();
        assert_eq!(d.as_slice().unwrap(), &[0.0, 0.5, 1.75]);
    }

    #[test]
    fn fake_quant_identity_on_representable() {
        let spec = QuantSpec::new(4, -2);
        let vals = dyn1(&[0.0, 0.25, -0.5, 1.75, -2.0]);
        assert_eq!(fake_quant(vals.view(), spec), vals);
    }

    #[test]
    fn ste_mask_matches_clamping() {
        let spec = QuantSpec::new(4, -2); // range [-2.0, 1.75]
        let mask = fake_quant_grad_mask(dyn1(&[0.5, 1.9, -2.3]).view(), spec);
        assert_eq!(mask.as_slice().unwrap(), &[1.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn quantization_is_monotone(
            mut a in proptest::collection::vec(-1e3f64..1e3, 2..64),
            bits in prop_oneof![Just(2u8), Just(4), Just(6), Just(8), Just(10)],
        ) {
            let spec = fit_spec(dyn1(&a).view(), bits);
            a.sort_by(f64::total_cmp);
            let q = quantize(dyn1(&a).view(), spec);
            let codes = q.codes.as_slice().unwrap();
            prop_assert!(codes.windows(2).all(|w| w[0] <= w[1]));
        }

        #[test]
        fn error_bound_and_idempotence(
            a in proptest::collection::vec(-1e3f64..1e3, 1..64),
            bits in prop_oneof![Just(2u8), Just(4), Just(6), Just(8), Just(10)],
        ) {
            let arr = dyn1(&a);
            let spec = fit_spec(arr.view(), bits);
            let q = quantize(arr.view(), spec);
            let deq = q.dequantize();
            let limit = spec.scale() * spec.qmax() as f64;
            for (&v, &d) in a.iter().zip(deq.iter()) {
                if v.abs() <= limit {
                    prop_assert!((d - v).abs() <= spec.scale() / 2.0 + 1e-12);
                }
            }
            // quantize . dequantize . quantize == quantize
            let q2 = quantize(deq.view(), spec);
            prop_assert_eq!(q.codes, q2.codes);
        }
    }
}
