//! Static parameter/MAC accounting and a first-order latency/energy
//! model for an NxN MAC array.
//!
//! The latency model is ideal utilization: each layer takes
//! `ceil(MACs / N^2)` cycles. At the reference operating point (4x4
//! array, 250 kHz, 10 inferences/s) the 337,968-MAC network comes out
//! at 21,123 cycles = 84.5 ms; the hardware measurement reported for
//! the same configuration is 80.626 ms, so microarchitectural effects
//! are worth a few percent and this model makes no attempt to chase
//! them.

use crate::tcresnet::TcResNetModel;
use serde::{Deserialize, Serialize};

/// Reference values measured on the synthesized accelerator, reported
/// here for comparison against the analytic estimates.
pub const REFERENCE_MEASURED_LATENCY_MS: f64 = 80.626;
pub const REFERENCE_MEASURED_POWER_W: f64 = 495e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: String,
    pub output: (usize, usize),
    pub params: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_macs: u64,
}

/// Exact integer parameter and MAC counts per layer. Conv MACs are
/// `out_len * out_ch * in_ch * kernel`; linear MACs are `in * out`.
pub fn count_static(model: &TcResNetModel) -> CostReport {
    let layers: Vec<LayerCost> = model
        .layer_specs()
        .iter()
        .map(|l| LayerCost {
            layer: l.kind.name().to_string(),
            output: l.output,
            params: l.params,
            macs: l.macs,
        })
        .collect();
    CostReport {
        total_params: layers.iter().map(|l| l.params).sum(),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatingPoint {
    /// MAC array edge length (the array is `mac_array x mac_array`).
    pub mac_array: usize,
    pub clock_hz: f64,
    pub inference_rate_hz: f64,
    /// Joules per MAC; calibrate with [`calibrate_energy_per_mac`].
    pub energy_per_mac_j: f64,
    /// Always-on baseline power in watts (an assumption, not a
    /// measured value).
    pub idle_power_w: f64,
}

impl Default for OperatingPoint {
    fn default() -> Self {
        OperatingPoint {
            mac_array: 4,
            clock_hz: 250_000.0,
            inference_rate_hz: 10.0,
            energy_per_mac_j: 1.1687e-13,
            idle_power_w: 100e-9,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyEstimate {
    pub cycles: u64,
    pub latency_ms: f64,
    /// Fraction of each inference period spent computing.
    pub duty_cycle: f64,
}

/// Ideal-utilization latency: per-layer `ceil(MACs / N^2)` cycles.
pub fn estimate_latency(report: &CostReport, op: &OperatingPoint) -> LatencyEstimate {
    let pe = (op.mac_array * op.mac_array) as u64;
    let cycles: u64 = report.layers.iter().map(|l| l.macs.div_ceil(pe)).sum();
    let latency_s = cycles as f64 / op.clock_hz;
    LatencyEstimate {
        cycles,
        latency_ms: latency_s * 1e3,
        duty_cycle: latency_s * op.inference_rate_hz,
    }
}

/// First-order average power: `rate * MACs * energy_per_mac + idle`.
/// Memory traffic is not modeled.
pub fn estimate_energy(report: &CostReport, op: &OperatingPoint) -> f64 {
    op.inference_rate_hz * report.total_macs as f64 * op.energy_per_mac_j + op.idle_power_w
}

/// Solve the energy model for the per-MAC energy that reproduces a
/// target average power at this operating point.
pub fn calibrate_energy_per_mac(report: &CostReport, op: &OperatingPoint, target_power_w: f64) -> f64 {
    (target_power_w - op.idle_power_w) / (op.inference_rate_hz * report.total_macs as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSummary {
    pub report: CostReport,
    pub operating_point: OperatingPoint,
    pub latency: LatencyEstimate,
    pub avg_power_w: f64,
    pub energy_per_inference_j: f64,
    pub reference_measured_latency_ms: f64,
    pub reference_measured_power_w: f64,
}

pub fn summarize(model: &TcResNetModel, op: &OperatingPoint) -> CostSummary {
    let report = count_static(model);
    let latency = estimate_latency(&report, op);
    let avg_power_w = estimate_energy(&report, op);
    CostSummary {
        energy_per_inference_j: avg_power_w / op.inference_rate_hz,
        latency,
        avg_power_w,
        operating_point: *op,
        report,
        reference_measured_latency_ms: REFERENCE_MEASURED_LATENCY_MS,
        reference_measured_power_w: REFERENCE_MEASURED_POWER_W,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcresnet::build_tcresnet4;
    use approx::assert_abs_diff_eq;

    #[test]
    fn static_counts_match_architecture() {
        let model = build_tcresnet4(0);
        let report = count_static(&model);
        assert_eq!(report.total_params, 9_840);
        assert_eq!(report.total_macs, 337_968);
        let conv_params: Vec<usize> = report
            .layers
            .iter()
            .filter(|l| l.params > 0)
            .map(|l| l.params)
            .collect();
        assert_eq!(conv_params, vec![768, 3456, 5184, 384, 48]);
        // Shortcut 1x1 conv: 384 params * 32 positions = 12,288 MACs.
        let sc = report.layers.iter().find(|l| l.params == 384).unwrap();
        assert_eq!(sc.macs, 12_288);
    }

    #[test]
    fn strict_input_mode_shrinks_first_conv() {
        let model = crate::tcresnet::build_tcresnet4_with(0, true);
        let report = count_static(&model);
        let first = report.layers.iter().find(|l| l.params == 768).unwrap();
        assert_eq!(first.output, (16, 63));
        assert_eq!(first.macs, 63 * 16 * 16 * 3);
        assert_eq!(report.total_params, 9_840);
    }

    #[test]
    fn latency_at_reference_point() {
        let report = count_static(&build_tcresnet4(0));
        let op = OperatingPoint::default();
        let lat = estimate_latency(&report, &op);
        assert_eq!(lat.cycles, 21_123);
        assert_abs_diff_eq!(lat.latency_ms, 84.492, epsilon = 1e-9);
        assert_abs_diff_eq!(lat.duty_cycle, 0.84492, epsilon = 1e-9);
    }

    #[test]
    fn doubling_clock_halves_latency() {
        let report = count_static(&build_tcresnet4(0));
        let op = OperatingPoint::default();
        let fast = OperatingPoint { clock_hz: op.clock_hz * 2.0, ..op };
        assert_abs_diff_eq!(
            estimate_latency(&report, &fast).latency_ms,
            estimate_latency(&report, &op).latency_ms / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn one_by_one_array_is_sixteen_times_slower() {
        let report = count_static(&build_tcresnet4(0));
        let op = OperatingPoint::default();
        let tiny = OperatingPoint { mac_array: 1, ..op };
        let r = estimate_latency(&report, &tiny).cycles as f64
            / estimate_latency(&report, &op).cycles as f64;
        // ceil() per layer makes it not exactly 16.
        assert!((r - 16.0).abs() < 0.01, "ratio {r}");
    }

    #[test]
    fn energy_calibration_inverts_model() {
        let report = count_static(&build_tcresnet4(0));
        let mut op = OperatingPoint::default();
        let e = calibrate_energy_per_mac(&report, &op, 495e-9);
        assert_abs_diff_eq!(e, (495e-9 - 100e-9) / (10.0 * 337_968.0), epsilon = 1e-20);
        op.energy_per_mac_j = e;
        let p = estimate_energy(&report, &op);
        assert!((p - 495e-9).abs() / 495e-9 < 1e-3);
    }

    #[test]
    fn zero_rate_leaves_idle_power() {
        let report = count_static(&build_tcresnet4(0));
        let op = OperatingPoint { inference_rate_hz: 0.0, ..OperatingPoint::default() };
        assert_eq!(estimate_energy(&report, &op), op.idle_power_w);
    }

    #[test]
    fn energy_linear_in_rate() {
        let report = count_static(&build_tcresnet4(0));
        let op = OperatingPoint::default();
        let double = OperatingPoint { inference_rate_hz: 20.0, ..op };
        let p1 = estimate_energy(&report, &op) - op.idle_power_w;
        let p2 = estimate_energy(&report, &double) - op.idle_power_w;
        assert_abs_diff_eq!(p2, 2.0 * p1, epsilon = 1e-18);
    }
}
