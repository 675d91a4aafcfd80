//! Energy-efficient EEG seizure detection.
//!
//! This crate implements the full pipeline behind the `ictal` CLI:
//!
//! ```text
//! .edf files ──edf──► recordings ──preprocess──► half-second fragments
//!                                                    │
//!                          train (AdamW, QAT) ◄──────┘
//!                                │
//!                     tcresnet (TC-ResNet4, float + 4-bit fixed point)
//!                                │
//!            postproc (SMA / EWMA / HMM+Viterbi LUT) ──► metrics, cost
//! ```
//!
//! - [`edf`]: bit-exact EDF 1.0 reader/writer and seizure annotation CSV.
//! - [`dsp`]: Butterworth band-pass (SOS cascade) and polyphase resampling.
//! - [`preprocess`]: fragmentation, channel selection, stratified splits,
//!   normalization and the on-disk fragment-set format.
//! - [`quant`]: symmetric power-of-two fixed-point quantization and the
//!   straight-through fake-quantization used during training.
//! - [`tcresnet`]: the TC-ResNet4 graph: float forward/backward,
//!   batch-norm folding and the bit-true integer inference engine.
//! - [`train`]: base training and patient-specific retraining with
//!   class-weighted loss and threshold moving.
//! - [`postproc`]: SMA, EWMA and the 2-state HMM with windowed Viterbi
//!   decoding compiled to a 32-entry lookup table.
//! - [`metrics`]: confusion-matrix rates and ROC-AUC.
//! - [`cost`]: static parameter/MAC accounting plus a first-order
//!   latency/energy model for a configurable MAC array.
//! - [`synth`]: deterministic synthetic EEG corpora for desk-scale runs.
//! - [`pipeline`]: glue that wires the stages together for the CLI.

pub mod cost;
pub mod dsp;
pub mod edf;
pub mod metrics;
pub mod pipeline;
pub mod postproc;
pub mod preprocess;
pub mod quant;
pub mod synth;
pub mod tcresnet;
pub mod train;

pub use quant::{QTensor, QuantSpec};
pub use tcresnet::TcResNetModel;
