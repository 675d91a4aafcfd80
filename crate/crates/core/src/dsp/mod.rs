//! Signal processing for the preprocessing pipeline: IIR band-pass
//! filtering and rational-ratio resampling.

pub mod filter;
pub mod resample;

pub use filter::{bandpass, SosFilter, DEFAULT_BANDPASS_ORDER};
pub use resample::resample;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("empty signal")]
    EmptySignal,
    #[error("invalid band: require 0 < lo < hi < fs/2, got lo={lo} hi={hi} fs={fs}")]
    InvalidBand { lo: f64, hi: f64, fs: f64 },
    #[error("sample rate must be positive, got {0}")]
    InvalidRate(f64),
}
