//! Rational polyphase resampling with a windowed-sinc anti-alias filter.

use super::DspError;
use std::f64::consts::PI;

/// Taps per side of the prototype low-pass, per unit of the larger
/// rational factor. 12 keeps the Blackman transition band narrow enough
/// for > 40 dB alias rejection a short way past cutoff.
const HALF_WIDTH_FACTOR: usize = 12;

/// Resample `signal` from `from_hz` to `to_hz`. Output length is
/// `round(len * to_hz / from_hz)`; content above the smaller Nyquist is
/// suppressed by a Blackman-windowed sinc. Edges are zero-padded, with
/// per-output weight renormalization so constants pass through exactly.
pub fn resample(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>, DspError> {
    if from_hz <= 0.0 {
        return Err(DspError::InvalidRate(from_hz));
    }
    if to_hz <= 0.0 {
        return Err(DspError::InvalidRate(to_hz));
    }
    if signal.is_empty() {
        return Err(DspError::EmptySignal);
    }
    let (up, down) = rationalize(from_hz, to_hz);
    if up == down {
        return Ok(signal.to_vec());
    }

    let n_out = (signal.len() as f64 * to_hz / from_hz).round() as usize;
    let half = HALF_WIDTH_FACTOR * up.max(down);
    // Ideal low-pass at min(from, to)/2, evaluated on the up-sampled grid.
    let cutoff = 1.0 / up.max(down) as f64; // as a fraction of Nyquist
    let taps: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let t = i as f64 - half as f64;
            let sinc = if t == 0.0 {
                cutoff
            } else {
                (PI * cutoff * t).sin() / (PI * t)
            };
            let w = 0.42 - 0.5 * (PI * (t + half as f64) / half as f64).cos()
                + 0.08 * (2.0 * PI * (t + half as f64) / half as f64).cos();
            sinc * w
        })
        .collect();

    let mut out = Vec::with_capacity(n_out);
    let len = signal.len() as i64;
    for j in 0..n_out {
        let u = (j * down) as i64; // position on the up-sampled grid
        let lo = (u - half as i64).div_euclid(up as i64)
            + i64::from((u - half as i64).rem_euclid(up as i64) != 0);
        let hi = (u + half as i64).div_euclid(up as i64);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for i in lo..=hi {
            if i >= 0 && i < len {
                let w = taps[(u - i * up as i64 + half as i64) as usize];
                norm += w;
                acc += w * signal[i as usize];
            }
        }
        out.push(if norm != 0.0 { acc / norm } else { 0.0 });
    }
    Ok(out)
}

/// Reduce `to_hz / from_hz` to a rational `up / down`. Rates are held to
/// millihertz resolution, which covers every EDF-representable rate.
fn rationalize(from_hz: f64, to_hz: f64) -> (usize, usize) {
    let from = (from_hz * 1000.0).round() as u64;
    let to = (to_hz * 1000.0).round() as u64;
    let g = gcd(from, to);
    ((to / g) as usize, (from / g) as usize)
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
