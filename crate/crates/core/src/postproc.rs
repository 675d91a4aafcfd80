//! Time-series post-processing of per-fragment CNN outputs.
//!
//! Three smoothers are supported: a simple moving average over the raw
//! seizure probabilities, an exponentially weighted moving average, and a
//! two-state HMM over the hard CNN labels decoded with a windowed Viterbi
//! pass. The windowed decode emits the label of the *oldest* window
//! element, so with window 5 over half-second fragments the decoding adds
//! at most 2.0 s on top of the 0.5 s fragment granularity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Fragments per smoothing window.
pub const WINDOW: usize = 5;
/// Seconds per fragment.
pub const FRAGMENT_SECONDS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PostprocError {
    #[error("no calibration data provided")]
    NoCalibrationData,
}

/// Simple moving average smoothing: `y_t = 1` iff the mean of the `w`
/// most recent probabilities is at least `theta`. Before the window
/// fills, the mean runs over the available prefix.
pub fn sma(probs: &[f64], w: usize, theta: f64) -> Vec<u8> {
    sma_scores(probs, w)
        .into_iter()
        .map(|m| u8::from(m >= theta))
        .collect()
}

/// The pre-threshold SMA means (used for AUC and calibration).
pub fn sma_scores(probs: &[f64], w: usize) -> Vec<f64> {
    assert!(w > 0);
    let mut out = Vec::with_capacity(probs.len());
    let mut sum = 0.0;
    for t in 0..probs.len() {
        sum += probs[t];
        if t >= w {
            sum -= probs[t - w];
        }
        let n = (t + 1).min(w);
        out.push(sum / n as f64);
    }
    out
}

/// EWMA smoothing: `S_0 = p_0`, `S_t = alpha*p_t + (1-alpha)*S_{t-1}`,
/// label 1 iff `S_t >= theta`.
pub fn ewma(probs: &[f64], alpha: f64, theta: f64) -> Vec<u8> {
    ewma_scores(probs, alpha)
        .into_iter()
        .map(|s| u8::from(s >= theta))
        .collect()
}

pub fn ewma_scores(probs: &[f64], alpha: f64) -> Vec<f64> {
    assert!(alpha > 0.0 && alpha <= 1.0);
    let mut out = Vec::with_capacity(probs.len());
    let mut s = 0.0;
    for (t, &p) in probs.iter().enumerate() {
        s = if t == 0 { p } else { alpha * p + (1.0 - alpha) * s };
        out.push(s);
    }
    out
}

/// Two-state HMM over binary CNN labels. Rows are hidden states
/// {0 = non-ictal, 1 = ictal}; emission columns are the observed labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HmmParams {
    pub transition: [[f64; 2]; 2],
    pub emission: [[f64; 2]; 2],
    pub initial: [f64; 2],
}

impl HmmParams {
    pub fn validate(&self) -> bool {
        let row_ok = |r: &[f64; 2]| (r[0] + r[1] - 1.0).abs() <= 1e-9 && r[0] >= 0.0 && r[1] >= 0.0;
        row_ok(&self.transition[0])
            && row_ok(&self.transition[1])
            && row_ok(&self.emission[0])
            && row_ok(&self.emission[1])
            && row_ok(&self.initial)
    }

    /// Construct from transition/emission matrices with the initial
    /// distribution set to the stationary distribution of `transition`.
    pub fn with_stationary_initial(transition: [[f64; 2]; 2], emission: [[f64; 2]; 2]) -> Self {
        let initial = stationary(&transition);
        HmmParams { transition, emission, initial }
    }
}

/// Stationary distribution of a 2x2 row-stochastic matrix. For the
/// degenerate doubly-sticky case (both off-diagonals 0) this returns
/// the uniform distribution.
pub fn stationary(t: &[[f64; 2]; 2]) -> [f64; 2] {
    let a = t[0][1]; // 0 -> 1
    let b = t[1][0]; // 1 -> 0
    if a + b <= 0.0 {
        return [0.5, 0.5];
    }
    [b / (a + b), a / (a + b)]
}

/// Count state transitions over ground-truth label sequences, one
/// sequence per recording so boundaries are never crossed, then
/// Laplace-smooth (+1 per cell) and row-normalize.
pub fn estimate_transitions<S: AsRef<[u8]>>(sequences: &[S]) -> [[f64; 2]; 2] {
    let mut counts = [[0u64; 2]; 2];
    for seq in sequences {
        for pair in seq.as_ref().windows(2) {
            counts[usize::from(pair[0] != 0)][usize::from(pair[1] != 0)] += 1;
        }
    }
    let mut t = [[0.0; 2]; 2];
    for i in 0..2 {
        let row_total = (counts[i][0] + counts[i][1] + 2) as f64;
        for j in 0..2 {
            t[i][j] = (counts[i][j] + 1) as f64 / row_total;
        }
    }
    t
}

/// Emission probabilities from a CNN confusion matrix: rows = true
/// state, columns = predicted label. Rows with no support fall back to
/// uniform via Laplace smoothing.
pub fn emissions_from_confusion(confusion: [[u64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut e = [[0.0; 2]; 2];
    for i in 0..2 {
        let row_sum = confusion[i][0] + confusion[i][1];
        if row_sum == 0 {
            e[i] = [0.5, 0.5];
        } else {
            for j in 0..2 {
                e[i][j] = confusion[i][j] as f64 / row_sum as f64;
            }
        }
    }
    e
}

fn ln(p: f64) -> f64 {
    if p <= 0.0 {
        f64::NEG_INFINITY
    } else {
        p.ln()
    }
}

/// Viterbi decode of one observation window, returning the hidden state
/// of the window's *oldest* position.
///
/// Ties in path score resolve to the lexicographically smallest state
/// path (oldest position most significant), which in particular breaks
/// the first state toward non-ictal.
pub fn viterbi_window(obs: &[u8], hmm: &HmmParams) -> u8 {
    assert!(!obs.is_empty() && obs.len() <= 8);
    // DP over (score, prefix-bits); prefix bits disambiguate exact ties
    // the same way path enumeration in lexicographic order would.
    let mut score = [0.0f64; 2];
    let mut prefix = [0u8; 2];
    for s in 0..2 {
        score[s] = ln(hmm.initial[s]) + ln(hmm.emission[s][usize::from(obs[0] != 0)]);
        prefix[s] = s as u8;
    }
    for &o in &obs[1..] {
        let o = usize::from(o != 0);
        let mut next_score = [f64::NEG_INFINITY; 2];
        let mut next_prefix = [0u8; 2];
        for s in 0..2 {
            for prev in 0..2 {
                let cand = score[prev] + ln(hmm.transition[prev][s]);
                let cand_prefix = (prefix[prev] << 1) | s as u8;
                let better = cand > next_score[s]
                    || (cand == next_score[s] && cand_prefix < next_prefix[s]);
                // NEG_INFINITY == NEG_INFINITY ties still pick the
                // smaller prefix, keeping fully-impossible windows
                // deterministic.
                if prev == 0 || better {
                    next_score[s] = cand;
                    next_prefix[s] = cand_prefix;
                }
            }
            next_score[s] += ln(hmm.emission[s][o]);
        }
        score = next_score;
        prefix = next_prefix;
    }
    let best = if score[1] > score[0] || (score[1] == score[0] && prefix[1] < prefix[0]) {
        1
    } else {
        0
    };
    // Oldest position = most significant bit of the winning path.
    (prefix[best] >> (obs.len() - 1)) & 1
}

/// Viterbi decode over a full sequence (any length), lexicographic-min
/// tie-breaking, returning the complete hidden-state path.
pub fn viterbi_path(obs: &[u8], hmm: &HmmParams) -> Vec<u8> {
    assert!(!obs.is_empty());
    // (score, backpointer) per state per step; ties prefer state-path
    // order consistent with viterbi_window for windows up to 8.
    if obs.len() <= 8 {
        return viterbi_path_small(obs, hmm);
    }
    let mut score = [0.0f64; 2];
    for s in 0..2 {
        score[s] = ln(hmm.initial[s]) + ln(hmm.emission[s][usize::from(obs[0] != 0)]);
    }
    let mut back: Vec<[u8; 2]> = Vec::with_capacity(obs.len());
    for &o in &obs[1..] {
        let o = usize::from(o != 0);
        let mut next = [f64::NEG_INFINITY; 2];
        let mut bp = [0u8; 2];
        for s in 0..2 {
            for prev in 0..2 {
                let cand = score[prev] + ln(hmm.transition[prev][s]);
                if prev == 0 || cand > next[s] {
                    next[s] = cand;
                    bp[s] = prev as u8;
                }
            }
            next[s] += ln(hmm.emission[s][o]);
        }
        score = next;
        back.push(bp);
    }
    let mut state = u8::from(score[1] > score[0]);
    let mut path = vec![state];
    for bp in back.iter().rev() {
        state = bp[usize::from(state != 0)];
        path.push(state);
    }
    path.reverse();
    path
}

fn viterbi_path_small(obs: &[u8], hmm: &HmmParams) -> Vec<u8> {
    let n = obs.len();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_path = 0u32;
    for path in 0..(1u32 << n) {
        let state_at = |t: usize| ((path >> (n - 1 - t)) & 1) as usize;
        let mut s = ln(hmm.initial[state_at(0)])
            + ln(hmm.emission[state_at(0)][usize::from(obs[0] != 0)]);
        for t in 1..n {
            s += ln(hmm.transition[state_at(t - 1)][state_at(t)])
                + ln(hmm.emission[state_at(t)][usize::from(obs[t] != 0)]);
        }
        if s > best_score {
            best_score = s;
            best_path = path;
        }
    }
    (0..n).map(|t| ((best_path >> (n - 1 - t)) & 1) as u8).collect()
}

/// Compiled Viterbi lookup table: one decoded bit per 5-bit observation
/// window, oldest observation in the most significant bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViterbiLut {
    pub entries: [u8; 1 << WINDOW],
}

impl ViterbiLut {
    pub fn lookup(&self, obs: &[u8; WINDOW]) -> u8 {
        self.entries[Self::index(obs)]
    }

    pub fn index(obs: &[u8; WINDOW]) -> usize {
        obs.iter().fold(0usize, |acc, &b| (acc << 1) | usize::from(b != 0))
    }

    pub fn bits_of(index: usize) -> [u8; WINDOW] {
        let mut obs = [0u8; WINDOW];
        for (t, slot) in obs.iter_mut().enumerate() {
            *slot = ((index >> (WINDOW - 1 - t)) & 1) as u8;
        }
        obs
    }

    /// 32-character bit-string form used in the JSON serialization.
    pub fn to_bit_string(&self) -> String {
        self.entries.iter().map(|&b| if b != 0 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(s: &str) -> Option<Self> {
        let bytes = s.as_bytes();
        if bytes.len() != 1 << WINDOW || !bytes.iter().all(|b| *b == b'0' || *b == b'1') {
            return None;
        }
        let mut entries = [0u8; 1 << WINDOW];
        for (e, b) in entries.iter_mut().zip(bytes) {
            *e = u8::from(*b == b'1');
        }
        Some(ViterbiLut { entries })
    }
}

/// Precompute the windowed Viterbi decision for every possible
/// observation window. The table has 2^5 = 32 one-bit entries; counting
/// stored observation bits plus results cell-wise gives the 64 cells a
/// key+value layout would occupy.
pub fn compile_lut(hmm: &HmmParams) -> ViterbiLut {
    let mut entries = [0u8; 1 << WINDOW];
    for (i, e) in entries.iter_mut().enumerate() {
        *e = viterbi_window(&ViterbiLut::bits_of(i), hmm);
    }
    ViterbiLut { entries }
}

/// Smooth a label stream with the windowed decode: position `k` takes
/// the oldest-position decision of window `[k, k+w)`. The trailing
/// `w-1` positions, which never become the oldest element of a full
/// window, take their values from the final full window's path; streams
/// shorter than one window are decoded directly.
pub fn hmm_smooth(labels: &[u8], hmm: &HmmParams) -> Vec<u8> {
    if labels.is_empty() {
        return Vec::new();
    }
    if labels.len() < WINDOW {
        return viterbi_path(labels, hmm);
    }
    let mut out = Vec::with_capacity(labels.len());
    for k in 0..=labels.len() - WINDOW {
        out.push(viterbi_window(&labels[k..k + WINDOW], hmm));
    }
    let tail = viterbi_path(&labels[labels.len() - WINDOW..], hmm);
    out.extend_from_slice(&tail[1..]);
    out
}

/// Same as [`hmm_smooth`] but through a compiled LUT.
pub fn hmm_smooth_lut(labels: &[u8], lut: &ViterbiLut, hmm: &HmmParams) -> Vec<u8> {
    if labels.is_empty() {
        return Vec::new();
    }
    if labels.len() < WINDOW {
        return viterbi_path(labels, hmm);
    }
    let mut out = Vec::with_capacity(labels.len());
    for k in 0..=labels.len() - WINDOW {
        let window: [u8; WINDOW] = labels[k..k + WINDOW].try_into().unwrap();
        out.push(lut.lookup(&window));
    }
    let tail = viterbi_path(&labels[labels.len() - WINDOW..], hmm);
    out.extend_from_slice(&tail[1..]);
    out
}

/// Smoothing hyperparameters for the moving-average methods.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub window: usize,
    pub sma_threshold: f64,
    pub ewma_alpha: f64,
    pub ewma_threshold: f64,
    /// Set when calibration saw no separation (Youden's J = 0 everywhere).
    #[serde(default)]
    pub degenerate: bool,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        SmoothingConfig {
            window: WINDOW,
            sma_threshold: 0.5,
            ewma_alpha: 0.3,
            ewma_threshold: 0.5,
            degenerate: false,
        }
    }
}

fn youden_j(predicted: &[u8], truth: &[u8]) -> f64 {
    let cm = crate::metrics::ConfusionMatrix::from_labels(predicted, truth);
    let r = crate::metrics::rates(&cm);
    r.sensitivity.unwrap_or(0.0) + r.specificity.unwrap_or(0.0) - 1.0
}

/// Grid-search SMA and EWMA thresholds on pooled calibration streams,
/// maximizing Youden's J. Ties prefer the smaller threshold, then the
/// smaller alpha.
pub fn calibrate_thresholds(
    streams: &[(Vec<f64>, Vec<u8>)],
) -> Result<SmoothingConfig, PostprocError> {
    if streams.is_empty() || streams.iter().all(|(p, _)| p.is_empty()) {
        return Err(PostprocError::NoCalibrationData);
    }
    let thetas: Vec<f64> = (1..=19).map(|i| i as f64 * 0.05).collect();
    let alphas: Vec<f64> = (1..=9).map(|i| i as f64 * 0.1).collect();

    let mut best_sma = (f64::NEG_INFINITY, thetas[0]);
    for &theta in &thetas {
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (probs, labels) in streams {
            pred.extend(sma(probs, WINDOW, theta));
            truth.extend_from_slice(labels);
        }
        let j = youden_j(&pred, &truth);
        if j > best_sma.0 {
            best_sma = (j, theta);
        }
    }

    let mut best_ewma = (f64::NEG_INFINITY, thetas[0], alphas[0]);
    for &alpha in &alphas {
        for &theta in &thetas {
            let mut pred = Vec::new();
            let mut truth = Vec::new();
            for (probs, labels) in streams {
                pred.extend(ewma(probs, alpha, theta));
                truth.extend_from_slice(labels);
            }
            let j = youden_j(&pred, &truth);
            let better = j > best_ewma.0
                || (j == best_ewma.0 && theta < best_ewma.1)
                || (j == best_ewma.0 && theta == best_ewma.1 && alpha < best_ewma.2);
            if better {
                best_ewma = (j, theta, alpha);
            }
        }
    }

    Ok(SmoothingConfig {
        window: WINDOW,
        sma_threshold: best_sma.1,
        ewma_alpha: best_ewma.2,
        ewma_threshold: best_ewma.1,
        degenerate: best_sma.0 <= 0.0 && best_ewma.0 <= 0.0,
    })
}

/// How a smoother's decisions map onto wall-clock availability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionTiming {
    /// SMA/EWMA/raw: the decision for fragment `k` is available at the
    /// fragment itself.
    Instant,
    /// Windowed Viterbi: the decision for fragment `k` is emitted once
    /// the window ending at `k + w - 1` is complete.
    Windowed { window: usize },
}

impl DecisionTiming {
    pub fn emission_offset_s(&self, frag_s: f64) -> f64 {
        match self {
            DecisionTiming::Instant => 0.0,
            DecisionTiming::Windowed { window } => (*window as f64 - 1.0) * frag_s,
        }
    }
}

/// Per-seizure detection delay: time of the first positive decision at
/// or after onset, minus onset, clamped at zero. A seizure with no
/// positive decision before its end (plus the emission latency) counts
/// as missed rather than erroring.
pub fn detection_delay(
    decisions: &[u8],
    seizures: &[(f64, f64)],
    frag_s: f64,
    timing: DecisionTiming,
) -> Vec<Option<f64>> {
    let offset = timing.emission_offset_s(frag_s);
    seizures
        .iter()
        .map(|&(onset, end)| {
            let first_frag = (onset / frag_s).floor().max(0.0) as usize;
            for k in first_frag..decisions.len() {
                if k as f64 * frag_s >= end {
                    break; // no positive during the seizure itself
                }
                if decisions[k] != 0 {
                    return Some((k as f64 * frag_s + offset - onset).max(0.0));
                }
            }
            None
        })
        .collect()
}

/// Maximal runs of positive truth labels, as (start_s, end_s) intervals.
pub fn seizure_intervals(truth: &[u8], frag_s: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    let mut start = None;
    for (k, &l) in truth.iter().enumerate() {
        match (l != 0, start) {
            (true, None) => start = Some(k),
            (false, Some(s)) => {
                out.push((s as f64 * frag_s, k as f64 * frag_s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s as f64 * frag_s, truth.len() as f64 * frag_s));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn sma_constant_fixed_point() {
        let probs = vec![0.7; 10];
        assert!(sma(&probs, 5, 0.5).iter().all(|&y| y == 1));
        assert!(sma(&probs, 5, 0.8).iter().all(|&y| y == 0));
    }

    #[test]
    fn sma_window_arithmetic() {
        let labels = sma(&[0.0, 0.0, 1.0, 1.0, 1.0], 5, 0.5);
        assert_eq!(labels[4], 1); // mean 0.6 >= 0.5
    }

    #[test]
    fn sma_suppresses_single_spike() {
        assert_eq!(sma(&[0.0, 0.0, 1.0, 0.0, 0.0], 5, 0.5), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn sma_mean_invariant_under_window_permutation() {
        // Permuting the probabilities inside one window leaves that
        // window's mean (and only the mean) unchanged.
        let a = [0.9, 0.1, 0.4, 0.7, 0.2];
        let b = [0.2, 0.7, 0.1, 0.9, 0.4];
        let ma = sma_scores(&a, 5);
        let mb = sma_scores(&b, 5);
        assert_abs_diff_eq!(ma[4], mb[4], epsilon = 1e-15);
        assert_ne!(ma[1], mb[1]); // prefix means do differ
    }

    #[test]
    fn ewma_alpha_one_is_raw_threshold() {
        let probs = [0.1, 0.9, 0.4, 0.61];
        let raw: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
        assert_eq!(ewma(&probs, 1.0, 0.5), raw);
    }

    #[test]
    fn ewma_recursion_values() {
        let s = ewma_scores(&[1.0, 0.0], 0.5);
        assert_eq!(s, vec![1.0, 0.5]);
    }

    #[test]
    fn ewma_converges_to_constant() {
        let s = ewma_scores(&[0.8; 50], 0.3);
        assert_abs_diff_eq!(s[49], 0.8, epsilon = 1e-9);
    }

    #[test]
    fn transition_counting_with_smoothing() {
        let t = estimate_transitions(&[[0u8, 0, 0, 1, 1]]);
        assert_abs_diff_eq!(t[0][0], 3.0 / 5.0);
        assert_abs_diff_eq!(t[0][1], 2.0 / 5.0);
        assert_abs_diff_eq!(t[1][0], 1.0 / 3.0);
        assert_abs_diff_eq!(t[1][1], 2.0 / 3.0);
    }

    #[test]
    fn transition_degenerate_all_zero() {
        let t = estimate_transitions(&[vec![0u8; 100]]);
        assert!(t[0][0] > 0.97 && t[0][1] < 0.03);
        assert_eq!(t[1], [0.5, 0.5]);
    }

    #[test]
    fn transitions_do_not_cross_recording_boundaries() {
        // Two recordings 0..0 / 1..1: the 0->1 jump between them must
        // not be counted.
        let split = estimate_transitions(&[vec![0u8, 0], vec![1u8, 1]]);
        let joined = estimate_transitions(&[vec![0u8, 0, 1, 1]]);
        assert!(split[0][1] < joined[0][1]);
        assert_abs_diff_eq!(split[0][1], 1.0 / 3.0); // Laplace only
    }

    #[test]
    fn emissions_row_normalization() {
        let e = emissions_from_confusion([[96, 4], [8, 92]]);
        assert_eq!(e, [[0.96, 0.04], [0.08, 0.92]]);
    }

    #[test]
    fn emissions_perfect_classifier() {
        let e = emissions_from_confusion([[50, 0], [0, 30]]);
        assert_eq!(e, [[1.0, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn emissions_empty_row_uniform() {
        let e = emissions_from_confusion([[10, 2], [0, 0]]);
        assert_eq!(e[1], [0.5, 0.5]);
    }

    fn sticky_hmm() -> HmmParams {
        HmmParams::with_stationary_initial(
            [[0.99, 0.01], [0.05, 0.95]],
            [[0.96, 0.04], [0.08, 0.92]],
        )
    }

    /// Path-enumeration oracle: best (score, lexicographically smallest)
    /// path over all 2^n assignments, accumulated in time order.
    fn brute_force_first_state(obs: &[u8], hmm: &HmmParams) -> u8 {
        let n = obs.len();
        let mut best: Option<(f64, u32)> = None;
        for path in 0..(1u32 << n) {
            let state_at = |t: usize| ((path >> (n - 1 - t)) & 1) as usize;
            let mut score = ln(hmm.initial[state_at(0)])
                + ln(hmm.emission[state_at(0)][usize::from(obs[0] != 0)]);
            for t in 1..n {
                score += ln(hmm.transition[state_at(t - 1)][state_at(t)])
                    + ln(hmm.emission[state_at(t)][usize::from(obs[t] != 0)]);
            }
            match best {
                None => best = Some((score, path)),
                Some((s, _)) if score > s => best = Some((score, path)),
                _ => {}
            }
        }
        ((best.unwrap().1 >> (n - 1)) & 1) as u8
    }

    #[test]
    fn viterbi_sticky_all_ones_decodes_one() {
        let hmm = sticky_hmm();
        assert_eq!(viterbi_window(&[1, 1, 1, 1, 1], &hmm), 1);
        assert_eq!(viterbi_window(&[0, 0, 0, 0, 0], &hmm), 0);
    }

    #[test]
    fn viterbi_suppresses_isolated_false_positive() {
        let hmm = sticky_hmm();
        assert_eq!(viterbi_window(&[1, 0, 0, 0, 0], &hmm), 0);
        assert_eq!(brute_force_first_state(&[1, 0, 0, 0, 0], &hmm), 0);
    }

    #[test]
    fn viterbi_matches_brute_force_on_random_hmms() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let mut row = || {
                let p: f64 = rng.random_range(0.01..0.99);
                [p, 1.0 - p]
            };
            let hmm = HmmParams {
                transition: [row(), row()],
                emission: [row(), row()],
                initial: row(),
            };
            for i in 0..(1usize << WINDOW) {
                let obs = ViterbiLut::bits_of(i);
                assert_eq!(
                    viterbi_window(&obs, &hmm),
                    brute_force_first_state(&obs, &hmm),
                    "hmm={hmm:?} obs={obs:?}"
                );
            }
        }
    }

    #[test]
    fn lut_equals_direct_decode() {
        let hmm = sticky_hmm();
        let lut = compile_lut(&hmm);
        for i in 0..32 {
            let obs = ViterbiLut::bits_of(i);
            assert_eq!(lut.entries[i], viterbi_window(&obs, &hmm));
        }
    }

    #[test]
    fn lut_identity_under_degenerate_hmm() {
        // Identity emissions, near-identity transitions: decode = copy.
        let hmm = HmmParams::with_stationary_initial(
            [[0.999, 0.001], [0.001, 0.999]],
            [[1.0, 0.0], [0.0, 1.0]],
        );
        let lut = compile_lut(&hmm);
        for i in 0..32 {
            assert_eq!(lut.entries[i], ((i >> 4) & 1) as u8, "i={i}");
        }
    }

    #[test]
    fn lut_uniform_hmm_all_zero_by_tiebreak() {
        let hmm = HmmParams {
            transition: [[0.5, 0.5], [0.5, 0.5]],
            emission: [[0.5, 0.5], [0.5, 0.5]],
            initial: [0.5, 0.5],
        };
        let lut = compile_lut(&hmm);
        assert!(lut.entries.iter().all(|&e| e == 0));
    }

    #[test]
    fn lut_bit_string_round_trip() {
        let lut = compile_lut(&sticky_hmm());
        let s = lut.to_bit_string();
        assert_eq!(s.len(), 32);
        assert_eq!(ViterbiLut::from_bit_string(&s).unwrap(), lut);
    }

    #[test]
    fn hmm_smooth_full_stream_matches_lut_path() {
        let hmm = sticky_hmm();
        let lut = compile_lut(&hmm);
        let labels = [0u8, 0, 1, 1, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 0];
        let direct = hmm_smooth(&labels, &hmm);
        let via_lut = hmm_smooth_lut(&labels, &lut, &hmm);
        assert_eq!(direct, via_lut);
        assert_eq!(direct.len(), labels.len());
    }

    #[test]
    fn calibrate_perfect_separation_tie_breaks_low() {
        // One all-negative stream at 0.1 and one all-positive at 0.9:
        // every grid theta in (0.1, 0.9] ties at J=1, so the tie-break
        // returns 0.15.
        let neg = (vec![0.1; 20], vec![0u8; 20]);
        let pos = (vec![0.9; 20], vec![1u8; 20]);
        let cfg = calibrate_thresholds(&[neg, pos]).unwrap();
        assert_abs_diff_eq!(cfg.sma_threshold, 0.15, epsilon = 1e-12);
        assert!(!cfg.degenerate);
    }

    #[test]
    fn calibrate_degenerate_flags() {
        let probs = vec![0.5; 20];
        let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 2 == 0)).collect();
        let cfg = calibrate_thresholds(&[(probs, labels)]).unwrap();
        assert!(cfg.degenerate);
        assert_abs_diff_eq!(cfg.sma_threshold, 0.05, epsilon = 1e-12);
    }

    #[test]
    fn calibrate_order_invariant() {
        let s1 = (vec![0.9, 0.8, 0.2, 0.1], vec![1u8, 1, 0, 0]);
        let s2 = (vec![0.3, 0.7, 0.6, 0.2], vec![0u8, 1, 1, 0]);
        let a = calibrate_thresholds(&[s1.clone(), s2.clone()]).unwrap();
        let b = calibrate_thresholds(&[s2, s1]).unwrap();
        assert_eq!(a.sma_threshold, b.sma_threshold);
        assert_eq!(a.ewma_threshold, b.ewma_threshold);
        assert_eq!(a.ewma_alpha, b.ewma_alpha);
    }

    #[test]
    fn calibrate_empty_errors() {
        assert!(calibrate_thresholds(&[]).is_err());
    }

    #[test]
    fn delay_arithmetic() {
        // Onset at 5.0 s (fragment 10); first positive at fragment 19.
        let mut decisions = vec![0u8; 40];
        for d in decisions.iter_mut().skip(19) {
            *d = 1;
        }
        let delays = detection_delay(
            &decisions,
            &[(5.0, 12.0)],
            FRAGMENT_SECONDS,
            DecisionTiming::Instant,
        );
        assert_abs_diff_eq!(delays[0].unwrap(), 4.5);
    }

    #[test]
    fn delay_immediate_sma_within_granularity() {
        let mut decisions = vec![0u8; 20];
        decisions[10] = 1;
        // Onset mid-fragment: clamped to zero, bounded by 0.5.
        let delays = detection_delay(
            &decisions,
            &[(5.2, 8.0)],
            FRAGMENT_SECONDS,
            DecisionTiming::Instant,
        );
        assert!(delays[0].unwrap() <= 0.5);
    }

    #[test]
    fn delay_hmm_bounded_by_window_latency() {
        let mut decisions = vec![0u8; 20];
        decisions[10] = 1;
        let delays = detection_delay(
            &decisions,
            &[(5.0, 8.0)],
            FRAGMENT_SECONDS,
            DecisionTiming::Windowed { window: WINDOW },
        );
        assert!(delays[0].unwrap() <= 2.5);
    }

    #[test]
    fn delay_missed_seizure_is_none() {
        let decisions = vec![0u8; 20];
        let delays = detection_delay(
            &decisions,
            &[(2.0, 4.0)],
            FRAGMENT_SECONDS,
            DecisionTiming::Instant,
        );
        assert!(delays[0].is_none());
    }

    #[test]
    fn seizure_interval_extraction() {
        let truth = [0u8, 0, 1, 1, 0, 0, 1];
        assert_eq!(
            seizure_intervals(&truth, 0.5),
            vec![(1.0, 2.0), (3.0, 3.5)]
        );
    }

    proptest! {
        #[test]
        fn lut_equivalence_property(
            t0 in 0.01f64..0.99, t1 in 0.01f64..0.99,
            e0 in 0.01f64..0.99, e1 in 0.01f64..0.99,
        ) {
            let hmm = HmmParams::with_stationary_initial(
                [[t0, 1.0 - t0], [t1, 1.0 - t1]],
                [[e0, 1.0 - e0], [e1, 1.0 - e1]],
            );
            let lut = compile_lut(&hmm);
            for i in 0..32 {
                let obs = ViterbiLut::bits_of(i);
                prop_assert_eq!(lut.entries[i], viterbi_window(&obs, &hmm));
                prop_assert_eq!(lut.entries[i], brute_force_first_state(&obs, &hmm));
            }
        }

        #[test]
        fn ewma_alpha_one_identity(probs in proptest::collection::vec(0.0f64..1.0, 0..40)) {
            let raw: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.4)).collect();
            prop_assert_eq!(ewma(&probs, 1.0, 0.4), raw);
        }

        #[test]
        fn smoothers_do_not_suppress_sustained_activity(
            len in 5usize..30,
            theta in 0.05f64..=0.5,
        ) {
            let probs = vec![0.95; len];
            let labels = vec![1u8; len];
            prop_assert!(sma(&probs, WINDOW, theta).contains(&1));
            prop_assert!(ewma(&probs, 0.3, theta).contains(&1));
            let hmm = sticky_hmm();
            prop_assert!(hmm_smooth(&labels, &hmm).contains(&1));
        }
    }
}
