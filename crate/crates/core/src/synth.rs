//! Deterministic synthetic EEG corpora: pink-ish background noise with
//! injected rhythmic seizure bursts, written as valid EDF files plus an
//! annotation CSV, so the whole pipeline runs desk-scale without any
//! clinical data.

use crate::edf::{self, EdfHeader, EdfRecording, EdfSignalSpec, SeizureAnnotation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;

/// Channel montage shared by every synthetic patient (18 bipolar labels,
/// so channel selection has something to drop).
pub const CHANNEL_LABELS: [&str; 18] = [
    "FP1-F7", "F7-T7", "T7-P7", "P7-O1", "FP1-F3", "F3-C3", "C3-P3", "P3-O1", "FP2-F4",
    "F4-C4", "C4-P4", "P4-O2", "FP2-F8", "F8-T8", "T8-P8", "P8-O2", "FZ-CZ", "CZ-PZ",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub minutes_per_patient: f64,
    pub files_per_patient: usize,
    pub fs_hz: f64,
    pub seizures_per_file: usize,
    pub seizure_min_s: f64,
    pub seizure_max_s: f64,
    /// Amplitude multiplier on the background during a seizure.
    pub ictal_gain: f64,
    /// Rhythmic component frequency range (Hz).
    pub ictal_freq_lo: f64,
    pub ictal_freq_hi: f64,
    /// Background RMS in microvolts.
    pub noise_uv: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 4,
            minutes_per_patient: 30.0,
            files_per_patient: 2,
            fs_hz: 256.0,
            seizures_per_file: 3,
            seizure_min_s: 20.0,
            seizure_max_s: 40.0,
            ictal_gain: 3.0,
            ictal_freq_lo: 3.0,
            ictal_freq_hi: 8.0,
            noise_uv: 30.0,
            seed: 7,
        }
    }
}

pub struct SynthFile {
    pub name: String,
    pub recording: EdfRecording,
}

pub struct SynthCorpus {
    pub files: Vec<SynthFile>,
    pub annotations: Vec<SeizureAnnotation>,
}

/// Paul Kellet's economy pink-noise filter over white input.
struct PinkNoise {
    b: [f64; 3],
}

impl PinkNoise {
    fn new() -> Self {
        PinkNoise { b: [0.0; 3] }
    }

    fn next(&mut self, white: f64) -> f64 {
        self.b[0] = 0.99765 * self.b[0] + white * 0.0990460;
        self.b[1] = 0.96300 * self.b[1] + white * 0.2965164;
        self.b[2] = 0.57000 * self.b[2] + white * 1.0526913;
        self.b[0] + self.b[1] + self.b[2] + white * 0.1848
    }
}

fn splitmix(seed: u64, stream: u64) -> u64 {
    let mut z = seed.wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate the corpus in memory. Deterministic per seed; per-patient
/// substreams keep patients independent of each other.
pub fn generate(cfg: &SynthConfig) -> SynthCorpus {
    let mut files = Vec::new();
    let mut annotations = Vec::new();
    let file_seconds = cfg.minutes_per_patient * 60.0 / cfg.files_per_patient as f64;
    let n_samples = (file_seconds * cfg.fs_hz).round() as usize;

    for p in 0..cfg.n_patients {
        let patient_id = format!("P{:02}", p + 1);
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed, p as u64));

        // Per-channel ictal response: the first 16 channels respond
        // strongly, the rest weakly, so variance-based selection has a
        // real signal to find.
        let response: Vec<f64> = (0..CHANNEL_LABELS.len())
            .map(|c| {
                if c < 16 {
                    rng.random_range(0.7..1.0)
                } else {
                    rng.random_range(0.05..0.15)
                }
            })
            .collect();

        for f in 0..cfg.files_per_patient {
            let file_name = format!("{patient_id}_f{f}.edf");
            let seizures = place_seizures(cfg, file_seconds, &mut rng);
            for &(start, end) in &seizures {
                annotations.push(SeizureAnnotation {
                    file_id: file_name.clone(),
                    start_s: start,
                    end_s: end,
                });
            }
            let recording =
                render_file(cfg, &patient_id, n_samples, &seizures, &response, &mut rng);
            files.push(SynthFile { name: file_name, recording });
        }
    }
    SynthCorpus { files, annotations }
}

/// Non-overlapping seizure intervals with breathing room between them:
/// one per equal slot, jittered.
fn place_seizures(cfg: &SynthConfig, file_seconds: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    if cfg.seizures_per_file == 0 {
        return out;
    }
    let slot = file_seconds / cfg.seizures_per_file as f64;
    for k in 0..cfg.seizures_per_file {
        let dur = rng.random_range(cfg.seizure_min_s..=cfg.seizure_max_s);
        let dur = dur.min(slot - 10.0).max(1.0);
        let latest = slot - dur - 5.0;
        let offset = if latest > 5.0 { rng.random_range(5.0..latest) } else { 5.0_f64.min(slot - dur) };
        let start = k as f64 * slot + offset;
        // Round to fragment boundaries so labels align crisply.
        let start = (start * 2.0).round() / 2.0;
        let end = ((start + dur) * 2.0).round() / 2.0;
        out.push((start, end.min(file_seconds)));
    }
    out
}

fn render_file(
    cfg: &SynthConfig,
    patient_id: &str,
    n_samples: usize,
    seizures: &[(f64, f64)],
    response: &[f64],
    rng: &mut ChaCha8Rng,
) -> EdfRecording {
    let n_ch = CHANNEL_LABELS.len();
    let mut samples: Vec<Vec<f64>> = Vec::with_capacity(n_ch);
    let physical_limit = 1500.0;

    for (c, &resp) in response.iter().enumerate().take(n_ch) {
        let mut pink = PinkNoise::new();
        let freq: f64 = rng.random_range(cfg.ictal_freq_lo..cfg.ictal_freq_hi);
        let phase: f64 = rng.random_range(0.0..2.0 * PI);
        let mut chan = Vec::with_capacity(n_samples);
        for t in 0..n_samples {
            let secs = t as f64 / cfg.fs_hz;
            let white: f64 = rng.random_range(-1.0..1.0);
            // Kellet's filter has a gain around 5x RMS on uniform white
            // input; 0.18 rescales to roughly unit RMS.
            let mut v = pink.next(white) * 0.18 * cfg.noise_uv;
            if seizures.iter().any(|&(s, e)| secs >= s && secs < e) {
                let burst = (2.0 * PI * freq * secs + phase).sin();
                v = v * (1.0 + (cfg.ictal_gain - 1.0) * resp)
                    + burst * cfg.ictal_gain * cfg.noise_uv * resp;
            }
            chan.push(v.clamp(-physical_limit, physical_limit));
        }
        let _ = c;
        samples.push(chan);
    }

    let record_duration_s = 1.0;
    let samples_per_record = cfg.fs_hz.round() as usize;
    let n_records = n_samples / samples_per_record;
    let specs: Vec<EdfSignalSpec> = CHANNEL_LABELS
        .iter()
        .map(|label| EdfSignalSpec {
            label: label.to_string(),
            physical_dim: "uV".into(),
            physical_min: -physical_limit,
            physical_max: physical_limit,
            digital_min: -32768,
            digital_max: 32767,
            samples_per_record,
        })
        .collect();
    EdfRecording {
        header: EdfHeader {
            version: "0".into(),
            patient_id: patient_id.to_string(),
            recording_id: "synthetic EEG".into(),
            start_date: "01.01.20".into(),
            start_time: "00.00.00".into(),
            header_bytes: 256 + 256 * n_ch,
            n_records,
            record_duration_s,
            n_signals: n_ch,
        },
        specs,
        samples,
        warnings: vec![],
    }
}

/// Generate and write the corpus under `dir`: one `.edf` per file plus
/// `annotations.csv`.
pub fn generate_to_dir(cfg: &SynthConfig, dir: &Path) -> std::io::Result<SynthCorpus> {
    let corpus = generate(cfg);
    std::fs::create_dir_all(dir)?;
    for file in &corpus.files {
        let bytes = edf::write_edf(&file.recording)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
        std::fs::write(dir.join(&file.name), bytes)?;
    }
    std::fs::write(dir.join("annotations.csv"), edf::annotations_to_csv(&corpus.annotations))?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            n_patients: 1,
            minutes_per_patient: 4.0,
            files_per_patient: 2,
            seizures_per_file: 1,
            seizure_min_s: 10.0,
            seizure_max_s: 20.0,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_seizures_means_empty_annotations() {
        let cfg = SynthConfig { seizures_per_file: 0, ..small_cfg() };
        let corpus = generate(&cfg);
        assert!(corpus.annotations.is_empty());
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let cfg = small_cfg();
        let a = generate(&cfg);
        let b = generate(&cfg);
        for (fa, fb) in a.files.iter().zip(&b.files) {
            assert_eq!(fa.name, fb.name);
            assert_eq!(
                edf::write_edf(&fa.recording).unwrap(),
                edf::write_edf(&fb.recording).unwrap()
            );
        }
    }

    #[test]
    fn files_are_valid_edf() {
        let corpus = generate(&small_cfg());
        for file in &corpus.files {
            let bytes = edf::write_edf(&file.recording).unwrap();
            let parsed = edf::parse_edf(&bytes).unwrap();
            assert_eq!(parsed.header.n_signals, 18);
            assert_eq!(parsed.sample_rate_hz(0), 256.0);
        }
    }

    #[test]
    fn every_patient_has_a_seizure_file() {
        let cfg = SynthConfig { n_patients: 3, ..small_cfg() };
        let corpus = generate(&cfg);
        for p in 1..=3 {
            let prefix = format!("P{p:02}_");
            assert!(
                corpus.annotations.iter().any(|a| a.file_id.starts_with(&prefix)),
                "patient {p} lacks seizures"
            );
        }
    }

    #[test]
    fn injected_seizure_labels_fragments() {
        // A seizure at [10, 20) labels fragments 20..40 through the
        // midpoint rule.
        let corpus = generate(&small_cfg());
        let (start, end) = (corpus.annotations[0].start_s, corpus.annotations[0].end_s);
        let n_frags = 200;
        let labels = preprocess::label_fragments(n_frags, 0.5, &[(start, end)]);
        let first = (start / 0.5) as usize;
        let last = (end / 0.5) as usize;
        for (k, &l) in labels.iter().enumerate() {
            let expect = u8::from(k >= first && k < last);
            assert_eq!(l, expect, "fragment {k} (seizure {start}..{end})");
        }
    }

    #[test]
    fn ictal_fragments_have_higher_variance() {
        let corpus = generate(&small_cfg());
        let file = &corpus.files[0];
        let seizures: Vec<(f64, f64)> = corpus
            .annotations
            .iter()
            .filter(|a| a.file_id == file.name)
            .map(|a| (a.start_s, a.end_s))
            .collect();
        assert!(!seizures.is_empty());
        let chan = &file.recording.samples[0];
        let frag_len = 128;
        let mut ictal_var = Vec::new();
        let mut background_var = Vec::new();
        for k in 0..chan.len() / frag_len {
            let mid = (k as f64 + 0.5) * 0.5;
            let frag = &chan[k * frag_len..(k + 1) * frag_len];
            let v = preprocess::variance(frag);
            if seizures.iter().any(|&(s, e)| mid >= s && mid < e) {
                ictal_var.push(v);
            } else {
                background_var.push(v);
            }
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        assert!(
            mean(&ictal_var) > 2.0 * mean(&background_var),
            "ictal {} vs background {}",
            mean(&ictal_var),
            mean(&background_var)
        );
    }
}
