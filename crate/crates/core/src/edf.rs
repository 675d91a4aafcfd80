//! EDF 1.0 reading and writing, plus the seizure-annotation CSV.
//!
//! Layout: a 256-byte ASCII fixed header, then 256 bytes of signal
//! headers per signal (field-major), then data records of 16-bit
//! little-endian two's-complement samples, record-interleaved by signal.
//! See `docs/edf-format.md` for a hex-annotated example.
//!
//! EDF+ TAL annotation channels are not interpreted; seizure annotations
//! come from a sidecar CSV with lines `file_id,start_s,end_s`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EdfError {
    #[error("truncated file: need {needed} bytes, have {have}")]
    TruncatedFile { needed: usize, have: usize },
    #[error("malformed {field} field: {text:?}")]
    MalformedField { field: &'static str, text: String },
    #[error("degenerate scale on signal {signal}: digital_min == digital_max")]
    DegenerateScale { signal: usize },
    #[error("{field} {text:?} exceeds its {width}-char field")]
    FieldOverflow { field: &'static str, text: String, width: usize },
    #[error("sample {value} outside physical range [{min}, {max}] on signal {signal}")]
    ValueOutOfPhysicalRange { signal: usize, value: f64, min: f64, max: f64 },
    #[error("line {line}: end <= start")]
    NegativeDuration { line: usize },
    #[error("line {line}: cannot parse {text:?}")]
    UnparsableLine { line: usize, text: String },
    #[error("header invariant violated: {0}")]
    InvalidHeader(String),
}

/// The 256-byte fixed header, text fields trimmed.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfHeader {
    pub version: String,
    pub patient_id: String,
    pub recording_id: String,
    pub start_date: String,
    pub start_time: String,
    pub header_bytes: usize,
    pub n_records: usize,
    pub record_duration_s: f64,
    pub n_signals: usize,
}

/// One signal's 256 header bytes (the fields this pipeline uses).
#[derive(Debug, Clone, PartialEq)]
pub struct EdfSignalSpec {
    pub label: String,
    pub physical_dim: String,
    pub physical_min: f64,
    pub physical_max: f64,
    pub digital_min: i32,
    pub digital_max: i32,
    pub samples_per_record: usize,
}

impl EdfSignalSpec {
    pub fn to_physical(&self, digital: i16) -> f64 {
        (digital as f64 - self.digital_min as f64)
            * (self.physical_max - self.physical_min)
            / (self.digital_max as f64 - self.digital_min as f64)
            + self.physical_min
    }

    pub fn to_digital(&self, physical: f64) -> i16 {
        let d = (physical - self.physical_min)
            * (self.digital_max as f64 - self.digital_min as f64)
            / (self.physical_max - self.physical_min)
            + self.digital_min as f64;
        d.round()
            .clamp(self.digital_min as f64, self.digital_max as f64) as i16
    }
}

/// A fully decoded recording: header, signal specs and per-signal
/// physical-unit samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EdfRecording {
    pub header: EdfHeader,
    pub specs: Vec<EdfSignalSpec>,
    pub samples: Vec<Vec<f64>>,
    /// Non-fatal oddities found while parsing (non-ASCII text bytes).
    pub warnings: Vec<String>,
}

impl EdfRecording {
    pub fn sample_rate_hz(&self, signal: usize) -> f64 {
        self.specs[signal].samples_per_record as f64 / self.header.record_duration_s
    }

    pub fn signal_index(&self, label: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.label == label)
    }

    pub fn duration_s(&self) -> f64 {
        self.header.n_records as f64 * self.header.record_duration_s
    }
}

/// A seizure interval within one recording file.
#[derive(Debug, Clone, PartialEq)]
pub struct SeizureAnnotation {
    pub file_id: String,
    pub start_s: f64,
    pub end_s: f64,
}

const FIXED_HEADER: usize = 256;
const PER_SIGNAL: usize = 256;

fn read_text(bytes: &[u8], warnings: &mut Vec<String>, field: &'static str) -> String {
    let mut s = String::with_capacity(bytes.len());
    let mut dirty = false;
    for &b in bytes {
        if b.is_ascii() && (b == b' ' || !b.is_ascii_control()) {
            s.push(b as char);
        } else {
            s.push('?');
            dirty = true;
        }
    }
    if dirty {
        warnings.push(format!("non-ASCII bytes in {field} replaced with '?'"));
    }
    s.trim().to_string()
}

fn read_int(bytes: &[u8], field: &'static str) -> Result<i64, EdfError> {
    let text: String = bytes.iter().map(|&b| b as char).collect();
    text.trim()
        .parse()
        .map_err(|_| EdfError::MalformedField { field, text })
}

fn read_real(bytes: &[u8], field: &'static str) -> Result<f64, EdfError> {
    let text: String = bytes.iter().map(|&b| b as char).collect();
    text.trim()
        .parse()
        .map_err(|_| EdfError::MalformedField { field, text })
}

/// Parse only the headers (fixed + per-signal). Needs just the first
/// `256 + 256 * n_signals` bytes, so callers can inspect channel
/// layouts without reading sample payloads.
pub fn parse_edf_header(
    bytes: &[u8],
) -> Result<(EdfHeader, Vec<EdfSignalSpec>, Vec<String>), EdfError> {
    if bytes.len() < FIXED_HEADER {
        return Err(EdfError::TruncatedFile { needed: FIXED_HEADER, have: bytes.len() });
    }
    let mut warnings = Vec::new();

    let version = read_text(&bytes[0..8], &mut warnings, "version");
    let patient_id = read_text(&bytes[8..88], &mut warnings, "patient_id");
    let recording_id = read_text(&bytes[88..168], &mut warnings, "recording_id");
    let start_date = read_text(&bytes[168..176], &mut warnings, "start_date");
    let start_time = read_text(&bytes[176..184], &mut warnings, "start_time");
    let header_bytes = read_int(&bytes[184..192], "header_bytes")? as usize;
    let n_records = read_int(&bytes[236..244], "n_records")?;
    let record_duration_s = read_real(&bytes[244..252], "record_duration")?;
    let n_signals = read_int(&bytes[252..256], "n_signals")? as usize;

    if n_records < 0 {
        return Err(EdfError::InvalidHeader("n_records < 0".into()));
    }
    let n_records = n_records as usize;
    if header_bytes != FIXED_HEADER + PER_SIGNAL * n_signals {
        return Err(EdfError::InvalidHeader(format!(
            "header_bytes {header_bytes} != 256 + 256*{n_signals}"
        )));
    }
    if n_records > 0 && record_duration_s <= 0.0 {
        return Err(EdfError::InvalidHeader("record_duration <= 0".into()));
    }
    if bytes.len() < header_bytes {
        return Err(EdfError::TruncatedFile { needed: header_bytes, have: bytes.len() });
    }

    // Signal headers are field-major: all labels, then all transducers, ...
    let sh = &bytes[FIXED_HEADER..header_bytes];
    let ns = n_signals;
    let field = |offset: usize, width: usize, i: usize| -> &[u8] {
        &sh[offset * ns + i * width..offset * ns + (i + 1) * width]
    };
    let mut specs = Vec::with_capacity(ns);
    for i in 0..ns {
        let label = read_text(field(0, 16, i), &mut warnings, "label");
        let physical_dim = read_text(field(96, 8, i), &mut warnings, "physical_dim");
        let physical_min = read_real(field(104, 8, i), "physical_min")?;
        let physical_max = read_real(field(112, 8, i), "physical_max")?;
        let digital_min = read_int(field(120, 8, i), "digital_min")? as i32;
        let digital_max = read_int(field(128, 8, i), "digital_max")? as i32;
        let samples_per_record = read_int(field(216, 8, i), "samples_per_record")? as usize;
        if digital_min == digital_max {
            return Err(EdfError::DegenerateScale { signal: i });
        }
        specs.push(EdfSignalSpec {
            label,
            physical_dim,
            physical_min,
            physical_max,
            digital_min,
            digital_max,
            samples_per_record,
        });
    }
    let header = EdfHeader {
        version,
        patient_id,
        recording_id,
        start_date,
        start_time,
        header_bytes,
        n_records,
        record_duration_s,
        n_signals,
    };
    Ok((header, specs, warnings))
}

/// Parse an EDF 1.0 byte stream. Never reads past the length the header
/// promises; extra trailing bytes are ignored.
pub fn parse_edf(bytes: &[u8]) -> Result<EdfRecording, EdfError> {
    let (header, specs, mut warnings) = parse_edf_header(bytes)?;
    let header_bytes = header.header_bytes;
    let n_records = header.n_records;

    let samples_per_full_record: usize = specs.iter().map(|s| s.samples_per_record).sum();
    let payload = header_bytes + n_records * samples_per_full_record * 2;
    if bytes.len() < payload {
        return Err(EdfError::TruncatedFile { needed: payload, have: bytes.len() });
    }
    warnings.dedup();

    let mut samples: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| Vec::with_capacity(s.samples_per_record * n_records))
        .collect();
    let mut pos = header_bytes;
    for _ in 0..n_records {
        for (i, spec) in specs.iter().enumerate() {
            for _ in 0..spec.samples_per_record {
                let d = i16::from_le_bytes([bytes[pos], bytes[pos + 1]]);
                samples[i].push(spec.to_physical(d));
                pos += 2;
            }
        }
    }

    Ok(EdfRecording { header, specs, samples, warnings })
}

fn write_text(out: &mut Vec<u8>, text: &str, width: usize, field: &'static str) -> Result<(), EdfError> {
    if text.len() > width || !text.is_ascii() {
        return Err(EdfError::FieldOverflow { field, text: text.to_string(), width });
    }
    out.extend_from_slice(text.as_bytes());
    out.extend(std::iter::repeat_n(b' ', width - text.len()));
    Ok(())
}

/// Format a real so `parse::<f64>` round-trips it within an 8-char field.
fn format_real(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e7 {
        return format!("{}", v as i64);
    }
    for prec in (0..=6).rev() {
        let s = format!("{v:.prec$}");
        if s.len() <= 8 && s.parse::<f64>().map(|p| p == v).unwrap_or(false) {
            return s;
        }
    }
    format!("{v:.6}")
}

/// Serialize a recording to EDF bytes. Samples are converted back to
/// digital codes, so values quantize to the signal's digital step.
pub fn write_edf(rec: &EdfRecording) -> Result<Vec<u8>, EdfError> {
    let h = &rec.header;
    let ns = rec.specs.len();
    if ns != h.n_signals {
        return Err(EdfError::InvalidHeader(format!(
            "n_signals {} != specs {}",
            h.n_signals, ns
        )));
    }
    let header_bytes = FIXED_HEADER + PER_SIGNAL * ns;
    let mut out = Vec::with_capacity(header_bytes);

    write_text(&mut out, &h.version, 8, "version")?;
    write_text(&mut out, &h.patient_id, 80, "patient_id")?;
    write_text(&mut out, &h.recording_id, 80, "recording_id")?;
    write_text(&mut out, &h.start_date, 8, "start_date")?;
    write_text(&mut out, &h.start_time, 8, "start_time")?;
    write_text(&mut out, &header_bytes.to_string(), 8, "header_bytes")?;
    write_text(&mut out, "", 44, "reserved")?;
    write_text(&mut out, &h.n_records.to_string(), 8, "n_records")?;
    write_text(&mut out, &format_real(h.record_duration_s), 8, "record_duration")?;
    write_text(&mut out, &ns.to_string(), 4, "n_signals")?;

    // Field-major signal headers.
    for s in &rec.specs {
        write_text(&mut out, &s.label, 16, "label")?;
    }
    for _ in 0..ns {
        write_text(&mut out, "", 80, "transducer")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &s.physical_dim, 8, "physical_dim")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &format_real(s.physical_min), 8, "physical_min")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &format_real(s.physical_max), 8, "physical_max")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &s.digital_min.to_string(), 8, "digital_min")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &s.digital_max.to_string(), 8, "digital_max")?;
    }
    for _ in 0..ns {
        write_text(&mut out, "", 80, "prefilter")?;
    }
    for s in &rec.specs {
        write_text(&mut out, &s.samples_per_record.to_string(), 8, "samples_per_record")?;
    }
    for _ in 0..ns {
        write_text(&mut out, "", 32, "reserved")?;
    }
    debug_assert_eq!(out.len(), header_bytes);

    for (i, (spec, sig)) in rec.specs.iter().zip(&rec.samples).enumerate() {
        if sig.len() != spec.samples_per_record * h.n_records {
            return Err(EdfError::InvalidHeader(format!(
                "signal {i} has {} samples, header promises {}",
                sig.len(),
                spec.samples_per_record * h.n_records
            )));
        }
        let (lo, hi) = if spec.physical_min <= spec.physical_max {
            (spec.physical_min, spec.physical_max)
        } else {
            (spec.physical_max, spec.physical_min)
        };
        for &v in sig {
            if v < lo || v > hi {
                return Err(EdfError::ValueOutOfPhysicalRange {
                    signal: i,
                    value: v,
                    min: lo,
                    max: hi,
                });
            }
        }
    }
    for r in 0..h.n_records {
        for (spec, sig) in rec.specs.iter().zip(&rec.samples) {
            let from = r * spec.samples_per_record;
            for &v in &sig[from..from + spec.samples_per_record] {
                out.extend_from_slice(&spec.to_digital(v).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parse the annotation CSV: `file_id,start_s,end_s` per line, `#`
/// comments and blank lines allowed. Returns annotations sorted by
/// (file_id, start); within a file, intervals that overlap or touch are
/// unioned.
pub fn parse_annotations(text: &str) -> Result<Vec<SeizureAnnotation>, EdfError> {
    let mut anns = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(EdfError::UnparsableLine { line, text: raw.to_string() });
        }
        let start_s: f64 = parts[1]
            .parse()
            .map_err(|_| EdfError::UnparsableLine { line, text: raw.to_string() })?;
        let end_s: f64 = parts[2]
            .parse()
            .map_err(|_| EdfError::UnparsableLine { line, text: raw.to_string() })?;
        if start_s < 0.0 {
            return Err(EdfError::UnparsableLine { line, text: raw.to_string() });
        }
        if end_s <= start_s {
            return Err(EdfError::NegativeDuration { line });
        }
        anns.push(SeizureAnnotation { file_id: parts[0].to_string(), start_s, end_s });
    }
    anns.sort_by(|a, b| {
        a.file_id
            .cmp(&b.file_id)
            .then(a.start_s.total_cmp(&b.start_s))
    });
    // Union overlapping intervals per file.
    let mut merged: Vec<SeizureAnnotation> = Vec::with_capacity(anns.len());
    for a in anns {
        match merged.last_mut() {
            Some(last) if last.file_id == a.file_id && a.start_s <= last.end_s => {
                last.end_s = last.end_s.max(a.end_s);
            }
            _ => merged.push(a),
        }
    }
    Ok(merged)
}

pub fn annotations_to_csv(anns: &[SeizureAnnotation]) -> String {
    let mut out = String::from("# file_id,start_s,end_s\n");
    for a in anns {
        out.push_str(&format!("{},{},{}\n", a.file_id, format_real(a.start_s), format_real(a.end_s)));
    }
    out
}
