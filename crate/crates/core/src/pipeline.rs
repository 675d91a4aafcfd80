//! End-to-end orchestration: EDF corpus in, evaluation report out.
//! The CLI subcommands and the desk-scale acceptance runs both drive
//! these functions; everything is seeded and single-threaded so a given
//! corpus and seed reproduce byte-identical artifacts.

use crate::dsp;
use crate::edf::{self, EdfRecording, SeizureAnnotation};
use crate::metrics::{self, ConfusionMatrix, MethodReport};
use crate::postproc::{self, DecisionTiming, HmmParams, SmoothingConfig, ViterbiLut, WINDOW};
use crate::preprocess::{
    self, FragmentSet, LabeledRecording, PatientData, PreprocessOutput,
    SplitPlan, FRAGMENT_SECONDS, TARGET_RATE_HZ,
};
use crate::quant::QuantSpec;
use crate::tcresnet::quantized::{
    forward_quantized, quantize_input, quantize_model, softmax2, QuantizedModel,
};
use crate::tcresnet::TcResNetModel;
use crate::train::{self, TrainConfig, TrainReport};
use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Edf(#[from] edf::EdfError),
    #[error(transparent)]
    Dsp(#[from] dsp::DspError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Train(#[from] train::TrainError),
    #[error(transparent)]
    Model(#[from] crate::tcresnet::ModelError),
    #[error(transparent)]
    Postproc(#[from] postproc::PostprocError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Corpus(String),
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Patient id = file name up to the first underscore (`chb01_03.edf`
/// and `P01_f0.edf` both follow this convention).
pub fn patient_of(file_name: &str) -> String {
    file_name.split('_').next().unwrap_or(file_name).to_string()
}

/// One patient's parsed recordings, keyed by file name.
pub type PatientFiles = (String, Vec<(String, EdfRecording)>);

/// `.edf` file names under `data_dir`, grouped by patient.
pub fn discover_corpus(data_dir: &Path) -> Result<Vec<(String, Vec<String>)>> {
    let mut names: Vec<String> = std::fs::read_dir(data_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| n.to_ascii_lowercase().ends_with(".edf"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(PipelineError::Corpus(format!(
            "no .edf files under {}",
            data_dir.display()
        )));
    }
    let mut by_patient: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for name in names {
        by_patient.entry(patient_of(&name)).or_default().push(name);
    }
    Ok(by_patient.into_iter().collect())
}

/// Discover and parse every `.edf` under `data_dir`, grouped by patient.
pub fn load_corpus(data_dir: &Path) -> Result<Vec<PatientFiles>> {
    let mut out = Vec::new();
    for (patient, names) in discover_corpus(data_dir)? {
        let mut files = Vec::new();
        for name in names {
            let bytes = std::fs::read(data_dir.join(&name))?;
            files.push((name, edf::parse_edf(&bytes)?));
        }
        out.push((patient, files));
    }
    Ok(out)
}

/// Signal labels of one file, reading only its header bytes.
fn read_channel_labels(path: &Path) -> Result<Vec<String>> {
    use std::io::Read;
    let mut file = std::fs::File::open(path)?;
    let mut fixed = [0u8; 256];
    file.read_exact(&mut fixed).map_err(|_| edf::EdfError::TruncatedFile {
        needed: 256,
        have: 0,
    })?;
    let ns: usize = String::from_utf8_lossy(&fixed[252..256]).trim().parse().map_err(|_| {
        edf::EdfError::MalformedField {
            field: "n_signals",
            text: String::from_utf8_lossy(&fixed[252..256]).to_string(),
        }
    })?;
    let mut rest = vec![0u8; 256 * ns];
    file.read_exact(&mut rest).map_err(|_| edf::EdfError::TruncatedFile {
        needed: 256 + 256 * ns,
        have: 256,
    })?;
    let mut all = fixed.to_vec();
    all.extend_from_slice(&rest);
    let (_, specs, _) = edf::parse_edf_header(&all)?;
    Ok(specs.into_iter().map(|s| s.label).collect())
}

/// Channel labels present in every file of the corpus (header-only
/// pass), sorted for determinism.
pub fn common_channels_of_dir(data_dir: &Path) -> Result<Vec<String>> {
    let mut common: Option<Vec<String>> = None;
    for (_, names) in discover_corpus(data_dir)? {
        for name in names {
            let labels = read_channel_labels(&data_dir.join(&name))?;
            common = Some(match common {
                None => labels,
                Some(mut acc) => {
                    acc.retain(|l| labels.contains(l));
                    acc
                }
            });
        }
    }
    let mut common = common.unwrap_or_default();
    common.sort();
    common.dedup();
    Ok(common)
}

/// Channel labels present in every recording, sorted for determinism.
pub fn common_channels(corpus: &[PatientFiles]) -> Vec<String> {
    let mut iter = corpus.iter().flat_map(|(_, files)| files.iter());
    let mut common: Vec<String> = match iter.next() {
        Some((_, rec)) => rec.specs.iter().map(|s| s.label.clone()).collect(),
        None => return vec![],
    };
    for (_, rec) in iter {
        common.retain(|label| rec.specs.iter().any(|s| &s.label == label));
    }
    common.sort();
    common.dedup();
    common
}

/// Resample (if needed), band-pass and fragment one recording over the
/// given channels, then label fragments from its annotations.
pub fn preprocess_recording(
    rec: &EdfRecording,
    file_id: &str,
    channels: &[String],
    seizures: &[(f64, f64)],
) -> Result<LabeledRecording> {
    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(channels.len());
    let mut min_len = usize::MAX;
    for label in channels {
        let idx = rec
            .signal_index(label)
            .ok_or_else(|| PipelineError::Corpus(format!("{file_id}: channel {label} missing")))?;
        let fs = rec.sample_rate_hz(idx);
        let resampled = if (fs - TARGET_RATE_HZ).abs() < 1e-9 {
            rec.samples[idx].clone()
        } else {
            dsp::resample(&rec.samples[idx], fs, TARGET_RATE_HZ)?
        };
        let filtered = dsp::bandpass(&resampled, 0.1, 50.0, TARGET_RATE_HZ)?;
        min_len = min_len.min(filtered.len());
        per_channel.push(filtered);
    }
    let mut matrix = Array2::<f64>::zeros((channels.len(), min_len));
    for (c, chan) in per_channel.iter().enumerate() {
        for t in 0..min_len {
            matrix[(c, t)] = chan[t];
        }
    }
    let fragments = preprocess::fragment(matrix.view(), TARGET_RATE_HZ, FRAGMENT_SECONDS);
    let labels = preprocess::label_fragments(fragments.len(), FRAGMENT_SECONDS, seizures);
    Ok(LabeledRecording {
        file_id: file_id.to_string(),
        fragments,
        labels,
        seizures: seizures.to_vec(),
    })
}

/// Ingest + preprocess: corpus directory and annotation CSV to a fully
/// split, channel-selected, normalized [`PreprocessOutput`].
///
/// Patients are processed one at a time; only the post-downsampling
/// splits stay resident, so corpus size is bounded by the kept
/// fragments rather than the raw recordings.
pub fn prepare_data(
    data_dir: &Path,
    annotations_path: &Path,
    plan: &SplitPlan,
    calib_patients: &[String],
    seed: u64,
) -> Result<PreprocessOutput> {
    use rand::SeedableRng;
    let annotations = edf::parse_annotations(&std::fs::read_to_string(annotations_path)?)?;
    let channels = common_channels_of_dir(data_dir)?;
    if channels.len() < preprocess::N_CHANNELS {
        return Err(preprocess::PreprocessError::TooFewChannels {
            needed: preprocess::N_CHANNELS,
            have: channels.len(),
        }
        .into());
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut dev_pool = Vec::new();
    let mut patient_sets = Vec::new();
    let mut timelines = Vec::new();
    let mut ids = Vec::new();
    for (patient_id, names) in discover_corpus(data_dir)? {
        let mut recordings = Vec::new();
        for name in &names {
            let bytes = std::fs::read(data_dir.join(name))?;
            let rec = edf::parse_edf(&bytes)?;
            let seizures: Vec<(f64, f64)> = annotations
                .iter()
                .filter(|a| &a.file_id == name)
                .map(|a| (a.start_s, a.end_s))
                .collect();
            recordings.push(preprocess_recording(&rec, name, &channels, &seizures)?);
        }
        let patient = PatientData { id: patient_id.clone(), recordings };
        let split = preprocess::split_patient(&patient, channels.len(), plan, &mut rng)?;
        dev_pool.extend(split.dev_rows);
        timelines.extend(split.timelines);
        patient_sets.push(split.sets);
        ids.push(patient_id);
    }
    let (dev_train, dev_val) = preprocess::split_dev_pool(&dev_pool, channels.len(), plan, &mut rng);
    drop(dev_pool);
    let calib = preprocess::pick_calib_patients(&ids, calib_patients, &mut rng);
    let mut out = PreprocessOutput {
        dev_train,
        dev_val,
        patients: patient_sets,
        selection: preprocess::ChannelSelection {
            kept_channels: channels.clone(),
            variance_scores: vec![],
        },
        norm_divisor: 1.0,
        calib_patients: calib,
        seed,
        timelines,
    };

    // Select the 16 highest-variance channels on the pooled dev ictal
    // fragments, then project every set onto them.
    let mut ictal: Vec<(String, Vec<f64>)> =
        channels.iter().map(|c| (c.clone(), Vec::new())).collect();
    for set in [&out.dev_train, &out.dev_val] {
        for (i, &label) in set.labels.iter().enumerate() {
            if label == 0 {
                continue;
            }
            for (c, chan) in ictal.iter_mut().enumerate() {
                chan.1.extend(
                    set.data
                        .index_axis(Axis(0), i)
                        .index_axis(Axis(0), c)
                        .iter()
                        .map(|&v| v as f64),
                );
            }
        }
    }
    let selection = preprocess::select_channels(&ictal)?;
    out.dev_train = preprocess::project_channels(&out.dev_train, &channels, &selection.kept_channels);
    out.dev_val = preprocess::project_channels(&out.dev_val, &channels, &selection.kept_channels);
    for p in &mut out.patients {
        p.retrain_train = preprocess::project_channels(&p.retrain_train, &channels, &selection.kept_channels);
        p.retrain_val = preprocess::project_channels(&p.retrain_val, &channels, &selection.kept_channels);
        p.test = preprocess::project_channels(&p.test, &channels, &selection.kept_channels);
    }
    out.selection = selection;

    // One global normalization constant across every subset.
    let mut sets: Vec<&mut FragmentSet> = vec![&mut out.dev_train, &mut out.dev_val];
    for p in &mut out.patients {
        sets.push(&mut p.retrain_train);
        sets.push(&mut p.retrain_val);
        sets.push(&mut p.test);
    }
    out.norm_divisor = preprocess::normalize(&mut sets)?;
    Ok(out)
}

/// A trained per-patient model: float form plus, when QAT is on, the
/// deployable quantized form.
pub struct PatientModel {
    pub id: String,
    pub float: TcResNetModel,
    pub quantized: Option<QuantizedModel>,
    pub report: TrainReport,
}

fn to_f64_batch(set: &FragmentSet) -> Array3<f64> {
    let (n, c, t) = set.data.dim();
    let mut x = Array3::<f64>::zeros((n, c, t));
    for i in 0..n {
        for ch in 0..c {
            for s in 0..t {
                x[(i, ch, s)] = set.data[(i, ch, s)] as f64;
            }
        }
    }
    x
}

/// Fold, calibrate feature ranges on the patient's retrain-train data
/// and produce the deployable quantized model.
pub fn finalize_quantized(
    model: &TcResNetModel,
    calib: &FragmentSet,
    bits: u8,
) -> Result<QuantizedModel> {
    let folded = model.fold_batchnorm()?;
    let x = to_f64_batch(calib);
    Ok(quantize_model(&folded, bits, x.view())?)
}

/// Retrain the base model for every patient; quantize when QAT is set.
pub fn run_retrain_all(
    base: &TcResNetModel,
    data: &PreprocessOutput,
    cfg: &TrainConfig,
) -> Result<Vec<PatientModel>> {
    let mut out = Vec::new();
    for p in &data.patients {
        let (model, report) =
            train::retrain_patient(base, &p.retrain_train, Some(&p.retrain_val), cfg)?;
        let quantized = match cfg.qat_bits {
            Some(bits) => Some(finalize_quantized(&model, &p.retrain_train, bits)?),
            None => None,
        };
        out.push(PatientModel { id: p.id.clone(), float: model, quantized, report });
    }
    Ok(out)
}

/// Per-fragment ictal probabilities through whichever form the model
/// deploys as (integer path when quantized).
pub fn predict_probs(model: &PatientModel, set: &FragmentSet) -> Result<Vec<[f64; 2]>> {
    match &model.quantized {
        Some(q) => {
            let mut probs = Vec::with_capacity(set.len());
            for i in 0..set.len() {
                let frag = set.data.index_axis(Axis(0), i).mapv(|v| v as f64);
                let codes = quantize_input(frag.view(), q.features.input);
                let out = forward_quantized(q, codes.view())?;
                probs.push(softmax2(out.logits()));
            }
            Ok(probs)
        }
        None => Ok(train::predict_probs(&model.float, set, None)?),
    }
}

/// Estimate the HMM from the ground-truth timelines (transitions) and
/// the pooled last-epoch retrain confusions (emissions).
pub fn estimate_hmm(data: &PreprocessOutput, models: &[PatientModel]) -> HmmParams {
    let sequences: Vec<&[u8]> = data.timelines.iter().map(|(_, l)| l.as_slice()).collect();
    let transition = postproc::estimate_transitions(&sequences);
    let mut pooled = ConfusionMatrix::default();
    for m in models {
        pooled.add(&m.report.train_confusion);
    }
    let emission = postproc::emissions_from_confusion(pooled.as_rows());
    HmmParams::with_stationary_initial(transition, emission)
}

/// Grid-search SMA/EWMA thresholds on the calibration patients' test
/// streams (those patients are excluded from evaluation). An empty
/// calibration list falls back to the default thresholds.
pub fn run_calibration(
    data: &PreprocessOutput,
    models: &[PatientModel],
    cfg: &TrainConfig,
) -> Result<SmoothingConfig> {
    if data.calib_patients.is_empty() {
        return Ok(SmoothingConfig::default());
    }
    let mut streams = Vec::new();
    for p in &data.patients {
        if !data.calib_patients.contains(&p.id) {
            continue;
        }
        let model = models
            .iter()
            .find(|m| m.id == p.id)
            .ok_or_else(|| PipelineError::Corpus(format!("no model for {}", p.id)))?;
        let probs = predict_probs(model, &p.test)?;
        let ictal: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        streams.push((ictal, p.test.labels.clone()));
    }
    let _ = cfg;
    Ok(postproc::calibrate_thresholds(&streams)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientEval {
    pub id: String,
    pub methods: BTreeMap<String, MethodReport>,
}

/// The Table-IV-style evaluation block: pooled metrics per smoothing
/// method plus the per-patient breakdown.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub bits: Option<u8>,
    pub seizure_weight: f64,
    pub smoothing: SmoothingConfig,
    pub hmm: HmmParams,
    pub n_test_fragments: usize,
    pub evaluated_patients: Vec<String>,
    pub excluded_calib_patients: Vec<String>,
    pub methods: BTreeMap<String, MethodReport>,
    pub per_patient: Vec<PatientEval>,
}

struct MethodAccum {
    cm: ConfusionMatrix,
    scores: Vec<f64>,
    labels: Vec<u8>,
    delays: Vec<f64>,
    missed: usize,
    n_seizures: usize,
}

impl MethodAccum {
    fn new() -> Self {
        MethodAccum {
            cm: ConfusionMatrix::default(),
            scores: Vec::new(),
            labels: Vec::new(),
            delays: Vec::new(),
            missed: 0,
            n_seizures: 0,
        }
    }

    fn absorb(
        &mut self,
        predicted: &[u8],
        truth: &[u8],
        scores: &[f64],
        seizures: &[(f64, f64)],
        timing: DecisionTiming,
    ) -> MethodReport {
        let cm = ConfusionMatrix::from_labels(predicted, truth);
        self.cm.add(&cm);
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(truth);
        let delays = postproc::detection_delay(predicted, seizures, FRAGMENT_SECONDS, timing);
        let mut patient_delays = Vec::new();
        let mut patient_missed = 0usize;
        for d in &delays {
            match d {
                Some(v) => patient_delays.push(*v),
                None => patient_missed += 1,
            }
        }
        self.delays.extend_from_slice(&patient_delays);
        self.missed += patient_missed;
        self.n_seizures += delays.len();
        let auc = metrics::roc_auc(scores, truth).ok();
        let mut report = MethodReport::from_confusion(cm, auc);
        report.mean_delay_s = mean(&patient_delays);
        report.missed_seizures = patient_missed;
        report.n_seizures = delays.len();
        report
    }

    fn finish(self) -> MethodReport {
        let auc = metrics::roc_auc(&self.scores, &self.labels).ok();
        let mut report = MethodReport::from_confusion(self.cm, auc);
        report.mean_delay_s = mean(&self.delays);
        report.missed_seizures = self.missed;
        report.n_seizures = self.n_seizures;
        report
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Evaluate every non-calibration patient's test stream under all three
/// smoothing methods.
///
/// Scores behind each AUC: the SMA/EWMA pre-threshold smoothed values
/// for those methods, and the raw CNN ictal probability for the HMM
/// (whose hard decisions feed only the confusion matrix).
pub fn run_eval(
    data: &PreprocessOutput,
    models: &[PatientModel],
    smoothing: &SmoothingConfig,
    hmm: &HmmParams,
    lut: Option<&ViterbiLut>,
    cfg: &TrainConfig,
) -> Result<EvalSummary> {
    let mut accums: BTreeMap<String, MethodAccum> = ["sma", "ewma", "hmm"]
        .iter()
        .map(|m| (m.to_string(), MethodAccum::new()))
        .collect();
    let mut per_patient = Vec::new();
    let mut evaluated = Vec::new();
    let mut n_test = 0usize;

    for p in &data.patients {
        if data.calib_patients.contains(&p.id) {
            continue;
        }
        let model = models
            .iter()
            .find(|m| m.id == p.id)
            .ok_or_else(|| PipelineError::Corpus(format!("no model for {}", p.id)))?;
        let probs = predict_probs(model, &p.test)?;
        let ictal: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let raw: Vec<u8> = probs
            .iter()
            .map(|&pr| train::apply_threshold_moving(pr, cfg.seizure_weight))
            .collect();
        let truth = &p.test.labels;
        n_test += truth.len();
        evaluated.push(p.id.clone());

        let sma_scores = postproc::sma_scores(&ictal, smoothing.window);
        let sma_labels: Vec<u8> = sma_scores
            .iter()
            .map(|&s| u8::from(s >= smoothing.sma_threshold))
            .collect();
        let ewma_scores = postproc::ewma_scores(&ictal, smoothing.ewma_alpha);
        let ewma_labels: Vec<u8> = ewma_scores
            .iter()
            .map(|&s| u8::from(s >= smoothing.ewma_threshold))
            .collect();
        let hmm_labels = match lut {
            Some(l) => postproc::hmm_smooth_lut(&raw, l, hmm),
            None => postproc::hmm_smooth(&raw, hmm),
        };

        let mut methods = BTreeMap::new();
        methods.insert(
            "sma".to_string(),
            accums.get_mut("sma").unwrap().absorb(
                &sma_labels,
                truth,
                &sma_scores,
                &p.test_seizures,
                DecisionTiming::Instant,
            ),
        );
        methods.insert(
            "ewma".to_string(),
            accums.get_mut("ewma").unwrap().absorb(
                &ewma_labels,
                truth,
                &ewma_scores,
                &p.test_seizures,
                DecisionTiming::Instant,
            ),
        );
        methods.insert(
            "hmm".to_string(),
            accums.get_mut("hmm").unwrap().absorb(
                &hmm_labels,
                truth,
                &ictal,
                &p.test_seizures,
                DecisionTiming::Windowed { window: WINDOW },
            ),
        );
        per_patient.push(PatientEval { id: p.id.clone(), methods });
    }

    let methods: BTreeMap<String, MethodReport> =
        accums.into_iter().map(|(k, a)| (k, a.finish())).collect();
    Ok(EvalSummary {
        bits: cfg.qat_bits,
        seizure_weight: cfg.seizure_weight,
        smoothing: *smoothing,
        hmm: hmm.clone(),
        n_test_fragments: n_test,
        evaluated_patients: evaluated,
        excluded_calib_patients: data.calib_patients.clone(),
        methods,
        per_patient,
    })
}

/// Everything one training configuration produces.
pub struct PipelineRun {
    pub base: TcResNetModel,
    pub base_report: TrainReport,
    pub patients: Vec<PatientModel>,
    pub hmm: HmmParams,
    pub lut: ViterbiLut,
    pub smoothing: SmoothingConfig,
    pub eval: EvalSummary,
}

/// Train base + retrains, estimate the HMM, calibrate thresholds and
/// evaluate: the whole classification stage on prepared data.
pub fn run_training_stage(data: &PreprocessOutput, cfg: &TrainConfig) -> Result<PipelineRun> {
    let (base, base_report) = train::train_base(&data.dev_train, Some(&data.dev_val), cfg)?;
    let patients = run_retrain_all(&base, data, cfg)?;
    let hmm = estimate_hmm(data, &patients);
    let lut = postproc::compile_lut(&hmm);
    let smoothing = run_calibration(data, &patients, cfg)?;
    let eval = run_eval(data, &patients, &smoothing, &hmm, Some(&lut), cfg)?;
    Ok(PipelineRun { base, base_report, patients, hmm, lut, smoothing, eval })
}

// ---------------------------------------------------------------------
// Streaming replay.

/// Model form the stream decodes with.
pub enum EvalModel {
    Float { model: TcResNetModel, qat_bits: Option<u8> },
    Quantized(QuantizedModel),
}

impl EvalModel {
    pub fn prob_ictal(&self, fragment: &Array2<f64>) -> Result<f64> {
        match self {
            EvalModel::Float { model, qat_bits } => {
                let x = fragment.clone().insert_axis(Axis(0));
                let logits = model.forward_eval(x.view(), *qat_bits)?;
                Ok(softmax2([logits[(0, 0)], logits[(0, 1)]])[1])
            }
            EvalModel::Quantized(q) => {
                let codes = quantize_input(fragment.view(), q.features.input);
                let out = forward_quantized(q, codes.view())?;
                Ok(softmax2(out.logits())[1])
            }
        }
    }

    pub fn input_spec(&self) -> Option<QuantSpec> {
        match self {
            EvalModel::Float { .. } => None,
            EvalModel::Quantized(q) => Some(q.features.input),
        }
    }
}

/// Which smoother a stream applies.
pub enum Smoother {
    Sma { threshold: f64 },
    Ewma { alpha: f64, threshold: f64 },
    /// Windowed Viterbi; decisions trail the head of the stream by
    /// `WINDOW - 1` fragments (0 during warm-up).
    Hmm { hmm: HmmParams, lut: Option<ViterbiLut> },
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct StreamLine {
    pub t_s: f64,
    pub p_ictal: f64,
    pub raw: u8,
    pub smoothed: u8,
}

/// Replay one recording fragment by fragment, emitting a decision line
/// per fragment. For the HMM smoother the `smoothed` column at time `t`
/// is the decision emitted at `t`, which concerns fragment
/// `t - (WINDOW-1)`; the first `WINDOW-1` lines report 0 while the
/// window fills.
pub fn stream_recording(
    rec: &EdfRecording,
    channels: &[String],
    norm_divisor: f64,
    model: &EvalModel,
    seizure_weight: f64,
    smoother: &Smoother,
    mut sink: impl FnMut(StreamLine),
) -> Result<usize> {
    let labeled = preprocess_recording(rec, "stream", channels, &[])?;
    let mut raw_history: Vec<u8> = Vec::new();
    let mut sma_state: Vec<f64> = Vec::new();
    let mut ewma_state: Option<f64> = None;
    for (k, frag) in labeled.fragments.iter().enumerate() {
        let fragment = frag.index_axis(Axis(0), 0).mapv(|v| v as f64 / norm_divisor);
        let p = model.prob_ictal(&fragment)?;
        let raw = train::apply_threshold_moving([1.0 - p, p], seizure_weight);
        raw_history.push(raw);
        let smoothed = match smoother {
            Smoother::Sma { threshold } => {
                sma_state.push(p);
                let from = sma_state.len().saturating_sub(WINDOW);
                let window = &sma_state[from..];
                let m = window.iter().sum::<f64>() / window.len() as f64;
                u8::from(m >= *threshold)
            }
            Smoother::Ewma { alpha, threshold } => {
                let s = match ewma_state {
                    None => p,
                    Some(prev) => alpha * p + (1.0 - alpha) * prev,
                };
                ewma_state = Some(s);
                u8::from(s >= *threshold)
            }
            Smoother::Hmm { hmm, lut } => {
                if raw_history.len() < WINDOW {
                    0
                } else {
                    let window: [u8; WINDOW] =
                        raw_history[raw_history.len() - WINDOW..].try_into().unwrap();
                    match lut {
                        Some(l) => l.lookup(&window),
                        None => postproc::viterbi_window(&window, hmm),
                    }
                }
            }
        };
        sink(StreamLine { t_s: k as f64 * FRAGMENT_SECONDS, p_ictal: p, raw, smoothed });
    }
    Ok(labeled.fragments.len())
}

/// Summary facts about a corpus, for the `ingest` subcommand.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestFileSummary {
    pub file: String,
    pub patient: String,
    pub n_signals: usize,
    pub n_records: usize,
    pub duration_s: f64,
    pub sample_rates_hz: Vec<f64>,
    pub n_annotations: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: Vec<IngestFileSummary>,
    pub patients: Vec<String>,
    pub common_channels: Vec<String>,
    pub total_seizure_seconds: f64,
}

pub fn ingest_report(data_dir: &Path, annotations_path: &Path) -> Result<IngestReport> {
    let corpus = load_corpus(data_dir)?;
    let annotations: Vec<SeizureAnnotation> =
        edf::parse_annotations(&std::fs::read_to_string(annotations_path)?)?;
    let mut files = Vec::new();
    for (patient, recs) in &corpus {
        for (name, rec) in recs {
            let n_ann = annotations.iter().filter(|a| &a.file_id == name).count();
            files.push(IngestFileSummary {
                file: name.clone(),
                patient: patient.clone(),
                n_signals: rec.header.n_signals,
                n_records: rec.header.n_records,
                duration_s: rec.duration_s(),
                sample_rates_hz: (0..rec.specs.len()).map(|i| rec.sample_rate_hz(i)).collect(),
                n_annotations: n_ann,
                warnings: rec.warnings.clone(),
            });
        }
    }
    Ok(IngestReport {
        patients: corpus.iter().map(|(p, _)| p.clone()).collect(),
        common_channels: common_channels(&corpus),
        total_seizure_seconds: annotations.iter().map(|a| a.end_s - a.start_s).sum(),
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, SynthConfig};

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            n_patients: 2,
            minutes_per_patient: 6.0,
            files_per_patient: 2,
            seizures_per_file: 2,
            seizure_min_s: 15.0,
            seizure_max_s: 25.0,
            seed: 11,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn prepare_data_from_synth_corpus() {
        let dir = tempfile::tempdir().unwrap();
        synth::generate_to_dir(&tiny_synth(), dir.path()).unwrap();
        let data = prepare_data(
            dir.path(),
            &dir.path().join("annotations.csv"),
            &SplitPlan::default(),
            &[],
            5,
        )
        .unwrap();
        assert_eq!(data.selection.kept_channels.len(), 16);
        assert_eq!(data.patients.len(), 2);
        assert!(data.norm_divisor > 0.0);
        // Normalization: global max is exactly 1.
        let mut max_abs = 0.0f32;
        for set in [&data.dev_train, &data.dev_val] {
            for &v in set.data.iter() {
                max_abs = max_abs.max(v.abs());
            }
        }
        for p in &data.patients {
            for set in [&p.retrain_train, &p.retrain_val, &p.test] {
                for &v in set.data.iter() {
                    max_abs = max_abs.max(v.abs());
                }
            }
        }
        assert!((max_abs - 1.0).abs() < 1e-6, "max {max_abs}");
        // The strongly-responding channels are the ones selected.
        let weak = ["FZ-CZ", "CZ-PZ"];
        for w in weak {
            assert!(
                !data.selection.kept_channels.iter().any(|c| c == w),
                "weak channel {w} selected: {:?}",
                data.selection.kept_channels
            );
        }
        // Timelines exclude test files.
        let test_files: Vec<&str> =
            data.patients.iter().map(|p| p.test_file.as_str()).collect();
        for (file, _) in &data.timelines {
            assert!(!test_files.contains(&file.as_str()));
        }
    }

    #[test]
    fn prepare_data_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        synth::generate_to_dir(&tiny_synth(), dir.path()).unwrap();
        let ann = dir.path().join("annotations.csv");
        let a = prepare_data(dir.path(), &ann, &SplitPlan::default(), &[], 5).unwrap();
        let b = prepare_data(dir.path(), &ann, &SplitPlan::default(), &[], 5).unwrap();
        assert_eq!(a.dev_train.data, b.dev_train.data);
        assert_eq!(a.selection.kept_channels, b.selection.kept_channels);
        assert_eq!(a.norm_divisor, b.norm_divisor);
    }

    #[test]
    fn ingest_report_shapes() {
        let dir = tempfile::tempdir().unwrap();
        synth::generate_to_dir(&tiny_synth(), dir.path()).unwrap();
        let report = ingest_report(dir.path(), &dir.path().join("annotations.csv")).unwrap();
        assert_eq!(report.files.len(), 4);
        assert_eq!(report.patients, vec!["P01", "P02"]);
        assert_eq!(report.common_channels.len(), 18);
        assert!(report.total_seizure_seconds > 0.0);
    }
}
