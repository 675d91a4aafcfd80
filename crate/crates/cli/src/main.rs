//! `ictal`: one binary exposing the seizure-detection pipeline stages.
//!
//! Typical flow:
//!
//! ```text
//! ictal synth      --patients 4 --minutes 30 --seed 7 --out corpus/
//! ictal preprocess --data-dir corpus --annotations corpus/annotations.csv --out pre/ --seed 7
//! ictal train-base --data pre --qat-bits 4 --out base.ckpt
//! ictal retrain    --data pre --base base.ckpt --patient P01 --out models/P01.ckpt
//! ictal calibrate  --data pre --models models --out-smoothing smoothing.json --out-hmm hmm.json
//! ictal lut        --hmm hmm.json --out lut.json
//! ictal eval       --data pre --models models --smoothing smoothing.json --hmm hmm.json --out report.json
//! ictal cost       --clock 250000 --rate 10 --array 4
//! ictal stream     --edf corpus/P01_f0.edf --data pre --model models/P01.ckpt --hmm hmm.json
//! ```
//!
//! Exit codes: 0 success, 1 runtime error (one machine-parsable
//! `error code=... msg=...` line on stderr), 2 usage.

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use ictal::cost::{self, OperatingPoint};
use ictal::metrics::MethodReport;
use ictal::pipeline::{self, EvalModel, PatientModel, PipelineError, Smoother};
use ictal::postproc::{self, HmmParams, SmoothingConfig, ViterbiLut};
use ictal::preprocess::{self, SplitPlan};
use ictal::synth::{self, SynthConfig};
use ictal::tcresnet::{build_tcresnet4, checkpoint};
use ictal::train::{self, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "ictal", version, about = "EEG seizure detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// One JSON document can carry every stage's configuration; explicit
/// command-line flags override its values. Unknown keys are rejected.
#[derive(Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PipelineConfig {
    synth: SynthConfig,
    split: SplitPlan,
    train: TrainConfig,
    operating_point: OperatingPoint,
    calib_patients: Vec<String>,
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<PipelineConfig> {
    match path {
        None => Ok(PipelineConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic EDF corpus with annotated seizures.
    Synth {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        minutes: Option<f64>,
        #[arg(long)]
        files_per_patient: Option<usize>,
        #[arg(long)]
        seizures_per_file: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Validate a corpus and print a JSON summary.
    Ingest {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resample, filter, fragment, split and normalize a corpus.
    Preprocess {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated patient ids used for threshold calibration.
        #[arg(long, value_delimiter = ',')]
        calib_patients: Vec<String>,
    },
    /// Train the patient-unspecific base model on the pooled dev split.
    TrainBase {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Preprocessed fragment store (the dev splits live in it).
        #[arg(long, visible_alias = "dev")]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        qat_bits: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrain the base model on one patient's retrain split.
    Retrain {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the HMM and grid-search smoothing thresholds on the
    /// calibration patients.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out_smoothing: PathBuf,
        #[arg(long)]
        out_hmm: PathBuf,
        /// Override the calibration patients recorded at preprocess time.
        #[arg(long, value_delimiter = ',')]
        patients: Vec<String>,
    },
    /// Evaluate all three smoothing methods on the held-out test files.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        smoothing: PathBuf,
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        lut: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-patient metric rows for box plots.
        #[arg(long)]
        per_patient_csv: Option<PathBuf>,
    },
    /// Compile the windowed-Viterbi lookup table from HMM parameters.
    Lut {
        #[arg(long)]
        hmm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Static parameter/MAC accounting and latency/energy estimates.
    Cost {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Float checkpoint; the stock architecture is used if omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        clock: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        #[arg(long)]
        array: Option<usize>,
        #[arg(long)]
        energy_per_mac: Option<f64>,
        #[arg(long)]
        idle_power: Option<f64>,
        /// Solve for the per-MAC energy that reproduces this average
        /// power at the operating point.
        #[arg(long)]
        calibrate_power: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay one EDF file, printing a decision line per fragment.
    Stream {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        edf: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Smoothing method: hmm, sma or ewma.
        #[arg(long, default_value = "hmm")]
        method: String,
        #[arg(long)]
        smoothing: Option<PathBuf>,
        #[arg(long)]
        hmm: Option<PathBuf>,
        /// Use a compiled LUT for the HMM decisions.
        #[arg(long)]
        use_lut: Option<PathBuf>,
        /// Replay speed multiple of real time; 0 = as fast as possible.
        #[arg(long, default_value_t = 0.0)]
        speed: f64,
        /// Force the float model even when a quantized form exists.
        #[arg(long, default_value_t = false)]
        float: bool,
        #[arg(long)]
        weight: Option<f64>,
    },
    /// Full-protocol run on the CHB-MIT corpus (hours; needs the
    /// dataset and an annotation CSV converted from its summaries).
    ReproduceChbmit {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        workdir: PathBuf,
        #[arg(long, default_value_t = 4)]
        bits: u8,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error code={} msg={:?}", error_code(&e), format!("{e:#}"));
        std::process::exit(1);
    }
}

fn error_code(e: &anyhow::Error) -> &'static str {
    use ictal::edf::EdfError as E;
    use ictal::tcresnet::ModelError as M;
    if let Some(pe) = e.downcast_ref::<PipelineError>() {
        return match pe {
            PipelineError::Edf(e) => edf_code(e),
            PipelineError::Dsp(d) => match d {
                ictal::dsp::DspError::EmptySignal => "DSP_EMPTY_SIGNAL",
                ictal::dsp::DspError::InvalidBand { .. } => "DSP_INVALID_BAND",
                ictal::dsp::DspError::InvalidRate(_) => "DSP_INVALID_RATE",
            },
            PipelineError::Preprocess(p) => preprocess_code(p),
            PipelineError::Train(t) => train_code(t),
            PipelineError::Model(m) => model_code(m),
            PipelineError::Postproc(_) => "POST_NO_CALIBRATION",
            PipelineError::Metrics(_) => "METRICS_SINGLE_CLASS",
            PipelineError::Io(_) => "IO",
            PipelineError::Corpus(_) => "CORPUS",
        };
    }
    if let Some(e) = e.downcast_ref::<E>() {
        return edf_code(e);
    }
    if let Some(p) = e.downcast_ref::<ictal::preprocess::PreprocessError>() {
        return preprocess_code(p);
    }
    if let Some(t) = e.downcast_ref::<ictal::train::TrainError>() {
        return train_code(t);
    }
    if let Some(m) = e.downcast_ref::<M>() {
        return model_code(m);
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "IO";
    }
    "RUNTIME"
}

fn edf_code(e: &ictal::edf::EdfError) -> &'static str {
    use ictal::edf::EdfError::*;
    match e {
        TruncatedFile { .. } => "EDF_TRUNCATED",
        MalformedField { .. } => "EDF_MALFORMED_FIELD",
        DegenerateScale { .. } => "EDF_DEGENERATE_SCALE",
        FieldOverflow { .. } => "EDF_FIELD_OVERFLOW",
        ValueOutOfPhysicalRange { .. } => "EDF_VALUE_RANGE",
        NegativeDuration { .. } => "ANN_NEGATIVE_DURATION",
        UnparsableLine { .. } => "ANN_UNPARSABLE_LINE",
        InvalidHeader(_) => "EDF_INVALID_HEADER",
    }
}

fn preprocess_code(e: &ictal::preprocess::PreprocessError) -> &'static str {
    use ictal::preprocess::PreprocessError::*;
    match e {
        TooFewChannels { .. } => "PRE_TOO_FEW_CHANNELS",
        AllZeroData => "PRE_ALL_ZERO_DATA",
        NoSeizureFile(_) => "PRE_NO_SEIZURE_FILE",
        Store(_) => "PRE_STORE",
    }
}

fn train_code(e: &ictal::train::TrainError) -> &'static str {
    use ictal::train::TrainError::*;
    match e {
        SingleClass => "TRAIN_SINGLE_CLASS",
        DivergedLoss { .. } => "TRAIN_DIVERGED_LOSS",
        EmptyRetrainSet => "TRAIN_EMPTY_RETRAIN_SET",
        Model(m) => model_code(m),
    }
}

fn model_code(e: &ictal::tcresnet::ModelError) -> &'static str {
    use ictal::tcresnet::ModelError::*;
    match e {
        ShapeMismatch { .. } => "MODEL_SHAPE_MISMATCH",
        UnfittedBatchNorm => "MODEL_UNFITTED_BN",
        AlreadyFolded => "MODEL_ALREADY_FOLDED",
        NotFolded => "MODEL_NOT_FOLDED",
        SaturationOverflow => "MODEL_SATURATION",
        Checkpoint(_) => "MODEL_CHECKPOINT",
    }
}

fn write_json<T: Serialize>(value: &T, out: Option<&PathBuf>) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => println!("{text}"),
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LutFile {
    window: usize,
    /// Decoded label per 5-bit observation index, oldest bit most
    /// significant; 32 one-bit entries.
    entries: String,
}

fn load_models_dir(
    dir: &Path,
    patient_ids: &[String],
) -> anyhow::Result<Vec<PatientModel>> {
    let mut models = Vec::new();
    for id in patient_ids {
        let ckpt = dir.join(format!("{id}.ckpt"));
        let ckpt = if ckpt.is_dir() { ckpt } else { dir.join(id) };
        if !ckpt.is_dir() {
            return Err(anyhow!("no checkpoint for patient {id} under {}", dir.display()));
        }
        let (float, _) = checkpoint::load_float(&ckpt)?;
        let quantized = if checkpoint::has_quantized(&ckpt) {
            Some(checkpoint::load_quantized(&ckpt)?)
        } else {
            None
        };
        let report: TrainReport =
            serde_json::from_str(&std::fs::read_to_string(ckpt.join("report.json"))?)
                .with_context(|| format!("report.json for {id}"))?;
        models.push(PatientModel { id: id.clone(), float, quantized, report });
    }
    Ok(models)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { cfg, out, patients, minutes, files_per_patient, seizures_per_file, seed } => {
            let mut synth_cfg = load_config(cfg.config.as_ref())?.synth;
            if let Some(v) = patients {
                synth_cfg.n_patients = v;
            }
            if let Some(v) = minutes {
                synth_cfg.minutes_per_patient = v;
            }
            if let Some(v) = files_per_patient {
                synth_cfg.files_per_patient = v;
            }
            if let Some(v) = seizures_per_file {
                synth_cfg.seizures_per_file = v;
            }
            if let Some(v) = seed {
                synth_cfg.seed = v;
            }
            let corpus = synth::generate_to_dir(&synth_cfg, &out)?;
            println!(
                "wrote {} EDF files, {} seizures -> {}",
                corpus.files.len(),
                corpus.annotations.len(),
                out.display()
            );
            Ok(())
        }
        Command::Ingest { data_dir, annotations, out } => {
            let report = pipeline::ingest_report(&data_dir, &annotations)?;
            write_json(&report, out.as_ref())
        }
        Command::Preprocess { cfg, data_dir, annotations, out, seed, calib_patients } => {
            let config = load_config(cfg.config.as_ref())?;
            let seed = seed.unwrap_or(config.train.seed);
            let calib = if calib_patients.is_empty() { config.calib_patients } else { calib_patients };
            let data = pipeline::prepare_data(&data_dir, &annotations, &config.split, &calib, seed)?;
            preprocess::save_output(&data, &out)?;
            println!(
                "dev-train {} | dev-val {} | patients {} | channels {:?} | norm {} | calib {:?} -> {}",
                data.dev_train.len(),
                data.dev_val.len(),
                data.patients.len(),
                data.selection.kept_channels.len(),
                data.norm_divisor,
                data.calib_patients,
                out.display()
            );
            Ok(())
        }
        Command::TrainBase { cfg, data, out, epochs, qat_bits, seed } => {
            let mut tc = load_config(cfg.config.as_ref())?.train;
            if let Some(v) = epochs {
                tc.epochs_base = v;
            }
            if let Some(v) = qat_bits {
                tc.qat_bits = Some(v);
            }
            if let Some(v) = seed {
                tc.seed = v;
            }
            let data = preprocess::load_output(&data)?;
            let (model, report) = train::train_base(&data.dev_train, Some(&data.dev_val), &tc)?;
            checkpoint::save_float(&model, &out, tc.qat_bits)?;
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&tc)?)?;
            println!(
                "base model -> {} | final loss {:.4} | selected w {:?}{}",
                out.display(),
                report.epoch_losses.last().copied().unwrap_or(f64::NAN),
                report.selected_weight,
                if report.selected_weight_fallback { " (fallback)" } else { "" }
            );
            Ok(())
        }
        Command::Retrain { cfg, data, base, patient, out, epochs, seed } => {
            let mut tc = load_config(cfg.config.as_ref())?.train;
            let (base_model, base_bits) = checkpoint::load_float(&base)?;
            // The base checkpoint's QAT bits carry over unless the
            // config overrides them.
            if tc.qat_bits.is_none() {
                tc.qat_bits = base_bits;
            }
            if let Some(v) = epochs {
                tc.epochs_retrain = v;
            }
            if let Some(v) = seed {
                tc.seed = v;
            }
            let data = preprocess::load_output(&data)?;
            let sets = data
                .patients
                .iter()
                .find(|p| p.id == patient)
                .ok_or_else(|| anyhow!("unknown patient {patient}"))?;
            let (model, report) =
                train::retrain_patient(&base_model, &sets.retrain_train, Some(&sets.retrain_val), &tc)?;
            checkpoint::save_float(&model, &out, tc.qat_bits)?;
            if let Some(bits) = tc.qat_bits {
                let q = pipeline::finalize_quantized(&model, &sets.retrain_train, bits)?;
                checkpoint::save_quantized(&q, &out)?;
            }
            std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "{patient} -> {} | val acc {:?}",
                out.display(),
                report.val_accuracy.map(|v| (v * 1e4).round() / 1e4)
            );
            Ok(())
        }
        Command::Calibrate { cfg, data, models, out_smoothing, out_hmm, patients } => {
            let config = load_config(cfg.config.as_ref())?;
            let mut data = preprocess::load_output(&data)?;
            if !patients.is_empty() {
                data.calib_patients = patients;
            }
            let ids: Vec<String> = data.patients.iter().map(|p| p.id.clone()).collect();
            let models = load_models_dir(&models, &ids)?;
            let hmm = pipeline::estimate_hmm(&data, &models);
            let smoothing = pipeline::run_calibration(&data, &models, &config.train)?;
            write_json(&smoothing, Some(&out_smoothing))?;
            write_json(&hmm, Some(&out_hmm))?;
            println!(
                "smoothing: sma theta {} | ewma alpha {} theta {}{} | hmm -> {}",
                smoothing.sma_threshold,
                smoothing.ewma_alpha,
                smoothing.ewma_threshold,
                if smoothing.degenerate { " (degenerate)" } else { "" },
                out_hmm.display()
            );
            Ok(())
        }
        Command::Eval { cfg, data, models, smoothing, hmm, lut, out, per_patient_csv } => {
            let config = load_config(cfg.config.as_ref())?;
            let data = preprocess::load_output(&data)?;
            let ids: Vec<String> = data.patients.iter().map(|p| p.id.clone()).collect();
            let models = load_models_dir(&models, &ids)?;
            let smoothing: SmoothingConfig =
                serde_json::from_str(&std::fs::read_to_string(&smoothing)?)?;
            let hmm: HmmParams = serde_json::from_str(&std::fs::read_to_string(&hmm)?)?;
            let lut = match lut {
                Some(path) => {
                    let f: LutFile = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
                    Some(
                        ViterbiLut::from_bit_string(&f.entries)
                            .ok_or_else(|| anyhow!("invalid LUT bit string"))?,
                    )
                }
                None => None,
            };
            let mut cfg_train = config.train;
            cfg_train.qat_bits = models.iter().find_map(|m| m.quantized.as_ref().map(|q| q.bits));
            let summary =
                pipeline::run_eval(&data, &models, &smoothing, &hmm, lut.as_ref(), &cfg_train)?;
            print_eval_block(&summary.methods);
            if let Some(csv) = per_patient_csv {
                let mut text =
                    String::from("patient,method,auc,accuracy,sensitivity,specificity,fpr\n");
                for p in &summary.per_patient {
                    for (m, r) in &p.methods {
                        text.push_str(&format!(
                            "{},{},{},{},{},{},{}\n",
                            p.id,
                            m,
                            fmt_opt(r.auc),
                            fmt_opt(r.accuracy),
                            fmt_opt(r.sensitivity),
                            fmt_opt(r.specificity),
                            fmt_opt(r.fpr)
                        ));
                    }
                }
                std::fs::write(csv, text)?;
            }
            write_json(&summary, out.as_ref())
        }
        Command::Lut { hmm, out } => {
            let hmm: HmmParams = serde_json::from_str(&std::fs::read_to_string(&hmm)?)?;
            let lut = postproc::compile_lut(&hmm);
            write_json(
                &LutFile { window: postproc::WINDOW, entries: lut.to_bit_string() },
                Some(&out),
            )?;
            println!("lut -> {}", out.display());
            Ok(())
        }
        Command::Cost { cfg, model, clock, rate, array, energy_per_mac, idle_power, calibrate_power, out } => {
            let mut op = load_config(cfg.config.as_ref())?.operating_point;
            if let Some(v) = clock {
                op.clock_hz = v;
            }
            if let Some(v) = rate {
                op.inference_rate_hz = v;
            }
            if let Some(v) = array {
                op.mac_array = v;
            }
            if let Some(v) = energy_per_mac {
                op.energy_per_mac_j = v;
            }
            if let Some(v) = idle_power {
                op.idle_power_w = v;
            }
            let model = match model {
                Some(path) => checkpoint::load_float(&path)?.0,
                None => build_tcresnet4(0),
            };
            if let Some(target) = calibrate_power {
                let report = cost::count_static(&model);
                op.energy_per_mac_j = cost::calibrate_energy_per_mac(&report, &op, target);
            }
            let summary = cost::summarize(&model, &op);
            write_json(&summary, out.as_ref())
        }
        Command::Stream { cfg, edf, data, model, method, smoothing, hmm, use_lut, speed, float, weight } => {
            let config = load_config(cfg.config.as_ref())?;
            let meta = preprocess::load_meta(&data)?;
            let (float_model, bits) = checkpoint::load_float(&model)?;
            let eval_model = if !float && checkpoint::has_quantized(&model) {
                EvalModel::Quantized(checkpoint::load_quantized(&model)?)
            } else {
                EvalModel::Float { model: float_model, qat_bits: bits }
            };
            let smoothing_cfg: SmoothingConfig = match smoothing {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?)?,
                None => SmoothingConfig::default(),
            };
            let smoother = match method.as_str() {
                "sma" => Smoother::Sma { threshold: smoothing_cfg.sma_threshold },
                "ewma" => Smoother::Ewma {
                    alpha: smoothing_cfg.ewma_alpha,
                    threshold: smoothing_cfg.ewma_threshold,
                },
                "hmm" => {
                    let hmm_path =
                        hmm.ok_or_else(|| anyhow!("--hmm is required for the hmm method"))?;
                    let hmm: HmmParams = serde_json::from_str(&std::fs::read_to_string(&hmm_path)?)?;
                    let lut = match use_lut {
                        Some(p) => {
                            let f: LutFile = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
                            Some(
                                ViterbiLut::from_bit_string(&f.entries)
                                    .ok_or_else(|| anyhow!("invalid LUT bit string"))?,
                            )
                        }
                        None => None,
                    };
                    Smoother::Hmm { hmm, lut }
                }
                other => return Err(anyhow!("unknown method {other:?} (hmm, sma, ewma)")),
            };
            let rec = ictal::edf::parse_edf(&std::fs::read(&edf)?)?;
            let w = weight.unwrap_or(config.train.seizure_weight);
            let delay = if speed > 0.0 {
                Some(std::time::Duration::from_secs_f64(
                    ictal::preprocess::FRAGMENT_SECONDS / speed,
                ))
            } else {
                None
            };
            pipeline::stream_recording(
                &rec,
                &meta.channels,
                meta.norm_divisor,
                &eval_model,
                w,
                &smoother,
                |line| {
                    println!(
                        "t={:.1} p={:.6} raw={} smoothed={}",
                        line.t_s, line.p_ictal, line.raw, line.smoothed
                    );
                    if let Some(d) = delay {
                        std::thread::sleep(d);
                    }
                },
            )?;
            Ok(())
        }
        Command::ReproduceChbmit { cfg, data_dir, annotations, workdir, bits, seed } => {
            let config = load_config(cfg.config.as_ref())?;
            let mut tc = config.train;
            tc.qat_bits = if bits == 0 { None } else { Some(bits) };
            if let Some(v) = seed {
                tc.seed = v;
            }
            std::fs::create_dir_all(&workdir)?;
            eprintln!(
                "full protocol: {} base epochs @ batch {}, {} retrain epochs @ batch {}, qat {:?}",
                tc.epochs_base, tc.batch_base, tc.epochs_retrain, tc.batch_retrain, tc.qat_bits
            );
            let data =
                pipeline::prepare_data(&data_dir, &annotations, &config.split, &config.calib_patients, tc.seed)?;
            let run = pipeline::run_training_stage(&data, &tc)?;
            write_json(&run.eval, Some(&workdir.join("report.json")))?;
            print_eval_block(&run.eval.methods);
            // Published reference values for the quantized (4-bit) and
            // float HMM configurations.
            let (ref_acc, ref_sens, ref_auc) = if tc.qat_bits == Some(4) {
                (0.9528, 0.9234, 0.9384)
            } else {
                (0.9784, 0.9267, 0.9530)
            };
            let hmm_report = &run.eval.methods["hmm"];
            let mut ok = true;
            let mut check = |name: &str, got: Option<f64>, want: f64, tol: f64| {
                let g = got.unwrap_or(f64::NAN);
                let pass = (g - want).abs() <= tol;
                ok &= pass;
                println!(
                    "{}: {:.4} vs reference {:.4} (tolerance {:.2}) -> {}",
                    name,
                    g,
                    want,
                    tol,
                    if pass { "PASS" } else { "FAIL" }
                );
            };
            check("hmm accuracy", hmm_report.accuracy, ref_acc, 0.03);
            check("hmm sensitivity", hmm_report.sensitivity, ref_sens, 0.03);
            check("hmm auc", hmm_report.auc, ref_auc, 0.03);
            println!(
                "mean hmm delay: {:?} s (reference 4.41 s, informational)",
                hmm_report.mean_delay_s
            );
            if !ok {
                return Err(anyhow!("reproduction outside tolerance; see report"));
            }
            Ok(())
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn print_eval_block(methods: &std::collections::BTreeMap<String, MethodReport>) {
    for (name, r) in methods {
        println!(
            "{name}: accuracy={} sensitivity={} specificity={} fpr={} auc={} mean_delay_s={} missed={}/{}",
            fmt_opt(r.accuracy),
            fmt_opt(r.sensitivity),
            fmt_opt(r.specificity),
            fmt_opt(r.fpr),
            fmt_opt(r.auc),
            fmt_opt(r.mean_delay_s),
            r.missed_seizures,
            r.n_seizures
        );
    }
}
