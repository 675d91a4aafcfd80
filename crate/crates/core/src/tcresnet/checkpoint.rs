//! Checkpoint format: a directory holding a JSON manifest plus one flat
//! little-endian binary file per tensor.
//!
//! Float model (`model.json` + `<name>.f32`): 32-bit reals per value.
//! Quantized model (`qmodel.json` + `<name>.codes.i16` / `.bias.i32`):
//! weight codes as 16-bit integers (10-bit codes do not fit a byte),
//! bias codes as 32-bit integers at the accumulator scale.

use super::quantized::{FeatureSpecs, QConv, QLinear, QuantizedModel};
use super::{BatchNormLayer, Conv1dLayer, LinearLayer, ModelError, TcResNetModel};
use crate::quant::QuantSpec;
use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

fn err(e: impl std::fmt::Display) -> ModelError {
    ModelError::Checkpoint(e.to_string())
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct FloatManifest {
    format: String,
    folded: bool,
    strict_input_length: bool,
    dropout_p: f64,
    bn_eps: f64,
    bn_momentum: f64,
    bn_fitted: [bool; 3],
    qat_bits: Option<u8>,
    tensors: Vec<TensorEntry>,
}

fn write_f32(path: &Path, values: &[f64]) -> Result<(), ModelError> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(err)
}

fn read_f32(path: &Path, len: usize) -> Result<Vec<f64>, ModelError> {
    let bytes = fs::read(path).map_err(err)?;
    if bytes.len() != len * 4 {
        return Err(err(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

/// Save a float model (training metadata included) into `dir`.
pub fn save_float(model: &TcResNetModel, dir: &Path, qat_bits: Option<u8>) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(err)?;
    let mut tensors = Vec::new();
    for (name, shape, values) in model.named_tensors() {
        let file = format!("{name}.f32");
        write_f32(&dir.join(&file), &values)?;
        tensors.push(TensorEntry { name, shape, file });
    }
    let manifest = FloatManifest {
        format: "tcresnet4-float".into(),
        folded: model.folded,
        strict_input_length: model.strict_input_length,
        dropout_p: model.dropout_p,
        bn_eps: model.bn1.eps,
        bn_momentum: model.bn1.momentum,
        bn_fitted: [model.bn1.fitted, model.bn2.fitted, model.bn_sc.fitted],
        qat_bits,
        tensors,
    };
    fs::write(
        dir.join("model.json"),
        serde_json::to_string_pretty(&manifest).map_err(err)?,
    )
    .map_err(err)
}

/// Load a float model. Returns the model and the QAT bit width it was
/// trained with, if any.
pub fn load_float(dir: &Path) -> Result<(TcResNetModel, Option<u8>), ModelError> {
    let manifest: FloatManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("model.json")).map_err(err)?)
            .map_err(err)?;
    let mut tensors = std::collections::HashMap::new();
    for t in &manifest.tensors {
        let len: usize = t.shape.iter().product();
        tensors.insert(t.name.clone(), (t.shape.clone(), read_f32(&dir.join(&t.file), len)?));
    }
    let mut take3 = |name: &str| -> Result<Array3<f64>, ModelError> {
        let (shape, vals) = tensors.remove(name).ok_or_else(|| err(format!("missing {name}")))?;
        Array3::from_shape_vec((shape[0], shape[1], shape[2]), vals).map_err(err)
    };
    let conv = |w: Array3<f64>,
                bias: Option<Array1<f64>>,
                stride: usize,
                padding: usize| Conv1dLayer { weight: w, bias, stride, padding };

    let w0 = take3("conv0.weight")?;
    let w1 = take3("conv1.weight")?;
    let w2 = take3("conv2.weight")?;
    let wsc = take3("conv_sc.weight")?;
    let mut take1 = |name: &str| -> Result<Option<Array1<f64>>, ModelError> {
        Ok(tensors.remove(name).map(|(_, vals)| Array1::from_vec(vals)))
    };
    let b0 = take1("conv0.bias")?;
    let b1 = take1("conv1.bias")?;
    let b2 = take1("conv2.bias")?;
    let bsc = take1("conv_sc.bias")?;
    let (lshape, lvals) = tensors
        .remove("linear.weight")
        .ok_or_else(|| err("missing linear.weight"))?;
    let linear = LinearLayer {
        weight: Array2::from_shape_vec((lshape[0], lshape[1]), lvals).map_err(err)?,
    };
    let mut bn = |prefix: &str, fitted: bool| -> Result<BatchNormLayer, ModelError> {
        let mut one = |suffix: &str| -> Result<Array1<f64>, ModelError> {
            tensors
                .remove(&format!("{prefix}.{suffix}"))
                .map(|(_, vals)| Array1::from_vec(vals))
                .ok_or_else(|| err(format!("missing {prefix}.{suffix}")))
        };
        Ok(BatchNormLayer {
            gamma: one("gamma")?,
            beta: one("beta")?,
            running_mean: one("running_mean")?,
            running_var: one("running_var")?,
            eps: manifest.bn_eps,
            momentum: manifest.bn_momentum,
            fitted,
        })
    };
    let model = TcResNetModel {
        conv0: conv(w0, b0, 2, if manifest.strict_input_length { 0 } else { 1 }),
        conv1: conv(w1, b1, 2, 4),
        bn1: bn("bn1", manifest.bn_fitted[0])?,
        conv2: conv(w2, b2, 1, 4),
        bn2: bn("bn2", manifest.bn_fitted[1])?,
        conv_sc: conv(wsc, bsc, 2, 0),
        bn_sc: bn("bn_sc", manifest.bn_fitted[2])?,
        linear,
        dropout_p: manifest.dropout_p,
        strict_input_length: manifest.strict_input_length,
        folded: manifest.folded,
    };
    Ok((model, manifest.qat_bits))
}

#[derive(Serialize, Deserialize)]
struct QLayerEntry {
    name: String,
    shape: Vec<usize>,
    bits: u8,
    scale_exp: i32,
    codes_file: String,
    bias_file: Option<String>,
    bias_scale_exp: Option<i32>,
    stride: usize,
    padding: usize,
}

#[derive(Serialize, Deserialize)]
struct QuantManifest {
    format: String,
    bits: u8,
    features: FeatureSpecs,
    layers: Vec<QLayerEntry>,
}

fn write_i16(path: &Path, codes: &[i64]) -> Result<(), ModelError> {
    let mut bytes = Vec::with_capacity(codes.len() * 2);
    for &c in codes {
        let v = i16::try_from(c).map_err(|_| err(format!("code {c} exceeds i16")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(err)
}

fn read_i16(path: &Path, len: usize) -> Result<Vec<i64>, ModelError> {
    let bytes = fs::read(path).map_err(err)?;
    if bytes.len() != len * 2 {
        return Err(err(format!("{}: bad code array size", path.display())));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as i64)
        .collect())
}

fn write_i32(path: &Path, codes: &[i64]) -> Result<(), ModelError> {
    let mut bytes = Vec::with_capacity(codes.len() * 4);
    for &c in codes {
        let v = i32::try_from(c).map_err(|_| err(format!("bias code {c} exceeds i32")))?;
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(err)
}

fn read_i32(path: &Path, len: usize) -> Result<Vec<i64>, ModelError> {
    let bytes = fs::read(path).map_err(err)?;
    if bytes.len() != len * 4 {
        return Err(err(format!("{}: bad bias array size", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]) as i64)
        .collect())
}

/// Save the quantized model alongside (or instead of) the float one.
pub fn save_quantized(q: &QuantizedModel, dir: &Path) -> Result<(), ModelError> {
    fs::create_dir_all(dir).map_err(err)?;
    let mut layers = Vec::new();
    let mut conv = |name: &str, c: &QConv| -> Result<(), ModelError> {
        let codes_file = format!("{name}.codes.i16");
        write_i16(&dir.join(&codes_file), c.codes.as_slice().unwrap())?;
        let bias_file = match &c.bias_codes {
            Some(b) => {
                let f = format!("{name}.bias.i32");
                write_i32(&dir.join(&f), b.as_slice().unwrap())?;
                Some(f)
            }
            None => None,
        };
        layers.push(QLayerEntry {
            name: name.to_string(),
            shape: c.codes.shape().to_vec(),
            bits: c.spec.bits,
            scale_exp: c.spec.scale_exp,
            codes_file,
            bias_scale_exp: bias_file.as_ref().map(|_| 0),
            bias_file,
            stride: c.stride,
            padding: c.padding,
        });
        Ok(())
    };
    conv("conv0", &q.conv0)?;
    conv("conv1", &q.conv1)?;
    conv("conv2", &q.conv2)?;
    conv("conv_sc", &q.conv_sc)?;
    let codes_file = "linear.codes.i16".to_string();
    write_i16(&dir.join(&codes_file), q.linear.codes.as_slice().unwrap())?;
    layers.push(QLayerEntry {
        name: "linear".into(),
        shape: q.linear.codes.shape().to_vec(),
        bits: q.linear.spec.bits,
        scale_exp: q.linear.spec.scale_exp,
        codes_file,
        bias_file: None,
        bias_scale_exp: None,
        stride: 1,
        padding: 0,
    });
    let manifest = QuantManifest {
        format: "tcresnet4-quantized".into(),
        bits: q.bits,
        features: q.features,
        layers,
    };
    fs::write(
        dir.join("qmodel.json"),
        serde_json::to_string_pretty(&manifest).map_err(err)?,
    )
    .map_err(err)
}

pub fn has_quantized(dir: &Path) -> bool {
    dir.join("qmodel.json").is_file()
}

pub fn load_quantized(dir: &Path) -> Result<QuantizedModel, ModelError> {
    let manifest: QuantManifest =
        serde_json::from_str(&fs::read_to_string(dir.join("qmodel.json")).map_err(err)?)
            .map_err(err)?;
    let mut convs = std::collections::HashMap::new();
    let mut linear = None;
    for entry in &manifest.layers {
        let len: usize = entry.shape.iter().product();
        let codes = read_i16(&dir.join(&entry.codes_file), len)?;
        if entry.name == "linear" {
            linear = Some(QLinear {
                codes: Array2::from_shape_vec((entry.shape[0], entry.shape[1]), codes)
                    .map_err(err)?,
                spec: QuantSpec::new(entry.bits, entry.scale_exp),
            });
        } else {
            let bias_codes = match &entry.bias_file {
                Some(f) => Some(Array1::from_vec(read_i32(&dir.join(f), entry.shape[0])?)),
                None => None,
            };
            convs.insert(
                entry.name.clone(),
                QConv {
                    codes: Array3::from_shape_vec(
                        (entry.shape[0], entry.shape[1], entry.shape[2]),
                        codes,
                    )
                    .map_err(err)?,
                    spec: QuantSpec::new(entry.bits, entry.scale_exp),
                    bias_codes,
                    stride: entry.stride,
                    padding: entry.padding,
                },
            );
        }
    }
    let mut take = |name: &str| convs.remove(name).ok_or_else(|| err(format!("missing {name}")));
    Ok(QuantizedModel {
        bits: manifest.bits,
        conv0: take("conv0")?,
        conv1: take("conv1")?,
        conv2: take("conv2")?,
        conv_sc: take("conv_sc")?,
        linear: linear.ok_or_else(|| err("missing linear"))?,
        features: manifest.features,
    })
}
