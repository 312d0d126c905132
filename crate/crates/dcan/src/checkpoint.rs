//! Model checkpoints as JSON. Floats are written with round-trip precision,
//! so loading a saved model restores it bit for bit.

use std::path::Path;

use dcan_core::{Activation, Dense, Matrix, MlpModel};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

const FORMAT: &str = "dcan-mlp";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    /// Row-major `inputs × outputs`.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    layers: Vec<LayerRecord>,
    classifier: LayerRecord,
}

fn record(d: &Dense) -> LayerRecord {
    LayerRecord {
        inputs: d.inputs(),
        outputs: d.outputs(),
        activation: d.activation,
        weight: d.weight.as_slice().to_vec(),
        bias: d.bias.clone(),
    }
}

fn dense(r: LayerRecord) -> Result<Dense> {
    Ok(Dense::new(
        Matrix::from_vec(r.inputs, r.outputs, r.weight)?,
        r.bias,
        r.activation,
    )?)
}

pub fn to_json(model: &MlpModel) -> String {
    let ckpt = Checkpoint {
        format: FORMAT.into(),
        version: VERSION,
        layers: model.layers().iter().map(record).collect(),
        classifier: record(model.classifier()),
    };
    serde_json::to_string(&ckpt).expect("checkpoint serialises")
}

pub fn from_json(text: &str) -> Result<MlpModel> {
    let ckpt: Checkpoint = serde_json::from_str(text)
        .map_err(|e| CliError::Runtime(format!("invalid checkpoint: {e}")))?;
    if ckpt.format != FORMAT || ckpt.version != VERSION {
        return Err(CliError::Runtime(format!(
            "unsupported checkpoint {} v{}",
            ckpt.format, ckpt.version
        )));
    }
    let layers = ckpt
        .layers
        .into_iter()
        .map(dense)
        .collect::<Result<Vec<_>>>()?;
    Ok(MlpModel::new(layers, dense(ckpt.classifier)?)?)
}

pub fn save(model: &MlpModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(model)).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> Result<MlpModel> {
    from_json(&std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?)
}

/// Fails unless `model` has the layer widths implied by the configuration.
pub fn check_compatible(
    model: &MlpModel,
    input_dim: usize,
    hidden: &[usize],
    class_count: usize,
) -> Result<()> {
    let mut expected = vec![input_dim];
    expected.extend_from_slice(hidden);
    expected.push(class_count);
    if model.dims() != expected {
        return Err(CliError::Runtime(format!(
            "checkpoint has layer widths {:?}, configuration needs {expected:?}",
            model.dims()
        )));
    }
    Ok(())
}
