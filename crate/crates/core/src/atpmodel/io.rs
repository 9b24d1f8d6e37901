//! JSON model files.
//!
//! ```json
//! {"meta": {"format_version": 1, "dof": 3, "steps": 50, "k_z": 5, "k_c": 4,
//!           "workspace_dim": 2, "chain": {...}, "config_fingerprint": "…",
//!           "per_unit_kl": [...]},
//!  "encoder": [{"rows": 300, "cols": 150, "activation": "relu",
//!               "weight": [row-major], "bias": [...]}, ...],
//!  "decoder": [...]}
//! ```

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{AtpModel, ModelDims, ModelMeta};
use crate::error::{AtpError, Result};
use crate::kinematics::KinematicChain;
use crate::neuralnet::{Activation, DenseLayer, DenseNet};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaRecord {
    format_version: u32,
    dof: usize,
    steps: usize,
    k_z: usize,
    k_c: usize,
    workspace_dim: usize,
    chain: KinematicChain,
    config_fingerprint: Option<String>,
    per_unit_kl: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    rows: usize,
    cols: usize,
    activation: Activation,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    meta: MetaRecord,
    encoder: Vec<LayerRecord>,
    decoder: Vec<LayerRecord>,
}

fn layer_records(net: &DenseNet) -> Vec<LayerRecord> {
    net.layers()
        .iter()
        .map(|l| {
            let mut weight = Vec::with_capacity(l.weight.len());
            for r in 0..l.weight.nrows() {
                weight.extend(l.weight.row(r).iter());
            }
            LayerRecord {
                rows: l.weight.nrows(),
                cols: l.weight.ncols(),
                activation: l.activation,
                weight,
                bias: l.bias.iter().copied().collect(),
            }
        })
        .collect()
}

fn net_from_records(records: Vec<LayerRecord>, which: &str) -> Result<DenseNet> {
    let layers = records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            if r.weight.len() != r.rows * r.cols || r.bias.len() != r.rows {
                return Err(AtpError::Format(format!("{which} layer {i} has inconsistent shapes")));
            }
            Ok(DenseLayer {
                weight: DMatrix::from_row_slice(r.rows, r.cols, &r.weight),
                bias: DVector::from_vec(r.bias),
                activation: r.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    DenseNet::from_layers(layers).map_err(|e| AtpError::Format(format!("{which}: {e}")))
}

pub fn model_to_json(model: &AtpModel) -> Result<String> {
    let d = model.dims;
    let file = ModelFile {
        meta: MetaRecord {
            format_version: MODEL_FORMAT_VERSION,
            dof: d.dof,
            steps: d.steps,
            k_z: d.k_z,
            k_c: d.k_c,
            workspace_dim: d.workspace_dim,
            chain: model.chain.clone(),
            config_fingerprint: model.meta.config_fingerprint.clone(),
            per_unit_kl: model.meta.per_unit_kl.clone(),
        },
        encoder: layer_records(&model.encoder),
        decoder: layer_records(&model.decoder),
    };
    Ok(serde_json::to_string(&file)?)
}

pub fn model_from_json(text: &str) -> Result<AtpModel> {
    let file: ModelFile = serde_json::from_str(text)?;
    let meta = file.meta;
    if meta.format_version != MODEL_FORMAT_VERSION {
        return Err(AtpError::Format(format!(
            "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let dims = ModelDims {
        dof: meta.dof,
        steps: meta.steps,
        k_z: meta.k_z,
        k_c: meta.k_c,
        workspace_dim: meta.workspace_dim,
    };
    let encoder = net_from_records(file.encoder, "encoder")?;
    let decoder = net_from_records(file.decoder, "decoder")?;
    AtpModel::from_parts(
        dims,
        meta.chain,
        encoder,
        decoder,
        ModelMeta {
            config_fingerprint: meta.config_fingerprint,
            per_unit_kl: meta.per_unit_kl,
        },
    )
}

pub fn save_model(model: &AtpModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(model)?)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<AtpModel> {
    model_from_json(&fs::read_to_string(path)?)
}

/// Load a model and require it to match `chain`.
pub fn load_model_for_chain(path: &Path, chain: &KinematicChain) -> Result<AtpModel> {
    let model = load_model(path)?;
    if model.dims.dof != chain.dof() {
        return Err(AtpError::DimensionMismatch {
            context: "model dof vs requested chain",
            expected: chain.dof(),
            actual: model.dims.dof,
        });
    }
    if model.dims.workspace_dim != chain.workspace_dim() {
        return Err(AtpError::DimensionMismatch {
            context: "model workspace vs requested chain",
            expected: chain.workspace_dim(),
            actual: model.dims.workspace_dim,
        });
    }
    Ok(model)
}
