//! Single-file model format:
//!
//! ```text
//! DAYCAST-MODEL\n
//! <one-line JSON header>\n
//! <weights: f64 little-endian, tensors in header order, row-major>
//! ```

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::network::{NetDims, Params, PARAM_NAMES};
use super::train::{Provenance, TrainedModel, TrainingLog};
use super::{ForecastError, Hyperparams, Result, ScalerParams};

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8] = b"DAYCAST-MODEL\n";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    hyperparams: Hyperparams,
    dims: NetDims,
    scaler: ScalerParams,
    log: TrainingLog,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: Option<u32>,
}

pub fn encode_model(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        format_version: MODEL_FORMAT_VERSION,
        hyperparams: model.hyperparams.clone(),
        dims: model.dims,
        scaler: model.scaler.clone(),
        log: model.log.clone(),
        provenance: model.provenance.clone(),
        tensors: PARAM_NAMES
            .iter()
            .zip(&model.params.tensors)
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ForecastError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 1 + model.params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    for t in &model.params.tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_model(bytes: &[u8]) -> Result<TrainedModel> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| ForecastError::Format("missing magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ForecastError::Format("unterminated header".into()))?;
    let (json, blob) = (&rest[..nl], &rest[nl + 1..]);
    let probe: VersionProbe =
        serde_json::from_slice(json).map_err(|e| ForecastError::Format(e.to_string()))?;
    match probe.format_version {
        None => return Err(ForecastError::Format("missing format_version".into())),
        Some(v) if v > MODEL_FORMAT_VERSION => {
            return Err(ForecastError::UnsupportedVersion {
                found: v,
                supported: MODEL_FORMAT_VERSION,
            })
        }
        Some(_) => {}
    }
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ForecastError::Format(e.to_string()))?;
    let expected = header.dims.param_shapes();
    if header.tensors.len() != expected.len() {
        return Err(ForecastError::Format("tensor directory size".into()));
    }
    let mut offset = 0;
    let mut tensors = Vec::with_capacity(expected.len());
    for ((entry, shape), name) in header.tensors.iter().zip(expected).zip(PARAM_NAMES) {
        if entry.name != name || (entry.rows, entry.cols) != shape {
            return Err(ForecastError::Format(format!(
                "unexpected tensor {}",
                entry.name
            )));
        }
        let n = entry.rows * entry.cols * 8;
        let chunk = blob
            .get(offset..offset + n)
            .ok_or_else(|| ForecastError::Format("truncated weights".into()))?;
        offset += n;
        let values = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(
            Array2::from_shape_vec(shape, values)
                .map_err(|e| ForecastError::Format(e.to_string()))?,
        );
    }
    if offset != blob.len() {
        return Err(ForecastError::Format("trailing bytes after weights".into()));
    }
    TrainedModel::new(
        header.hyperparams,
        header.scaler,
        header.dims,
        Params { tensors },
        header.log,
        header.provenance,
    )
}
