//! Encoder parameters on disk: a JSON manifest plus a little-endian `f64`
//! payload holding, per layer in order (encoder then projector), the row-major
//! weight matrix followed by the bias vector.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::mlp::{Dense, EncoderParams, Mlp};
use super::train::TrainingConfig;
use crate::error::{Error, Result};
use crate::store::{payload_path_for, read_json, resolve_payload, write_json, MANIFEST_VERSION};

pub const DTYPE_F64LE: &str = "f64le";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsManifest {
    pub version: u32,
    pub kind: String,
    pub dtype: String,
    pub payload: String,
    pub encoder_sizes: Vec<usize>,
    pub projector_sizes: Vec<usize>,
    pub training: TrainingConfig,
}

pub fn save_params(params: &EncoderParams, training: &TrainingConfig, manifest_path: impl AsRef<Path>) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let (payload_path, payload_name) = payload_path_for(manifest_path, "f64");
    let bytes: Vec<u8> = params.iter().flat_map(f64::to_le_bytes).collect();
    fs::write(&payload_path, bytes).map_err(|e| Error::io(&payload_path, e))?;
    let manifest = ParamsManifest {
        version: MANIFEST_VERSION,
        kind: "encoder".into(),
        dtype: DTYPE_F64LE.into(),
        payload: payload_name,
        encoder_sizes: params.encoder.sizes(),
        projector_sizes: params.projector.sizes(),
        training: training.clone(),
    };
    write_json(manifest_path, &manifest)
}

fn mlp_from(sizes: &[usize], values: &mut impl Iterator<Item = f64>) -> Result<Mlp> {
    let layers = sizes
        .windows(2)
        .map(|w| {
            let weight = Array2::from_shape_fn((w[1], w[0]), |_| values.next().unwrap_or(f64::NAN));
            let bias = Array1::from_shape_fn(w[1], |_| values.next().unwrap_or(f64::NAN));
            Dense { weight, bias }
        })
        .collect();
    Mlp::from_layers(layers)
}

pub fn load_params(manifest_path: impl AsRef<Path>) -> Result<(EncoderParams, ParamsManifest)> {
    let manifest_path = manifest_path.as_ref();
    let manifest: ParamsManifest = read_json(manifest_path)?;
    let bad = |reason: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason,
    };
    if manifest.version != MANIFEST_VERSION || manifest.kind != "encoder" || manifest.dtype != DTYPE_F64LE {
        return Err(bad("not a version-1 f64le encoder manifest".into()));
    }
    if manifest.encoder_sizes.len() != 4 || manifest.projector_sizes.len() < 2 {
        return Err(bad("encoder needs 3 layers and projector at least 1".into()));
    }
    let count = |s: &[usize]| s.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let expected = count(&manifest.encoder_sizes) + count(&manifest.projector_sizes);
    let payload_path = resolve_payload(manifest_path, &manifest.payload);
    let bytes = fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    if bytes.len() != expected * 8 {
        return Err(bad(format!(
            "payload has {} bytes, expected {} parameters",
            bytes.len(),
            expected
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
    let encoder = mlp_from(&manifest.encoder_sizes, &mut values)?;
    let projector = mlp_from(&manifest.projector_sizes, &mut values)?;
    Ok((EncoderParams::new(encoder, projector)?, manifest))
}
