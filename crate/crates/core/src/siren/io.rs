//! Parameter files: one line of JSON metadata, then the raw little-endian
//! `f32` payload (per layer: weights row-major, then biases).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, MlpParams};
use crate::error::{Error, Result};

pub const PARAMS_VERSION: u32 = 1;
const FORMAT: &str = "cine-inr-siren";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    sizes: Vec<usize>,
    omega0: f64,
    activation: Activation,
    count: usize,
}

pub fn encode_params(params: &MlpParams) -> Vec<u8> {
    let header = Header {
        format: FORMAT.into(),
        version: PARAMS_VERSION,
        sizes: params.sizes(),
        omega0: params.omega0,
        activation: params.activation,
        count: params.num_params(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for l in &params.layers {
        for v in l.weights.iter().chain(&l.bias) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> Result<MlpParams> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Params("missing header line".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])?;
    if header.format != FORMAT {
        return Err(Error::Params(format!("unknown format `{}`", header.format)));
    }
    if header.version != PARAMS_VERSION {
        return Err(Error::Params(format!(
            "unsupported version {} (expected {PARAMS_VERSION})",
            header.version
        )));
    }
    if header.sizes.len() < 2 || header.sizes[0] != 3 || *header.sizes.last().unwrap() != 3 {
        return Err(Error::Params(format!("invalid layer sizes {:?}", header.sizes)));
    }
    let expected: usize = header.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    if expected != header.count {
        return Err(Error::Params(format!(
            "layer sizes imply {expected} parameters, header says {}",
            header.count
        )));
    }
    let payload = &bytes[nl + 1..];
    if payload.len() != 4 * expected {
        return Err(Error::Params(format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            4 * expected
        )));
    }
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let layers = header
        .sizes
        .windows(2)
        .map(|w| {
            let (n_in, n_out) = (w[0], w[1]);
            Layer {
                n_in,
                n_out,
                weights: values.by_ref().take(n_in * n_out).collect(),
                bias: values.by_ref().take(n_out).collect(),
            }
        })
        .collect();
    let params = MlpParams {
        omega0: header.omega0,
        activation: header.activation,
        layers,
    };
    if !params.is_finite() || !(params.omega0 > 0.0) {
        return Err(Error::Params("non-finite parameters or non-positive omega0".into()));
    }
    Ok(params)
}

pub fn save_params(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&bytes)
}
