//! Parameter checkpoint container.
//!
//! JSON document with a format version, the element dtype, the embedded
//! network config and one record per parameter. Values and momentum buffers
//! are stored as base64 little-endian bytes, so a save/load cycle is
//! bit-exact.

use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use super::tensor::{Parameter, Real, Tensor};
use crate::error::{AodError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values_b64: String,
    pub velocity_b64: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u64,
    pub dtype: String,
    pub network_config: serde_json::Value,
    /// Number of completed optimizer steps.
    pub iteration: u64,
    /// Extra trainer state needed to resume (baseline accumulators, ...).
    #[serde(default)]
    pub state: serde_json::Value,
    pub params: Vec<ParamRecord>,
}

fn encode<R: Real>(t: &Tensor<R>) -> String {
    let mut bytes = Vec::with_capacity(t.len() * R::BYTES);
    for &v in t.data() {
        v.write_le(&mut bytes);
    }
    B64.encode(bytes)
}

fn decode<R: Real>(b64: &str, shape: &[usize], dtype_bytes: usize, what: &str) -> Result<Tensor<R>> {
    let bytes = B64
        .decode(b64)
        .map_err(|e| AodError::parse(what, e.to_string()))?;
    let n: usize = shape.iter().product();
    if bytes.len() != n * dtype_bytes {
        return Err(AodError::parse(what, format!("expected {} bytes, got {}", n * dtype_bytes, bytes.len())));
    }
    let data = match dtype_bytes {
        b if b == R::BYTES => bytes.chunks_exact(b).map(R::read_le).collect(),
        8 => bytes.chunks_exact(8).map(|c| R::of(f64::read_le(c))).collect(),
        4 => bytes.chunks_exact(4).map(|c| R::of(f32::read_le(c) as f64)).collect(),
        _ => unreachable!(),
    };
    Tensor::new(shape.to_vec(), data)
}

impl Checkpoint {
    pub fn from_params<R: Real>(
        params: &[&Parameter<R>],
        network_config: serde_json::Value,
        iteration: u64,
        state: serde_json::Value,
    ) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            dtype: R::DTYPE.to_string(),
            network_config,
            iteration,
            state,
            params: params
                .iter()
                .map(|p| ParamRecord {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    values_b64: encode(&p.value),
                    velocity_b64: encode(&p.velocity),
                })
                .collect(),
        }
    }

    /// Decodes the parameters as `R`; a dtype other than `R` is converted
    /// through `f64`.
    pub fn params<R: Real>(&self) -> Result<Vec<Parameter<R>>> {
        let bytes = match self.dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(AodError::parse("dtype", format!("unknown dtype `{other}`"))),
        };
        self.params
            .iter()
            .map(|r| {
                let value = decode::<R>(&r.values_b64, &r.shape, bytes, &r.name)?;
                let velocity = decode::<R>(&r.velocity_b64, &r.shape, bytes, &r.name)?;
                let mut p = Parameter::new(r.name.clone(), value);
                p.velocity = velocity;
                Ok(p)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(AodError::SchemaVersion {
                found: ck.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(ck)
    }
}
