//! Weight file container.
//!
//! Layout: magic `AFH1`, little-endian u64 manifest length, JSON manifest,
//! then concatenated little-endian f32 blobs. Manifest offsets are byte
//! offsets into the blob section. Adam moments are stored as extra blobs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{AdamState, ModelParams, ParamKind, Tensor};
use super::{NetConfig, NetError, Result, TrainConfig};
use crate::Scalar;

pub const MAGIC: &[u8; 4] = b"AFH1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub moments_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub net_config: NetConfig,
    pub train_config: TrainConfig,
    pub seed: u64,
    pub config_hash: Option<String>,
    pub best_epoch: Option<usize>,
    pub adam_step: u64,
    pub tensors: Vec<BlobEntry>,
}

/// Metadata stored next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMeta {
    pub net_config: NetConfig,
    pub train_config: TrainConfig,
    pub config_hash: Option<String>,
    pub best_epoch: Option<usize>,
}

fn push_f32<T: Scalar>(buf: &mut Vec<u8>, xs: &[T]) {
    for x in xs {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
}

pub fn encode<T: Scalar, W: Write>(
    mut w: W,
    params: &ModelParams<T>,
    meta: &WeightMeta,
) -> Result<()> {
    let mut blobs = Vec::new();
    let mut entries = Vec::with_capacity(params.tensors.len());
    for (i, t) in params.tensors.iter().enumerate() {
        let offset = blobs.len() as u64;
        push_f32(&mut blobs, &t.data);
        let moments_offset = blobs.len() as u64;
        push_f32(&mut blobs, &params.adam.m[i]);
        push_f32(&mut blobs, &params.adam.v[i]);
        entries.push(BlobEntry {
            name: t.name.clone(),
            kind: t.kind,
            shape: t.shape.clone(),
            dtype: "f32".into(),
            offset,
            moments_offset,
        });
    }
    let manifest = Manifest {
        format: "AFH1".into(),
        net_config: meta.net_config.clone(),
        train_config: meta.train_config.clone(),
        seed: meta.train_config.seed,
        config_hash: meta.config_hash.clone(),
        best_epoch: meta.best_epoch,
        adam_step: params.adam.step,
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| NetError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&blobs)?;
    Ok(())
}

fn read_f32s(blobs: &[u8], offset: u64, n: usize, name: &str) -> Result<Vec<f32>> {
    let start = usize::try_from(offset)
        .map_err(|_| NetError::Format(format!("{name}: offset overflow")))?;
    let end = start + n * 4;
    if end > blobs.len() {
        return Err(NetError::Format(format!(
            "{name}: blob exceeds file ({end} > {})",
            blobs.len()
        )));
    }
    Ok(blobs[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn decode<R: Read>(mut r: R) -> Result<(ModelParams<f32>, WeightMeta)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| NetError::Format("truncated header".into()))?;
    if &head[..4] != MAGIC {
        return Err(NetError::Format("bad magic (expected AFH1)".into()));
    }
    let len = u64::from_le_bytes(head[4..12].try_into().expect("8 bytes")) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| NetError::Format("truncated manifest".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&json).map_err(|e| NetError::Format(e.to_string()))?;
    let mut blobs = Vec::new();
    r.read_to_end(&mut blobs)?;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(NetError::Format(format!(
                "{}: unsupported dtype {}",
                e.name, e.dtype
            )));
        }
        let n: usize = e.shape.iter().product();
        tensors.push(Tensor {
            name: e.name.clone(),
            kind: e.kind,
            shape: e.shape.clone(),
            data: read_f32s(&blobs, e.offset, n, &e.name)?,
        });
        let mv = read_f32s(&blobs, e.moments_offset, 2 * n, &e.name)?;
        m.push(mv[..n].to_vec());
        v.push(mv[n..].to_vec());
    }
    let params = ModelParams {
        tensors,
        adam: AdamState {
            step: manifest.adam_step,
            m,
            v,
        },
    };
    let meta = WeightMeta {
        net_config: manifest.net_config,
        train_config: manifest.train_config,
        config_hash: manifest.config_hash,
        best_epoch: manifest.best_epoch,
    };
    Ok((params, meta))
}

pub fn save<T: Scalar>(path: &Path, params: &ModelParams<T>, meta: &WeightMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    encode(&mut w, params, meta)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, WeightMeta)> {
    decode(BufReader::new(File::open(path)?))
}
