//! Binary parameter snapshots: magic, length-prefixed JSON header, then
//! `f32` little-endian parameter arrays in declaration order.

use crate::error::{Error, Result};
use crate::nn::{MlpArch, MlpParams, ParamTensors};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"MOGRPO01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: MlpArch,
    pub step: u64,
    pub seed: u64,
    pub param_count: usize,
    pub dtype: String,
}

pub fn write_checkpoint<W: Write>(params: &MlpParams, step: u64, seed: u64, mut out: W) -> Result<()> {
    let header = CheckpointHeader {
        arch: params.arch().clone(),
        step,
        seed,
        param_count: params.num_params(),
        dtype: "f32le".into(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    for t in params.tensors() {
        for &v in t.data() {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(CheckpointHeader, MlpParams)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::invalid("bad checkpoint magic"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len);
    if len > 1 << 20 {
        return Err(Error::invalid(format!("checkpoint header of {len} bytes is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    input.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.dtype != "f32le" {
        return Err(Error::invalid(format!("unsupported dtype {}", header.dtype)));
    }
    if header.param_count != header.arch.param_count() {
        return Err(Error::invalid(format!(
            "header claims {} parameters but the architecture has {}",
            header.param_count,
            header.arch.param_count()
        )));
    }
    let mut tensors = Vec::new();
    for shape in header.arch.param_shapes() {
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; 4 * n];
        input.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::invalid("trailing bytes after checkpoint parameters"));
    }
    let params = MlpParams::from_tensors(header.arch.clone(), tensors)?;
    Ok((header, params))
}

pub fn save(path: &Path, params: &MlpParams, step: u64, seed: u64) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(params, step, seed, BufWriter::new(file))
}

pub fn load(path: &Path) -> Result<(CheckpointHeader, MlpParams)> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file)).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Round every parameter through `f32`, matching what a save/load cycle yields.
pub fn narrow_to_f32(params: &mut MlpParams) {
    for t in params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
