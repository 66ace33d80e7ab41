//! "APCK" checkpoint files: a flat list of named f32 tensors. Model
//! parameters use their canonical names; optimizer velocities ride along as
//! `vel.<name>` and scalar metadata as `meta.<key>`, so one file restores a
//! training run exactly.

use std::io::{Read, Write};
use std::path::Path;

use crate::diffcore::DiffTensor;
use crate::model::PoseNetParams;

const APCK_MAGIC: &[u8; 4] = b"APCK";
const APCK_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint file: {0}")]
    Format(String),
    #[error("checkpoint/model mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Values as stored: 32-bit floats.
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn from_f64(name: &str, shape: &[usize], data: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn scalar(name: &str, value: f64) -> Self {
        Self::from_f64(name, &[1], &[value])
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

pub fn write_apck(path: &Path, records: &[TensorRecord]) -> Result<(), CheckpointError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(APCK_MAGIC);
    buf.extend_from_slice(&APCK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
        for &e in &r.shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        let elems: usize = r.shape.iter().product();
        if elems != r.data.len() {
            return Err(CheckpointError::Format(format!(
                "record {}: shape {:?} vs {} values",
                r.name,
                r.shape,
                r.data.len()
            )));
        }
        for &v in &r.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("apck.tmp");
    std::fs::File::create(&tmp)?.write_all(&buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_apck(path: &Path) -> Result<Vec<TensorRecord>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *off + n > bytes.len() {
            return Err(CheckpointError::Format("truncated file".into()));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    if take(&mut off, 4)? != APCK_MAGIC {
        return Err(CheckpointError::Format("bad magic".into()));
    }
    let version = u32_at(take(&mut off, 4)?);
    if version != APCK_VERSION {
        return Err(CheckpointError::Format(format!("unsupported version {version}")));
    }
    let count = u32_at(take(&mut off, 4)?) as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32_at(take(&mut off, 4)?) as usize;
        let name = String::from_utf8(take(&mut off, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Format("record name is not UTF-8".into()))?;
        let rank = u32_at(take(&mut off, 4)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32_at(take(&mut off, 4)?) as usize);
        }
        let elems: usize = shape.iter().product();
        let data: Vec<f32> = take(&mut off, elems * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        records.push(TensorRecord { name, shape, data });
    }
    if off != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes".into()));
    }
    Ok(records)
}

/// Records for the model parameters in canonical order.
pub fn params_to_records(params: &PoseNetParams) -> Vec<TensorRecord> {
    params
        .named_tensors()
        .into_iter()
        .map(|(name, t)| TensorRecord::from_f64(&name, &t.shape, &t.data))
        .collect()
}

/// Loads parameter values into an existing (shape-defining) parameter set.
pub fn records_into_params(
    records: &[TensorRecord],
    params: &mut PoseNetParams,
) -> Result<(), CheckpointError> {
    for (name, tensor) in params.named_tensors_mut() {
        let record = records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
        if record.shape != tensor.shape {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {name}: checkpoint shape {:?} vs model {:?}",
                record.shape, tensor.shape
            )));
        }
        tensor.data = record.as_f64();
    }
    Ok(())
}

pub fn find_record<'a>(records: &'a [TensorRecord], name: &str) -> Option<&'a TensorRecord> {
    records.iter().find(|r| r.name == name)
}

/// Convenience for writing a bare parameter checkpoint (no optimizer state).
pub fn save_params(path: &Path, params: &PoseNetParams) -> Result<(), CheckpointError> {
    write_apck(path, &params_to_records(params))
}

pub fn load_params_into(path: &Path, params: &mut PoseNetParams) -> Result<(), CheckpointError> {
    let records = read_apck(path)?;
    records_into_params(&records, params)
}

pub fn tensor_from_record(record: &TensorRecord) -> DiffTensor {
    DiffTensor::new(record.shape.clone(), record.as_f64()).expect("record is self-consistent")
}
