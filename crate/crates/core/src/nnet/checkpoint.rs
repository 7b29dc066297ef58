//! Binary checkpoint format.
//!
//! Layout (little endian): the magic `ROIDET1`, a `u32` header length, a
//! JSON [`CheckpointMeta`] header, a `u32` tensor count, then per tensor a
//! `u32` rank, `u32` dims and `f64` values. Values are always stored as
//! `f64` so checkpoints move freely between scalar types.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{DetectorConfig, DetectorModel};
use super::tensor::Tensor;
use crate::anchors::AnchorDesign;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 7] = b"ROIDET1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub detector: DetectorConfig,
    pub anchors: AnchorDesign,
}

pub fn encode_checkpoint<T: Scalar>(model: &DetectorModel<T>, anchors: &AnchorDesign) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        detector: model.config.clone(),
        anchors: anchors.clone(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + header.len() + model.n_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        let shape = p.value.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(DetectorModel<T>, AnchorDesign)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a roidet checkpoint (bad magic)".into()));
    }
    let hlen = r.u32()?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    let expected = DetectorModel::<T>::expected_shapes(&meta.detector)?;
    let n = r.u32()?;
    if n != expected.len() {
        return Err(Error::Checkpoint(format!(
            "header declares {} tensors, file holds {n}",
            expected.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for (name, shape) in &expected {
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if &dims != shape {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {shape:?}, found {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        let data = (0..numel)
            .map(|_| r.f64().map(T::of))
            .collect::<Result<Vec<_>>>()?;
        values.push(Tensor::new(dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let anchors_per_cell = meta.anchors.anchors_per_cell()?;
    if anchors_per_cell != meta.detector.anchors_per_cell {
        return Err(Error::Checkpoint(format!(
            "anchor design has {anchors_per_cell} anchors per cell, detector head {}",
            meta.detector.anchors_per_cell
        )));
    }
    Ok((DetectorModel::from_params(meta.detector, values)?, meta.anchors))
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &DetectorModel<T>,
    anchors: &AnchorDesign,
) -> Result<()> {
    let bytes = encode_checkpoint(model, anchors)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(DetectorModel<T>, AnchorDesign)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
