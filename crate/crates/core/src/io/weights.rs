//! Binary checkpoint format.
//!
//! ```text
//! "OFTTA1"                    6 bytes magic
//! header_len: u32 LE          length of the JSON header
//! header: JSON (UTF-8)        tensor index and model metadata
//! payload: f32 LE             tensors back to back, at their offsets
//! crc32: u32 LE               CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! Tensor offsets are byte offsets into the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::AxisStats;
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, NetworkModel};
use crate::tensor::{Matrix, Shape4, Tensor4};

pub const MAGIC: &[u8; 6] = b"OFTTA1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    #[serde(rename = "conv.weight")]
    ConvWeight,
    #[serde(rename = "conv.bias")]
    ConvBias,
    #[serde(rename = "bn.gamma")]
    BnGamma,
    #[serde(rename = "bn.beta")]
    BnBeta,
    #[serde(rename = "bn.running_mean")]
    BnRunningMean,
    #[serde(rename = "bn.running_var")]
    BnRunningVar,
    #[serde(rename = "head.weight")]
    HeadWeight,
    #[serde(rename = "head.bias")]
    HeadBias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Training provenance stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub sources: Vec<String>,
    /// Domain this checkpoint must not be adapted on (`null` when unused).
    pub held_out: Option<String>,
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightHeader {
    pub arch: Option<ArchSpec>,
    pub input_norm: Option<AxisStats>,
    pub meta: Option<CheckpointMeta>,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded weight file: header plus one buffer per tensor entry.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile {
    pub header: WeightHeader,
    pub data: Vec<Vec<f32>>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl WeightFile {
    /// Lay tensors out back to back in the given order.
    pub fn build(
        arch: Option<ArchSpec>,
        input_norm: Option<AxisStats>,
        meta: Option<CheckpointMeta>,
        tensors: Vec<(String, TensorRole, Vec<usize>, Vec<f32>)>,
    ) -> Result<Self> {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(tensors.len());
        let mut data = Vec::with_capacity(tensors.len());
        for (name, role, shape, values) in tensors {
            let entry = TensorEntry { name, role, shape, offset };
            if entry.numel() != values.len() {
                return Err(fmt_err(format!(
                    "tensor `{}` has shape {:?} but {} values",
                    entry.name,
                    entry.shape,
                    values.len()
                )));
            }
            offset += 4 * values.len() as u64;
            entries.push(entry);
            data.push(values);
        }
        let file = Self {
            header: WeightHeader {
                arch,
                input_norm,
                meta,
                tensors: entries,
            },
            data,
        };
        file.check_index()?;
        Ok(file)
    }

    fn payload_len(&self) -> u64 {
        self.header
            .tensors
            .iter()
            .map(|t| t.offset + 4 * t.numel() as u64)
            .max()
            .unwrap_or(0)
    }

    /// Unique names and non-overlapping extents.
    fn check_index(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.header.tensors {
            if !seen.insert(t.name.as_str()) {
                return Err(fmt_err(format!("tensor `{}` listed twice", t.name)));
            }
            if t.offset % 4 != 0 {
                return Err(fmt_err(format!("tensor `{}` offset {} is not 4-byte aligned", t.name, t.offset)));
            }
        }
        let mut spans: Vec<(u64, u64, &str)> = self
            .header
            .tensors
            .iter()
            .map(|t| (t.offset, t.offset + 4 * t.numel() as u64, t.name.as_str()))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(fmt_err(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.check_index()?;
        let header = serde_json::to_vec(&self.header).map_err(|e| fmt_err(format!("header encoding: {e}")))?;
        let header_len = u32::try_from(header.len()).map_err(|_| fmt_err("header too large"))?;
        let mut payload = vec![0u8; self.payload_len() as usize];
        for (t, values) in self.header.tensors.iter().zip(&self.data) {
            let mut at = t.offset as usize;
            for v in values {
                payload[at..at + 4].copy_from_slice(&v.to_le_bytes());
                at += 4;
            }
        }
        let mut out = Vec::with_capacity(6 + 4 + header.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(fmt_err("missing OFTTA1 magic"));
        }
        let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let header_end = 10usize
            .checked_add(header_len)
            .filter(|&e| e + 4 <= bytes.len())
            .ok_or_else(|| fmt_err("header length exceeds file size"))?;
        let header: WeightHeader =
            serde_json::from_slice(&bytes[10..header_end]).map_err(|e| fmt_err(format!("header: {e}")))?;
        let payload = &bytes[header_end..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(fmt_err(format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let file = Self {
            header,
            data: Vec::new(),
        };
        file.check_index()?;
        if file.payload_len() != payload.len() as u64 {
            return Err(fmt_err(format!(
                "payload is {} bytes, index describes {}",
                payload.len(),
                file.payload_len()
            )));
        }
        let data = file
            .header
            .tensors
            .iter()
            .map(|t| {
                let start = t.offset as usize;
                payload[start..start + 4 * t.numel()]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect()
            })
            .collect();
        Ok(Self { data, ..file })
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorEntry, &[f32])> {
        self.header
            .tensors
            .iter()
            .zip(&self.data)
            .find(|(t, _)| t.name == name)
            .map(|(t, d)| (t, d.as_slice()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn from_model(model: &NetworkModel<f32>, meta: Option<CheckpointMeta>) -> Result<Self> {
        let mut tensors = Vec::new();
        for (i, b) in model.blocks.iter().enumerate() {
            let s = b.conv.weight.shape();
            let c = b.bn.channels();
            let p = format!("block{i}");
            tensors.push((format!("{p}.conv.weight"), TensorRole::ConvWeight, vec![s.batch, s.channels, s.height, s.width], b.conv.weight.data().to_vec()));
            tensors.push((format!("{p}.conv.bias"), TensorRole::ConvBias, vec![s.batch], b.conv.bias.clone()));
            tensors.push((format!("{p}.bn.gamma"), TensorRole::BnGamma, vec![c], b.bn.gamma.clone()));
            tensors.push((format!("{p}.bn.beta"), TensorRole::BnBeta, vec![c], b.bn.beta.clone()));
            tensors.push((format!("{p}.bn.running_mean"), TensorRole::BnRunningMean, vec![c], b.bn.running_mean.clone()));
            tensors.push((format!("{p}.bn.running_var"), TensorRole::BnRunningVar, vec![c], b.bn.running_var.clone()));
        }
        let w = &model.head.weight;
        tensors.push(("head.weight".into(), TensorRole::HeadWeight, vec![w.rows(), w.cols()], w.data().to_vec()));
        tensors.push(("head.bias".into(), TensorRole::HeadBias, vec![w.rows()], model.head.bias.clone()));
        Self::build(Some(model.arch.clone()), model.input_norm.clone(), meta, tensors)
    }

    /// Rebuild a model; every expected tensor must be present with the
    /// shape implied by the architecture, and nothing else.
    pub fn to_model(&self) -> Result<NetworkModel<f32>> {
        let arch = self
            .header
            .arch
            .clone()
            .ok_or_else(|| fmt_err("header has no architecture"))?;
        let mut model = NetworkModel::<f32>::zeros(arch)?;
        let mut used = 0usize;
        let mut take = |name: &str, role: TensorRole, shape: &[usize]| -> Result<Vec<f32>> {
            let (t, d) = self
                .tensor(name)
                .ok_or_else(|| fmt_err(format!("tensor `{name}` missing")))?;
            if t.role != role || t.shape != shape {
                return Err(fmt_err(format!(
                    "tensor `{name}` is {:?} {:?}, expected {role:?} {shape:?}",
                    t.role, t.shape
                )));
            }
            used += 1;
            Ok(d.to_vec())
        };
        for (i, b) in model.blocks.iter_mut().enumerate() {
            let s = b.conv.weight.shape();
            let c = b.bn.channels();
            let p = format!("block{i}");
            let w = take(&format!("{p}.conv.weight"), TensorRole::ConvWeight, &[s.batch, s.channels, s.height, s.width])?;
            b.conv.weight = Tensor4::new(Shape4::new(s.batch, s.channels, s.height, s.width), w)?;
            b.conv.bias = take(&format!("{p}.conv.bias"), TensorRole::ConvBias, &[s.batch])?;
            b.bn.gamma = take(&format!("{p}.bn.gamma"), TensorRole::BnGamma, &[c])?;
            b.bn.beta = take(&format!("{p}.bn.beta"), TensorRole::BnBeta, &[c])?;
            b.bn.running_mean = take(&format!("{p}.bn.running_mean"), TensorRole::BnRunningMean, &[c])?;
            b.bn.running_var = take(&format!("{p}.bn.running_var"), TensorRole::BnRunningVar, &[c])?;
        }
        let (k, m) = (model.head.weight.rows(), model.head.weight.cols());
        model.head.weight = Matrix::new(k, m, take("head.weight", TensorRole::HeadWeight, &[k, m])?)?;
        model.head.bias = take("head.bias", TensorRole::HeadBias, &[k])?;
        if used != self.header.tensors.len() {
            return Err(fmt_err(format!(
                "{} unexpected tensors in file",
                self.header.tensors.len() - used
            )));
        }
        model.input_norm = self.header.input_norm.clone();
        model.validate()?;
        Ok(model)
    }
}

pub fn save_model(path: &Path, model: &NetworkModel<f32>, meta: Option<CheckpointMeta>) -> Result<()> {
    WeightFile::from_model(model, meta)?.save(path)
}

pub fn load_model(path: &Path) -> Result<(NetworkModel<f32>, Option<CheckpointMeta>)> {
    let file = WeightFile::load(path)?;
    Ok((file.to_model()?, file.header.meta.clone()))
}
