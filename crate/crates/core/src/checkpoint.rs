//! Binary checkpoint container shared by encoder and generator models.
//!
//! Layout: 8-byte magic `PLMCKPT1`, a `u64` little-endian header length, a
//! JSON header, then the payload of little-endian `f32` tensors in row-major
//! order. Header tensor offsets are byte offsets into the payload; tensors
//! are contiguous, in index order, and exactly cover the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::TaskSpec;
use crate::error::{Error, Result};
use crate::generative::{DecoderConfig, DecoderModel, VaeHeadConfig, VariationalHead};
use crate::model::{EncoderConfig, EncoderModel, HeadConfig, TaskHead};
use crate::tensor::{ParamStore, Tensor};
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 8] = b"PLMCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// Byte offset into the payload.
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub config: Value,
    pub vocabulary: String,
    /// Snapshot of the run configuration that produced the checkpoint.
    pub run: Value,
    pub payload_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Decoded checkpoint. `params` holds every tensor under its stored name.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: Value,
    pub run: Value,
    pub params: ParamStore,
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().map(|&d| d as u64).product()
}

impl Checkpoint {
    pub fn header(&self) -> Header {
        let mut offset = 0u64;
        let tensors = self
            .params
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.to_string(),
                    offset,
                    shape: t.shape().to_vec(),
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        Header {
            format_version: FORMAT_VERSION,
            model_kind: self.kind,
            config: self.config.clone(),
            vocabulary: Vocabulary.to_text(),
            run: self.run.clone(),
            payload_bytes: offset,
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                Error::Truncated(format!("{} bytes, shorter than the magic", bytes.len()))
            } else {
                Error::BadMagic
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| Error::Truncated("missing header length".into()))?;
        let header_len = u64::from_le_bytes(len_bytes);
        let start = 16u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| Error::Truncated(format!("header declares {header_len} bytes")))?
            as usize;
        let raw: Value = serde_json::from_slice(&bytes[16..start])?;
        // Check the version before the strict parse so newer layouts report
        // the version rather than an unknown field.
        let version = raw
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::invalid("checkpoint header lacks format_version"))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::UnsupportedVersion(version.min(u64::from(u32::MAX)) as u32));
        }
        let header: Header = serde_json::from_value(raw)?;
        Vocabulary.verify_text(&header.vocabulary)?;

        let payload = &bytes[start..];
        if (payload.len() as u64) < header.payload_bytes {
            return Err(Error::Truncated(format!(
                "payload has {} bytes, header declares {}",
                payload.len(),
                header.payload_bytes
            )));
        }
        if payload.len() as u64 != header.payload_bytes {
            return Err(Error::OutOfBounds(format!(
                "{} trailing payload bytes",
                payload.len() as u64 - header.payload_bytes
            )));
        }
        let mut params = ParamStore::new();
        let mut expected = 0u64;
        for e in &header.tensors {
            if e.offset != expected {
                return Err(Error::OutOfBounds(format!(
                    "tensor {} starts at byte {}, expected {expected}",
                    e.name, e.offset
                )));
            }
            let end = numel(&e.shape)
                .checked_mul(4)
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= header.payload_bytes)
                .ok_or_else(|| {
                    Error::OutOfBounds(format!("tensor {} {:?} overruns the payload", e.name, e.shape))
                })?;
            if params.find(&e.name).is_some() {
                return Err(Error::invalid(format!("duplicate tensor {}", e.name)));
            }
            let data = payload[e.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            params.add(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
            expected = end;
        }
        if expected != header.payload_bytes {
            return Err(Error::OutOfBounds(format!(
                "tensors cover {expected} of {} payload bytes",
                header.payload_bytes
            )));
        }
        Ok(Self {
            kind: header.model_kind,
            config: header.config,
            run: header.run,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Self::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        Ok(())
    }

    fn config_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.config.get(key).cloned().unwrap_or(Value::Null);
        Ok(serde_json::from_value(v)?)
    }
}

fn merge(stores: &[&ParamStore]) -> ParamStore {
    let mut out = ParamStore::new();
    for s in stores {
        for (name, t) in s.iter() {
            out.add(name, Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("valid tensor"));
        }
    }
    out
}

/// Copy every parameter of `target` from `source` by name; returns how many
/// source tensors were consumed.
fn fill(target: &mut ParamStore, source: &ParamStore) -> Result<usize> {
    let ids: Vec<_> = target.ids().collect();
    for &id in &ids {
        let name = target.name(id).to_string();
        let src = source
            .find(&name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor {name}")))?;
        let src = source.get(src);
        let dst = target.get_mut(id);
        if src.shape() != dst.shape() {
            return Err(Error::shape(format!(
                "tensor {name}: checkpoint {:?}, model {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(ids.len())
}

fn check_consumed(used: usize, source: &ParamStore) -> Result<()> {
    if used != source.len() {
        return Err(Error::invalid(format!(
            "checkpoint has {} tensors, the model uses {used}",
            source.len()
        )));
    }
    Ok(())
}

/// A fine-tuned task head together with the task it was trained for.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBundle {
    pub spec: TaskSpec,
    pub head: TaskHead,
}

pub fn encoder_checkpoint(encoder: &EncoderModel, task: Option<&TaskBundle>, run: Value) -> Result<Checkpoint> {
    let config = serde_json::json!({
        "encoder": encoder.config,
        "task": task.map(|t| &t.spec),
        "head": task.map(|t| t.head.config),
    });
    let params = match task {
        Some(t) => merge(&[&encoder.params, &t.head.params]),
        None => merge(&[&encoder.params]),
    };
    Ok(Checkpoint {
        kind: ModelKind::Encoder,
        config,
        run,
        params,
    })
}

pub fn generator_checkpoint(vae: &VariationalHead, decoder: &DecoderModel, run: Value) -> Result<Checkpoint> {
    let config = serde_json::json!({
        "decoder": decoder.config,
        "vae_head": vae.config,
    });
    Ok(Checkpoint {
        kind: ModelKind::Decoder,
        config,
        run,
        params: merge(&[&vae.params, &decoder.params]),
    })
}

impl Checkpoint {
    pub fn into_encoder(&self) -> Result<(EncoderModel, Option<TaskBundle>)> {
        self.expect_kind(ModelKind::Encoder)?;
        let cfg: EncoderConfig = self.config_field("encoder")?;
        let spec: Option<TaskSpec> = self.config_field("task")?;
        let head_cfg: Option<HeadConfig> = self.config_field("head")?;
        let mut encoder = EncoderModel::new(cfg)?;
        let mut used = fill(&mut encoder.params, &self.params)?;
        let task = match (spec, head_cfg) {
            (Some(spec), Some(hc)) => {
                spec.validate()?;
                let mut head = TaskHead::new(hc)?;
                used += fill(&mut head.params, &self.params)?;
                Some(TaskBundle { spec, head })
            }
            (None, None) => None,
            _ => return Err(Error::invalid("checkpoint has a task without a head, or a head without a task")),
        };
        check_consumed(used, &self.params)?;
        Ok((encoder, task))
    }

    pub fn into_generator(&self) -> Result<(VariationalHead, DecoderModel)> {
        self.expect_kind(ModelKind::Decoder)?;
        let dc: DecoderConfig = self.config_field("decoder")?;
        let vc: VaeHeadConfig = self.config_field("vae_head")?;
        let mut vae = VariationalHead::new(vc)?;
        let mut decoder = DecoderModel::new(dc)?;
        let used = fill(&mut vae.params, &self.params)? + fill(&mut decoder.params, &self.params)?;
        check_consumed(used, &self.params)?;
        Ok((vae, decoder))
    }
}
