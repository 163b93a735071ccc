//! `FBLM` checkpoint files: magic, u32 LE version, u32 LE header length, a
//! JSON header (config plus tensor directory) and little-endian f32 payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bilm::{BiLm, BiLmConfig};
use crate::error::{Error, Result};
use crate::fusion::{FrozenVlm, FusionConfig, Variant};
use crate::param::{ParamStore, Parameter};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

pub const MAGIC: &[u8; 4] = b"FBLM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn write_store(mut w: impl Write, config: &serde_json::Value, store: &ParamStore<f32>) -> Result<()> {
    let mut offset = 0u64;
    let tensors = store
        .params()
        .iter()
        .map(|p| {
            let e = TensorEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                frozen: p.frozen,
                offset,
            };
            offset += 4 * p.numel() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: config.clone(),
        tensors,
    })?;
    let header_len = u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&header_len.to_le_bytes())?;
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for p in store.params() {
        for x in p.tensor.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format("truncated header".into()))
}

pub fn read_store(mut r: impl Read) -> Result<(serde_json::Value, ParamStore<f32>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse_store(&bytes)
}

pub fn parse_store(bytes: &[u8]) -> Result<(serde_json::Value, ParamStore<f32>)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let header_len = read_u32(bytes, 8)? as usize;
    let header_bytes = bytes
        .get(12..12 + header_len)
        .ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let payload = &bytes[12 + header_len..];
    let mut store = ParamStore::new();
    let mut expected = 0u64;
    for e in header.tensors {
        if e.offset != expected {
            return Err(Error::Format(format!(
                "tensor `{}` at offset {} overlaps or leaves a gap (expected {expected})",
                e.name, e.offset
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let chunk = payload
            .get(start..start + 4 * n)
            .ok_or_else(|| Error::Format(format!("truncated payload for `{}`", e.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let mut p = Parameter::new(e.name, Tensor::new(e.shape, data)?);
        p.frozen = e.frozen;
        store
            .push(p)
            .map_err(|err| Error::Format(format!("bad tensor directory: {err}")))?;
        expected += 4 * n as u64;
    }
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload has {} bytes, directory describes {expected}",
            payload.len()
        )));
    }
    Ok((header.config, store))
}

/// Configuration echoed in every model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub bilm: BiLmConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fusion: Option<FusionConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    pub vocab: Vec<String>,
}

/// A language model or a multimodal model, with its vocabulary.
#[derive(Clone, Debug)]
pub enum Model {
    Text(BiLm),
    Multimodal(FrozenVlm),
}

impl Model {
    pub fn store(&self) -> &ParamStore<f32> {
        match self {
            Model::Text(m) => &m.store,
            Model::Multimodal(m) => &m.store,
        }
    }

    fn header(&self, vocab: &Vocabulary) -> ModelHeader {
        match self {
            Model::Text(m) => ModelHeader {
                bilm: m.config.clone(),
                fusion: None,
                variant: None,
                vocab: vocab.tokens().to_vec(),
            },
            Model::Multimodal(m) => ModelHeader {
                bilm: m.lm_config.clone(),
                fusion: Some(m.fusion_config.clone()),
                variant: Some(m.variant),
                vocab: vocab.tokens().to_vec(),
            },
        }
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocabulary) -> Result<()> {
    let header = serde_json::to_value(model.header(vocab))?;
    let mut buf = Vec::new();
    write_store(&mut buf, &header, model.store())?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocabulary)> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Vocabulary)> {
    let (config, store) = parse_store(bytes)?;
    let header: ModelHeader =
        serde_json::from_value(config).map_err(|e| Error::Format(format!("bad model header: {e}")))?;
    let vocab = Vocabulary::from_tokens(header.vocab)?;
    if vocab.len() != header.bilm.vocab_size {
        return Err(Error::Format(format!(
            "vocabulary has {} tokens, config says {}",
            vocab.len(),
            header.bilm.vocab_size
        )));
    }
    let model = match (header.fusion, header.variant) {
        (None, None) => Model::Text(BiLm::from_store(header.bilm, store)?),
        (Some(f), Some(v)) => Model::Multimodal(FrozenVlm::from_store(header.bilm, f, v, store)?),
        _ => return Err(Error::Format("fusion config and variant must appear together".into())),
    };
    Ok((model, vocab))
}
