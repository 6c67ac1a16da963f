//! Versioned single-file container for [`ModelParams`].
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (config, vocabulary, schedule, seed, tensor index) and then the raw
//! little-endian f32 payload.

use std::collections::BTreeSet;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use super::nn::ParamStore;
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"CEMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    seed: u64,
    registered: BTreeSet<String>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in f32 elements.
    offset: usize,
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0;
    for (name, var) in params.store().iter() {
        let data: Vec<f32> = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        tensors.push(Entry { name: name.clone(), shape: var.dims().to_vec(), offset });
        offset += data.len();
        payload.extend(data.iter().flat_map(|v| v.to_le_bytes()));
    }
    let header = Header {
        config: params.config.clone(),
        vocab: params.vocab.clone(),
        schedule: params.schedule.clone(),
        seed: params.seed,
        registered: params.registered.clone(),
        tensors,
    };
    let header = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(MAGIC)?;
        f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&payload)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[20 + hlen..];

    header.config.validate()?;
    let mut store = ParamStore::new(DType::F32, header.seed);
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = payload
            .get(e.offset * 4..(e.offset + n) * 4)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {} out of bounds", e.name)))?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(&e.name, &Tensor::from_vec(data, e.shape.as_slice(), &Device::Cpu)?)?;
    }
    let stored = store.iter().count();
    let mut params = ModelParams::assemble(header.config, header.vocab, store, header.seed)?;
    if params.store().iter().count() != stored {
        return Err(Error::Checkpoint("checkpoint is missing parameters for its architecture".into()));
    }
    if params.schedule != header.schedule {
        return Err(Error::Checkpoint("stored schedule disagrees with the config".into()));
    }
    params.registered = header.registered;
    Ok(params)
}
