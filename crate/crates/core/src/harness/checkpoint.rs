//! Bit-exact checkpoint format.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header (run config, tensor directory, progress, optimizer step, run
//! seed), then one contiguous payload of little-endian f64 blocks addressed
//! by the directory. Only trainable parameters are stored by default — the
//! frozen backbone is reproducible from the config seed — plus both Adam
//! moment buffers and the partial-epoch loss accumulator, so resuming
//! mid-epoch is exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::RunConfig;

const MAGIC: &[u8; 8] = b"MOACKPT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    AdamM,
    AdamV,
    /// Partial-epoch metric sums: [batch_count, Σtotal, Σsdm, Σlb_img,
    /// Σlb_txt, Σent_img, Σent_txt].
    EpochAccum,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DirEntry {
    kind: TensorKind,
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in f64 units.
    offset: u64,
    count: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    directory: Vec<DirEntry>,
    progress: Progress,
    adam_step: u64,
    rng_seed: u64,
}

/// How far the run has advanced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: u64,
    pub step: u64,
}

/// One named tensor block.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub progress: Progress,
    pub adam_step: u64,
    pub rng_seed: u64,
    pub params: Vec<TensorBlock>,
    pub adam_m: Vec<TensorBlock>,
    pub adam_v: Vec<TensorBlock>,
    pub epoch_accum: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut directory = Vec::new();
    let mut payload: Vec<f64> = Vec::new();
    let push_blocks = |kind: TensorKind, blocks: &[TensorBlock],
                           directory: &mut Vec<DirEntry>,
                           payload: &mut Vec<f64>| {
        for b in blocks {
            directory.push(DirEntry {
                kind,
                name: b.name.clone(),
                shape: b.shape.clone(),
                offset: payload.len() as u64,
                count: b.data.len() as u64,
            });
            payload.extend_from_slice(&b.data);
        }
    };
    push_blocks(TensorKind::Param, &ckpt.params, &mut directory, &mut payload);
    push_blocks(TensorKind::AdamM, &ckpt.adam_m, &mut directory, &mut payload);
    push_blocks(TensorKind::AdamV, &ckpt.adam_v, &mut directory, &mut payload);
    directory.push(DirEntry {
        kind: TensorKind::EpochAccum,
        name: "epoch_accum".into(),
        shape: vec![ckpt.epoch_accum.len()],
        offset: payload.len() as u64,
        count: ckpt.epoch_accum.len() as u64,
    });
    payload.extend_from_slice(&ckpt.epoch_accum);

    let header = Header {
        config: ckpt.config.clone(),
        directory,
        progress: ckpt.progress,
        adam_step: ckpt.adam_step,
        rng_seed: ckpt.rng_seed,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Serialization(e.to_string()))?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for &v in &payload {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Checkpoint(format!("cannot open checkpoint {}: {e}", path.display()))
    })?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic: not a checkpoint file".into(),
        ));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    if header_len > 64 << 20 {
        return Err(Error::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("corrupt header: {e}")))?;

    let total: u64 = header.directory.iter().map(|d| d.count).sum();
    let mut raw = Vec::new();
    file.read_to_end(&mut raw)?;
    if raw.len() != total as usize * 8 {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, directory expects {}",
            raw.len(),
            total * 8
        )));
    }
    let payload: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    let mut epoch_accum = Vec::new();
    for entry in &header.directory {
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.count {
            return Err(Error::Checkpoint(format!(
                "directory entry `{}` shape {:?} does not match count {}",
                entry.name, entry.shape, entry.count
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.count as usize;
        if end > payload.len() {
            return Err(Error::Checkpoint(format!(
                "directory entry `{}` overruns payload",
                entry.name
            )));
        }
        let block = TensorBlock {
            name: entry.name.clone(),
            shape: entry.shape.clone(),
            data: payload[start..end].to_vec(),
        };
        match entry.kind {
            TensorKind::Param => params.push(block),
            TensorKind::AdamM => adam_m.push(block),
            TensorKind::AdamV => adam_v.push(block),
            TensorKind::EpochAccum => epoch_accum = block.data,
        }
    }
    Ok(Checkpoint {
        config: header.config,
        progress: header.progress,
        adam_step: header.adam_step,
        rng_seed: header.rng_seed,
        params,
        adam_m,
        adam_v,
        epoch_accum,
    })
}
