//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `HCPOCKPT`, a little-endian `u64` header length,
//! the UTF-8 JSON header, then every block's parameters as little-endian
//! `f64` values in header order.

use std::io::{Read, Write};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::MlpSpec;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "ckpt-v1";
const MAGIC: &[u8; 8] = b"HCPOCKPT";
const MAX_HEADER: u64 = 64 << 20;

/// Serializable position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// Hex-encoded 32-byte seed.
    pub seed: String,
    pub stream: u64,
    /// Word position, as a decimal string since it is 128 bits wide.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return Err(Error::Checkpoint("rng seed must be 64 hex digits".into()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16)
                .map_err(|e| Error::Checkpoint(format!("bad rng seed: {e}")))?;
        }
        let word_pos: u128 = self
            .word_pos
            .parse()
            .map_err(|e| Error::Checkpoint(format!("bad rng word position: {e}")))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockHeader {
    pub name: String,
    /// Network shape, when the block is (or starts with) MLP parameters.
    pub spec: Option<MlpSpec>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub rng: Option<RngState>,
    /// Free-form metadata (policy kind, instruction count, iteration, ...).
    pub meta: serde_json::Value,
    pub blocks: Vec<BlockHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub spec: Option<MlpSpec>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub rng: Option<RngState>,
    pub meta: serde_json::Value,
    pub blocks: Vec<Block>,
}

impl Checkpoint {
    pub fn block(&self, name: &str) -> Result<&Block> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name:?}")))
    }
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION.to_string(),
        rng: ckpt.rng.clone(),
        meta: ckpt.meta.clone(),
        blocks: ckpt
            .blocks
            .iter()
            .map(|b| BlockHeader {
                name: b.name.clone(),
                spec: b.spec.clone(),
                len: b.values.len(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for b in &ckpt.blocks {
        let mut buf = Vec::with_capacity(b.values.len() * 8);
        for v in &b.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Checkpoint(format!("truncated magic: {e}")))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|e| Error::Checkpoint(format!("truncated header length: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(Error::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json)
        .map_err(|e| Error::Checkpoint(format!("truncated header: {e}")))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header does not parse: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {:?}", header.version)));
    }
    let mut blocks = Vec::with_capacity(header.blocks.len());
    for bh in header.blocks {
        if let Some(spec) = &bh.spec {
            if spec.num_params() > bh.len {
                return Err(Error::Checkpoint(format!(
                    "block {:?} holds {} values but its network needs {}",
                    bh.name,
                    bh.len,
                    spec.num_params()
                )));
            }
        }
        let mut raw = vec![0u8; bh.len * 8];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Checkpoint(format!("block {:?} is truncated: {e}", bh.name)))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("block {:?} holds non-finite values", bh.name)));
        }
        blocks.push(Block {
            name: bh.name,
            spec: bh.spec,
            values,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after the last block", rest.len())));
    }
    Ok(Checkpoint {
        rng: header.rng,
        meta: header.meta,
        blocks,
    })
}
