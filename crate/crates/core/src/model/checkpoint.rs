//! Binary checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "SFTB" | u32 version | u32 src_vocab | u32 tgt_vocab | u32 embed_dim | u32 hidden_dim
//! | u8 encoder | u8 attention | u8 normalization | u8 provenance
//! | u32 block count | per block: u32 rank, rank × u64 extents, f64 values
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{AttentionMode, EncoderMode, ModelConfig, ModelParams, Normalization, Provenance};
use crate::error::{Error, Result};
use crate::tensor::Param;

pub const MAGIC: &[u8; 4] = b"SFTB";
pub const VERSION: u32 = 1;

fn encoder_byte(m: EncoderMode) -> u8 {
    match m {
        EncoderMode::Unidirectional => 0,
        EncoderMode::Bidirectional => 1,
    }
}

fn attention_byte(m: AttentionMode) -> u8 {
    match m {
        AttentionMode::FixedPosition => 0,
        AttentionMode::Content => 1,
    }
}

fn normalization_byte(m: Normalization) -> u8 {
    match m {
        Normalization::Local => 0,
        Normalization::Global => 1,
    }
}

fn provenance_byte(p: Provenance) -> u8 {
    match p {
        Provenance::Random => 0,
        Provenance::TeacherForcing => 1,
        Provenance::SelfNormalized => 2,
        Provenance::SoftBeam => 3,
    }
}

fn bad(what: &str, byte: u8) -> Error {
    Error::Checkpoint(format!("invalid {what} byte {byte}"))
}

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let c = &params.config;
    let mut out = Vec::with_capacity(64 + 8 * params.num_values());
    out.extend_from_slice(MAGIC);
    for v in [
        VERSION,
        c.src_vocab as u32,
        c.tgt_vocab as u32,
        c.embed_dim as u32,
        c.hidden_dim as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&[
        encoder_byte(c.encoder),
        attention_byte(c.attention),
        normalization_byte(c.normalization),
        provenance_byte(params.provenance),
    ]);
    out.extend_from_slice(&(params.blocks.len() as u32).to_le_bytes());
    for block in &params.blocks {
        out.extend_from_slice(&(block.shape.len() as u32).to_le_bytes());
        for d in &block.shape {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in &block.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Checkpoint(format!("truncated at byte {} (needed {n} more)", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let src_vocab = cur.u32()? as usize;
    let tgt_vocab = cur.u32()? as usize;
    let embed_dim = cur.u32()? as usize;
    let hidden_dim = cur.u32()? as usize;
    let encoder = match cur.u8()? {
        0 => EncoderMode::Unidirectional,
        1 => EncoderMode::Bidirectional,
        b => return Err(bad("encoder", b)),
    };
    let attention = match cur.u8()? {
        0 => AttentionMode::FixedPosition,
        1 => AttentionMode::Content,
        b => return Err(bad("attention", b)),
    };
    let normalization = match cur.u8()? {
        0 => Normalization::Local,
        1 => Normalization::Global,
        b => return Err(bad("normalization", b)),
    };
    let provenance = match cur.u8()? {
        0 => Provenance::Random,
        1 => Provenance::TeacherForcing,
        2 => Provenance::SelfNormalized,
        3 => Provenance::SoftBeam,
        b => return Err(bad("provenance", b)),
    };
    let config = ModelConfig {
        src_vocab,
        tgt_vocab,
        embed_dim,
        hidden_dim,
        encoder,
        attention,
        normalization,
    };
    config
        .validate()
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let (_, expected) = super::Layout::blocks(&config);
    let count = cur.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} blocks, found {count}",
            expected.len()
        )));
    }
    let mut blocks = Vec::with_capacity(count);
    for (name, shape) in expected {
        let rank = cur.u32()? as usize;
        let stored = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if stored != shape {
            return Err(Error::Checkpoint(format!(
                "block {name}: expected shape {shape:?}, found {stored:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>>>()?;
        blocks.push(Param::new(name, shape, values));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    ModelParams::from_blocks(config, provenance, blocks)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&to_bytes(params))
        .map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
