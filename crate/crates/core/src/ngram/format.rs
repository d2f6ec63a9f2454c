//! Binary model file.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DIVDEC-NGRAM"  magic, 12 bytes
//! u32             format version
//! u32             order
//! f64             lambda
//! f64             floor_score
//! u32             vocab size
//! u64             sentence count
//! per order m = 1..=order:
//!   u64           number of contexts
//!   per context, sorted:
//!     u32 * (m-1) context ids
//!     u32         number of children
//!     (u32, u64)  token id and count, sorted by token
//! u64             CRC-64/ECMA-182 of every preceding byte
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use thiserror::Error;

use super::{BackoffLM, ContextEntry, NGramCounts, NGramError};
use crate::corpus::TokenId;

pub const MAGIC: &[u8; 12] = b"DIVDEC-NGRAM";
pub const FORMAT_VERSION: u32 = 1;

const CHECKSUM: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error("truncated model file")]
    Truncated,
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("model file checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Model(#[from] NGramError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes a model. Output is byte-identical for equal models.
pub fn write_lm<W: Write>(lm: &BackoffLM, mut writer: W) -> Result<(), ModelFormatError> {
    let counts = lm.counts();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(counts.order() as u32).to_le_bytes());
    buf.extend_from_slice(&lm.lambda().to_le_bytes());
    buf.extend_from_slice(&lm.floor_score().to_le_bytes());
    buf.extend_from_slice(&(lm.vocab_size as u32).to_le_bytes());
    buf.extend_from_slice(&counts.sentences().to_le_bytes());
    for len in 0..counts.order() {
        let contexts = counts.contexts(len);
        buf.extend_from_slice(&(contexts.len() as u64).to_le_bytes());
        for (ctx, entry) in contexts {
            for id in ctx {
                buf.extend_from_slice(&id.to_le_bytes());
            }
            buf.extend_from_slice(&(entry.children().len() as u32).to_le_bytes());
            for &(token, n) in entry.children() {
                buf.extend_from_slice(&token.to_le_bytes());
                buf.extend_from_slice(&n.to_le_bytes());
            }
        }
    }
    let sum = CHECKSUM.checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    writer.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], ModelFormatError> {
        if self.bytes.len() < n {
            return Err(ModelFormatError::Truncated);
        }
        let (head, tail) = self.bytes.split_at(n);
        self.bytes = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, ModelFormatError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelFormatError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelFormatError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_lm<R: Read>(mut reader: R) -> Result<BackoffLM, ModelFormatError> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() {
        return Err(if MAGIC.starts_with(&bytes) { ModelFormatError::Truncated } else { ModelFormatError::BadMagic });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(ModelFormatError::BadMagic);
    }
    let mut cur = Cursor { bytes: &bytes[MAGIC.len()..] };
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(ModelFormatError::VersionMismatch { found: version });
    }
    // Header fields are validated before the checksum so a short file
    // reports truncation rather than corruption.
    let order = cur.u32()? as usize;
    let lambda = cur.f64()?;
    let floor = cur.f64()?;
    let vocab_size = cur.u32()? as usize;
    let sentences = cur.u64()?;
    if order == 0 {
        return Err(ModelFormatError::Malformed("order 0".into()));
    }
    if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
        return Err(ModelFormatError::Truncated);
    }
    let (payload, trailer) = bytes.split_at(bytes.len() - 8);
    let mut tables = Vec::with_capacity(order);
    for len in 0..order {
        let n_contexts = cur.u64()?;
        let mut table = HashMap::new();
        for _ in 0..n_contexts {
            let ctx: Vec<TokenId> = (0..len).map(|_| cur.u32()).collect::<Result<_, _>>()?;
            let n_children = cur.u32()? as usize;
            let mut children = Vec::with_capacity(n_children.min(1 << 16));
            for _ in 0..n_children {
                children.push((cur.u32()?, cur.u64()?));
            }
            if !children.windows(2).all(|w| w[0].0 < w[1].0) || children.iter().any(|&(_, n)| n == 0) {
                return Err(ModelFormatError::Malformed("children must be sorted with positive counts".into()));
            }
            table.insert(ctx, ContextEntry::from_sorted(children));
        }
        tables.push(table);
    }
    if cur.bytes.len() != 8 {
        return Err(if cur.bytes.len() < 8 {
            ModelFormatError::Truncated
        } else {
            ModelFormatError::Malformed("trailing bytes".into())
        });
    }
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if CHECKSUM.checksum(payload) != stored {
        return Err(ModelFormatError::ChecksumMismatch);
    }
    let counts = NGramCounts::from_parts(order, tables, sentences);
    Ok(BackoffLM::with_floor(counts, vocab_size, lambda, floor)?)
}

pub fn save_lm(lm: &BackoffLM, path: impl AsRef<Path>) -> Result<(), ModelFormatError> {
    let mut writer = BufWriter::new(File::create(path)?);
    write_lm(lm, &mut writer)?;
    writer.flush()?;
    Ok(())
}

pub fn load_lm(path: impl AsRef<Path>) -> Result<BackoffLM, ModelFormatError> {
    read_lm(BufReader::new(File::open(path)?))
}
