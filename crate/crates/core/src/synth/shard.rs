//! Length-prefixed record files.
//!
//! Layout: `IMPSHARD`, `u32` version, `u64` record count, then per record a
//! `u32` body length, the body, and the first 8 bytes of the body's SHA-256.
//! Integers and floats are little-endian throughout.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::SynthExample;
use crate::error::{CoreError, Result};
use crate::sample::{Modality, Payload, RawSample};

const MAGIC: &[u8; 8] = b"IMPSHARD";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 8;

fn checksum(body: &[u8]) -> [u8; CHECKSUM_LEN] {
    let digest = Sha256::digest(body);
    let mut out = [0u8; CHECKSUM_LEN];
    out.copy_from_slice(&digest[..CHECKSUM_LEN]);
    out
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_record(ex: &SynthExample, out: &mut Vec<u8>) {
    out.extend_from_slice(&ex.index.to_le_bytes());
    put_u32(out, ex.class as u32);
    put_u32(out, ex.caption.len() as u32);
    for &id in &ex.caption {
        put_u32(out, id);
    }
    out.push(ex.samples.len() as u8);
    for s in &ex.samples {
        out.push(s.modality.code());
        match &s.payload {
            Payload::Dense { shape, values } => {
                out.push(0);
                out.push(shape.len() as u8);
                for &d in shape {
                    put_u32(out, d as u32);
                }
                for &v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Payload::Tokens(ids) => {
                out.push(1);
                out.push(1);
                put_u32(out, ids.len() as u32);
                for &id in ids {
                    put_u32(out, id);
                }
            }
        }
    }
}

/// Hex SHA-256 of a whole file, as reported by `gen-data`.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serializes `examples` into shard bytes.
pub fn encode_shard(examples: &[SynthExample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.extend_from_slice(&(examples.len() as u64).to_le_bytes());
    let mut body = Vec::new();
    for ex in examples {
        body.clear();
        encode_record(ex, &mut body);
        put_u32(&mut out, body.len() as u32);
        out.extend_from_slice(&body);
        out.extend_from_slice(&checksum(&body));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated at byte {} (wanted {n} more)", self.pos)),
        }
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode_record(body: &[u8]) -> std::result::Result<SynthExample, String> {
    let mut c = Cursor {
        bytes: body,
        pos: 0,
    };
    let index = c.u64()?;
    let class = c.u32()? as usize;
    let caption_len = c.u32()? as usize;
    let caption = (0..caption_len)
        .map(|_| c.u32())
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let n = c.u8()? as usize;
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let code = c.u8()?;
        let modality =
            Modality::from_code(code).ok_or_else(|| format!("unknown modality code {code}"))?;
        let kind = c.u8()?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let numel: usize = shape.iter().product();
        let sample = match kind {
            0 => {
                let raw = c.take(numel.checked_mul(4).ok_or("shape overflow")?)?;
                let values = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                RawSample::dense(modality, shape, values).map_err(|e| e.to_string())?
            }
            1 => {
                let ids = (0..numel)
                    .map(|_| c.u32())
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                RawSample::tokens(ids)
            }
            k => return Err(format!("unknown payload kind {k}")),
        };
        samples.push(sample);
    }
    if c.pos != body.len() {
        return Err(format!("{} trailing bytes in record", body.len() - c.pos));
    }
    Ok(SynthExample {
        index,
        class,
        samples,
        caption,
    })
}

/// Parses shard bytes; `name` only labels errors.
pub fn decode_shard(bytes: &[u8], name: &str) -> Result<Vec<SynthExample>> {
    let fail = |detail: String| CoreError::Shard {
        path: name.to_string(),
        detail,
    };
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len()).map_err(&fail)? != MAGIC {
        return Err(fail("bad magic; not a shard file".into()));
    }
    let version = c.u32().map_err(&fail)?;
    if version != VERSION {
        return Err(fail(format!("version {version}, expected {VERSION}")));
    }
    let count = c.u64().map_err(&fail)?;
    let mut out = Vec::with_capacity(count.min(1 << 20) as usize);
    for r in 0..count {
        let len = c.u32().map_err(&fail)? as usize;
        let body = c.take(len).map_err(&fail)?;
        let stored = c.take(CHECKSUM_LEN).map_err(&fail)?;
        if stored != checksum(body) {
            return Err(fail(format!("checksum mismatch in record {r}")));
        }
        out.push(decode_record(body).map_err(|e| fail(format!("record {r}: {e}")))?);
    }
    if c.pos != bytes.len() {
        return Err(fail(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - c.pos
        )));
    }
    Ok(out)
}

pub fn write_shard(examples: &[SynthExample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    }
    fs::write(path, encode_shard(examples)).map_err(|e| CoreError::io(path, e))
}

pub fn read_shard(path: &Path) -> Result<Vec<SynthExample>> {
    let bytes = fs::read(path).map_err(|e| CoreError::io(path, e))?;
    decode_shard(&bytes, &path.display().to_string())
}
