//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "HACMCKPT"
//! version    u32
//! digest     u32 length + UTF-8 bytes (hex config digest)
//! count      u32
//! count × {
//!   name       u32 length + UTF-8 bytes
//!   trainable  u8
//!   rank       u32
//!   dims       rank × u64
//!   values     numel × f64
//! }
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::engine::Tensor;
use crate::error::{Error, Result};
use crate::network::{Model, ParamStore};

pub const MAGIC: &[u8; 8] = b"HACMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub digest: String,
    pub params: Vec<(String, bool, Tensor)>,
}

pub fn encode(digest: &str, store: &ParamStore) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(MAGIC);
    b.extend_from_slice(&VERSION.to_le_bytes());
    b.extend_from_slice(&(digest.len() as u32).to_le_bytes());
    b.extend_from_slice(digest.as_bytes());
    b.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        b.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        b.extend_from_slice(e.name.as_bytes());
        b.push(u8::from(e.trainable));
        b.extend_from_slice(&(e.value.rank() as u32).to_le_bytes());
        for &d in e.value.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in e.value.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

pub fn save(path: &Path, digest: &str, store: &ParamStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(digest, store))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: PathBuf,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated { path: self.path.clone(), expected: self.pos + n, found: self.bytes.len() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let path = self.path.clone();
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Header { path, detail: "name is not UTF-8".into() })
    }
}

pub fn decode(path: &Path, bytes: &[u8]) -> Result<Checkpoint> {
    let header = |detail: &str| Error::Header { path: path.to_path_buf(), detail: detail.to_string() };
    if bytes.len() < 12 {
        return Err(header("file shorter than header"));
    }
    if &bytes[..8] != MAGIC {
        return Err(header("bad magic bytes"));
    }
    let mut r = Reader { bytes, pos: 8, path: path.to_path_buf() };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version { path: path.to_path_buf(), found: version, expected: VERSION });
    }
    let digest = r.string()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.string()?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(header(&format!("bad trainable flag for {name}"))),
        };
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(header(&format!("rank {rank} of {name} is implausible")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| header("shape overflow"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| header("shape overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push((name, trainable, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(header("trailing bytes after parameters"));
    }
    Ok(Checkpoint { digest, params })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(path, &fs::read(path)?)
}

/// Digest stored in a checkpoint file, read without decoding parameters.
pub fn read_digest(path: &Path) -> Result<String> {
    Ok(load(path)?.digest)
}

/// Copies checkpoint values into `model`, requiring the same parameter
/// names and shapes and a matching digest.
pub fn restore(model: &mut Model, ckpt: &Checkpoint, digest: &str) -> Result<()> {
    if ckpt.digest != digest {
        return Err(Error::DigestMismatch { checkpoint: ckpt.digest.clone(), config: digest.to_string() });
    }
    if ckpt.params.len() != model.store.len() {
        return Err(Error::Invalid(format!(
            "checkpoint holds {} parameters, model has {}",
            ckpt.params.len(),
            model.store.len()
        )));
    }
    for (name, _, value) in &ckpt.params {
        model.store.set(name, value.clone())?;
    }
    Ok(())
}
