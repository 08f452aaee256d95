use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::splitmerge::IMAGE_CHANNELS;

use super::{Architecture, CipherContainer, FedModel};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"FCW1";
pub const CIPHER_MAGIC: [u8; 4] = *b"FCF1";
pub const CIPHER_VERSION: u8 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(format_err(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| format_err("size overflow"))?;
        Ok(self
            .take(bytes, what)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn weights_to_bytes(model: &FedModel<f32>) -> Vec<u8> {
    let arch = model.architecture();
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    out.extend_from_slice(&WEIGHTS_MAGIC);
    out.extend_from_slice(&(arch.blocks as u32).to_le_bytes());
    out.extend_from_slice(&(arch.growth as u32).to_le_bytes());
    out.extend_from_slice(&arch.slope.to_le_bytes());
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<FedModel<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != WEIGHTS_MAGIC {
        return Err(format_err("not a weight file (bad magic)"));
    }
    let blocks = r.u32("block count")? as usize;
    let growth = r.u32("growth width")? as usize;
    let slope = f32::from_le_bytes(r.take(4, "slope")?.try_into().unwrap());
    // Bound the allocation by what the file can actually hold.
    if blocks == 0 || growth == 0 || blocks > 1024 || growth > 4096 {
        return Err(format_err(format!("implausible architecture N={blocks} g={growth}")));
    }
    let arch = Architecture { blocks, growth, slope };
    let mut model = FedModel::zeros(arch).map_err(|e| format_err(e.to_string()))?;
    let flat = r.f32s(model.param_count(), "parameters")?;
    r.finish()?;
    model.set_flat_params(&flat)?;
    Ok(model)
}

pub fn cipher_to_bytes(cipher: &CipherContainer) -> Vec<u8> {
    let mut out = Vec::with_capacity(45 + 4 * cipher.payload.len());
    out.extend_from_slice(&CIPHER_MAGIC);
    out.push(CIPHER_VERSION);
    out.extend_from_slice(&(cipher.width as u32).to_le_bytes());
    out.extend_from_slice(&(cipher.height as u32).to_le_bytes());
    out.extend_from_slice(&cipher.model_hash);
    for v in cipher.payload.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn cipher_from_bytes(bytes: &[u8]) -> Result<CipherContainer> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CIPHER_MAGIC {
        return Err(format_err("not a cipher file (bad magic)"));
    }
    let version = r.take(1, "version")?[0];
    if version != CIPHER_VERSION {
        return Err(format_err(format!("unsupported cipher version {version}")));
    }
    let width = r.u32("width")? as usize;
    let height = r.u32("height")? as usize;
    if width == 0 || height == 0 || width % 2 != 0 {
        return Err(format_err(format!("invalid cipher dimensions {width}x{height}")));
    }
    let model_hash: [u8; 32] = r.take(32, "model hash")?.try_into().unwrap();
    let n = IMAGE_CHANNELS
        .checked_mul(width)
        .and_then(|v| v.checked_mul(height))
        .ok_or_else(|| format_err("size overflow"))?;
    let data = r.f32s(n, "payload")?;
    r.finish()?;
    let payload = Tensor::new(vec![IMAGE_CHANNELS, height, width], data)?;
    CipherContainer::new(payload, model_hash).map_err(|e| format_err(e.to_string()))
}

/// Write through a temporary file in the destination directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn save_weights(model: &FedModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &weights_to_bytes(model))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<FedModel<f32>> {
    weights_from_bytes(&fs::read(path)?)
}

pub fn save_cipher(cipher: &CipherContainer, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &cipher_to_bytes(cipher))
}

pub fn load_cipher(path: impl AsRef<Path>) -> Result<CipherContainer> {
    cipher_from_bytes(&fs::read(path)?)
}
