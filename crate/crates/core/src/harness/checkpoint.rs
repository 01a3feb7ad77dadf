//! Single-file binary checkpoints with a plain-text manifest alongside.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "AMNETCKP"
//! version     u32      1
//! desc_len    u32      length of the descriptor block
//! descriptor  JSON text (model structure)
//! count       u32      number of tensors
//! per tensor:
//!   name_len  u32, name (UTF-8)
//!   rows u32, cols u32
//!   values    rows*cols f64, row-major
//!   has_mask  u8 (0 or 1)
//!   mask      ceil(rows*cols/8) bytes, bit i of byte i/8 (LSB first) = kept
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use crate::compression::Mask;
use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::transducer::{ModelDescriptor, TransducerModel};

pub const MAGIC: &[u8; 8] = b"AMNETCKP";
pub const VERSION: u32 = 1;

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

pub fn encode_checkpoint(model: &TransducerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let desc = serde_json::to_string(&model.descriptor()).expect("descriptor serialises");
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, p) in model.params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        match &p.mask {
            Some(m) => {
                out.push(1);
                out.extend_from_slice(&m.to_packed());
            }
            None => out.push(0),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TransducerModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let desc_len = r.u32()?;
    let desc: ModelDescriptor = serde_json::from_slice(r.take(desc_len)?)
        .map_err(|e| Error::Checkpoint(format!("descriptor: {e}")))?;
    let mut model = TransducerModel::from_descriptor(&desc)?;
    let count = r.u32()?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!("{count} tensors, model expects {}", model.params.len())));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let id = model.params.id(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("tensor {name} appears twice")));
        }
        let (rows, cols) = (r.u32()?, r.u32()?);
        if model.params.value(id).shape() != (rows, cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} is {rows}x{cols}, model expects {:?}",
                model.params.value(id).shape()
            )));
        }
        let raw = r.take(rows * cols * 8)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        model.params.get_mut(id).value = Matrix::new(rows, cols, data)?;
        match r.u8()? {
            0 => model.params.get_mut(id).mask = None,
            1 => {
                let packed = r.take((rows * cols).div_ceil(8))?;
                let mask = Mask::from_packed(rows, cols, packed)
                    .ok_or_else(|| Error::Checkpoint(format!("bad mask for {name}")))?;
                model.params.set_mask(id, mask);
            }
            other => return Err(Error::Checkpoint(format!("bad mask flag {other} for {name}"))),
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn manifest(model: &TransducerModel) -> String {
    let desc = serde_json::to_string_pretty(&model.descriptor()).expect("descriptor serialises");
    let mut s = format!("format AMNETCKP v{VERSION}\ndescriptor\n{desc}\ntensors {}\n", model.params.len());
    for (_, p) in model.params.iter() {
        let (r, c) = p.value.shape();
        match &p.mask {
            Some(m) => s.push_str(&format!("{} {r}x{c} sparsity={:.4}\n", p.name, m.sparsity())),
            None => s.push_str(&format!("{} {r}x{c}\n", p.name)),
        }
    }
    s
}

/// Writes the checkpoint and `<path>.manifest.txt`.
pub fn save_checkpoint(path: &Path, model: &TransducerModel) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model))?;
    fs::write(manifest_path(path), manifest(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TransducerModel> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
