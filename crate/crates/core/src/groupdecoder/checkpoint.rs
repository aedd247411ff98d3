//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "GDETRCKP"
//! version  u32 LE
//! config   u32 LE length, then that many bytes of JSON (GroupConfig)
//! count    u32 LE number of parameters
//! per parameter:
//!   name   u32 LE length, UTF-8 bytes
//!   rank   u32 LE, then rank x u64 LE dimensions
//!   data   product(dims) x f64 LE
//! ```

use std::fs;
use std::path::Path;

use super::{GroupConfig, GroupDecoder};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GDETRCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(decoder: &GroupDecoder, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + decoder.params().element_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(decoder.config()).map_err(|e| Error::Invalid(e.to_string()))?;
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&(decoder.params().len() as u32).to_le_bytes());
    for p in decoder.params().iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.value() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn parse(bytes: &[u8]) -> std::result::Result<GroupDecoder, String> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err("bad magic".into());
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format!("version {version}, expected {CHECKPOINT_VERSION}"));
    }
    let len = r.u32()? as usize;
    let cfg: GroupConfig = serde_json::from_slice(r.take(len)?).map_err(|e| format!("config: {e}"))?;
    let mut decoder = GroupDecoder::new(cfg, 0).map_err(|e| e.to_string())?;
    let count = r.u32()? as usize;
    if count != decoder.params().len() {
        return Err(format!("{count} parameters, config implies {}", decoder.params().len()));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|e| format!("parameter name: {e}"))?;
        let id = decoder.params().find(name).map_err(|e| e.to_string())?;
        if std::mem::replace(&mut seen[id.0], true) {
            return Err(format!("{name}: duplicated"));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let param = decoder.params_mut().get_mut(id);
        if shape != param.shape {
            return Err(format!("{name}: shape {shape:?}, expected {:?}", param.shape));
        }
        let n = param.len();
        let data = r.take(n * 8)?;
        for (dst, chunk) in param.value_mut().iter_mut().zip(data.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(decoder)
}

pub fn load_checkpoint(path: &Path) -> Result<GroupDecoder> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|reason| Error::Checkpoint {
        path: path.to_path_buf(),
        reason,
    })
}
