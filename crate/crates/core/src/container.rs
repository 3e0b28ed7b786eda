//! Raw tensor container shared by checkpoints, images, teacher features and
//! cache snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      [u8; 4]          e.g. "ELVS", "IMGF", "TFEA", "KVSN"
//! version    u32
//! count      u32              number of tensors
//! count x {
//!     name_len  u32
//!     name      [u8; name_len] UTF-8
//!     rank      u32
//!     dims      [u64; rank]
//!     data      [f32; prod(dims)]
//! }
//! ```

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ELVS";
pub const IMAGE_MAGIC: [u8; 4] = *b"IMGF";
pub const TEACHER_MAGIC: [u8; 4] = *b"TFEA";
pub const SESSION_MAGIC: [u8; 4] = *b"KVSN";

pub fn encode(magic: [u8; 4], tensors: &[(&str, &Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = tensors.iter().map(|(n, t)| 12 + n.len() + 8 * t.rank() + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {} (wanted {n} more)", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8], magic: [u8; 4]) -> std::result::Result<Vec<(String, Tensor<f32>)>, String> {
    let mut r = Reader { buf, pos: 0 };
    let got = r.take(4)?;
    if got != magic {
        return Err(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(&magic)
        ));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version}"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| format!("tensor name is not UTF-8: {e}"))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank > 16 {
            return Err(format!("tensor {name} has implausible rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| format!("tensor {name} dims overflow"))?;
        let bytes = r.take(n.checked_mul(4).ok_or("size overflow")?)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| format!("tensor {name}: {e}"))?;
        out.push((name, t));
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    Ok(out)
}

pub fn write_file(path: &Path, magic: [u8; 4], tensors: &[(&str, &Tensor<f32>)]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, encode(magic, tensors))?;
    Ok(())
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<Vec<(String, Tensor<f32>)>> {
    let buf = std::fs::read(path)?;
    decode(&buf, magic).map_err(|reason| Error::CorruptFile {
        path: path.to_path_buf(),
        reason,
    })
}
