//! Native volume container.
//!
//! Layout: magic `NNVOL1`, u32 rank, u32 extents (rank of them), u8 dtype
//! code {0: u8, 1: i16, 2: f32}, 3 × f32 voxel spacing, little-endian
//! payload. Round trips are bit-identical.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{nifti, Volume, VoxelData};

pub const VOLUME_MAGIC: &[u8; 6] = b"NNVOL1";

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + volume.numel() * 4);
    buf.extend_from_slice(VOLUME_MAGIC);
    buf.extend_from_slice(&3u32.to_le_bytes());
    for &e in &volume.extents {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    buf.push(volume.data.dtype_code());
    for &s in &volume.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    match &volume.data {
        VoxelData::U8(v) => buf.extend_from_slice(v),
        VoxelData::I16(v) => {
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        VoxelData::F32(v) => {
            for &x in v {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("volume file truncated at field '{field}'")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f32(&mut self, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

fn read_native(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(VOLUME_MAGIC.len(), "magic")?;
    if magic != VOLUME_MAGIC {
        return Err(Error::Format("bad magic: not a native volume".into()));
    }
    let rank = r.u32("rank")?;
    if rank != 3 {
        return Err(Error::Format(format!("field 'rank': expected 3, got {rank}")));
    }
    let mut extents = [0usize; 3];
    for e in &mut extents {
        *e = r.u32("extents")? as usize;
    }
    let dtype = r.take(1, "dtype")?[0];
    let mut spacing = [0f32; 3];
    for s in &mut spacing {
        *s = r.f32("spacing")?;
    }
    let numel = extents[0] * extents[1] * extents[2];
    let data = match dtype {
        0 => VoxelData::U8(r.take(numel, "payload")?.to_vec()),
        1 => {
            let raw = r.take(numel * 2, "payload")?;
            VoxelData::I16(
                raw.chunks_exact(2)
                    .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        2 => {
            let raw = r.take(numel * 4, "payload")?;
            VoxelData::F32(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        other => {
            return Err(Error::Format(format!(
                "field 'dtype': unsupported code {other}"
            )))
        }
    };
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "volume file has {} trailing bytes",
            buf.len() - r.pos
        )));
    }
    Volume::new(extents, spacing, data)
}

/// Read a volume, dispatching on content: the native container by magic,
/// or an uncompressed single-file NIfTI-1 image.
pub fn read_volume(path: &Path) -> Result<Volume> {
    let buf = fs::read(path)?;
    if buf.len() >= VOLUME_MAGIC.len() && &buf[..VOLUME_MAGIC.len()] == VOLUME_MAGIC {
        return read_native(&buf);
    }
    if nifti::looks_like_nifti(&buf) {
        return nifti::read_nifti(&buf);
    }
    Err(Error::Format(format!(
        "{}: bad magic: neither a native volume nor a NIfTI-1 file",
        path.display()
    )))
}
