//! Minimal NIfTI-1 reader: uncompressed single-file `.nii`, little-endian,
//! datatypes u8 / i16 / f32, with `scl_slope`/`scl_inter` applied when set.
//! The native container remains the system of record; this exists so real
//! acquisitions can enter the pipeline.

use crate::error::{Error, Result};
use crate::volume::{Volume, VoxelData};

const HEADER_SIZE: usize = 348;

fn i32_at(buf: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

fn i16_at(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes(buf[off..off + 2].try_into().unwrap())
}

fn f32_at(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(buf[off..off + 4].try_into().unwrap())
}

pub(crate) fn looks_like_nifti(buf: &[u8]) -> bool {
    buf.len() >= HEADER_SIZE
        && (i32_at(buf, 0) == HEADER_SIZE as i32 || i32_at(buf, 0).swap_bytes() == HEADER_SIZE as i32)
}

pub(crate) fn read_nifti(buf: &[u8]) -> Result<Volume> {
    if buf.len() < HEADER_SIZE {
        return Err(Error::Format("NIfTI file shorter than its 348-byte header".into()));
    }
    let sizeof_hdr = i32_at(buf, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Format(
                "field 'sizeof_hdr': big-endian NIfTI files are not supported".into(),
            ));
        }
        return Err(Error::Format(format!(
            "field 'sizeof_hdr': expected 348, got {sizeof_hdr}"
        )));
    }
    let magic = &buf[344..348];
    if magic == b"ni1\0" {
        return Err(Error::Format(
            "field 'magic': two-file NIfTI (.hdr/.img) is not supported".into(),
        ));
    }
    if magic != b"n+1\0" {
        return Err(Error::Format("field 'magic': not a NIfTI-1 file".into()));
    }

    let ndim = i16_at(buf, 40);
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("field 'dim[0]': invalid rank {ndim}")));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate() {
        if (i as i16) < ndim {
            let v = i16_at(buf, 40 + 2 * (i + 1));
            if v < 1 {
                return Err(Error::Format(format!(
                    "field 'dim[{}]': non-positive extent {v}",
                    i + 1
                )));
            }
            *d = v as usize;
        }
    }
    if ndim < 3 || dims[3..].iter().any(|&d| d > 1) {
        return Err(Error::Format(format!(
            "field 'dim': expected a 3-D volume, got dims {dims:?}"
        )));
    }
    // NIfTI stores x fastest; the in-memory layout is [D,H,W] with W
    // fastest, so (x, y, z) maps onto (W, H, D) without reordering voxels.
    let extents = [dims[2], dims[1], dims[0]];
    let spacing = [f32_at(buf, 76 + 12), f32_at(buf, 76 + 8), f32_at(buf, 76 + 4)];

    let datatype = i16_at(buf, 70);
    let vox_offset = f32_at(buf, 108);
    if !vox_offset.is_finite() || vox_offset < HEADER_SIZE as f32 {
        return Err(Error::Format(format!(
            "field 'vox_offset': invalid value {vox_offset}"
        )));
    }
    let offset = vox_offset as usize;
    let numel = extents[0] * extents[1] * extents[2];
    let elem_size = match datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        other => {
            return Err(Error::Format(format!(
                "field 'datatype': unsupported code {other} (supported: 2=u8, 4=i16, 16=f32)"
            )))
        }
    };
    if buf.len() < offset + numel * elem_size {
        return Err(Error::Format(format!(
            "NIfTI payload truncated: need {} bytes at offset {offset}, file has {}",
            numel * elem_size,
            buf.len()
        )));
    }
    let raw = &buf[offset..offset + numel * elem_size];
    let data = match datatype {
        2 => VoxelData::U8(raw.to_vec()),
        4 => VoxelData::I16(
            raw.chunks_exact(2)
                .map(|c| i16::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        16 => VoxelData::F32(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => unreachable!(),
    };

    let slope = f32_at(buf, 112);
    let inter = f32_at(buf, 116);
    let data = if slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        let scaled = match &data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32 * slope + inter).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32 * slope + inter).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x * slope + inter).collect(),
        };
        VoxelData::F32(scaled)
    } else {
        data
    };
    Volume::new(extents, spacing, data)
}
