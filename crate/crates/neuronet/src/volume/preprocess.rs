//! Whole-volume z-score normalization and aligned random cropping.

use rand::Rng;

use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume, VoxelData};

/// Variance guard for constant volumes.
const EPS_NORM: f64 = 1e-8;

/// (x - mean) / max(std, eps) over all voxels of the volume.
pub fn normalize_zscore_values(values: &[f32]) -> Vec<f32> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values
        .iter()
        .map(|&v| {
            let d = v as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let inv = 1.0 / var.sqrt().max(EPS_NORM);
    values.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect()
}

/// Normalize a volume to zero mean and unit standard deviation using
/// whole-volume statistics (computed before any cropping).
pub fn normalize_zscore(volume: &Volume) -> Volume {
    Volume {
        extents: volume.extents,
        spacing: volume.spacing,
        data: VoxelData::F32(normalize_zscore_values(&volume.to_f32())),
    }
}

fn slice_block<T: Copy>(
    src: &[T],
    extents: [usize; 3],
    offset: [usize; 3],
    size: [usize; 3],
) -> Vec<T> {
    let [_, eh, ew] = extents;
    let mut out = Vec::with_capacity(size[0] * size[1] * size[2]);
    for d in 0..size[0] {
        for h in 0..size[1] {
            let start = ((offset[0] + d) * eh + offset[1] + h) * ew + offset[2];
            out.extend_from_slice(&src[start..start + size[2]]);
        }
    }
    out
}

/// Deterministic crop of image values and aligned label maps at `offset`.
pub fn slice_crop(
    image_values: &[f32],
    labels: &[&LabelMap],
    extents: [usize; 3],
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<(Vec<f32>, Vec<Vec<u16>>)> {
    for axis in 0..3 {
        if offset[axis] + size[axis] > extents[axis] {
            return Err(Error::Data(format!(
                "crop offset {offset:?} + size {size:?} exceeds extents {extents:?}"
            )));
        }
    }
    let img = slice_block(image_values, extents, offset, size);
    let labs = labels
        .iter()
        .map(|lm| slice_block(&lm.labels, lm.extents, offset, size))
        .collect();
    Ok((img, labs))
}

/// Draw one uniform crop offset and slice the image and every label map at
/// the same position. No implicit padding: the crop must fit.
pub fn random_crop<R: Rng + ?Sized>(
    image: &Volume,
    labels: &[&LabelMap],
    size: [usize; 3],
    rng: &mut R,
) -> Result<(Vec<f32>, Vec<Vec<u16>>, [usize; 3])> {
    for axis in 0..3 {
        if size[axis] == 0 || size[axis] > image.extents[axis] {
            return Err(Error::Data(format!(
                "crop size {size:?} does not fit in volume extents {:?}",
                image.extents
            )));
        }
    }
    for lm in labels {
        if lm.extents != image.extents {
            return Err(Error::Data(format!(
                "label geometry {:?} does not match image {:?}",
                lm.extents, image.extents
            )));
        }
    }
    let mut offset = [0usize; 3];
    for axis in 0..3 {
        offset[axis] = rng.gen_range(0..=image.extents[axis] - size[axis]);
    }
    let (img, labs) = slice_crop(&image.to_f32(), labels, image.extents, offset, size)?;
    Ok((img, labs, offset))
}
