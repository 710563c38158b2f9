//! Volume containers and dataset plumbing: file formats, normalization,
//! aligned cropping, manifests and splits.

mod container;
mod manifest;
mod nifti;
mod preprocess;
#[cfg(test)]
mod tests;

pub use container::{read_volume, write_volume, VOLUME_MAGIC};
pub use manifest::{
    load_subject, split_dataset, DatasetManifest, LoadedSubject, ProtocolInfo, Split,
    SplitCounts, SubjectEntry,
};
pub use preprocess::{normalize_zscore, normalize_zscore_values, random_crop, slice_crop};

use crate::error::{Error, Result};

/// Voxel payload of a stored volume.
#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

impl VoxelData {
    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Container dtype code: 0 = u8, 1 = i16, 2 = f32.
    pub fn dtype_code(&self) -> u8 {
        match self {
            VoxelData::U8(_) => 0,
            VoxelData::I16(_) => 1,
            VoxelData::F32(_) => 2,
        }
    }
}

/// A dense `[D, H, W]` volume (W fastest) with informational voxel spacing
/// in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f32; 3],
    pub data: VoxelData,
}

impl Volume {
    pub fn new(extents: [usize; 3], spacing: [f32; 3], data: VoxelData) -> Result<Self> {
        let numel = extents[0] * extents[1] * extents[2];
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Data(format!("volume extents must be positive, got {extents:?}")));
        }
        if data.len() != numel {
            return Err(Error::Data(format!(
                "volume extents {extents:?} imply {numel} voxels, payload has {}",
                data.len()
            )));
        }
        Ok(Volume {
            extents,
            spacing,
            data,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Voxel values widened to f32 (the network's working type).
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            VoxelData::F32(v) => v.clone(),
        }
    }
}

/// Integer labeling of a volume under one protocol. Labels live in
/// `[0, n_classes)`; geometry must match the subject's image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub extents: [usize; 3],
    pub labels: Vec<u16>,
    pub n_classes: usize,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], labels: Vec<u16>, n_classes: usize) -> Result<Self> {
        let numel = extents[0] * extents[1] * extents[2];
        if labels.len() != numel {
            return Err(Error::Data(format!(
                "label map extents {extents:?} imply {numel} voxels, got {}",
                labels.len()
            )));
        }
        if let Some((i, &bad)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= n_classes)
        {
            return Err(Error::Data(format!(
                "label {bad} at flat index {i} out of range [0,{n_classes})"
            )));
        }
        Ok(LabelMap {
            extents,
            labels,
            n_classes,
        })
    }

    /// Interpret a stored volume as labels under a protocol.
    pub fn from_volume(volume: &Volume, n_classes: usize) -> Result<Self> {
        let labels: Vec<u16> = match &volume.data {
            VoxelData::U8(v) => v.iter().map(|&x| x as u16).collect(),
            VoxelData::I16(v) => {
                let mut out = Vec::with_capacity(v.len());
                for &x in v {
                    if x < 0 {
                        return Err(Error::Data(format!("negative label {x} in label volume")));
                    }
                    out.push(x as u16);
                }
                out
            }
            VoxelData::F32(_) => {
                return Err(Error::Data(
                    "label volumes must be integer typed (u8 or i16)".into(),
                ))
            }
        };
        LabelMap::new(volume.extents, labels, n_classes)
    }

    /// Pack into a volume for storage: u8 when the class count allows it.
    pub fn to_volume(&self, spacing: [f32; 3]) -> Volume {
        let data = if self.n_classes <= u8::MAX as usize + 1 {
            VoxelData::U8(self.labels.iter().map(|&l| l as u8).collect())
        } else {
            VoxelData::I16(self.labels.iter().map(|&l| l as i16).collect())
        };
        Volume {
            extents: self.extents,
            spacing,
            data,
        }
    }
}
