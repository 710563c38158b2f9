//! Dataset manifest: subject records, the protocol table, and split tags.
//! Stored as a single JSON document with paths relative to its directory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{read_volume, LabelMap, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolInfo {
    pub name: String,
    pub n_classes: usize,
}

/// One subject: image path plus one label-map path per protocol, all
/// relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: String,
    pub image: String,
    pub labels: BTreeMap<String, String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub protocols: Vec<ProtocolInfo>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        for (i, p) in self.protocols.iter().enumerate() {
            if self.protocols[..i].iter().any(|o| o.name == p.name) {
                return Err(Error::Data(format!("duplicate protocol '{}'", p.name)));
            }
            if p.n_classes < 2 {
                return Err(Error::Data(format!(
                    "protocol '{}' needs at least 2 classes",
                    p.name
                )));
            }
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if self.subjects[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::Data(format!("duplicate subject id '{}'", s.id)));
            }
            for proto in s.labels.keys() {
                if !self.protocols.iter().any(|p| &p.name == proto) {
                    return Err(Error::Data(format!(
                        "subject '{}' references protocol '{proto}' missing from the table",
                        s.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn protocol(&self, name: &str) -> Result<&ProtocolInfo> {
        self.protocols
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::Data(format!("protocol '{name}' not in manifest")))
    }

    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = &SubjectEntry> {
        self.subjects.iter().filter(move |s| s.split == split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Internal(format!("manifest serialization: {e}")))?;
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// Seeded shuffle, then contiguous assignment of the requested counts in
/// train/val/test order. Subjects beyond the requested total stay in the
/// train split.
pub fn split_dataset(
    manifest: &mut DatasetManifest,
    counts: SplitCounts,
    seed: u64,
) -> Result<()> {
    let n = manifest.subjects.len();
    let total = counts.train + counts.val + counts.test;
    if total > n {
        return Err(Error::Data(format!(
            "split counts sum to {total} but the manifest has {n} subjects"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    for (rank, &idx) in order.iter().enumerate() {
        manifest.subjects[idx].split = if rank < counts.train {
            Split::Train
        } else if rank < counts.train + counts.val {
            Split::Val
        } else if rank < total {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(())
}

/// A subject with all referenced files read and validated: geometries
/// agree across the image and every label map, labels are in range.
#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub id: String,
    pub image: Volume,
    pub labels: BTreeMap<String, LabelMap>,
}

/// Load one subject's files. Fails loudly on any geometry mismatch.
pub fn load_subject(
    manifest: &DatasetManifest,
    root: &Path,
    entry: &SubjectEntry,
) -> Result<LoadedSubject> {
    let image = read_volume(&root.join(&entry.image))?;
    let mut labels = BTreeMap::new();
    for (proto, rel) in &entry.labels {
        let n_classes = manifest.protocol(proto)?.n_classes;
        let vol = read_volume(&root.join(rel))?;
        if vol.extents != image.extents {
            return Err(Error::Data(format!(
                "subject '{}': protocol '{proto}' geometry {:?} does not match image {:?}",
                entry.id, vol.extents, image.extents
            )));
        }
        labels.insert(proto.clone(), LabelMap::from_volume(&vol, n_classes)?);
    }
    Ok(LoadedSubject {
        id: entry.id.clone(),
        image,
        labels,
    })
}
