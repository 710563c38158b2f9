//! Deterministic synthetic phantoms: nested-ellipsoid volumes with several
//! complementary, partially overlapping protocol label maps, plus a raw
//! intensity model with noise and a smooth multiplicative bias field. The
//! generator stands in for real multi-tool segmentations so the multi-task
//! pipeline can be exercised and verified at desk scale.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{
    write_volume, DatasetManifest, LabelMap, ProtocolInfo, Split, SubjectEntry, Volume, VoxelData,
};

/// How a protocol derives its labels from the latent structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    /// Background + three tissue shells + all blobs merged into one class.
    CoarseTissue,
    /// Background + tissue shells + every blob as its own class.
    FineStructure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    pub name: String,
    pub kind: ProtocolKind,
    /// Rounds of random boundary dilation/erosion emulating inter-tool
    /// disagreement. Zero reproduces the latent-derived labels exactly.
    pub jitter_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    pub protocols: Vec<ProtocolSpec>,
    pub n_blobs: usize,
    /// Mean intensity per latent class (background, csf, gm, wm, blobs...).
    pub class_means: Vec<f32>,
    pub noise_std: f32,
    pub bias_amplitude: f32,
    /// Polynomial order of the bias field (1 = linear shading, 2 adds
    /// quadratic terms).
    pub bias_order: usize,
    /// Template seed: shapes the shared anatomy-like structure. Subject
    /// seeds perturb it.
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [32, 32, 32],
            protocols: vec![
                ProtocolSpec {
                    name: "tissue_a".into(),
                    kind: ProtocolKind::CoarseTissue,
                    jitter_voxels: 0,
                },
                ProtocolSpec {
                    name: "structures".into(),
                    kind: ProtocolKind::FineStructure,
                    jitter_voxels: 0,
                },
                ProtocolSpec {
                    name: "tissue_c".into(),
                    kind: ProtocolKind::CoarseTissue,
                    jitter_voxels: 1,
                },
            ],
            n_blobs: 3,
            class_means: vec![0.05, 0.30, 0.55, 0.80, 1.00, 1.15, 1.30],
            noise_std: 0.05,
            bias_amplitude: 0.15,
            bias_order: 2,
            seed: 0,
        }
    }
}

/// Latent class layout: 0 background, 1 csf shell, 2 gm shell, 3 wm core,
/// 4.. blobs.
const LATENT_FIXED: usize = 4;

impl PhantomSpec {
    pub fn n_latent(&self) -> usize {
        LATENT_FIXED + self.n_blobs
    }

    pub fn n_classes_for(&self, kind: ProtocolKind) -> usize {
        match kind {
            ProtocolKind::CoarseTissue => 5,
            ProtocolKind::FineStructure => self.n_latent(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < 16) {
            return Err(Error::Config(format!(
                "extents {:?} too small to host the structure hierarchy (minimum 16)",
                self.extents
            )));
        }
        if !(2..=6).contains(&self.n_blobs) {
            return Err(Error::Config(format!(
                "n_blobs must be between 2 and 6, got {}",
                self.n_blobs
            )));
        }
        if self.class_means.len() != self.n_latent() {
            return Err(Error::Config(format!(
                "class_means needs {} entries (4 tissues + {} blobs), got {}",
                self.n_latent(),
                self.n_blobs,
                self.class_means.len()
            )));
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        let mut sorted = self.class_means.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for pair in sorted.windows(2) {
            if pair[1] - pair[0] < 2.0 * self.noise_std {
                return Err(Error::Config(format!(
                    "class means {} and {} are closer than twice the noise std ({})",
                    pair[0], pair[1], self.noise_std
                )));
            }
        }
        if !(0.0..1.0).contains(&self.bias_amplitude) {
            return Err(Error::Config("bias_amplitude must be in [0, 1)".into()));
        }
        if !(1..=3).contains(&self.bias_order) {
            return Err(Error::Config("bias_order must be 1, 2 or 3".into()));
        }
        if self.protocols.is_empty() {
            return Err(Error::Config("at least one protocol is required".into()));
        }
        for (i, p) in self.protocols.iter().enumerate() {
            if self.protocols[..i].iter().any(|o| o.name == p.name) {
                return Err(Error::Config(format!("duplicate protocol '{}'", p.name)));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: PhantomSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("phantom spec {}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }
}

/// The latent structure map every protocol's labels derive from.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub extents: [usize; 3],
    pub latent: Vec<u16>,
    pub n_latent: usize,
}

fn derive_seed(base: u64, tag: &str, index: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ base.wrapping_mul(0x9e3779b97f4a7c15);
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^ index.wrapping_mul(0xd1b54a32d192ed03)
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        let mut s = 0.0;
        for a in 0..3 {
            let d = (p[a] - self.center[a]) / self.radii[a];
            s += d * d;
        }
        s <= 1.0
    }
}

/// Template blob directions: axis-aligned unit offsets, at most six.
const BLOB_DIRS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

/// Build the latent structure for one subject: concentric tissue shells
/// with a few blob inclusions, template geometry from the spec seed and a
/// small per-subject perturbation.
pub fn generate_latent(spec: &PhantomSpec, subject_seed: u64) -> Result<GroundTruth> {
    spec.validate()?;
    let mut srng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "geometry", subject_seed));
    let e = spec.extents.map(|v| v as f64);

    let center = [
        e[0] / 2.0 + srng.gen_range(-0.03..0.03) * e[0],
        e[1] / 2.0 + srng.gen_range(-0.03..0.03) * e[1],
        e[2] / 2.0 + srng.gen_range(-0.03..0.03) * e[2],
    ];
    let base = [0.42 * e[0], 0.42 * e[1], 0.42 * e[2]];
    let wobble = srng.gen_range(-0.05..0.05);
    let r1 = base.map(|r| r * (1.0 + wobble));
    let outer = Ellipsoid { center, radii: r1 };
    let gm = Ellipsoid {
        center,
        radii: r1.map(|r| 0.84 * r),
    };
    let wm = Ellipsoid {
        center,
        radii: r1.map(|r| 0.64 * r),
    };

    let min_r1 = r1[0].min(r1[1]).min(r1[2]);
    let blob_radius_base = 0.34 * 0.64 * min_r1;
    let blob_dist = 0.55 * 0.64 * min_r1;
    let blobs: Vec<Ellipsoid> = (0..spec.n_blobs)
        .map(|i| {
            let dir = BLOB_DIRS[i];
            let jitter = [
                srng.gen_range(-0.5..0.5),
                srng.gen_range(-0.5..0.5),
                srng.gen_range(-0.5..0.5),
            ];
            let r = blob_radius_base * srng.gen_range(0.9..1.1);
            Ellipsoid {
                center: [
                    center[0] + dir[0] * blob_dist + jitter[0],
                    center[1] + dir[1] * blob_dist + jitter[1],
                    center[2] + dir[2] * blob_dist + jitter[2],
                ],
                radii: [r, r, r],
            }
        })
        .collect();

    let [dd, dh, dw] = spec.extents;
    let mut latent = vec![0u16; dd * dh * dw];
    for z in 0..dd {
        for y in 0..dh {
            for x in 0..dw {
                let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                let class = if let Some(b) = blobs.iter().position(|b| b.contains(p)) {
                    (LATENT_FIXED + b) as u16
                } else if wm.contains(p) {
                    3
                } else if gm.contains(p) {
                    2
                } else if outer.contains(p) {
                    1
                } else {
                    0
                };
                latent[(z * dh + y) * dw + x] = class;
            }
        }
    }
    Ok(GroundTruth {
        extents: spec.extents,
        latent,
        n_latent: spec.n_latent(),
    })
}

/// Map the latent structure onto one protocol's label set.
fn project_protocol(gt: &GroundTruth, kind: ProtocolKind) -> Vec<u16> {
    match kind {
        ProtocolKind::FineStructure => gt.latent.clone(),
        ProtocolKind::CoarseTissue => gt
            .latent
            .iter()
            .map(|&c| if c >= LATENT_FIXED as u16 { 4 } else { c })
            .collect(),
    }
}

const NEIGHBORS: [[isize; 3]; 6] = [
    [1, 0, 0],
    [-1, 0, 0],
    [0, 1, 0],
    [0, -1, 0],
    [0, 0, 1],
    [0, 0, -1],
];

fn for_each_neighbor(extents: [usize; 3], flat: usize, mut f: impl FnMut(usize)) {
    let [_, dh, dw] = extents;
    let z = flat / (dh * dw);
    let rem = flat % (dh * dw);
    let (y, x) = (rem / dw, rem % dw);
    for n in NEIGHBORS {
        let (nz, ny, nx) = (z as isize + n[0], y as isize + n[1], x as isize + n[2]);
        if nz >= 0
            && ny >= 0
            && nx >= 0
            && (nz as usize) < extents[0]
            && (ny as usize) < dh
            && (nx as usize) < dw
        {
            f((nz as usize * dh + ny as usize) * dw + nx as usize);
        }
    }
}

/// Fraction of eligible boundary voxels each dilation/erosion actually
/// flips. Tool disagreement is a noisy boundary effect, not a uniform
/// shift; 0.35 lands the tissue-map agreement for one jitter round inside
/// the pinned [0.90, 0.999] band on 32-voxel phantoms.
const JITTER_FLIP_PROB: f64 = 0.06;

fn dilate_class(labels: &mut Vec<u16>, extents: [usize; 3], class: u16, rng: &mut ChaCha8Rng) {
    let snapshot = labels.clone();
    for flat in 0..snapshot.len() {
        if snapshot[flat] == class {
            continue;
        }
        let mut touches = false;
        for_each_neighbor(extents, flat, |n| {
            if snapshot[n] == class {
                touches = true;
            }
        });
        if touches && rng.gen_bool(JITTER_FLIP_PROB) {
            labels[flat] = class;
        }
    }
}

fn erode_class(
    labels: &mut Vec<u16>,
    extents: [usize; 3],
    class: u16,
    n_classes: usize,
    rng: &mut ChaCha8Rng,
) {
    let snapshot = labels.clone();
    for flat in 0..snapshot.len() {
        if snapshot[flat] != class {
            continue;
        }
        let mut counts = vec![0u8; n_classes];
        let mut boundary = false;
        for_each_neighbor(extents, flat, |n| {
            if snapshot[n] != class {
                boundary = true;
                counts[snapshot[n] as usize] += 1;
            }
        });
        if boundary && rng.gen_bool(JITTER_FLIP_PROB) {
            let replacement = counts
                .iter()
                .enumerate()
                .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
                .map(|(i, _)| i as u16)
                .unwrap_or(0);
            labels[flat] = replacement;
        }
    }
}

/// Morphological boundary jitter: per round, dilate or erode each class by
/// one voxel in a seeded random order, emulating tool-specific boundary
/// bias.
fn jitter_labels(
    labels: &mut Vec<u16>,
    extents: [usize; 3],
    n_classes: usize,
    rounds: usize,
    rng: &mut ChaCha8Rng,
) {
    for _ in 0..rounds {
        let mut order: Vec<u16> = (1..n_classes as u16).collect();
        order.shuffle(rng);
        for class in order {
            if rng.gen_bool(0.5) {
                dilate_class(labels, extents, class, rng);
            } else {
                erode_class(labels, extents, class, n_classes, rng);
            }
        }
    }
}

/// Smooth multiplicative field: 1 + amplitude * p(x,y,z) with p a random
/// polynomial of the normalized coordinates scaled into [-1, 1], so the
/// multiplier always stays within [1-amplitude, 1+amplitude].
fn bias_field(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [dd, dh, dw] = spec.extents;
    // Monomial exponents up to the requested order, constant term excluded.
    let mut terms: Vec<([u32; 3], f64)> = Vec::new();
    for oz in 0..=spec.bias_order as u32 {
        for oy in 0..=spec.bias_order as u32 - oz {
            for ox in 0..=spec.bias_order as u32 - oz - oy {
                if oz + oy + ox == 0 {
                    continue;
                }
                terms.push(([oz, oy, ox], rng.gen_range(-1.0..1.0)));
            }
        }
    }
    let norm: f64 = terms.iter().map(|(_, c)| c.abs()).sum::<f64>().max(1e-12);
    let amp = spec.bias_amplitude as f64;

    let mut field = Vec::with_capacity(dd * dh * dw);
    for z in 0..dd {
        let zt = 2.0 * (z as f64 + 0.5) / dd as f64 - 1.0;
        for y in 0..dh {
            let yt = 2.0 * (y as f64 + 0.5) / dh as f64 - 1.0;
            for x in 0..dw {
                let xt = 2.0 * (x as f64 + 0.5) / dw as f64 - 1.0;
                let mut p = 0.0;
                for ([ez, ey, ex], c) in &terms {
                    p += c * zt.powi(*ez as i32) * yt.powi(*ey as i32) * xt.powi(*ex as i32);
                }
                field.push((1.0 + amp * p / norm) as f32);
            }
        }
    }
    field
}

/// Generate one subject: a raw-looking image volume and one label map per
/// protocol, all deterministic functions of (spec, subject_seed).
pub fn generate_subject(
    spec: &PhantomSpec,
    subject_seed: u64,
) -> Result<(Volume, BTreeMap<String, LabelMap>)> {
    let gt = generate_latent(spec, subject_seed)?;

    let mut labels = BTreeMap::new();
    for proto in &spec.protocols {
        let n_classes = spec.n_classes_for(proto.kind);
        let mut map = project_protocol(&gt, proto.kind);
        if proto.jitter_voxels > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
                spec.seed,
                &format!("jitter.{}", proto.name),
                subject_seed,
            ));
            jitter_labels(&mut map, gt.extents, n_classes, proto.jitter_voxels, &mut rng);
        }
        labels.insert(
            proto.name.clone(),
            LabelMap::new(gt.extents, map, n_classes)?,
        );
    }

    let mut irng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "intensity", subject_seed));
    let bias = bias_field(spec, &mut irng);
    let values: Vec<f32> = gt
        .latent
        .iter()
        .zip(&bias)
        .map(|(&c, &b)| {
            let noise: f32 = <f32 as crate::tensor::Element>::sample_standard_normal(&mut irng)
                * spec.noise_std;
            spec.class_means[c as usize] * b + noise
        })
        .collect();
    let image = Volume::new(spec.extents, [1.0, 1.0, 1.0], VoxelData::F32(values))?;
    Ok((image, labels))
}

/// Generate `n_subjects` phantoms under `out_dir`, write them in the native
/// container, and write `manifest.json`. Subjects start in the train split;
/// callers re-split as needed. On failure every file this call created is
/// removed.
pub fn generate_dataset(
    spec: &PhantomSpec,
    n_subjects: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_subjects == 0 {
        return Err(Error::Config("n_subjects must be positive".into()));
    }
    let mut created: Vec<PathBuf> = Vec::new();
    let result = (|| -> Result<DatasetManifest> {
        std::fs::create_dir_all(out_dir)?;
        let mut subjects = Vec::with_capacity(n_subjects);
        for i in 0..n_subjects {
            let id = format!("phantom{i:04}");
            let subject_seed = derive_seed(seed, "subject", i as u64);
            let (image, labels) = generate_subject(spec, subject_seed)?;
            let img_rel = format!("{id}/image.nnvol");
            let img_path = out_dir.join(&img_rel);
            write_volume(&image, &img_path)?;
            created.push(img_path);
            let mut label_paths = BTreeMap::new();
            for (proto, map) in &labels {
                let rel = format!("{id}/{proto}.nnvol");
                let path = out_dir.join(&rel);
                write_volume(&map.to_volume(image.spacing), &path)?;
                created.push(path);
                label_paths.insert(proto.clone(), rel);
            }
            subjects.push(SubjectEntry {
                id,
                image: img_rel,
                labels: label_paths,
                split: Split::Train,
            });
        }
        let manifest = DatasetManifest {
            protocols: spec
                .protocols
                .iter()
                .map(|p| ProtocolInfo {
                    name: p.name.clone(),
                    n_classes: spec.n_classes_for(p.kind),
                })
                .collect(),
            subjects,
        };
        let manifest_path = out_dir.join("manifest.json");
        manifest.save(&manifest_path)?;
        created.push(manifest_path);
        Ok(manifest)
    })();
    if result.is_err() {
        for path in created.iter().rev() {
            let _ = std::fs::remove_file(path);
        }
    }
    result
}

#[cfg(test)]
mod tests;
