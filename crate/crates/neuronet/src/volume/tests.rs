use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;

use crate::error::Error;
use crate::volume::{
    normalize_zscore, random_crop, read_volume, split_dataset, write_volume, DatasetManifest,
    LabelMap, ProtocolInfo, Split, SplitCounts, SubjectEntry, Volume, VoxelData,
};

fn rand_f32_volume(extents: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = extents[0] * extents[1] * extents[2];
    let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
    Volume::new(extents, [1.0, 1.0, 1.0], VoxelData::F32(data)).unwrap()
}

// ── native container ─────────────────────────────────────────────────

#[test]
fn native_roundtrip_is_bit_identical() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("vol.nnvol");
    let vol = rand_f32_volume([9, 8, 7], 1);
    write_volume(&vol, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(vol, back);

    // Twice-written files are byte-identical.
    let path2 = dir.path().join("vol2.nnvol");
    write_volume(&vol, &path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn native_roundtrip_integer_dtypes() {
    let dir = tempdir().unwrap();
    for (name, data) in [
        ("u8.nnvol", VoxelData::U8(vec![0, 1, 255, 7, 2, 9, 0, 3])),
        ("i16.nnvol", VoxelData::I16(vec![-5, 0, 32767, -32768, 1, 2, 3, 4])),
    ] {
        let path = dir.path().join(name);
        let vol = Volume::new([2, 2, 2], [0.5, 0.5, 2.0], data).unwrap();
        write_volume(&vol, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), vol);
    }
}

#[test]
fn wrong_magic_is_a_format_error() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("garbage.nnvol");
    std::fs::write(&path, b"NOTAVOL???").unwrap();
    assert!(matches!(read_volume(&path), Err(Error::Format(_))));
}

#[test]
fn truncated_payload_is_a_format_error() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("vol.nnvol");
    write_volume(&rand_f32_volume([4, 4, 4], 2), &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::Format(_))));
}

// ── NIfTI-1 ──────────────────────────────────────────────────────────

/// Build a minimal valid single-file NIfTI-1 byte buffer from the format's
/// field offsets: sizeof_hdr at 0, dim at 40, datatype at 70, pixdim at 76,
/// vox_offset at 108, scl at 112/116, magic "n+1\0" at 344, payload at 352.
fn minimal_nifti(datatype: i16, dims: [u16; 3], payload: &[u8], slope: f32, inter: f32) -> Vec<u8> {
    let mut h = vec![0u8; 352];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    h[40..42].copy_from_slice(&3i16.to_le_bytes());
    for (i, &d) in dims.iter().enumerate() {
        h[42 + 2 * i..44 + 2 * i].copy_from_slice(&(d as i16).to_le_bytes());
    }
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    for i in 1..=3 {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&1.0f32.to_le_bytes());
    }
    h[108..112].copy_from_slice(&352.0f32.to_le_bytes());
    h[112..116].copy_from_slice(&slope.to_le_bytes());
    h[116..120].copy_from_slice(&inter.to_le_bytes());
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

#[test]
fn minimal_nifti_f32_reads_back() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("vol.nii");
    let values: Vec<f32> = (0..64).map(|i| i as f32 * 0.5).collect();
    let mut payload = Vec::new();
    for v in &values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, minimal_nifti(16, [4, 4, 4], &payload, 0.0, 0.0)).unwrap();
    let vol = read_volume(&path).unwrap();
    assert_eq!(vol.extents, [4, 4, 4]);
    assert_eq!(vol.data, VoxelData::F32(values));
}

#[test]
fn nifti_applies_scl_slope_and_inter() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("scaled.nii");
    let payload: Vec<u8> = vec![0, 1, 2, 3, 4, 5, 6, 7];
    std::fs::write(&path, minimal_nifti(2, [2, 2, 2], &payload, 2.0, -1.0)).unwrap();
    let vol = read_volume(&path).unwrap();
    match vol.data {
        VoxelData::F32(v) => {
            for (i, &x) in v.iter().enumerate() {
                assert_eq!(x, i as f32 * 2.0 - 1.0);
            }
        }
        other => panic!("expected f32 after scaling, got {other:?}"),
    }
}

#[test]
fn nifti_unsupported_datatype_names_field() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("complex.nii");
    std::fs::write(&path, minimal_nifti(32, [2, 2, 2], &[0u8; 64], 0.0, 0.0)).unwrap();
    match read_volume(&path) {
        Err(Error::Format(msg)) => assert!(msg.contains("datatype"), "got: {msg}"),
        other => panic!("expected format error, got {other:?}"),
    }
}

#[test]
fn nifti_axis_order_maps_x_fastest_to_w() {
    // dims (x=2, y=3, z=4) should land in extents [D=4, H=3, W=2].
    let dir = tempdir().unwrap();
    let path = dir.path().join("aniso.nii");
    let payload: Vec<u8> = (0..24).collect();
    std::fs::write(&path, minimal_nifti(2, [2, 3, 4], &payload, 0.0, 0.0)).unwrap();
    let vol = read_volume(&path).unwrap();
    assert_eq!(vol.extents, [4, 3, 2]);
    // Voxel (z, y, x) = (1, 0, 0) is element 6 of the x-fastest stream.
    match &vol.data {
        VoxelData::U8(v) => assert_eq!(v[(1 * 3 + 0) * 2 + 0], 6),
        _ => unreachable!(),
    }
}

// ── normalization ────────────────────────────────────────────────────

#[test]
fn zscore_constant_volume_is_all_zeros() {
    let vol = Volume::new([2, 2, 2], [1.0; 3], VoxelData::F32(vec![3.5; 8])).unwrap();
    let out = normalize_zscore(&vol);
    match out.data {
        VoxelData::F32(v) => assert!(v.iter().all(|&x| x == 0.0)),
        _ => unreachable!(),
    }
}

#[test]
fn zscore_two_values() {
    let vol = Volume::new([1, 1, 2], [1.0; 3], VoxelData::F32(vec![1.0, 3.0])).unwrap();
    let out = normalize_zscore(&vol);
    match out.data {
        VoxelData::F32(v) => {
            assert!((v[0] - -1.0).abs() < 1e-6);
            assert!((v[1] - 1.0).abs() < 1e-6);
        }
        _ => unreachable!(),
    }
}

#[test]
fn zscore_statistics_and_idempotence() {
    let vol = rand_f32_volume([6, 5, 4], 3);
    let once = normalize_zscore(&vol);
    let values = once.to_f32();
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let std = (values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    assert!(mean.abs() < 1e-5);
    assert!((std - 1.0).abs() < 1e-4);

    let twice = normalize_zscore(&once);
    for (&a, &b) in once.to_f32().iter().zip(twice.to_f32().iter()) {
        assert!((a - b).abs() < 1e-4);
    }
}

// ── cropping ─────────────────────────────────────────────────────────

fn label_map_of(vol: &Volume, n_classes: usize, seed: u64) -> LabelMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..vol.numel()).map(|_| rng.gen_range(0..n_classes as u16)).collect();
    LabelMap::new(vol.extents, labels, n_classes).unwrap()
}

#[test]
fn crop_of_full_size_is_identity() {
    let vol = rand_f32_volume([4, 5, 6], 9);
    let lm = label_map_of(&vol, 3, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (img, labs, offset) = random_crop(&vol, &[&lm], [4, 5, 6], &mut rng).unwrap();
    assert_eq!(offset, [0, 0, 0]);
    assert_eq!(img, vol.to_f32());
    assert_eq!(labs[0], lm.labels);
}

#[test]
fn crop_offsets_are_seed_deterministic() {
    let vol = rand_f32_volume([8, 8, 8], 11);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..5)
            .map(|_| random_crop(&vol, &[], [4, 4, 4], &mut rng).unwrap().2)
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(7), draw(7));
    assert_ne!(draw(7), draw(8));
}

#[test]
fn crop_alignment_is_exact() {
    let vol = rand_f32_volume([5, 6, 7], 12);
    let lm = label_map_of(&vol, 4, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let size = [3, 2, 4];
    let (img, labs, off) = random_crop(&vol, &[&lm], size, &mut rng).unwrap();
    let src = vol.to_f32();
    for d in 0..size[0] {
        for h in 0..size[1] {
            for w in 0..size[2] {
                let flat_crop = (d * size[1] + h) * size[2] + w;
                let flat_src =
                    ((off[0] + d) * vol.extents[1] + off[1] + h) * vol.extents[2] + off[2] + w;
                assert_eq!(img[flat_crop], src[flat_src]);
                assert_eq!(labs[0][flat_crop], lm.labels[flat_src]);
            }
        }
    }
}

#[test]
fn crop_larger_than_volume_is_an_error() {
    let vol = rand_f32_volume([4, 4, 4], 15);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        random_crop(&vol, &[], [5, 4, 4], &mut rng),
        Err(Error::Data(_))
    ));
}

#[test]
fn crop_offsets_cover_range_roughly_uniformly() {
    // Extent 32, crop 16: 17 valid offsets per axis. Over 1000 draws each
    // offset should appear and no offset should dominate (the draw is
    // seeded, so the counts are fixed).
    let vol = rand_f32_volume([32, 32, 32], 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = [[0u32; 17]; 3];
    for _ in 0..1000 {
        let (_, _, off) = random_crop(&vol, &[], [16, 16, 16], &mut rng).unwrap();
        for axis in 0..3 {
            assert!(off[axis] <= 16);
            counts[axis][off[axis]] += 1;
        }
    }
    let expected = 1000.0 / 17.0;
    for axis in 0..3 {
        let mut chi2 = 0.0;
        for &c in &counts[axis] {
            assert!(c > 0, "axis {axis} has an unreached offset: {counts:?}");
            chi2 += (c as f64 - expected).powi(2) / expected;
        }
        // 16 degrees of freedom; 99.9th percentile is ~39. Generous bound.
        assert!(chi2 < 45.0, "axis {axis} chi2 {chi2}");
    }
}

// ── manifests and splits ─────────────────────────────────────────────

fn synthetic_manifest(n: usize) -> DatasetManifest {
    let subjects = (0..n)
        .map(|i| SubjectEntry {
            id: format!("s{i:04}"),
            image: format!("s{i:04}/image.nnvol"),
            labels: BTreeMap::from([("tissue".to_string(), format!("s{i:04}/tissue.nnvol"))]),
            split: Split::Train,
        })
        .collect();
    DatasetManifest {
        protocols: vec![ProtocolInfo {
            name: "tissue".into(),
            n_classes: 4,
        }],
        subjects,
    }
}

#[test]
fn split_partitions_disjointly_and_exhaustively() {
    let mut m = synthetic_manifest(20);
    split_dataset(
        &mut m,
        SplitCounts {
            train: 16,
            val: 2,
            test: 2,
        },
        5,
    )
    .unwrap();
    let count = |s: Split| m.subjects.iter().filter(|e| e.split == s).count();
    assert_eq!(count(Split::Train), 16);
    assert_eq!(count(Split::Val), 2);
    assert_eq!(count(Split::Test), 2);
}

#[test]
fn split_is_seed_deterministic() {
    let counts = SplitCounts {
        train: 10,
        val: 3,
        test: 7,
    };
    let mut a = synthetic_manifest(25);
    let mut b = synthetic_manifest(25);
    split_dataset(&mut a, counts, 9).unwrap();
    split_dataset(&mut b, counts, 9).unwrap();
    assert_eq!(a, b);
    let mut c = synthetic_manifest(25);
    split_dataset(&mut c, counts, 10).unwrap();
    assert_ne!(a, c);
}

#[test]
fn split_at_reference_scale() {
    let mut m = synthetic_manifest(5723);
    split_dataset(
        &mut m,
        SplitCounts {
            train: 5000,
            val: 10,
            test: 713,
        },
        1,
    )
    .unwrap();
    let count = |s: Split| m.subjects.iter().filter(|e| e.split == s).count();
    assert_eq!(count(Split::Train), 5000);
    assert_eq!(count(Split::Val), 10);
    assert_eq!(count(Split::Test), 713);
}

#[test]
fn split_counts_exceeding_subjects_error() {
    let mut m = synthetic_manifest(5);
    assert!(matches!(
        split_dataset(
            &mut m,
            SplitCounts {
                train: 4,
                val: 1,
                test: 1
            },
            0
        ),
        Err(Error::Data(_))
    ));
}

#[test]
fn manifest_roundtrip_and_unknown_key_rejection() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    let m = synthetic_manifest(3);
    m.save(&path).unwrap();
    assert_eq!(DatasetManifest::load(&path).unwrap(), m);

    let with_unknown = r#"{"protocols": [], "subjects": [], "typo_key": 1}"#;
    std::fs::write(&path, with_unknown).unwrap();
    assert!(matches!(DatasetManifest::load(&path), Err(Error::Format(_))));
}

#[test]
fn subject_loading_enforces_geometry() {
    use crate::volume::load_subject;
    let dir = tempdir().unwrap();
    let image = rand_f32_volume([4, 4, 4], 31);
    let labels = LabelMap::new([4, 4, 5], vec![0; 80], 4).unwrap();
    write_volume(&image, &dir.path().join("img.nnvol")).unwrap();
    write_volume(&labels.to_volume([1.0; 3]), &dir.path().join("lab.nnvol")).unwrap();
    let manifest = DatasetManifest {
        protocols: vec![ProtocolInfo {
            name: "tissue".into(),
            n_classes: 4,
        }],
        subjects: vec![SubjectEntry {
            id: "s0".into(),
            image: "img.nnvol".into(),
            labels: BTreeMap::from([("tissue".to_string(), "lab.nnvol".to_string())]),
            split: Split::Train,
        }],
    };
    let err = load_subject(&manifest, dir.path(), &manifest.subjects[0]).unwrap_err();
    assert!(matches!(err, Error::Data(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prop_native_roundtrip(seed in 0u64..500) {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let extents = [
            rng.gen_range(1..6usize),
            rng.gen_range(1..6usize),
            rng.gen_range(1..6usize),
        ];
        let n = extents[0] * extents[1] * extents[2];
        let data = match seed % 3 {
            0 => VoxelData::U8((0..n).map(|_| rng.gen()).collect()),
            1 => VoxelData::I16((0..n).map(|_| rng.gen()).collect()),
            _ => VoxelData::F32((0..n).map(|_| rng.gen_range(-1e6..1e6)).collect()),
        };
        let vol = Volume::new(extents, [0.5, 1.0, 2.0], data).unwrap();
        let path = dir.path().join("v.nnvol");
        write_volume(&vol, &path).unwrap();
        prop_assert_eq!(read_volume(&path).unwrap(), vol);
    }
}
