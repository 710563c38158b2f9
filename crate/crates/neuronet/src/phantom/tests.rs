use std::collections::BTreeSet;

use tempfile::tempdir;

use crate::error::Error;
use crate::phantom::{
    generate_dataset, generate_latent, generate_subject, PhantomSpec, ProtocolKind, ProtocolSpec,
};
use crate::volume::{load_subject, read_volume, VoxelData};

#[test]
fn subjects_are_seed_deterministic() {
    let spec = PhantomSpec::default();
    let (img_a, lab_a) = generate_subject(&spec, 7).unwrap();
    let (img_b, lab_b) = generate_subject(&spec, 7).unwrap();
    assert_eq!(img_a, img_b);
    assert_eq!(lab_a, lab_b);
    let (img_c, _) = generate_subject(&spec, 8).unwrap();
    assert_ne!(img_a, img_c);
}

#[test]
fn zero_jitter_protocols_agree_exactly() {
    let mut spec = PhantomSpec::default();
    spec.protocols[2].jitter_voxels = 0; // tissue_c becomes a clone of tissue_a
    let (_, labels) = generate_subject(&spec, 3).unwrap();
    assert_eq!(labels["tissue_a"].labels, labels["tissue_c"].labels);
}

#[test]
fn one_voxel_jitter_keeps_agreement_in_pinned_band() {
    let spec = PhantomSpec::default();
    let mut ratios = Vec::new();
    for subject in 0..12 {
        let (_, labels) = generate_subject(&spec, subject).unwrap();
        let a = &labels["tissue_a"].labels;
        let c = &labels["tissue_c"].labels;
        let agree = a.iter().zip(c).filter(|(x, y)| x == y).count();
        ratios.push(agree as f64 / a.len() as f64);
    }
    for (i, r) in ratios.iter().enumerate() {
        assert!(
            (0.90..=0.999).contains(r),
            "subject {i}: agreement {r} outside [0.90, 0.999] ({ratios:?})"
        );
    }
}

#[test]
fn coarse_protocol_is_exactly_the_merged_fine_protocol() {
    let spec = PhantomSpec::default();
    let (_, labels) = generate_subject(&spec, 11).unwrap();
    let fine = &labels["structures"];
    let coarse = &labels["tissue_a"];
    let merged: Vec<u16> = fine
        .labels
        .iter()
        .map(|&c| if c >= 4 { 4 } else { c })
        .collect();
    assert_eq!(merged, coarse.labels);
}

#[test]
fn latent_contains_every_declared_class() {
    let spec = PhantomSpec::default();
    let gt = generate_latent(&spec, 1).unwrap();
    let present: BTreeSet<u16> = gt.latent.iter().copied().collect();
    for class in 0..gt.n_latent as u16 {
        assert!(present.contains(&class), "latent class {class} missing");
    }
}

#[test]
fn image_is_finite_and_bias_bounded() {
    // With zero noise the image is exactly mean[class] * bias, so the
    // bias multiplier is recoverable and must stay inside
    // [1-amplitude, 1+amplitude].
    let mut spec = PhantomSpec::default();
    spec.noise_std = 0.0;
    let (image, _) = generate_subject(&spec, 5).unwrap();
    let gt = generate_latent(&spec, 5).unwrap();
    let values = image.to_f32();
    assert!(values.iter().all(|v| v.is_finite()));
    for (v, &c) in values.iter().zip(&gt.latent) {
        let mean = spec.class_means[c as usize];
        let multiplier = v / mean;
        assert!(
            multiplier >= 1.0 - spec.bias_amplitude - 1e-4
                && multiplier <= 1.0 + spec.bias_amplitude + 1e-4,
            "bias multiplier {multiplier} out of range"
        );
    }
}

#[test]
fn dataset_writes_all_files_and_census_covers_all_classes() {
    let dir = tempdir().unwrap();
    let spec = PhantomSpec::default();
    let manifest = generate_dataset(&spec, 4, 99, dir.path()).unwrap();
    assert_eq!(manifest.subjects.len(), 4);
    assert_eq!(manifest.protocols.len(), 3);

    // Every referenced file loads; geometry is consistent.
    let mut class_census: std::collections::BTreeMap<String, BTreeSet<u16>> = Default::default();
    for entry in &manifest.subjects {
        let loaded = load_subject(&manifest, dir.path(), entry).unwrap();
        assert_eq!(loaded.image.extents, spec.extents);
        for (proto, map) in &loaded.labels {
            class_census
                .entry(proto.clone())
                .or_default()
                .extend(map.labels.iter().copied());
        }
    }
    // Label census: every declared class appears somewhere in the set.
    for proto in &manifest.protocols {
        let seen = &class_census[&proto.name];
        for class in 0..proto.n_classes as u16 {
            assert!(
                seen.contains(&class),
                "protocol {}: class {class} never appears",
                proto.name
            );
        }
    }

    // Images store f32, labels store u8.
    let img = read_volume(&dir.path().join(&manifest.subjects[0].image)).unwrap();
    assert!(matches!(img.data, VoxelData::F32(_)));
    let lab =
        read_volume(&dir.path().join(&manifest.subjects[0].labels["structures"])).unwrap();
    assert!(matches!(lab.data, VoxelData::U8(_)));
}

#[test]
fn dataset_manifests_are_byte_identical_across_runs() {
    let spec = PhantomSpec::default();
    let (dir_a, dir_b) = (tempdir().unwrap(), tempdir().unwrap());
    generate_dataset(&spec, 3, 42, dir_a.path()).unwrap();
    generate_dataset(&spec, 3, 42, dir_b.path()).unwrap();
    let a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
    assert_eq!(a, b);
    // And the volumes themselves.
    let va = std::fs::read(dir_a.path().join("phantom0001/image.nnvol")).unwrap();
    let vb = std::fs::read(dir_b.path().join("phantom0001/image.nnvol")).unwrap();
    assert_eq!(va, vb);
}

#[test]
fn undersized_extents_are_rejected() {
    let spec = PhantomSpec {
        extents: [8, 32, 32],
        ..Default::default()
    };
    assert!(matches!(generate_subject(&spec, 0), Err(Error::Config(_))));
}

#[test]
fn close_class_means_violate_learnability_guard() {
    let mut spec = PhantomSpec::default();
    spec.class_means[1] = spec.class_means[0] + 0.5 * spec.noise_std;
    assert!(matches!(spec.validate(), Err(Error::Config(_))));
}

#[test]
fn five_protocol_spec_mirrors_reference_layout() {
    // The configurable-protocol path: three tissue-style maps with
    // different jitter plus two structure maps.
    let mut spec = PhantomSpec::default();
    spec.protocols = vec![
        ProtocolSpec { name: "spm_tissue".into(), kind: ProtocolKind::CoarseTissue, jitter_voxels: 0 },
        ProtocolSpec { name: "fsl_first".into(), kind: ProtocolKind::FineStructure, jitter_voxels: 0 },
        ProtocolSpec { name: "malp_em".into(), kind: ProtocolKind::FineStructure, jitter_voxels: 1 },
        ProtocolSpec { name: "malp_em_tissue".into(), kind: ProtocolKind::CoarseTissue, jitter_voxels: 1 },
        ProtocolSpec { name: "fsl_fast".into(), kind: ProtocolKind::CoarseTissue, jitter_voxels: 2 },
    ];
    spec.validate().unwrap();
    let (_, labels) = generate_subject(&spec, 1).unwrap();
    assert_eq!(labels.len(), 5);
    // The two jittered tissue protocols disagree with each other and with
    // the reference tissue map.
    assert_ne!(labels["malp_em_tissue"].labels, labels["spm_tissue"].labels);
    assert_ne!(labels["fsl_fast"].labels, labels["malp_em_tissue"].labels);
}
