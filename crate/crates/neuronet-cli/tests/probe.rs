// Temporary convergence probe; removed before delivery.
use std::time::Instant;

use neuronet::graph::{build_model, DecoderSpec, EncoderConfig, ModelConfig};
use neuronet::phantom::{generate_dataset, PhantomSpec};
use neuronet::train::{train, AdamConfig, TrainConfig};
use neuronet::volume::{split_dataset, Split, SplitCounts};
use tempfile::tempdir;

#[test]
#[ignore]
fn probe_desk_convergence() {
    let dir = tempdir().unwrap();
    let spec = PhantomSpec::default();
    let mut manifest = generate_dataset(&spec, 15, 42, dir.path()).unwrap();
    split_dataset(&mut manifest, SplitCounts { train: 10, val: 0, test: 5 }, 42).unwrap();
    manifest.save(&dir.path().join("manifest.json")).unwrap();

    let model_cfg = ModelConfig {
        encoder: EncoderConfig {
            n_scales: 3,
            n_units: 2,
            strides: vec![1, 2, 2],
            filters: vec![8, 16, 32],
            initial_kernel: 3,
            alpha: 0.1,
        },
        decoders: vec![
            DecoderSpec { protocol_name: "structures".into(), n_classes: 7 },
            DecoderSpec { protocol_name: "tissue_a".into(), n_classes: 5 },
            DecoderSpec { protocol_name: "tissue_c".into(), n_classes: 5 },
        ],
        seed: 1,
    };
    let mut params = build_model::<f32>(&model_cfg).unwrap();
    let train_cfg = TrainConfig {
        total_steps: 2000,
        crop_size: [24, 24, 24],
        batch_size: 1,
        queue_capacity: 16,
        seed: 7,
        checkpoint_interval: 0,
        validation_interval: 0,
        optimizer: AdamConfig::default(),
    };
    let out = tempdir().unwrap();
    let t0 = Instant::now();
    let summary = train(&mut params, &manifest, dir.path(), &train_cfg, out.path(), 1).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let first: f64 = summary.records[..100].iter().map(|r| r.total_loss).sum::<f64>() / 100.0;
    let last: f64 = summary.records[1900..].iter().map(|r| r.total_loss).sum::<f64>() / 100.0;
    println!("train 2000 steps: {train_time:.1}s ({:.3}s/step), loss {first:.4} -> {last:.4}", train_time / 2000.0);

    for split in [Split::Train, Split::Test] {
        let t0 = Instant::now();
        let dsc = neuronet::train::train_split_mean_dice(&params, &manifest, dir.path(), split, [24, 24, 24]).unwrap();
        println!("{split} DSC ({:.1}s): {dsc:?}", t0.elapsed().as_secs_f64());
    }
}

#[test]
#[ignore]
fn probe_jitter_ceiling() {
    use neuronet::eval::mean_dice;
    let spec = PhantomSpec::default();
    let mut per_label_acc = vec![0.0; 4];
    let mut means = Vec::new();
    for subject in 0..10 {
        let (_, labels) = neuronet::phantom::generate_subject(&spec, subject).unwrap();
        let clean = &labels["tissue_a"];
        let jittered = &labels["tissue_c"];
        means.push(mean_dice(clean, jittered, 5).unwrap().unwrap());
        for label in 1..5u16 {
            per_label_acc[label as usize - 1] +=
                neuronet::eval::dice(clean, jittered, label).unwrap().unwrap() / 10.0;
        }
    }
    let mean = means.iter().sum::<f64>() / means.len() as f64;
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("tissue_c ceiling: mean {mean:.4}, min {min:.4}, per-label {per_label_acc:?}");
}
