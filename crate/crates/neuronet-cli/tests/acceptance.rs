//! Acceptance suite: every criterion prints one PASS line (run with
//! `--nocapture` to see them) and fails loudly otherwise.
//!
//! The desk-scale benchmark (criteria 3–5) trains one multi-protocol model
//! and three single-protocol models for 2000 steps each on ten 32³
//! phantoms; the fixture is built once and shared. Expect the whole suite
//! to take on the order of twenty minutes on two CPU cores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;
use std::time::Instant;

use tempfile::TempDir;

use neuronet::eval::{aggregate_dsc, benchmark_inference, evaluate};
use neuronet::graph::{
    build_model, forward, save_checkpoint, DecoderSpec, EncoderConfig, Mode, ModelConfig,
    ModelParameters,
};
use neuronet::phantom::{generate_dataset, PhantomSpec};
use neuronet::selftest::run_selftest;
use neuronet::tensor::{Tape, Tensor};
use neuronet::train::{train, AdamConfig, TrainConfig};
use neuronet::volume::{
    split_dataset, write_volume, DatasetManifest, Split, SplitCounts, Volume, VoxelData,
};

fn pass(criterion: u32, what: &str, detail: &str) {
    println!("ACCEPTANCE criterion {criterion} ({what}): PASS — {detail}");
}

// ── criterion 1: oracle suite ────────────────────────────────────────

#[test]
fn c1_oracle_suite_passes_quickly() {
    let start = Instant::now();
    let results = run_selftest(None).expect("selftest runs");
    let elapsed = start.elapsed().as_secs_f64();
    for r in &results {
        assert!(
            r.passed,
            "criterion 1: {} measured {:.3e} > allowed {:.3e}",
            r.name, r.measured, r.allowed
        );
    }
    assert!(
        elapsed < 300.0,
        "criterion 1: selftest took {elapsed:.1}s (budget 300s)"
    );
    pass(
        1,
        "oracle suite",
        &format!("{} checks passed in {elapsed:.1}s", results.len()),
    );
}

// ── criterion 2: architecture shape checks ───────────────────────────

#[test]
fn c2_default_architecture_shapes() {
    let config = ModelConfig::paper_default(11);
    let params = build_model::<f32>(&config).unwrap();
    let image = Tensor::full(vec![1, 128, 128, 128], 0.25);
    let mut tape = Tape::no_grad();
    let out = forward(&mut tape, &params, &image, Mode::Infer).unwrap();

    let tap_shapes: Vec<Vec<usize>> = out.taps.0.iter().map(|t| t.shape().to_vec()).collect();
    assert_eq!(
        tap_shapes,
        vec![
            vec![16, 128, 128, 128],
            vec![32, 64, 64, 64],
            vec![64, 32, 32, 32],
            vec![128, 16, 16, 16],
        ],
        "criterion 2: encoder tap shapes"
    );
    assert_eq!(out.logits.len(), 5, "criterion 2: five decoder outputs");
    let channels: Vec<usize> = out.logits.iter().map(|l| l.shape()[0]).collect();
    assert_eq!(channels, vec![4, 16, 139, 6, 4]);
    for logits in &out.logits {
        assert_eq!(
            &logits.shape()[1..],
            &[128, 128, 128],
            "criterion 2: full-resolution decoder output"
        );
    }
    drop(out);

    // k = 1 is bit-identical to the same head inside the multi-output
    // model built from the same seed.
    let mut single_cfg = ModelConfig::paper_default(11);
    single_cfg.decoders = vec![DecoderSpec {
        protocol_name: "fsl_fast".into(),
        n_classes: 4,
    }];
    let single = build_model::<f32>(&single_cfg).unwrap();
    let small = Tensor::full(vec![1, 8, 8, 8], 0.5);
    let multi_out = {
        let mut tape = Tape::no_grad();
        forward(&mut tape, &params, &small, Mode::Infer).unwrap()
    };
    let single_out = {
        let mut tape = Tape::no_grad();
        forward(&mut tape, &single, &small, Mode::Infer).unwrap()
    };
    // fsl_fast is decoder index 4 in the default order.
    assert_eq!(
        multi_out.logits[4].data(),
        single_out.logits[0].data(),
        "criterion 2: k=1 baseline equivalence"
    );
    pass(
        2,
        "architecture shapes",
        "taps 128³×16 / 64³×32 / 32³×64 / 16³×128; five full-resolution heads; k=1 bitwise parity",
    );
}

// ── desk-scale benchmark fixture (criteria 3, 4, 5) ──────────────────

const DESK_STEPS: u64 = 2000;
const DESK_CROP: [usize; 3] = [24, 24, 24];
const PROTOCOLS: [&str; 3] = ["structures", "tissue_a", "tissue_c"];

struct DeskBench {
    _dir: TempDir,
    nn_all_train_secs: f64,
    /// Train-split mean DSC per protocol, multi-task model.
    train_dsc: BTreeMap<String, f64>,
    /// Test-split mean DSC per protocol, multi-task model.
    test_dsc: BTreeMap<String, f64>,
    /// Test-split mean DSC of each single-protocol model, keyed by protocol.
    single_test_dsc: BTreeMap<String, f64>,
}

fn desk_encoder() -> EncoderConfig {
    EncoderConfig {
        n_scales: 3,
        n_units: 2,
        strides: vec![1, 2, 2],
        filters: vec![8, 16, 32],
        initial_kernel: 3,
        alpha: 0.1,
    }
}

fn desk_decoder(protocol: &str) -> DecoderSpec {
    DecoderSpec {
        protocol_name: protocol.to_string(),
        n_classes: if protocol == "structures" { 7 } else { 5 },
    }
}

fn desk_train_config() -> TrainConfig {
    TrainConfig {
        total_steps: DESK_STEPS,
        crop_size: DESK_CROP,
        batch_size: 1,
        queue_capacity: 16,
        seed: 77,
        checkpoint_interval: 0,
        validation_interval: 0,
        optimizer: AdamConfig::default(), // lr 0.001, eps 1e-5
    }
}

fn train_desk_model(
    decoders: Vec<DecoderSpec>,
    manifest: &DatasetManifest,
    root: &Path,
    out_dir: &Path,
) -> ModelParameters<f32> {
    let config = ModelConfig {
        encoder: desk_encoder(),
        decoders,
        seed: 31,
    };
    let mut params = build_model::<f32>(&config).unwrap();
    train(&mut params, manifest, root, &desk_train_config(), out_dir, 1).unwrap();
    params
}

fn mean_dsc_by_protocol(
    params: &ModelParameters<f32>,
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
) -> BTreeMap<String, f64> {
    let report = evaluate(params, manifest, root, split, Some(DESK_CROP)).unwrap();
    report
        .aggregates
        .iter()
        .map(|(p, a)| (p.clone(), a.mean / 100.0))
        .collect()
}

fn desk_bench() -> &'static DeskBench {
    static BENCH: OnceLock<DeskBench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let mut manifest = generate_dataset(&PhantomSpec::default(), 15, 2024, &root).unwrap();
        split_dataset(
            &mut manifest,
            SplitCounts {
                train: 10,
                val: 0,
                test: 5,
            },
            2024,
        )
        .unwrap();
        manifest.save(&root.join("manifest.json")).unwrap();

        // The multi-task model runs alone so its wall time is a clean
        // single-threaded measurement for criterion 3.
        let t0 = Instant::now();
        let nn_all = train_desk_model(
            PROTOCOLS.iter().map(|p| desk_decoder(p)).collect(),
            &manifest,
            &root,
            &root.join("run_all"),
        );
        let nn_all_train_secs = t0.elapsed().as_secs_f64();

        // The single-protocol arms share seeds and steps; train them in
        // parallel, they only feed the parity comparison.
        let singles: BTreeMap<String, ModelParameters<f32>> = std::thread::scope(|scope| {
            let handles: Vec<_> = PROTOCOLS
                .iter()
                .map(|p| {
                    let manifest = &manifest;
                    let root = &root;
                    scope.spawn(move || {
                        let params = train_desk_model(
                            vec![desk_decoder(p)],
                            manifest,
                            root,
                            &root.join(format!("run_{p}")),
                        );
                        (p.to_string(), params)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        let train_dsc = mean_dsc_by_protocol(&nn_all, &manifest, &root, Split::Train);
        let test_dsc = mean_dsc_by_protocol(&nn_all, &manifest, &root, Split::Test);
        let single_test_dsc = singles
            .iter()
            .map(|(p, params)| {
                let dsc = mean_dsc_by_protocol(params, &manifest, &root, Split::Test);
                (p.clone(), dsc[p])
            })
            .collect();

        DeskBench {
            _dir: dir,
            nn_all_train_secs,
            train_dsc,
            test_dsc,
            single_test_dsc,
        }
    })
}

#[test]
fn c3_desk_scale_overfit() {
    let bench = desk_bench();
    assert!(
        bench.nn_all_train_secs <= 1800.0,
        "criterion 3: training took {:.0}s (budget 1800s)",
        bench.nn_all_train_secs
    );
    for proto in PROTOCOLS {
        let dsc = bench.train_dsc[proto];
        assert!(
            dsc >= 0.90,
            "criterion 3: train-split mean DSC for {proto} is {dsc:.4} < 0.90 ({:?})",
            bench.train_dsc
        );
    }
    pass(
        3,
        "desk-scale overfit",
        &format!(
            "train DSC {:?} in {:.0}s",
            bench.train_dsc, bench.nn_all_train_secs
        ),
    );
}

#[test]
fn c4_generalization_to_unseen_phantoms() {
    let bench = desk_bench();
    for proto in PROTOCOLS {
        let dsc = bench.test_dsc[proto];
        assert!(
            dsc >= 0.80,
            "criterion 4: held-out mean DSC for {proto} is {dsc:.4} < 0.80 ({:?})",
            bench.test_dsc
        );
    }
    pass(4, "generalization sanity", &format!("held-out DSC {:?}", bench.test_dsc));
}

#[test]
fn c5_multitask_parity_with_single_models() {
    let bench = desk_bench();
    for proto in PROTOCOLS {
        let all = bench.test_dsc[proto];
        let single = bench.single_test_dsc[proto];
        assert!(
            (all - single).abs() <= 0.05,
            "criterion 5: {proto}: multi {all:.4} vs single {single:.4} differ by more than 0.05"
        );
    }
    pass(
        5,
        "multi-task parity",
        &format!(
            "multi {:?} vs single {:?}",
            bench.test_dsc, bench.single_test_dsc
        ),
    );
}

// ── criterion 6: end-to-end determinism through the CLI ──────────────

fn neuronet_cmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuronet"))
        .args(args)
        .env("NEURONET_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(0),
        "{what} failed: stdout={} stderr={}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn micro_run_config(dir: &Path, data: &Path, out_name: &str, steps: u64) -> PathBuf {
    let config = serde_json::json!({
        "model": {
            "encoder": {
                "n_scales": 2, "n_units": 1, "strides": [1, 2],
                "filters": [4, 8], "initial_kernel": 3, "alpha": 0.1
            },
            "decoders": [
                {"protocol_name": "structures", "n_classes": 7},
                {"protocol_name": "tissue_a", "n_classes": 5},
                {"protocol_name": "tissue_c", "n_classes": 5}
            ],
            "seed": 5
        },
        "train": {
            "total_steps": steps, "crop_size": [8, 8, 8], "batch_size": 1,
            "queue_capacity": 16, "seed": 9, "checkpoint_interval": 0,
            "validation_interval": 0,
            "optimizer": {"learning_rate": 0.001, "beta1": 0.9, "beta2": 0.999, "epsilon": 1e-5}
        },
        "manifest": data.join("manifest.json"),
        "out_dir": dir.join(out_name)
    });
    let path = dir.join(format!("{out_name}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

fn gen_micro_data(dir: &Path, subjects: usize) -> PathBuf {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, r#"{"extents": [16, 16, 16], "seed": 3}"#).unwrap();
    let data = dir.join("data");
    let out = neuronet_cmd(&[
        "gen-data",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        data.to_str().unwrap(),
        "--subjects",
        &subjects.to_string(),
        "--seed",
        "21",
        "--train",
        &(subjects - 3).to_string(),
        "--val",
        "1",
        "--test",
        "2",
    ]);
    assert_ok(&out, "gen-data");
    data
}

/// The loss-relevant view of one training-log line (timings excluded).
fn loss_lines(path: &Path) -> Vec<(u64, BTreeMap<String, f64>, f64)> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let losses = v["losses"]
                .as_object()
                .unwrap()
                .iter()
                .map(|(k, x)| (k.clone(), x.as_f64().unwrap()))
                .collect();
            (
                v["step"].as_u64().unwrap(),
                losses,
                v["total_loss"].as_f64().unwrap(),
            )
        })
        .collect()
}

#[test]
fn c6_training_determinism_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro_data(dir.path(), 6);
    let cfg_a = micro_run_config(dir.path(), &data, "run_a", 60);
    let cfg_b = micro_run_config(dir.path(), &data, "run_b", 60);
    assert_ok(&neuronet_cmd(&["train", "--config", cfg_a.to_str().unwrap()]), "train A");
    assert_ok(&neuronet_cmd(&["train", "--config", cfg_b.to_str().unwrap()]), "train B");

    let ckpt_a = std::fs::read(dir.path().join("run_a/final.nnckpt")).unwrap();
    let ckpt_b = std::fs::read(dir.path().join("run_b/final.nnckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "criterion 6: final checkpoints differ");

    let log_a = loss_lines(&dir.path().join("run_a/train_log.ndjson"));
    let log_b = loss_lines(&dir.path().join("run_b/train_log.ndjson"));
    assert_eq!(log_a.len(), 60);
    for (a, b) in log_a.iter().zip(&log_b) {
        assert_eq!(a.0, b.0);
        assert_eq!(a.2.to_bits(), b.2.to_bits(), "criterion 6: total loss differs at step {}", a.0);
        for (k, v) in &a.1 {
            assert_eq!(v.to_bits(), b.1[k].to_bits(), "criterion 6: loss {k} differs at step {}", a.0);
        }
    }
    pass(
        6,
        "determinism",
        "two CLI runs: bit-identical final checkpoints and loss logs",
    );
}

// ── criterion 7: full pipeline round trip through the CLI ────────────

#[test]
fn c7_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_micro_data(dir.path(), 8);
    let cfg = micro_run_config(dir.path(), &data, "run_pipe", 150);
    assert_ok(&neuronet_cmd(&["train", "--config", cfg.to_str().unwrap()]), "train");
    let ckpt = dir.path().join("run_pipe/final.nnckpt");

    // Infer on one test-split image.
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap())
            .unwrap();
    let test_subject = manifest["subjects"]
        .as_array()
        .unwrap()
        .iter()
        .find(|s| s["split"] == "test")
        .expect("a test subject exists");
    let image_rel = test_subject["image"].as_str().unwrap();
    let pred_dir = dir.path().join("pred");
    let out = neuronet_cmd(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data.join(image_rel).to_str().unwrap(),
        "--out",
        pred_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "infer");
    assert_eq!(std::fs::read_dir(&pred_dir).unwrap().count(), 3);

    // Evaluate the test split.
    let report_dir = dir.path().join("report");
    let out = neuronet_cmd(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--manifest",
        data.join("manifest.json").to_str().unwrap(),
        "--split",
        "test",
        "--tile",
        "8",
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "evaluate");

    // Table in the reference layout.
    let table = std::fs::read_to_string(report_dir.join("dice_report.txt")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert!(lines[0].starts_with("protocol"));
    for (i, row) in ["mean", "std", "min", "max"].iter().enumerate() {
        assert!(lines[i + 1].starts_with(row), "row {row} missing: {table}");
    }

    // Aggregates must match independent recomputation from the dump to
    // 0.01 percentage points.
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("dice_report.json")).unwrap())
            .unwrap();
    let dump = std::fs::read_to_string(report_dir.join("per_subject.ndjson")).unwrap();
    let mut per_proto: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for line in dump.lines() {
        let row: serde_json::Value = serde_json::from_str(line).unwrap();
        for (proto, d) in row["dsc"].as_object().unwrap() {
            if let Some(mean) = d["mean"].as_f64() {
                per_proto.entry(proto.clone()).or_default().push(mean);
            }
        }
    }
    assert_eq!(per_proto.len(), 3);
    for (proto, values) in &per_proto {
        let direct = aggregate_dsc(values).unwrap();
        let reported = &report["aggregates"][proto];
        for (field, direct_value) in [
            ("mean", direct.mean),
            ("std", direct.std),
            ("min", direct.min),
            ("max", direct.max),
        ] {
            let got = reported[field].as_f64().unwrap();
            assert!(
                (got - direct_value).abs() <= 0.01,
                "criterion 7: {proto}.{field}: reported {got} vs recomputed {direct_value}"
            );
        }
    }
    pass(
        7,
        "pipeline round trip",
        "gen-data → train → infer → evaluate all exit 0; aggregates match dump to 0.01pp",
    );
}

// ── criterion 8: inference timing harness ────────────────────────────

#[test]
fn c8_timing_harness_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let params = build_model::<f32>(&ModelConfig::paper_default(3)).unwrap();
    let ckpt = dir.path().join("paper.nnckpt");
    save_checkpoint(&params, &ckpt).unwrap();

    let n = 64 * 64 * 64;
    let values: Vec<f32> = (0..n).map(|i| ((i % 97) as f32) * 0.01).collect();
    let volume = Volume::new([64, 64, 64], [1.0; 3], VoxelData::F32(values)).unwrap();
    let vol_path = dir.path().join("vol64.nnvol");
    write_volume(&volume, &vol_path).unwrap();

    let scratch = dir.path().join("scratch");
    let note = "desk CPU, single thread";
    let a = benchmark_inference::<f32>(&ckpt, &vol_path, None, 3, note, &scratch).unwrap();
    let b = benchmark_inference::<f32>(&ckpt, &vol_path, None, 3, note, &scratch).unwrap();
    assert_eq!(a.hardware_note, note);
    assert!(a.min_seconds > 0.0);
    let (m1, m2) = (a.median_seconds, b.median_seconds);
    assert!(
        (m1 - m2).abs() <= 0.5 * m1.max(m2),
        "criterion 8: medians {m1:.2}s vs {m2:.2}s differ by more than 50%"
    );
    // Absolute numbers are reported, not asserted.
    pass(
        8,
        "timing harness",
        &format!(
            "64³ volume through the default architecture: medians {m1:.2}s / {m2:.2}s, min {:.2}s ({note})",
            a.min_seconds.min(b.min_seconds)
        ),
    );
}
