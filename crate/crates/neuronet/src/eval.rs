//! Dice evaluation: per-label overlap, per-protocol aggregate reports in
//! the reference table layout, sliding-window full-volume inference, and
//! an end-to-end inference timing harness.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{forward, load_checkpoint, Mode, ModelParameters};
use crate::tensor::{Element, Tape, Tensor};
use crate::volume::{
    load_subject, normalize_zscore, read_volume, write_volume, DatasetManifest, LabelMap, Split,
    Volume,
};

/// Dice similarity 2|A∩B| / (|A|+|B|) for one label's binary masks.
/// Returns `None` when the label is absent from both volumes; callers
/// exclude that sentinel from aggregation rather than scoring it.
pub fn dice(prediction: &LabelMap, target: &LabelMap, label: u16) -> Result<Option<f64>> {
    if prediction.extents != target.extents {
        return Err(Error::Data(format!(
            "dice: geometry mismatch {:?} vs {:?}",
            prediction.extents, target.extents
        )));
    }
    let mut inter = 0u64;
    let mut a = 0u64;
    let mut b = 0u64;
    for (&p, &t) in prediction.labels.iter().zip(&target.labels) {
        let pm = p == label;
        let tm = t == label;
        a += pm as u64;
        b += tm as u64;
        inter += (pm && tm) as u64;
    }
    if a + b == 0 {
        Ok(None)
    } else {
        Ok(Some(2.0 * inter as f64 / (a + b) as f64))
    }
}

/// Mean Dice over the foreground labels 1..n_classes-1, skipping labels
/// absent from both volumes. `None` if every foreground label was skipped.
pub fn mean_dice(prediction: &LabelMap, target: &LabelMap, n_classes: usize) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut counted = 0usize;
    for label in 1..n_classes as u16 {
        if let Some(d) = dice(prediction, target, label)? {
            sum += d;
            counted += 1;
        }
    }
    Ok((counted > 0).then(|| sum / counted as f64))
}

/// Non-overlapping tile offsets at `tile` size along one axis, with the
/// last tile shifted inward so it stays in bounds. Overlapping voxels are
/// resolved by later-tile-wins during stitching.
fn tile_starts(extent: usize, tile: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..extent / tile).map(|i| i * tile).collect();
    let last = extent - tile;
    if *starts.last().unwrap() != last {
        starts.push(last);
    }
    starts
}

/// Sliding-window full-volume inference: z-score the volume, run crop-sized
/// tiles through the model, argmax each head per voxel, stitch. `tile` of
/// `None` runs the whole volume as a single tile.
pub fn predict_labels<T: Element>(
    params: &ModelParameters<T>,
    image: &Volume,
    tile: Option<[usize; 3]>,
) -> Result<Vec<LabelMap>> {
    let config = params.config();
    let tile = tile.unwrap_or(image.extents);
    let multiple = config.encoder.stride_product();
    for axis in 0..3 {
        if tile[axis] > image.extents[axis] {
            return Err(Error::Data(format!(
                "tile {tile:?} larger than volume {:?}",
                image.extents
            )));
        }
        if tile[axis] == 0 || tile[axis] % multiple != 0 {
            return Err(Error::Data(format!(
                "tile extent {}: extent must be a multiple of {multiple}",
                tile[axis]
            )));
        }
    }

    let normalized = normalize_zscore(image);
    let values = normalized.to_f32();
    let [ed, eh, ew] = image.extents;
    let mut outputs: Vec<LabelMap> = config
        .decoders
        .iter()
        .map(|d| LabelMap {
            extents: image.extents,
            labels: vec![0; ed * eh * ew],
            n_classes: d.n_classes,
        })
        .collect();

    for &z0 in &tile_starts(ed, tile[0]) {
        for &y0 in &tile_starts(eh, tile[1]) {
            for &x0 in &tile_starts(ew, tile[2]) {
                let mut crop = Vec::with_capacity(tile[0] * tile[1] * tile[2]);
                for z in 0..tile[0] {
                    for y in 0..tile[1] {
                        let start = ((z0 + z) * eh + y0 + y) * ew + x0;
                        crop.extend(values[start..start + tile[2]].iter().map(|&v| T::from_f64c(v as f64)));
                    }
                }
                let input = Tensor::new(vec![1, tile[0], tile[1], tile[2]], crop)?;
                let mut tape = Tape::no_grad();
                let out = forward(&mut tape, params, &input, Mode::Infer)?;
                let n = tile[0] * tile[1] * tile[2];
                for (head, logits) in out.logits.iter().enumerate() {
                    let classes = logits.shape()[0];
                    let data = logits.data();
                    let dst = &mut outputs[head].labels;
                    for v in 0..n {
                        // argmax over channels; softmax is monotone per
                        // voxel so logits give the same winner.
                        let mut best = 0u16;
                        let mut best_val = data[v];
                        for c in 1..classes {
                            let val = data[c * n + v];
                            if val > best_val {
                                best_val = val;
                                best = c as u16;
                            }
                        }
                        let (z, rem) = (v / (tile[1] * tile[2]), v % (tile[1] * tile[2]));
                        let (y, x) = (rem / tile[2], rem % tile[2]);
                        dst[((z0 + z) * eh + y0 + y) * ew + x0 + x] = best;
                    }
                }
            }
        }
    }
    Ok(outputs)
}

/// Per-protocol Dice result for one subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectProtocolDice {
    /// DSC per foreground label (index 0 ↔ label 1); `None` marks the
    /// both-empty sentinel.
    pub per_label: Vec<Option<f64>>,
    /// Mean over the scored labels.
    pub mean: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectDice {
    pub subject: String,
    pub dsc: BTreeMap<String, SubjectProtocolDice>,
}

/// Aggregate row in percent, over subjects of the per-subject label-mean.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProtocolAggregate {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub n_subjects: usize,
}

/// Aggregate per-subject mean-DSC values (fractions) into a percent row.
/// Sample standard deviation; zero for a single subject.
pub fn aggregate_dsc(values: &[f64]) -> Option<ProtocolAggregate> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Some(ProtocolAggregate {
        mean: 100.0 * mean,
        std: 100.0 * std,
        min: 100.0 * min,
        max: 100.0 * max,
        n_subjects: values.len(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiceReport {
    /// Protocol column order (the checkpoint's decoder order).
    pub protocols: Vec<String>,
    pub subjects: Vec<SubjectDice>,
    pub aggregates: BTreeMap<String, ProtocolAggregate>,
    /// Subjects skipped for missing protocol labels.
    pub skipped: Vec<String>,
}

impl DiceReport {
    /// Assemble aggregates from the per-subject rows.
    pub fn from_subjects(
        protocols: Vec<String>,
        subjects: Vec<SubjectDice>,
        skipped: Vec<String>,
    ) -> Self {
        let mut aggregates = BTreeMap::new();
        for proto in &protocols {
            let values: Vec<f64> = subjects
                .iter()
                .filter_map(|s| s.dsc.get(proto).and_then(|p| p.mean))
                .collect();
            if let Some(agg) = aggregate_dsc(&values) {
                aggregates.insert(proto.clone(), agg);
            }
        }
        DiceReport {
            protocols,
            subjects,
            aggregates,
            skipped,
        }
    }

    /// Fixed-width text table: protocol columns, mean/std/min/max rows,
    /// percent with one decimal.
    pub fn table(&self) -> String {
        let width = self
            .protocols
            .iter()
            .map(|p| p.len())
            .max()
            .unwrap_or(4)
            .max(8);
        let mut out = String::new();
        out.push_str(&format!("{:<10}", "protocol"));
        for p in &self.protocols {
            out.push_str(&format!(" {p:>width$}"));
        }
        out.push('\n');
        let rows: [(&str, fn(&ProtocolAggregate) -> f64); 4] = [
            ("mean", |a| a.mean),
            ("std", |a| a.std),
            ("min", |a| a.min),
            ("max", |a| a.max),
        ];
        for (name, get) in rows {
            out.push_str(&format!("{name:<10}"));
            for p in &self.protocols {
                match self.aggregates.get(p) {
                    Some(agg) => out.push_str(&format!(" {:>width$.1}", get(agg))),
                    None => out.push_str(&format!(" {:>width$}", "-")),
                }
            }
            out.push('\n');
        }
        if !self.skipped.is_empty() {
            out.push_str(&format!(
                "skipped {} subject(s) with missing labels: {}\n",
                self.skipped.len(),
                self.skipped.join(", ")
            ));
        }
        out
    }

    /// One JSON line per subject, for independent recomputation.
    pub fn per_subject_ndjson(&self) -> String {
        let mut out = String::new();
        for s in &self.subjects {
            out.push_str(&serde_json::to_string(s).expect("subject row serializes"));
            out.push('\n');
        }
        out
    }
}

/// Evaluate a model against one manifest split with tiled inference.
pub fn evaluate<T: Element>(
    params: &ModelParameters<T>,
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    tile: Option<[usize; 3]>,
) -> Result<DiceReport> {
    let config = params.config();
    for dec in &config.decoders {
        let info = manifest.protocol(&dec.protocol_name).map_err(|_| {
            Error::Config(format!(
                "checkpoint protocol '{}' is not in the manifest",
                dec.protocol_name
            ))
        })?;
        if info.n_classes != dec.n_classes {
            return Err(Error::Config(format!(
                "protocol '{}': checkpoint has {} classes, manifest has {}",
                dec.protocol_name, dec.n_classes, info.n_classes
            )));
        }
    }

    let mut subjects = Vec::new();
    let mut skipped = Vec::new();
    for entry in manifest.subjects_in(split) {
        let missing: Vec<&str> = config
            .decoders
            .iter()
            .map(|d| d.protocol_name.as_str())
            .filter(|p| !entry.labels.contains_key(*p))
            .collect();
        if !missing.is_empty() {
            eprintln!(
                "warning: skipping subject '{}': missing labels for {}",
                entry.id,
                missing.join(", ")
            );
            skipped.push(entry.id.clone());
            continue;
        }
        let loaded = load_subject(manifest, root, entry)?;
        let predictions = predict_labels(params, &loaded.image, tile)?;
        let mut dsc = BTreeMap::new();
        for (dec, pred) in config.decoders.iter().zip(&predictions) {
            let target = &loaded.labels[&dec.protocol_name];
            let mut per_label = Vec::with_capacity(dec.n_classes.saturating_sub(1));
            for label in 1..dec.n_classes as u16 {
                per_label.push(dice(pred, target, label)?);
            }
            let scored: Vec<f64> = per_label.iter().flatten().copied().collect();
            let mean = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
            dsc.insert(
                dec.protocol_name.clone(),
                SubjectProtocolDice { per_label, mean },
            );
        }
        subjects.push(SubjectDice {
            subject: entry.id.clone(),
            dsc,
        });
    }

    let protocols = config
        .decoders
        .iter()
        .map(|d| d.protocol_name.clone())
        .collect();
    Ok(DiceReport::from_subjects(protocols, subjects, skipped))
}

/// Wall-clock inference timing over repeated end-to-end runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub per_run_seconds: Vec<f64>,
    pub min_seconds: f64,
    pub median_seconds: f64,
    pub hardware_note: String,
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Time `repeats` full passes of load → normalize → tile → forward →
/// argmax → write for one subject volume.
pub fn benchmark_inference<T: Element>(
    checkpoint: &Path,
    volume_path: &Path,
    tile: Option<[usize; 3]>,
    repeats: usize,
    hardware_note: &str,
    scratch_dir: &Path,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::Usage("benchmark needs at least one repeat".into()));
    }
    let params = load_checkpoint::<T>(checkpoint)?;
    std::fs::create_dir_all(scratch_dir)?;
    let mut per_run = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let start = Instant::now();
        let image = read_volume(volume_path)?;
        let predictions = predict_labels(&params, &image, tile)?;
        for (dec, pred) in params.config().decoders.iter().zip(&predictions) {
            let out = scratch_dir.join(format!("bench_rep{rep}_{}.nnvol", dec.protocol_name));
            write_volume(&pred.to_volume(image.spacing), &out)?;
        }
        per_run.push(start.elapsed().as_secs_f64());
    }
    let mut sorted = per_run.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(TimingReport {
        min_seconds: sorted[0],
        median_seconds: median(&sorted),
        per_run_seconds: per_run,
        hardware_note: hardware_note.to_string(),
    })
}
