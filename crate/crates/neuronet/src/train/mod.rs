//! Multi-task training: per-protocol cross-entropy, the weighted total
//! loss, Adam, and the queue-fed optimization loop with checkpointing and
//! newline-delimited JSON logging.

mod adam;
mod queue;

pub use adam::{AdamConfig, AdamState};
pub use queue::{BatchQueue, PreparedDataset, QueueConfig, SampleCrop};

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::{forward, save_checkpoint, Mode, ModelParameters};
use crate::tensor::{Element, Tape, Tensor};
use crate::volume::{DatasetManifest, Split};

/// How long the consumer waits on the queue before declaring starvation.
const QUEUE_TIMEOUT: Duration = Duration::from_secs(60);

/// Per-head loss weights λ. Uniform 1/k unless configured otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights(Vec<f64>);

impl LossWeights {
    pub fn uniform(k: usize) -> Self {
        LossWeights(vec![1.0 / k as f64; k.max(1)])
    }

    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::Config("loss weights must not be empty".into()));
        }
        if lambdas.iter().any(|&l| l < 0.0 || !l.is_finite()) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(LossWeights(lambdas))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Voxel-mean categorical cross-entropy of one head against its labels.
pub fn cross_entropy<T: Element>(
    tape: &mut Tape<T>,
    logits: &Tensor<T>,
    labels: Arc<Vec<u16>>,
) -> Result<Tensor<T>> {
    tape.cross_entropy(logits, labels)
}

/// Weighted sum of the per-head losses: sum_i λ_i L_i.
pub fn total_loss<T: Element>(
    tape: &mut Tape<T>,
    losses: &[Tensor<T>],
    weights: &LossWeights,
) -> Result<Tensor<T>> {
    if losses.len() != weights.len() {
        return Err(Error::Usage(format!(
            "total_loss: {} losses but {} weights",
            losses.len(),
            weights.len()
        )));
    }
    tape.weighted_sum(losses, weights.as_slice())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_steps: u64,
    pub crop_size: [usize; 3],
    pub batch_size: usize,
    pub queue_capacity: usize,
    pub seed: u64,
    /// Steps between periodic checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    /// Steps between validation-split Dice evaluations; 0 disables them.
    pub validation_interval: u64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_steps: 100_000,
            crop_size: [128, 128, 128],
            batch_size: 1,
            queue_capacity: 16,
            seed: 0,
            checkpoint_interval: 0,
            validation_interval: 0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        if self.batch_size != 1 {
            return Err(Error::Config(
                "only batch_size = 1 is supported (volumetric crops)".into(),
            ));
        }
        if self.queue_capacity == 0 {
            return Err(Error::Config("queue_capacity must be at least 1".into()));
        }
        if self.crop_size.iter().any(|&c| c == 0) {
            return Err(Error::Config("crop_size extents must be positive".into()));
        }
        Ok(())
    }
}

/// One training-log line. `total_loss` always equals Σ λ_i · losses_i of
/// the same record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
    pub total_loss: f64,
    pub elapsed_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_dsc: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub steps_run: u64,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub records: Vec<TrainLogRecord>,
}

/// Run the full training loop: queue-fed crops, forward, per-protocol
/// cross-entropy, weighted total, backward, Adam, running-stat updates,
/// periodic checkpoints/validation, and a final checkpoint. On a
/// non-finite loss the run aborts with the last periodic checkpoint
/// retained.
pub fn train<T: Element>(
    params: &mut ModelParameters<T>,
    manifest: &DatasetManifest,
    root: &Path,
    config: &TrainConfig,
    out_dir: &Path,
    producer_threads: usize,
) -> Result<TrainSummary> {
    config.validate()?;
    let model_config = params.config().clone();
    let multiple = model_config.encoder.stride_product();
    for &c in &config.crop_size {
        if c % multiple != 0 {
            return Err(Error::Config(format!(
                "crop extent {c}: extent must be a multiple of {multiple}"
            )));
        }
    }
    let protocols: Vec<String> = model_config
        .decoders
        .iter()
        .map(|d| d.protocol_name.clone())
        .collect();
    for dec in &model_config.decoders {
        let info = manifest.protocol(&dec.protocol_name).map_err(|_| {
            Error::Config(format!(
                "decoder protocol '{}' is not in the manifest",
                dec.protocol_name
            ))
        })?;
        if info.n_classes != dec.n_classes {
            return Err(Error::Config(format!(
                "protocol '{}': decoder has {} classes, manifest has {}",
                dec.protocol_name, dec.n_classes, info.n_classes
            )));
        }
    }

    let dataset = Arc::new(PreparedDataset::load(
        manifest,
        root,
        Split::Train,
        &protocols,
    )?);
    let has_val = config.validation_interval > 0
        && manifest.subjects_in(Split::Val).next().is_some();

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.ndjson");
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);

    let queue = BatchQueue::start(
        Arc::clone(&dataset),
        &QueueConfig {
            capacity: config.queue_capacity,
            crop_size: config.crop_size,
            seed: config.seed,
            producers: producer_threads.max(1),
            epochs: None,
        },
    )?;

    let weights = LossWeights::uniform(protocols.len());
    let mut adam = AdamState::new(params, config.optimizer);
    let mut records = Vec::new();
    let started = Instant::now();

    for step in 1..=config.total_steps {
        let sample = queue
            .next_batch(QUEUE_TIMEOUT)?
            .ok_or_else(|| Error::Pipeline("training queue ended unexpectedly".into()))?;

        let image = Tensor::new(
            vec![1, sample.size[0], sample.size[1], sample.size[2]],
            sample.image.iter().map(|&v| T::from_f64c(v as f64)).collect(),
        )?;

        let mut tape = Tape::new();
        let out = forward(&mut tape, params, &image, Mode::Train)?;
        let mut head_losses = Vec::with_capacity(out.logits.len());
        for (logits, labels) in out.logits.iter().zip(&sample.labels) {
            head_losses.push(cross_entropy(&mut tape, logits, Arc::clone(labels))?);
        }
        let total = total_loss(&mut tape, &head_losses, &weights)?;

        let grads = tape.backward(&total)?;
        let mut named: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, bound) in &out.bindings {
            named.insert(name.clone(), grads.get(bound)?.clone());
        }
        adam.step(params, &named)?;
        for update in &out.bn_updates {
            params.apply_bn_update(update)?;
        }

        let mut record = TrainLogRecord {
            step,
            losses: protocols
                .iter()
                .zip(&head_losses)
                .map(|(p, l)| Ok((p.clone(), l.scalar_value()?.to_f64c())))
                .collect::<Result<_>>()?,
            total_loss: total.scalar_value()?.to_f64c(),
            elapsed_s: started.elapsed().as_secs_f64(),
            val_dsc: None,
        };

        if has_val && step % config.validation_interval == 0 {
            let report = evaluate(params, manifest, root, Split::Val, Some(config.crop_size))?;
            record.val_dsc = Some(
                report
                    .aggregates
                    .iter()
                    .map(|(p, a)| (p.clone(), a.mean / 100.0))
                    .collect(),
            );
        }

        serde_json::to_writer(&mut log, &record)
            .map_err(|e| Error::Internal(format!("log serialization: {e}")))?;
        log.write_all(b"\n")?;
        records.push(record);

        if config.checkpoint_interval > 0 && step % config.checkpoint_interval == 0 {
            save_checkpoint(params, &out_dir.join(format!("ckpt_{step:07}.nnckpt")))?;
            log.flush()?;
        }
    }

    let final_checkpoint = out_dir.join("final.nnckpt");
    save_checkpoint(params, &final_checkpoint)?;
    log.flush()?;
    Ok(TrainSummary {
        steps_run: config.total_steps,
        final_checkpoint,
        log_path,
        records,
    })
}

/// Training-set mean DSC per protocol for a trained model; convenience for
/// overfit checks.
pub fn train_split_mean_dice<T: Element>(
    params: &ModelParameters<T>,
    manifest: &DatasetManifest,
    root: &Path,
    split: Split,
    tile: [usize; 3],
) -> Result<BTreeMap<String, f64>> {
    let report = evaluate(params, manifest, root, split, Some(tile))?;
    Ok(report
        .aggregates
        .iter()
        .map(|(p, a)| (p.clone(), a.mean / 100.0))
        .collect())
}
