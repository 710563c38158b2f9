//! Bounded producer/consumer crop queue: worker threads draw normalized
//! random crops from a shuffled subject stream into a fixed-capacity
//! channel; the training loop consumes them. Deterministic with a single
//! producer and a fixed seed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::mpsc::{Receiver, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::volume::{
    load_subject, normalize_zscore_values, slice_crop, DatasetManifest, LabelMap, Split,
};

/// One training example: a normalized image crop and the aligned label
/// crops, one per protocol in decoder order.
#[derive(Debug, Clone)]
pub struct SampleCrop {
    pub subject: String,
    pub offset: [usize; 3],
    pub size: [usize; 3],
    pub image: Vec<f32>,
    pub labels: Vec<Arc<Vec<u16>>>,
}

struct PreparedSubject {
    id: String,
    extents: [usize; 3],
    /// Whole-volume z-scored intensities (statistics computed before any
    /// cropping).
    image: Arc<Vec<f32>>,
    labels: Vec<Arc<LabelMap>>,
}

/// All subjects of one split, loaded, normalized, and with label maps
/// arranged in the decoder protocol order.
pub struct PreparedDataset {
    subjects: Vec<PreparedSubject>,
    pub protocols: Vec<String>,
}

impl PreparedDataset {
    pub fn load(
        manifest: &DatasetManifest,
        root: &Path,
        split: Split,
        protocols: &[String],
    ) -> Result<Self> {
        let mut subjects = Vec::new();
        for entry in manifest.subjects_in(split) {
            let loaded = load_subject(manifest, root, entry)?;
            let mut labels = Vec::with_capacity(protocols.len());
            let mut by_name: BTreeMap<String, LabelMap> = loaded.labels;
            for proto in protocols {
                let map = by_name.remove(proto).ok_or_else(|| {
                    Error::Data(format!(
                        "subject '{}' has no label map for protocol '{proto}'",
                        entry.id
                    ))
                })?;
                labels.push(Arc::new(map));
            }
            subjects.push(PreparedSubject {
                id: loaded.id,
                extents: loaded.image.extents,
                image: Arc::new(normalize_zscore_values(&loaded.image.to_f32())),
                labels,
            });
        }
        if subjects.is_empty() {
            return Err(Error::Data(format!("split '{split}' has no subjects")));
        }
        Ok(PreparedDataset {
            subjects,
            protocols: protocols.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    fn draw_crop<R: Rng>(&self, subject: usize, size: [usize; 3], rng: &mut R) -> Result<SampleCrop> {
        let s = &self.subjects[subject];
        let mut offset = [0usize; 3];
        for axis in 0..3 {
            if size[axis] > s.extents[axis] {
                return Err(Error::Data(format!(
                    "crop {size:?} larger than subject '{}' extents {:?}",
                    s.id, s.extents
                )));
            }
            offset[axis] = rng.gen_range(0..=s.extents[axis] - size[axis]);
        }
        let label_refs: Vec<&LabelMap> = s.labels.iter().map(|l| l.as_ref()).collect();
        let (image, labels) = slice_crop(&s.image, &label_refs, s.extents, offset, size)?;
        Ok(SampleCrop {
            subject: s.id.clone(),
            offset,
            size,
            image,
            labels: labels.into_iter().map(Arc::new).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct QueueConfig {
    pub capacity: usize,
    pub crop_size: [usize; 3],
    pub seed: u64,
    /// Producer worker count. Sample order is deterministic only with one
    /// producer; more producers trade reproducibility for throughput.
    pub producers: usize,
    /// `None` streams forever; `Some(n)` ends after n shuffled passes over
    /// the subjects (per producer), after which `next_batch` signals
    /// end-of-data.
    pub epochs: Option<u64>,
}

/// Handle to the running queue. Dropping it stops the producers.
pub struct BatchQueue {
    rx: Option<Receiver<SampleCrop>>,
    workers: Vec<JoinHandle<()>>,
}

fn producer_loop(
    dataset: Arc<PreparedDataset>,
    tx: SyncSender<SampleCrop>,
    crop: [usize; 3],
    seed: u64,
    epochs: Option<u64>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epoch = 0u64;
    loop {
        if let Some(limit) = epochs {
            if epoch >= limit {
                return; // drop tx: consumers see end-of-data
            }
        }
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        for subject in order {
            let sample = match dataset.draw_crop(subject, crop, &mut rng) {
                Ok(s) => s,
                // Geometry was validated at startup; treat failure here as
                // fatal for this worker.
                Err(_) => return,
            };
            if tx.send(sample).is_err() {
                return; // consumer went away
            }
        }
        epoch += 1;
    }
}

impl BatchQueue {
    pub fn start(dataset: Arc<PreparedDataset>, config: &QueueConfig) -> Result<Self> {
        if config.capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        if config.producers == 0 {
            return Err(Error::Config("queue needs at least one producer".into()));
        }
        // Validate crop geometry once, up front and loudly.
        for s in &dataset.subjects {
            for axis in 0..3 {
                if config.crop_size[axis] > s.extents[axis] {
                    return Err(Error::Data(format!(
                        "crop {:?} larger than subject '{}' extents {:?}",
                        config.crop_size, s.id, s.extents
                    )));
                }
            }
        }
        let (tx, rx) = std::sync::mpsc::sync_channel(config.capacity);
        let mut workers = Vec::with_capacity(config.producers);
        for w in 0..config.producers {
            let dataset = Arc::clone(&dataset);
            let tx = tx.clone();
            let crop = config.crop_size;
            let seed = config
                .seed
                .wrapping_mul(0x9e3779b97f4a7c15)
                .wrapping_add(w as u64);
            let epochs = config.epochs;
            workers.push(std::thread::spawn(move || {
                producer_loop(dataset, tx, crop, seed, epochs)
            }));
        }
        drop(tx);
        Ok(BatchQueue {
            rx: Some(rx),
            workers,
        })
    }

    /// Next sample. `Ok(None)` signals producer exhaustion in finite-epoch
    /// mode; a starved queue (no sample within the timeout) is a pipeline
    /// error.
    pub fn next_batch(&self, timeout: Duration) -> Result<Option<SampleCrop>> {
        let rx = self
            .rx
            .as_ref()
            .ok_or_else(|| Error::Internal("queue already shut down".into()))?;
        match rx.recv_timeout(timeout) {
            Ok(sample) => Ok(Some(sample)),
            Err(RecvTimeoutError::Disconnected) => Ok(None),
            Err(RecvTimeoutError::Timeout) => Err(Error::Pipeline(format!(
                "queue starved: no sample within {timeout:?}"
            ))),
        }
    }

    /// Number of samples currently buffered (draining view, test hook).
    pub fn drain_buffered(&self) -> usize {
        match &self.rx {
            Some(rx) => rx.try_iter().count(),
            None => 0,
        }
    }
}

impl Drop for BatchQueue {
    fn drop(&mut self) {
        // Dropping the receiver unblocks any producer stuck in send().
        self.rx.take();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}
