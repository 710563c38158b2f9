//! Model assembly: a shared residual 3D encoder feeding one light upscore
//! decoder head per labeling protocol.

mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{forward, BnUpdate, FeatureTaps, ForwardOutput, Mode};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Batch-norm variance guard. Distinct from the optimizer epsilon.
pub const EPS_BN: f64 = 1e-5;
/// Exponential moving average factor for the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.9;

/// Encoder topology. Defaults match the reference network: four scales of
/// two pre-activation residual units, strides {1,2,2,2}, filters doubling
/// from 16, leaky-ReLU slope 0.1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_scales: usize,
    pub n_units: usize,
    pub strides: Vec<usize>,
    pub filters: Vec<usize>,
    pub initial_kernel: usize,
    pub alpha: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_scales: 4,
            n_units: 2,
            strides: vec![1, 2, 2, 2],
            filters: vec![16, 32, 64, 128],
            initial_kernel: 3,
            alpha: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.n_units == 0 {
            return Err(Error::Config("encoder needs at least one scale and unit".into()));
        }
        if self.strides.len() != self.n_scales || self.filters.len() != self.n_scales {
            return Err(Error::Config(format!(
                "strides ({}) and filters ({}) must both have n_scales = {} entries",
                self.strides.len(),
                self.filters.len(),
                self.n_scales
            )));
        }
        if self.filters.iter().any(|&f| f == 0) {
            return Err(Error::Config("filter counts must be positive".into()));
        }
        if self.strides.iter().any(|&s| s != 1 && s != 2) {
            return Err(Error::Config("strides must be 1 or 2".into()));
        }
        if self.initial_kernel % 2 == 0 || self.initial_kernel == 0 {
            return Err(Error::Config("initial kernel extent must be odd".into()));
        }
        Ok(())
    }

    /// Product of all scale strides; input extents must be multiples of it.
    pub fn stride_product(&self) -> usize {
        self.strides.iter().product()
    }
}

/// One decoder head: a protocol name and its class count (background
/// included as class 0).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSpec {
    pub protocol_name: String,
    pub n_classes: usize,
}

/// Full model topology plus the initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoders: Vec<DecoderSpec>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoders.is_empty() {
            return Err(Error::Config("model needs at least one decoder".into()));
        }
        for d in &self.decoders {
            if d.n_classes < 2 {
                return Err(Error::Config(format!(
                    "decoder '{}' needs at least 2 classes",
                    d.protocol_name
                )));
            }
        }
        for (i, d) in self.decoders.iter().enumerate() {
            if self.decoders[..i].iter().any(|o| o.protocol_name == d.protocol_name) {
                return Err(Error::Config(format!(
                    "duplicate protocol name '{}'",
                    d.protocol_name
                )));
            }
        }
        Ok(())
    }

    /// The reference five-protocol configuration.
    pub fn paper_default(seed: u64) -> Self {
        let decoders = [
            ("spm_tissue", 4),
            ("fsl_first", 16),
            ("malp_em", 139),
            ("malp_em_tissue", 6),
            ("fsl_fast", 4),
        ]
        .into_iter()
        .map(|(name, n_classes)| DecoderSpec {
            protocol_name: name.to_string(),
            n_classes,
        })
        .collect();
        ModelConfig {
            encoder: EncoderConfig::default(),
            decoders,
            seed,
        }
    }
}

/// How a parameter tensor starts life.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Fan-in-scaled normal, std = sqrt(2/fan_in).
    FanInNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// Declared shape, init and trainability of one named parameter. The full
/// name → spec map is a pure function of the config, which is what makes
/// checkpoints and parameter counts reproducible.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

fn conv_specs(map: &mut BTreeMap<String, ParamSpec>, prefix: &str, ci: usize, co: usize, k: usize) {
    let fan_in = ci * k * k * k;
    map.insert(
        format!("{prefix}.kernel"),
        ParamSpec {
            shape: vec![co, ci, k, k, k],
            init: Init::FanInNormal { fan_in },
            trainable: true,
        },
    );
    map.insert(
        format!("{prefix}.bias"),
        ParamSpec {
            shape: vec![co],
            init: Init::Zeros,
            trainable: true,
        },
    );
}

fn bn_specs(map: &mut BTreeMap<String, ParamSpec>, prefix: &str, c: usize) {
    for (suffix, init, trainable) in [
        ("gamma", Init::Ones, true),
        ("beta", Init::Zeros, true),
        ("running_mean", Init::Zeros, false),
        ("running_var", Init::Ones, false),
    ] {
        map.insert(
            format!("{prefix}.{suffix}"),
            ParamSpec {
                shape: vec![c],
                init,
                trainable,
            },
        );
    }
}

/// Name → spec for every tensor the model owns, trainable or not.
pub fn parameter_shapes(config: &ModelConfig) -> Result<BTreeMap<String, ParamSpec>> {
    config.validate()?;
    let enc = &config.encoder;
    let mut map = BTreeMap::new();

    conv_specs(&mut map, "encoder.init", 1, enc.filters[0], enc.initial_kernel);
    let mut in_ch = enc.filters[0];
    for (j, &out_ch) in enc.filters.iter().enumerate() {
        for i in 0..enc.n_units {
            let prefix = format!("encoder.s{j}.u{i}");
            let stride = if i == 0 { enc.strides[j] } else { 1 };
            bn_specs(&mut map, &format!("{prefix}.bn1"), in_ch);
            conv_specs(&mut map, &format!("{prefix}.conv1"), in_ch, out_ch, 3);
            bn_specs(&mut map, &format!("{prefix}.bn2"), out_ch);
            conv_specs(&mut map, &format!("{prefix}.conv2"), out_ch, out_ch, 3);
            if stride != 1 || in_ch != out_ch {
                conv_specs(&mut map, &format!("{prefix}.proj"), in_ch, out_ch, 1);
            }
            in_ch = out_ch;
        }
    }

    for dec in &config.decoders {
        for (j, &ch) in enc.filters.iter().enumerate() {
            conv_specs(
                &mut map,
                &format!("decoder.{}.score{j}", dec.protocol_name),
                ch,
                dec.n_classes,
                1,
            );
        }
    }
    Ok(map)
}

/// One stored tensor of the model.
#[derive(Debug, Clone)]
pub struct ParamEntry<T: Element> {
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

/// The trainable parameter set Θ plus batch-norm running statistics, keyed
/// by deterministic names (iteration is always in name order).
#[derive(Debug, Clone)]
pub struct ModelParameters<T: Element> {
    config: ModelConfig,
    entries: BTreeMap<String, ParamEntry<T>>,
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-tensor RNG stream derived from (global seed, parameter name), so
/// decoder order and the presence of other heads never shift the values.
fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15) ^ fnv1a64(name))
}

/// Build and initialize the full parameter set for a config.
pub fn build_model<T: Element>(config: &ModelConfig) -> Result<ModelParameters<T>> {
    let specs = parameter_shapes(config)?;
    let mut entries = BTreeMap::new();
    for (name, spec) in specs {
        let tensor = match spec.init {
            Init::FanInNormal { fan_in } => {
                let mut rng = param_rng(config.seed, &name);
                Tensor::randn_fan_in(spec.shape.clone(), fan_in, &mut rng)
            }
            Init::Zeros => Tensor::zeros(spec.shape.clone()),
            Init::Ones => Tensor::full(spec.shape.clone(), T::one()),
        };
        entries.insert(
            name,
            ParamEntry {
                tensor,
                trainable: spec.trainable,
            },
        );
    }
    Ok(ModelParameters {
        config: config.clone(),
        entries,
    })
}

impl<T: Element> ModelParameters<T> {
    pub(crate) fn from_entries(
        config: ModelConfig,
        entries: BTreeMap<String, ParamEntry<T>>,
    ) -> Self {
        ModelParameters { config, entries }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter '{name}'")))
    }

    /// Replace a tensor's contents (shape must not change).
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown parameter '{name}'")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Internal(format!(
                "parameter '{name}' shape change {:?} -> {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor.detach();
        Ok(())
    }

    /// Iterate entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalar values.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Fold the batch statistics of one normalization layer into its
    /// running averages: running <- m*running + (1-m)*batch.
    pub fn apply_bn_update(&mut self, update: &BnUpdate<T>) -> Result<()> {
        let m = T::from_f64c(BN_MOMENTUM);
        let one_minus = T::one() - m;
        for (suffix, batch) in [("running_mean", &update.mean), ("running_var", &update.var)] {
            let name = format!("{}.{suffix}", update.prefix);
            let entry = self
                .entries
                .get_mut(&name)
                .ok_or_else(|| Error::Internal(format!("unknown running stat '{name}'")))?;
            let merged: Vec<T> = entry
                .tensor
                .data()
                .iter()
                .zip(batch)
                .map(|(&r, &b)| m * r + one_minus * b)
                .collect();
            entry.tensor = entry.tensor.with_data(merged)?;
        }
        Ok(())
    }

    /// Cast every tensor, preserving structure. Verification helper.
    pub fn cast<U: Element>(&self) -> ModelParameters<U> {
        ModelParameters {
            config: self.config.clone(),
            entries: self
                .entries
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: v.tensor.cast(),
                            trainable: v.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}
