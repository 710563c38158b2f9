//! Forward execution of the encoder/decoder graph on a tape.

use crate::error::{Error, Result};
use crate::graph::{ModelParameters, EPS_BN};
use crate::tensor::{BnMode, Element, Tape, Tensor};

/// Train mode records gradients and normalizes with batch statistics;
/// infer mode is pure and uses the running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Batch statistics produced by one normalization layer during a train-mode
/// forward pass. The caller folds them into the running averages.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Element> {
    /// Layer name prefix, e.g. `encoder.s0.u1.bn2`.
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Per-scale output of the last residual unit, kept for the decoder skip
/// connections. Scale j has extent input_extent / Π_{i<=j} strides_i.
#[derive(Debug, Clone)]
pub struct FeatureTaps<T: Element>(pub Vec<Tensor<T>>);

/// Everything one forward pass produces.
#[derive(Debug)]
pub struct ForwardOutput<T: Element> {
    /// One logit tensor per decoder, ordered like `config.decoders`, each
    /// shaped `[n_classes, D, H, W]` at full input resolution.
    pub logits: Vec<Tensor<T>>,
    pub taps: FeatureTaps<T>,
    /// Batch statistics per normalization layer (train mode only).
    pub bn_updates: Vec<BnUpdate<T>>,
    /// (name, tape tensor) for every trainable parameter that was attached,
    /// for routing gradients back to named parameters.
    pub bindings: Vec<(String, Tensor<T>)>,
}

/// Execution context threading the tape, mode and collected side outputs.
struct Ctx<'t, 'p, T: Element> {
    tape: &'t mut Tape<T>,
    params: &'p ModelParameters<T>,
    mode: Mode,
    alpha: f64,
    bindings: Vec<(String, Tensor<T>)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Element> Ctx<'_, '_, T> {
    /// Attach a trainable parameter to the tape and remember the binding.
    fn param(&mut self, name: &str) -> Result<Tensor<T>> {
        let t = self.tape.param(&self.params.get(name)?.tensor)?;
        if self.tape.is_recording() {
            self.bindings.push((name.to_string(), t.clone()));
        }
        Ok(t)
    }

    fn conv(&mut self, input: &Tensor<T>, prefix: &str, stride: usize) -> Result<Tensor<T>> {
        let kernel = self.param(&format!("{prefix}.kernel"))?;
        let bias = self.param(&format!("{prefix}.bias"))?;
        self.tape.conv3d(input, &kernel, &bias, [stride; 3])
    }

    /// Pre-activation pair: batch norm then leaky ReLU.
    fn bn_act(&mut self, input: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let running_mean = self.params.get(&format!("{prefix}.running_mean"))?.tensor.clone();
        let running_var = self.params.get(&format!("{prefix}.running_var"))?.tensor.clone();
        let bn_mode = match self.mode {
            Mode::Train => BnMode::Train,
            Mode::Infer => BnMode::Infer,
        };
        let (normed, stats) = self.tape.batch_norm(
            input,
            &gamma,
            &beta,
            running_mean.data(),
            running_var.data(),
            bn_mode,
            EPS_BN,
        )?;
        if let Some((mean, var)) = stats {
            self.bn_updates.push(BnUpdate {
                prefix: prefix.to_string(),
                mean,
                var,
            });
        }
        self.tape.leaky_relu(&normed, self.alpha)
    }

    /// Pre-activation residual unit: BN → leaky ReLU → conv3 (stride s) →
    /// BN → leaky ReLU → conv3 (stride 1), plus an identity shortcut, or a
    /// strided 1³ projection when geometry or channels change.
    fn residual_unit(
        &mut self,
        input: &Tensor<T>,
        prefix: &str,
        stride: usize,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Tensor<T>> {
        let pre1 = self.bn_act(input, &format!("{prefix}.bn1"))?;
        let h = self.conv(&pre1, &format!("{prefix}.conv1"), stride)?;
        let pre2 = self.bn_act(&h, &format!("{prefix}.bn2"))?;
        let h = self.conv(&pre2, &format!("{prefix}.conv2"), 1)?;
        let shortcut = if stride == 1 && in_ch == out_ch {
            input.clone()
        } else {
            self.conv(input, &format!("{prefix}.proj"), stride)?
        };
        self.tape.add(&h, &shortcut)
    }

    fn encoder(&mut self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let enc = &self.params.config().encoder;
        let filters = enc.filters.clone();
        let strides = enc.strides.clone();
        let n_units = enc.n_units;

        let mut x = self.conv(image, "encoder.init", 1)?;
        let mut in_ch = filters[0];
        let mut taps = Vec::with_capacity(filters.len());
        for (j, &out_ch) in filters.iter().enumerate() {
            for i in 0..n_units {
                let stride = if i == 0 { strides[j] } else { 1 };
                x = self.residual_unit(&x, &format!("encoder.s{j}.u{i}"), stride, in_ch, out_ch)?;
                in_ch = out_ch;
            }
            taps.push(x.clone());
        }
        Ok(taps)
    }

    /// Upscore head: 1³ score convolutions per scale, upsampled coarse to
    /// fine and summed. No upsample where the corresponding stride was 1.
    fn decoder_head(&mut self, protocol: &str, taps: &[Tensor<T>]) -> Result<Tensor<T>> {
        let strides = self.params.config().encoder.strides.clone();
        let n_scales = taps.len();
        let mut scores = Vec::with_capacity(n_scales);
        for (j, tap) in taps.iter().enumerate() {
            scores.push(self.conv(tap, &format!("decoder.{protocol}.score{j}"), 1)?);
        }
        let mut pred = scores[n_scales - 1].clone();
        for j in (0..n_scales - 1).rev() {
            if strides[j + 1] == 2 {
                pred = self.tape.trilinear_upsample2x(&pred)?;
            }
            pred = self.tape.add(&pred, &scores[j])?;
        }
        if strides[0] == 2 {
            pred = self.tape.trilinear_upsample2x(&pred)?;
        }
        Ok(pred)
    }
}

/// Run the model on a `[1, D, H, W]` image, producing one full-resolution
/// logit volume per decoder.
pub fn forward<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParameters<T>,
    image: &Tensor<T>,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    let config = params.config();
    if image.shape().len() != 4 || image.shape()[0] != 1 {
        return Err(Error::Data(format!(
            "expected a [1, D, H, W] image, got shape {:?}",
            image.shape()
        )));
    }
    let multiple = config.encoder.stride_product();
    for &e in &image.shape()[1..] {
        if e % multiple != 0 || e == 0 {
            return Err(Error::Data(format!(
                "input extent {e}: extent must be a multiple of {multiple}"
            )));
        }
    }

    let mut ctx = Ctx {
        tape,
        params,
        mode,
        alpha: config.encoder.alpha,
        bindings: Vec::new(),
        bn_updates: Vec::new(),
    };
    let image = ctx.tape.leaf(image)?;
    let taps = ctx.encoder(&image)?;
    let mut logits = Vec::with_capacity(config.decoders.len());
    for dec in &config.decoders {
        logits.push(ctx.decoder_head(&dec.protocol_name, &taps)?);
    }
    Ok(ForwardOutput {
        logits,
        taps: FeatureTaps(taps),
        bn_updates: ctx.bn_updates,
        bindings: ctx.bindings,
    })
}
