//! Operation tape: records forward ops, replays them in reverse for
//! gradients. Node order is execution order, which is already topological,
//! so backward is a single reverse sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::ops;
use crate::tensor::{as_cdhw, check_finite, Element, TapeRef, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Batch-norm execution mode. Train mode normalizes with statistics of the
/// current tensor; infer mode uses the supplied running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// One operation input: the value it had at execution time, plus the node
/// it came from when it was produced on this tape (detached inputs get no
/// gradient).
struct Arg<T: Element> {
    value: Tensor<T>,
    node: Option<usize>,
}

enum Op<T: Element> {
    Leaf,
    Conv3d {
        input: Arg<T>,
        kernel: Arg<T>,
        bias: Arg<T>,
        dims: ops::ConvDims,
    },
    BatchNorm {
        input: Arg<T>,
        gamma: Arg<T>,
        beta: Arg<T>,
        mean: Vec<T>,
        invstd: Vec<T>,
        train: bool,
    },
    LeakyRelu {
        input: Arg<T>,
        alpha: T,
    },
    Upsample2x {
        input: Arg<T>,
    },
    SoftmaxChannels {
        input: Arg<T>,
    },
    Add {
        a: Arg<T>,
        b: Arg<T>,
    },
    Mul {
        a: Arg<T>,
        b: Arg<T>,
    },
    Scale {
        input: Arg<T>,
        factor: T,
    },
    SumAll {
        input: Arg<T>,
    },
    WeightedSum {
        inputs: Vec<Arg<T>>,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Arg<T>,
        labels: Arc<Vec<u16>>,
        probs: Arc<Vec<T>>,
        spatial: [usize; 3],
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Reverse-mode differentiation tape.
pub struct Tape<T: Element> {
    id: u64,
    recording: bool,
    nodes: Vec<Node<T>>,
    params: Vec<usize>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    /// A tape that records nothing: ops just compute and return detached
    /// tensors. Used for inference.
    pub fn no_grad() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            recording: false,
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Resolve how a tensor relates to this tape.
    fn arg(&self, t: &Tensor<T>) -> Result<Arg<T>> {
        match t.tape_ref {
            Some(r) if r.tape_id == self.id => Ok(Arg {
                value: t.detach(),
                node: Some(r.node),
            }),
            Some(_) => Err(Error::Usage(
                "tensor belongs to a different tape".into(),
            )),
            None => Ok(Arg {
                value: t.detach(),
                node: None,
            }),
        }
    }

    fn record(&mut self, mut out: Tensor<T>, op: Op<T>) -> Tensor<T> {
        if !self.recording {
            return out;
        }
        let node = self.nodes.len();
        out.tape_ref = Some(TapeRef {
            tape_id: self.id,
            node,
        });
        self.nodes.push(Node {
            value: out.clone(),
            op,
        });
        out
    }

    /// Attach a tensor to the tape without requesting a gradient. A tensor
    /// already living on this tape is returned as-is.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Tensor<T>> {
        match t.tape_ref {
            Some(r) if r.tape_id == self.id => return Ok(t.clone()),
            Some(_) => return Err(Error::Usage("tensor belongs to a different tape".into())),
            None => {}
        }
        check_finite(t.data(), "leaf")?;
        Ok(self.record(t.detach(), Op::Leaf))
    }

    /// Attach a trainable parameter; `backward` will report its gradient
    /// (zero when the loss does not depend on it).
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Tensor<T>> {
        if t.tape_ref.is_some() {
            return Err(Error::Usage(
                "param expects a tensor not yet attached to a tape".into(),
            ));
        }
        check_finite(t.data(), "param")?;
        let out = self.record(t.detach(), Op::Leaf);
        if self.recording {
            self.params.push(out.tape_ref.unwrap().node);
        }
        Ok(out)
    }

    /// Same-padded cross-correlation with per-axis stride in {1, 2}.
    pub fn conv3d(
        &mut self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: &Tensor<T>,
        stride: [usize; 3],
    ) -> Result<Tensor<T>> {
        let dims = ops::conv3d_dims(input.shape(), kernel.shape(), bias.numel(), stride)?;
        let data = ops::conv3d_forward(input.data(), kernel.data(), bias.data(), &dims);
        check_finite(&data, "conv3d")?;
        let out = Tensor::new(
            vec![dims.co, dims.out[0], dims.out[1], dims.out[2]],
            data,
        )?;
        let op = Op::Conv3d {
            input: self.arg(input)?,
            kernel: self.arg(kernel)?,
            bias: self.arg(bias)?,
            dims,
        };
        Ok(self.record(out, op))
    }

    /// Channelwise normalization. In train mode the returned statistics are
    /// the batch mean/variance for the caller's running-average update; the
    /// running statistics passed in are only read in infer mode.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &[T],
        running_var: &[T],
        mode: BnMode,
        eps: f64,
    ) -> Result<(Tensor<T>, Option<(Vec<T>, Vec<T>)>)> {
        let [c, d, h, w] = as_cdhw(input.shape(), "batch_norm")?;
        let n = d * h * w;
        if n == 0 {
            return Err(Error::Config("batch_norm: zero spatial extent".into()));
        }
        if gamma.numel() != c || beta.numel() != c {
            return Err(Error::Config(format!(
                "batch_norm: gamma/beta must have length {c}, got {}/{}",
                gamma.numel(),
                beta.numel()
            )));
        }
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                let (m, v) = ops::channel_stats(input.data(), c, n);
                let stats = (m.clone(), v.clone());
                (m, v, Some(stats))
            }
            BnMode::Infer => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(Error::Config(format!(
                        "batch_norm: running stats must have length {c}"
                    )));
                }
                (running_mean.to_vec(), running_var.to_vec(), None)
            }
        };
        let invstd: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64c(eps)).sqrt())
            .collect();
        let data = ops::bn_forward(input.data(), c, n, &mean, &invstd, gamma.data(), beta.data());
        check_finite(&data, "batch_norm")?;
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let op = Op::BatchNorm {
            input: self.arg(input)?,
            gamma: self.arg(gamma)?,
            beta: self.arg(beta)?,
            mean,
            invstd,
            train: mode == BnMode::Train,
        };
        Ok((self.record(out, op), batch_stats))
    }

    /// Elementwise max(x, alpha*x); the subgradient at zero is alpha.
    pub fn leaky_relu(&mut self, input: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
        let a = T::from_f64c(alpha);
        let data: Vec<T> = input
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { a * x })
            .collect();
        check_finite(&data, "leaky_relu")?;
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let op = Op::LeakyRelu {
            input: self.arg(input)?,
            alpha: a,
        };
        Ok(self.record(out, op))
    }

    /// Doubles every spatial extent with half-voxel-center trilinear
    /// interpolation (clamped at the borders).
    pub fn trilinear_upsample2x(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, d, h, w] = as_cdhw(input.shape(), "trilinear_upsample2x")?;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::Config(
                "trilinear_upsample2x: zero spatial extent".into(),
            ));
        }
        let data = ops::upsample2x_forward(input.data(), c, [d, h, w]);
        check_finite(&data, "trilinear_upsample2x")?;
        let out = Tensor::new(vec![c, 2 * d, 2 * h, 2 * w], data)?;
        let op = Op::Upsample2x {
            input: self.arg(input)?,
        };
        Ok(self.record(out, op))
    }

    /// Per-voxel softmax over the channel axis (max-subtracted).
    pub fn softmax_channels(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let [c, d, h, w] = as_cdhw(input.shape(), "softmax_channels")?;
        if c < 2 {
            return Err(Error::Config(format!(
                "softmax_channels needs at least 2 channels, got {c}"
            )));
        }
        let data = ops::softmax_channels_forward(input.data(), c, d * h * w);
        check_finite(&data, "softmax_channels")?;
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let op = Op::SoftmaxChannels {
            input: self.arg(input)?,
        };
        Ok(self.record(out, op))
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Usage(format!(
                "add: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        check_finite(&data, "add")?;
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = Op::Add {
            a: self.arg(a)?,
            b: self.arg(b)?,
        };
        Ok(self.record(out, op))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Usage(format!(
                "mul: shape mismatch {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        check_finite(&data, "mul")?;
        let out = Tensor::new(a.shape().to_vec(), data)?;
        let op = Op::Mul {
            a: self.arg(a)?,
            b: self.arg(b)?,
        };
        Ok(self.record(out, op))
    }

    pub fn scale(&mut self, input: &Tensor<T>, factor: f64) -> Result<Tensor<T>> {
        let f = T::from_f64c(factor);
        let data: Vec<T> = input.data().iter().map(|&x| x * f).collect();
        check_finite(&data, "scale")?;
        let out = Tensor::new(input.shape().to_vec(), data)?;
        let op = Op::Scale {
            input: self.arg(input)?,
            factor: f,
        };
        Ok(self.record(out, op))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum_all(&mut self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let s: T = input.data().iter().copied().sum();
        check_finite(&[s], "sum_all")?;
        let out = Tensor::scalar(s);
        let op = Op::SumAll {
            input: self.arg(input)?,
        };
        Ok(self.record(out, op))
    }

    /// Weighted sum of scalar tensors: sum_i w_i * x_i.
    pub fn weighted_sum(&mut self, inputs: &[Tensor<T>], weights: &[f64]) -> Result<Tensor<T>> {
        if inputs.len() != weights.len() {
            return Err(Error::Usage(format!(
                "weighted_sum: {} inputs but {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        if inputs.is_empty() {
            return Err(Error::Usage("weighted_sum: empty input list".into()));
        }
        let mut args = Vec::with_capacity(inputs.len());
        let mut ws = Vec::with_capacity(weights.len());
        let mut total = T::zero();
        for (t, &w) in inputs.iter().zip(weights) {
            let wv = T::from_f64c(w);
            total += wv * t.scalar_value()?;
            args.push(self.arg(t)?);
            ws.push(wv);
        }
        check_finite(&[total], "weighted_sum")?;
        let out = Tensor::scalar(total);
        Ok(self.record(
            out,
            Op::WeightedSum {
                inputs: args,
                weights: ws,
            },
        ))
    }

    /// Mean over voxels of -log softmax(logits)[label], in the numerically
    /// stable log-sum-exp form.
    pub fn cross_entropy(&mut self, logits: &Tensor<T>, labels: Arc<Vec<u16>>) -> Result<Tensor<T>> {
        let [c, d, h, w] = as_cdhw(logits.shape(), "cross_entropy")?;
        let (loss, probs) = ops::cross_entropy_forward(logits.data(), c, [d, h, w], &labels)?;
        check_finite(&[loss], "cross_entropy")?;
        let out = Tensor::scalar(loss);
        let op = Op::CrossEntropy {
            logits: self.arg(logits)?,
            labels,
            probs: Arc::new(probs),
            spatial: [d, h, w],
        };
        Ok(self.record(out, op))
    }

    /// Reverse sweep from a scalar loss. Returns the gradient of every
    /// registered parameter; parameters the loss never touched get zeros.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<GradientMap<T>> {
        let loss_node = match loss.tape_ref {
            Some(r) if r.tape_id == self.id => r.node,
            _ => {
                return Err(Error::Usage(
                    "backward: loss tensor was not produced on this tape".into(),
                ))
            }
        };
        if !loss.is_scalar() {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape()
            )));
        }

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss_node] = Some(vec![T::one()]);

        for idx in (0..=loss_node).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g); // keep for parameter readout
                }
                Op::Conv3d {
                    input,
                    kernel,
                    bias,
                    dims,
                } => {
                    if input.node.is_some() {
                        send_grad(&mut grads, idx, input, ops::conv3d_grad_input(&g, kernel.value.data(), dims))?;
                    }
                    if kernel.node.is_some() {
                        send_grad(&mut grads, idx, kernel, ops::conv3d_grad_kernel(&g, input.value.data(), dims))?;
                    }
                    if bias.node.is_some() {
                        send_grad(&mut grads, idx, bias, ops::conv3d_grad_bias(&g, dims))?;
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    mean,
                    invstd,
                    train,
                } => {
                    let [c, d, h, w] = as_cdhw(input.value.shape(), "batch_norm grad")?;
                    let n = d * h * w;
                    let (gx, ggamma, gbeta) = if *train {
                        ops::bn_grad_train(input.value.data(), &g, c, n, mean, invstd, gamma.value.data())
                    } else {
                        ops::bn_grad_infer(input.value.data(), &g, c, n, mean, invstd, gamma.value.data())
                    };
                    if input.node.is_some() {
                        send_grad(&mut grads, idx, input, gx)?;
                    }
                    if gamma.node.is_some() {
                        send_grad(&mut grads, idx, gamma, ggamma)?;
                    }
                    if beta.node.is_some() {
                        send_grad(&mut grads, idx, beta, gbeta)?;
                    }
                }
                Op::LeakyRelu { input, alpha } => {
                    if input.node.is_some() {
                        let gx: Vec<T> = input
                            .value
                            .data()
                            .iter()
                            .zip(&g)
                            .map(|(&x, &gv)| if x > T::zero() { gv } else { *alpha * gv })
                            .collect();
                        send_grad(&mut grads, idx, input, gx)?;
                    }
                }
                Op::Upsample2x { input } => {
                    if input.node.is_some() {
                        let [c, d, h, w] = as_cdhw(input.value.shape(), "upsample grad")?;
                        send_grad(&mut grads, idx, input, ops::upsample2x_grad(&g, c, [d, h, w]))?;
                    }
                }
                Op::SoftmaxChannels { input } => {
                    if input.node.is_some() {
                        let [c, d, h, w] = as_cdhw(input.value.shape(), "softmax grad")?;
                        let gx =
                            ops::softmax_channels_grad(node.value.data(), &g, c, d * h * w);
                        send_grad(&mut grads, idx, input, gx)?;
                    }
                }
                Op::Add { a, b } => {
                    if a.node.is_some() {
                        send_grad(&mut grads, idx, a, g.clone())?;
                    }
                    if b.node.is_some() {
                        send_grad(&mut grads, idx, b, g.clone())?;
                    }
                }
                Op::Mul { a, b } => {
                    if a.node.is_some() {
                        let ga: Vec<T> =
                            g.iter().zip(b.value.data()).map(|(&gv, &bv)| gv * bv).collect();
                        send_grad(&mut grads, idx, a, ga)?;
                    }
                    if b.node.is_some() {
                        let gb: Vec<T> =
                            g.iter().zip(a.value.data()).map(|(&gv, &av)| gv * av).collect();
                        send_grad(&mut grads, idx, b, gb)?;
                    }
                }
                Op::Scale { input, factor } => {
                    if input.node.is_some() {
                        send_grad(&mut grads, idx, input, g.iter().map(|&gv| gv * *factor).collect())?;
                    }
                }
                Op::SumAll { input } => {
                    if input.node.is_some() {
                        send_grad(&mut grads, idx, input, vec![g[0]; input.value.numel()])?;
                    }
                }
                Op::WeightedSum { inputs, weights } => {
                    for (arg, &w) in inputs.iter().zip(weights) {
                        if arg.node.is_some() {
                            send_grad(&mut grads, idx, arg, vec![g[0] * w])?;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    spatial,
                } => {
                    if logits.node.is_some() {
                        let c = logits.value.shape()[0];
                        let n = spatial[0] * spatial[1] * spatial[2];
                        send_grad(
                            &mut grads,
                            idx,
                            logits,
                            ops::cross_entropy_grad(probs, c, n, labels, g[0]),
                        )?;
                    }
                }
            }
        }

        let mut by_node = HashMap::with_capacity(self.params.len());
        for &p in &self.params {
            let tensor = match grads[p].take() {
                Some(data) => self.nodes[p].value.with_data(data)?,
                None => Tensor::zeros(self.nodes[p].value.shape().to_vec()),
            };
            by_node.insert(p, tensor);
        }
        Ok(GradientMap {
            tape_id: self.id,
            by_node,
        })
    }
}

/// Accumulate an input's gradient contribution, enforcing that inputs
/// strictly precede the node that consumed them.
fn send_grad<T: Element>(
    grads: &mut [Option<Vec<T>>],
    consumer: usize,
    target: &Arg<T>,
    contrib: Vec<T>,
) -> Result<()> {
    let Some(tnode) = target.node else {
        return Ok(());
    };
    if tnode >= consumer {
        return Err(Error::Internal(
            "tape topology violated: input node does not precede its consumer".into(),
        ));
    }
    match &mut grads[tnode] {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(&contrib) {
                *a += *c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
    Ok(())
}

/// Gradients keyed by parameter, as produced by [`Tape::backward`]. Every
/// registered parameter is present exactly once with a gradient of its own
/// shape.
pub struct GradientMap<T: Element> {
    tape_id: u64,
    by_node: HashMap<usize, Tensor<T>>,
}

impl<T: Element> GradientMap<T> {
    /// Gradient for a parameter returned by [`Tape::param`].
    pub fn get(&self, param: &Tensor<T>) -> Result<&Tensor<T>> {
        let r = param.tape_ref.ok_or_else(|| {
            Error::Usage("gradient lookup for a tensor detached from the tape".into())
        })?;
        if r.tape_id != self.tape_id {
            return Err(Error::Usage(
                "gradient lookup for a tensor from a different tape".into(),
            ));
        }
        self.by_node.get(&r.node).ok_or_else(|| {
            Error::Usage("tensor was not registered as a parameter".into())
        })
    }

    pub fn len(&self) -> usize {
        self.by_node.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_node.is_empty()
    }
}
