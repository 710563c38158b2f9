//! The runtime verification suite behind `selftest`: every check compares
//! the production path against an independent oracle and reports the
//! measured error against its allowance.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{build_model, forward, DecoderSpec, EncoderConfig, Mode, ModelConfig};
use crate::selftest::oracles;
use crate::tensor::{
    finite_difference_gradient, relative_gradient_error, BnMode, Element, Tape, Tensor,
};
use crate::train::{AdamConfig, AdamState};

/// Outcome of one verification check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub allowed: f64,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, measured: f64, allowed: f64, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            measured,
            allowed,
            passed: measured <= allowed,
            detail,
        }
    }
}

/// Test hook: which check to sabotage so the negative path is provable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturb {
    Conv3d,
    Gradients,
    Adam,
    Dice,
}

impl Perturb {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conv3d" => Some(Perturb::Conv3d),
            "gradients" => Some(Perturb::Gradients),
            "adam" => Some(Perturb::Adam),
            "dice" => Some(Perturb::Dice),
            _ => None,
        }
    }
}

fn rand_tensor<T: Element>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::sample_standard_normal(rng)).collect();
    Tensor::new(shape, data).expect("shape/data agree")
}

/// conv3d vs the direct-loop oracle: bit-exact over >= 100 random cases in
/// f64 (kernel 1 or 3, stride 1 or 2, extents up to 7).
fn check_conv_oracle(perturb: bool) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    let mut max_diff = 0.0f64;
    let cases = 120;
    for case in 0..cases {
        let ci = rng.gen_range(1..4usize);
        let co = rng.gen_range(1..4usize);
        let e = [
            rng.gen_range(1..8usize),
            rng.gen_range(1..8usize),
            rng.gen_range(1..8usize),
        ];
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let s = [
            if rng.gen_bool(0.5) { 1 } else { 2 },
            if rng.gen_bool(0.5) { 1 } else { 2 },
            if rng.gen_bool(0.5) { 1 } else { 2 },
        ];
        let x = rand_tensor::<f64>(vec![ci, e[0], e[1], e[2]], &mut rng);
        let kernel = rand_tensor::<f64>(vec![co, ci, k, k, k], &mut rng);
        let bias = rand_tensor::<f64>(vec![co], &mut rng);

        let mut tape = Tape::no_grad();
        let got = tape.conv3d(&x, &kernel, &bias, s)?;
        let mut got_data = got.data().to_vec();
        if perturb && case == 17 {
            got_data[0] += 1e-3;
        }
        let want = oracles::conv3d_direct(
            x.data(),
            [ci, e[0], e[1], e[2]],
            kernel.data(),
            [co, ci, k, k, k],
            bias.data(),
            s,
        );
        for (g, w) in got_data.iter().zip(&want) {
            max_diff = max_diff.max((g - w).abs());
        }
    }
    Ok(CheckResult::new(
        "conv3d vs direct-loop oracle",
        max_diff,
        0.0,
        format!("{cases} random cases, f64, exact comparison"),
    ))
}

const GRAD_TOL: f64 = 1e-5;
const FD_STEP: f64 = 1e-5;

/// Gradient-check one tape program against central finite differences.
fn grad_case<F>(name: &str, build: F, at: &Tensor<f64>, perturb: bool) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
{
    let mut tape = Tape::new();
    let x = tape.param(at)?;
    let loss = build(&mut tape, &x)?;
    let grads = tape.backward(&loss)?;
    let mut analytic = grads.get(&x)?.clone();
    if perturb {
        analytic = analytic.with_data(
            analytic
                .data()
                .iter()
                .map(|&g| g * (1.0 + 1e-3))
                .collect(),
        )?;
    }
    let numeric = finite_difference_gradient(
        |v| {
            let mut t = Tape::no_grad();
            build(&mut t, v)?.scalar_value()
        },
        at,
        FD_STEP,
    )?;
    let err = relative_gradient_error(&analytic, &numeric);
    Ok(CheckResult::new(
        &format!("gradient: {name}"),
        err,
        GRAD_TOL,
        format!("analytic vs central differences, f64, step {FD_STEP:.0e}"),
    ))
}

fn project<T: Element>(tape: &mut Tape<T>, out: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = rand_tensor::<T>(out.shape().to_vec(), &mut rng);
    let prod = tape.mul(out, &proj)?;
    tape.sum_all(&prod)
}

fn op_gradient_checks(perturb: bool, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A);
    let input = rand_tensor::<f64>(vec![2, 4, 5, 4], &mut rng);
    let kernel = rand_tensor::<f64>(vec![3, 2, 3, 3, 3], &mut rng);
    let bias = rand_tensor::<f64>(vec![3], &mut rng);
    let gamma = rand_tensor::<f64>(vec![2], &mut rng);
    let beta = rand_tensor::<f64>(vec![2], &mut rng);

    let k1 = kernel.clone();
    let b1 = bias.clone();
    out.push(grad_case(
        "conv3d stride 1 (input)",
        move |t, x| {
            let y = t.conv3d(x, &k1, &b1, [1, 1, 1])?;
            project(t, &y, 1)
        },
        &input,
        perturb,
    )?);

    let i2 = input.clone();
    let b2 = bias.clone();
    out.push(grad_case(
        "conv3d stride 2 (kernel)",
        move |t, x| {
            let y = t.conv3d(&i2, x, &b2, [2, 2, 2])?;
            project(t, &y, 2)
        },
        &kernel,
        perturb,
    )?);

    for (mode, name) in [(BnMode::Train, "batch_norm train"), (BnMode::Infer, "batch_norm infer")] {
        let g = gamma.clone();
        let b = beta.clone();
        out.push(grad_case(
            name,
            move |t, x| {
                let (y, _) = t.batch_norm(x, &g, &b, &[0.2, -0.1], &[1.3, 0.8], mode, 1e-5)?;
                project(t, &y, 3)
            },
            &input,
            perturb,
        )?);
    }

    // Keep leaky-relu inputs away from the kink.
    let shifted = input.with_data(
        input
            .data()
            .iter()
            .map(|&v| if v.abs() < 0.1 { v + 0.3 } else { v })
            .collect(),
    )?;
    out.push(grad_case(
        "leaky_relu",
        |t, x| {
            let y = t.leaky_relu(x, 0.1)?;
            project(t, &y, 4)
        },
        &shifted,
        perturb,
    )?);

    out.push(grad_case(
        "trilinear_upsample2x",
        |t, x| {
            let y = t.trilinear_upsample2x(x)?;
            project(t, &y, 5)
        },
        &rand_tensor::<f64>(vec![2, 2, 3, 2], &mut rng),
        perturb,
    )?);

    out.push(grad_case(
        "softmax_channels",
        |t, x| {
            let y = t.softmax_channels(x)?;
            project(t, &y, 6)
        },
        &rand_tensor::<f64>(vec![3, 2, 2, 2], &mut rng),
        perturb,
    )?);

    let labels: Arc<Vec<u16>> = Arc::new((0..12).map(|i| (i % 3) as u16).collect());
    out.push(grad_case(
        "cross_entropy",
        move |t, x| t.cross_entropy(x, Arc::clone(&labels)),
        &rand_tensor::<f64>(vec![3, 2, 2, 3], &mut rng),
        perturb,
    )?);

    out.push(grad_case(
        "elementwise add/mul/sum",
        |t, x| {
            let sq = t.mul(x, x)?;
            let doubled = t.add(&sq, x)?;
            let scaled = t.scale(&doubled, 0.7)?;
            t.sum_all(&scaled)
        },
        &rand_tensor::<f64>(vec![10], &mut rng),
        perturb,
    )?);
    Ok(())
}

/// Gradient checks through a full residual unit and a full decoder head,
/// differentiating a mid-network parameter of a tiny f64 model.
fn block_gradient_checks(perturb: bool, out: &mut Vec<CheckResult>) -> Result<()> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            n_scales: 2,
            n_units: 1,
            strides: vec![1, 2],
            filters: vec![2, 3],
            initial_kernel: 3,
            alpha: 0.1,
        },
        decoders: vec![DecoderSpec {
            protocol_name: "check".into(),
            n_classes: 3,
        }],
        seed: 77,
    };
    let params = build_model::<f64>(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x55);
    let image = rand_tensor::<f64>(vec![1, 4, 4, 4], &mut rng);

    for (label, target) in [
        ("residual unit", "encoder.s1.u0.conv1.kernel"),
        ("decoder head", "decoder.check.score1.kernel"),
    ] {
        let loss_of = |p: &crate::graph::ModelParameters<f64>,
                       tape: &mut Tape<f64>|
         -> Result<(Tensor<f64>, Vec<(String, Tensor<f64>)>)> {
            let fwd = forward(tape, p, &image, Mode::Train)?;
            let loss = project(tape, &fwd.logits[0], 9)?;
            Ok((loss, fwd.bindings))
        };

        let mut tape = Tape::new();
        let (loss, bindings) = loss_of(&params, &mut tape)?;
        let grads = tape.backward(&loss)?;
        let bound = bindings
            .iter()
            .find(|(n, _)| n == target)
            .expect("parameter is bound");
        let mut analytic = grads.get(&bound.1)?.clone();
        if perturb {
            analytic = analytic.with_data(
                analytic.data().iter().map(|&g| g * (1.0 + 1e-3)).collect(),
            )?;
        }

        let at = params.get(target)?.tensor.clone();
        let numeric = finite_difference_gradient(
            |v| {
                let mut p = params.clone();
                p.set_tensor(target, v.clone())?;
                let mut t = Tape::no_grad();
                loss_of(&p, &mut t)?.0.scalar_value()
            },
            &at,
            FD_STEP,
        )?;
        let err = relative_gradient_error(&analytic, &numeric);
        out.push(CheckResult::new(
            &format!("gradient: {label} ({target})"),
            err,
            GRAD_TOL,
            "finite differences through the assembled model, f64".to_string(),
        ));
    }
    Ok(())
}

/// Adam against the closed-form scalar recurrence, one step and ten.
fn check_adam(perturb: bool) -> Result<CheckResult> {
    let config = ModelConfig {
        encoder: EncoderConfig {
            n_scales: 1,
            n_units: 1,
            strides: vec![1],
            filters: vec![2],
            initial_kernel: 1,
            alpha: 0.1,
        },
        decoders: vec![DecoderSpec {
            protocol_name: "check".into(),
            n_classes: 2,
        }],
        seed: 1,
    };
    let adam_cfg = AdamConfig::default();
    let mut max_err = 0.0f64;
    for steps in [1u64, 10] {
        let mut params = build_model::<f64>(&config)?;
        let name = "encoder.init.bias";
        let bias = params.get(name)?.tensor.clone();
        let mut data = bias.data().to_vec();
        data[0] = 1.0;
        params.set_tensor(name, bias.with_data(data)?)?;

        let mut grads = std::collections::BTreeMap::new();
        for (n, e) in params.iter() {
            if e.trainable {
                let mut g = vec![0.0f64; e.tensor.numel()];
                if n == name {
                    g[0] = 1.0;
                }
                grads.insert(n.clone(), e.tensor.with_data(g)?);
            }
        }
        let mut adam = AdamState::new(&params, adam_cfg);
        for _ in 0..steps {
            adam.step(&mut params, &grads)?;
        }
        let got = params.get(name)?.tensor.data()[0];
        let want = oracles::adam_scalar_closed_form(
            1.0,
            1.0,
            steps,
            adam_cfg.learning_rate,
            adam_cfg.beta1,
            adam_cfg.beta2,
            adam_cfg.epsilon,
        );
        max_err = max_err.max((got - want).abs());
    }
    if perturb {
        max_err += 1e-6;
    }
    Ok(CheckResult::new(
        "adam vs closed-form recurrence",
        max_err,
        1e-9,
        "scalar parameter, constant gradient, 1 and 10 steps, f64".to_string(),
    ))
}

/// Dice against brute-force recounting on random label volumes.
fn check_dice(perturb: bool) -> Result<CheckResult> {
    use crate::volume::LabelMap;
    let mut rng = ChaCha8Rng::seed_from_u64(0xD1);
    let mut max_err = 0.0f64;
    for _ in 0..25 {
        let n_classes = rng.gen_range(2..6usize);
        let extents = [
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
            rng.gen_range(2..6usize),
        ];
        let n = extents[0] * extents[1] * extents[2];
        let mk = |rng: &mut ChaCha8Rng| -> LabelMap {
            LabelMap::new(
                extents,
                (0..n).map(|_| rng.gen_range(0..n_classes as u16)).collect(),
                n_classes,
            )
            .expect("valid labels")
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        for label in 0..n_classes as u16 {
            let got = crate::eval::dice(&a, &b, label)?;
            let want = oracles::dice_direct(&a.labels, &b.labels, label);
            match (got, want) {
                (Some(g), Some(w)) => max_err = max_err.max((g - w).abs()),
                (None, None) => {}
                _ => max_err = max_err.max(1.0),
            }
        }
    }
    if perturb {
        max_err += 1e-6;
    }
    Ok(CheckResult::new(
        "dice vs brute-force recount",
        max_err,
        1e-9,
        "25 random label-volume pairs, all labels".to_string(),
    ))
}

/// Run the whole verification suite. `perturb` deliberately corrupts the
/// named check so callers can prove failures are detected.
pub fn run_selftest(perturb: Option<Perturb>) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    results.push(check_conv_oracle(perturb == Some(Perturb::Conv3d))?);
    op_gradient_checks(perturb == Some(Perturb::Gradients), &mut results)?;
    block_gradient_checks(perturb == Some(Perturb::Gradients), &mut results)?;
    results.push(check_adam(perturb == Some(Perturb::Adam))?);
    results.push(check_dice(perturb == Some(Perturb::Dice))?);
    Ok(results)
}
