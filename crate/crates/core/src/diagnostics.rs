//! Finite-difference gradient checks over every layer type and a tiny
//! end-to-end model, as run by `fakeit gradcheck`.
//!
//! Each layer is checked in f64 with the elementwise relative error of
//! [`crate::tensor::grad_check`]. A random evaluation point is redrawn when
//! it produces a gradient entry so close to zero that finite-difference
//! rounding alone (about `1e-11` absolute) would dominate the ratio. The
//! full model is checked in f32 against f64 central differences, scored on
//! the whole flattened gradient.

use std::fmt;

use rand_chacha::ChaCha8Rng;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::fusion::{classify, fuse, init_fusion, FusionConfig, GENUINE};
use crate::image_encoder::{init_image_encoder, residual_block, ImageEncoderConfig, StageSpec};
use crate::model::{forward, init_params, ModelConfig, ModelInput, ModelParams, ModelSettings, Mode};
use crate::nn::{derive_rng, normal};
use crate::tensor::{
    analytic_gradients, grad_check_reference_norm, grad_check_with_fault, Scalar, Tape, Tensor,
    Var,
};
use crate::text::TokenizedReview;
use crate::text_encoder::{encoder_block, init_text_encoder, TextEncoderConfig};

pub const F64_TOLERANCE: f64 = 1e-6;
pub const F32_TOLERANCE: f64 = 1e-3;
const EPS: f64 = 1e-5;
/// Nonzero analytic entries below this make a point ill-conditioned.
const MIN_ENTRY: f64 = 1e-3;
const MAX_DRAWS: usize = 50;
const PROBE_STREAM: u64 = 0x4b49_4e4b;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub precision: &'static str,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl ComponentCheck {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

impl fmt::Display for ComponentCheck {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {}  max rel err {:.3e}  (tol {:.0e})  {}",
            self.name,
            self.precision,
            self.max_relative_error,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" }
        )
    }
}

/// Values in `[-1, -0.1] U [0.1, 1]`.
fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// `sum(out * w)` for fixed weights, so every output element feeds an O(1)
/// gradient back.
fn contract<T: Scalar>(tape: &mut Tape<'_, T>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.cast());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// True when every analytic entry is either exactly zero or comfortably
/// above the finite-difference noise floor, and no kink lies within a few
/// steps of the point. The kink probe compares central differences at `EPS`
/// and `2 EPS` along one dense random direction; for a smooth function they
/// agree to `O(EPS^2)`, while a crossed kink changes the slope outright.
fn well_conditioned<F>(f: &F, inputs: &[Tensor<f64>], rng: &mut impl Rng) -> Result<bool>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let grads = analytic_gradients(f, inputs)?;
    if !grads.iter().flatten().all(|g| *g == 0.0 || g.abs() >= MIN_ENTRY) {
        return Ok(false);
    }
    let direction: Vec<Tensor<f64>> = inputs.iter().map(|t| uniform(t.shape(), rng)).collect();
    let slope = |h: f64| -> Result<f64> {
        let shifted = |sign: f64| -> Result<f64> {
            let moved: Vec<Tensor<f64>> = inputs
                .iter()
                .zip(&direction)
                .map(|(x, d)| {
                    let data = x.data().iter().zip(d.data()).map(|(x, d)| x + sign * h * d);
                    Tensor::new(x.shape().to_vec(), data.collect()).expect("same shape")
                })
                .collect();
            scalar_value(f, &moved)
        };
        Ok((shifted(1.0)? - shifted(-1.0)?) / (2.0 * h))
    };
    let (near, far) = (slope(EPS)?, slope(2.0 * EPS)?);
    Ok((near - far).abs() <= 1e-7 * near.abs().max(1.0))
}

fn scalar_value<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Draws evaluation points until one is well conditioned (or the budget
/// runs out), then runs the elementwise check there.
fn check_f64<F, D>(name: &'static str, f: F, mut draw: D, fault: bool) -> Result<ComponentCheck>
where
    F: for<'t> Fn(&mut Tape<'t, f64>, &[Var]) -> Result<Var>,
    D: FnMut() -> Vec<Tensor<f64>>,
{
    let mut probe = derive_rng(0, &[PROBE_STREAM]);
    let mut inputs = draw();
    for _ in 1..MAX_DRAWS {
        if well_conditioned(&f, &inputs, &mut probe)? {
            break;
        }
        inputs = draw();
    }
    let errs = grad_check_with_fault(&f, &inputs, EPS, fault)?;
    Ok(ComponentCheck {
        name,
        precision: "f64",
        max_relative_error: errs.into_iter().fold(0.0, f64::max),
        tolerance: F64_TOLERANCE,
    })
}

fn no_dropout() -> ChaCha8Rng {
    derive_rng(0, &[])
}

fn matmul(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let mut rng = derive_rng(seed, &[1]);
    let w = uniform(&[3, 5], &mut rng);
    check_f64(
        "matmul",
        move |t, v| {
            let c = t.matmul(v[0], v[1])?;
            contract(t, c, &w)
        },
        || vec![uniform(&[3, 4], &mut rng), uniform(&[4, 5], &mut rng)],
        fault,
    )
}

fn conv2d(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let mut rng = derive_rng(seed, &[2]);
    let w = uniform(&[3, 3, 3], &mut rng);
    check_f64(
        "conv2d",
        move |t, v| {
            let y = t.conv2d(v[0], v[1], 2, 1)?;
            contract(t, y, &w)
        },
        || vec![uniform(&[2, 5, 5], &mut rng), uniform(&[3, 2, 3, 3], &mut rng)],
        fault,
    )
}

fn layer_norm(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let mut rng = derive_rng(seed, &[3]);
    let w = uniform(&[3, 6], &mut rng);
    check_f64(
        "layer_norm",
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
            contract(t, y, &w)
        },
        || {
            vec![
                uniform(&[3, 6], &mut rng),
                uniform(&[6], &mut rng),
                uniform(&[6], &mut rng),
            ]
        },
        fault,
    )
}

fn embedding(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let mut rng = derive_rng(seed, &[4]);
    let w = uniform(&[5, 4], &mut rng);
    check_f64(
        "embedding",
        move |t, v| {
            let e = t.embedding(v[0], &[1, 4, 1, 0, 5])?;
            contract(t, e, &w)
        },
        || vec![uniform(&[6, 4], &mut rng)],
        fault,
    )
}

fn cross_entropy(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let mut rng = derive_rng(seed, &[5]);
    check_f64(
        "cross_entropy",
        |t, v| t.cross_entropy(v[0], &[0, 1, 1, 0]),
        || vec![uniform(&[4, 2], &mut rng)],
        fault,
    )
}

fn attention_block(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let cfg = TextEncoderConfig {
        vocab_size: 6,
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        d_ff: 6,
        max_len: 5,
        dropout: 0.0,
    };
    let mut rng = derive_rng(seed, &[6]);
    let template = init_text_encoder::<f64, _>(&cfg, &mut rng)?.layers.remove(0);
    let w = uniform(&[5, 4], &mut rng);
    let mask = [1, 1, 1, 1, 0];
    let draw_template = template.clone();
    check_f64(
        "attention_block",
        move |t, v| {
            let mut rest = v[1..].iter();
            let layer = template.map("", &mut |_, _| *rest.next().expect("one var per tensor"));
            let out = encoder_block(t, v[0], &mask, &layer, &cfg, false, &mut no_dropout())?.out;
            contract(t, out, &w)
        },
        || {
            let mut inputs = vec![uniform(&[5, 4], &mut rng)];
            draw_template.visit("", &mut |_, p| inputs.push(uniform(p.shape(), &mut rng)));
            inputs
        },
        fault,
    )
}

fn residual(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let cfg = ImageEncoderConfig {
        side: 6,
        stem_channels: 2,
        stages: vec![StageSpec::new(1, 3, 2)],
        d_out: 3,
    };
    let mut rng = derive_rng(seed, &[7]);
    let template = init_image_encoder::<f64, _>(&cfg, &mut rng)?.blocks.remove(0);
    let w = uniform(&[3, 3, 3], &mut rng);
    let draw_template = template.clone();
    check_f64(
        "residual_block",
        move |t, v| {
            let mut rest = v[1..].iter();
            let block = template.map("", &mut |_, _| *rest.next().expect("one var per tensor"));
            let y = residual_block(t, v[0], &block)?;
            contract(t, y, &w)
        },
        || {
            // random gains keep the second branch live, unlike at initialization
            let mut inputs = vec![uniform(&[2, 6, 6], &mut rng)];
            draw_template.visit("", &mut |_, p| inputs.push(uniform(p.shape(), &mut rng)));
            inputs
        },
        fault,
    )
}

fn fusion_head(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let cfg = FusionConfig {
        d_text: 3,
        d_img: 4,
        d_hidden: 5,
        dropout: 0.3,
    };
    let mut rng = derive_rng(seed, &[8]);
    let template = init_fusion::<f64, _>(&cfg, &mut rng)?;
    let draw_template = template.clone();
    check_f64(
        "fusion_head",
        move |t, v| {
            let mut rest = v[2..].iter();
            let head = template.map("", &mut |_, _| *rest.next().expect("one var per tensor"));
            let x = fuse(t, v[0], v[1], &cfg)?;
            let logits = classify(t, &head, &cfg, x, false, &mut no_dropout())?;
            t.cross_entropy(logits, &[GENUINE])
        },
        || {
            let mut inputs = vec![uniform(&[3], &mut rng), uniform(&[4], &mut rng)];
            draw_template.visit("", &mut |_, p| inputs.push(uniform(p.shape(), &mut rng)));
            inputs
        },
        fault,
    )
}

fn tiny_fused() -> ModelConfig {
    let settings = ModelSettings {
        text: TextEncoderConfig {
            vocab_size: 7,
            d_model: 4,
            n_layers: 1,
            n_heads: 2,
            d_ff: 6,
            max_len: 5,
            dropout: 0.1,
        },
        image: ImageEncoderConfig {
            side: 4,
            stem_channels: 2,
            stages: vec![StageSpec::new(1, 3, 2)],
            d_out: 3,
        },
        d_hidden: 4,
        head_dropout: 0.3,
        ..ModelSettings::default()
    };
    settings.config(Mode::Fused)
}

fn fused_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    vars: &[Var],
    cfg: &ModelConfig,
    template: &ModelParams<Tensor<f32>>,
    input: &ModelInput<f64>,
) -> Result<Var> {
    let mut rest = vars.iter();
    let params = template.map(&mut |_, _| *rest.next().expect("one var per tensor"));
    let input = ModelInput {
        review: input.review.clone(),
        image: input.image.as_ref().map(|i| i.cast()),
    };
    let logits = forward(tape, &params, cfg, &input, false, &mut no_dropout())?;
    tape.cross_entropy(logits, &[GENUINE])
}

/// Loss of the whole fused model with respect to every parameter, f32
/// autodiff against f64 central differences.
fn full_model(seed: u64, fault: bool) -> Result<ComponentCheck> {
    let cfg = tiny_fused();
    let mut rng = derive_rng(seed, &[9]);
    let template = init_params::<f32, _>(&cfg, &mut rng)?;
    let mut params: Vec<Tensor<f32>> = Vec::new();
    template.visit(&mut |name, p| {
        let mut t: Tensor<f32> = normal(p.shape(), 0.5, &mut rng);
        if name == "head.b1" {
            // positive hidden biases keep the head's ReLU units live
            t.data_mut().iter_mut().for_each(|b| *b = b.abs() + 1.0);
        }
        params.push(t)
    });
    let input = ModelInput {
        review: Some(TokenizedReview {
            ids: vec![2, 5, 6, 3, 0],
            mask: vec![1, 1, 1, 1, 0],
            true_length: 4,
        }),
        image: Some(uniform(&[3, 4, 4], &mut rng)),
    };
    let err = grad_check_reference_norm(
        |t, v| fused_loss::<f32>(t, v, &cfg, &template, &input),
        |t, v| fused_loss::<f64>(t, v, &cfg, &template, &input),
        &params,
        EPS,
        fault,
    )?;
    Ok(ComponentCheck {
        name: "fused_model",
        precision: "f32",
        max_relative_error: err,
        tolerance: F32_TOLERANCE,
    })
}

/// Every component check. `fault` skews the matmul backward rule so that
/// the checks relying on it are expected to fail.
pub fn run_gradcheck(seed: u64, fault: bool) -> Result<Vec<ComponentCheck>> {
    let checks: [fn(u64, bool) -> Result<ComponentCheck>; 9] = [
        matmul,
        conv2d,
        layer_norm,
        embedding,
        cross_entropy,
        attention_block,
        residual,
        fusion_head,
        full_model,
    ];
    checks.iter().map(|c| c(seed, fault)).collect()
}
