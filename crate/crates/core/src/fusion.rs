//! Concatenation fusion and the two-layer classification head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{glorot_uniform, param_group};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const N_CLASSES: usize = 2;
pub const FAKE: usize = 0;
pub const GENUINE: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub d_text: usize,
    pub d_img: usize,
    pub d_hidden: usize,
    pub dropout: f64,
}

impl FusionConfig {
    pub fn paper_scale() -> Self {
        FusionConfig {
            d_text: 768,
            d_img: 2048,
            d_hidden: 512,
            dropout: 0.3,
        }
    }

    /// Width of the head input. A unimodal head sets the other width to 0.
    pub fn d_in(&self) -> usize {
        self.d_text + self.d_img
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in() == 0 || self.d_hidden == 0 {
            return Err(Error::Config(format!(
                "fusion head needs positive input and hidden widths, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "head dropout {} is outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

param_group! {
    /// `w1: [d_in, d_hidden]`, `w2: [d_hidden, 2]` with row biases.
    pub struct FusionParams { w1, b1, w2, b2 }
}

/// Glorot-uniform weights, zero biases.
pub fn init_fusion<T: Scalar, R: Rng + ?Sized>(
    cfg: &FusionConfig,
    rng: &mut R,
) -> Result<FusionParams<Tensor<T>>> {
    cfg.validate()?;
    Ok(FusionParams {
        w1: glorot_uniform(cfg.d_in(), cfg.d_hidden, rng),
        b1: Tensor::zeros([cfg.d_hidden]),
        w2: glorot_uniform(cfg.d_hidden, N_CLASSES, rng),
        b2: Tensor::zeros([N_CLASSES]),
    })
}

/// Joins a text vector and an image vector into one `[1, d_text + d_img]`
/// row, text features first.
pub fn fuse<T: Scalar>(tape: &mut Tape<'_, T>, text: Var, image: Var, cfg: &FusionConfig) -> Result<Var> {
    if tape.shape(text) != [cfg.d_text] || tape.shape(image) != [cfg.d_img] {
        return Err(Error::Dimension(format!(
            "fuse expects [{}] and [{}], got {:?} and {:?}",
            cfg.d_text,
            cfg.d_img,
            tape.shape(text),
            tape.shape(image)
        )));
    }
    let t = tape.reshape(text, &[1, cfg.d_text])?;
    let i = tape.reshape(image, &[1, cfg.d_img])?;
    tape.concat(&[t, i])
}

/// `[1, d_in] -> [1, 2]` logits through linear, ReLU, dropout, linear.
pub fn classify<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    params: &FusionParams<Var>,
    cfg: &FusionConfig,
    x: Var,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    if tape.shape(x) != [1, cfg.d_in()] {
        return Err(Error::Dimension(format!(
            "head expects [1, {}], got {:?}",
            cfg.d_in(),
            tape.shape(x)
        )));
    }
    let h = tape.matmul(x, params.w1)?;
    let h = tape.add_bias(h, params.b1)?;
    let h = tape.relu(h)?;
    let h = tape.dropout(h, cfg.dropout, training, rng)?;
    let out = tape.matmul(h, params.w2)?;
    tape.add_bias(out, params.b2)
}

/// Index of the larger logit; an exact tie goes to class 0.
pub fn predict_label<T: Scalar>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn label_name(label: usize) -> &'static str {
    if label == GENUINE {
        "genuine"
    } else {
        "fake"
    }
}
