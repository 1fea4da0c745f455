//! The full classifier in one of three modes: text only, image only, or
//! both encoders fused into a shared head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{self, classify, fuse, init_fusion, FusionConfig, FusionParams};
use crate::image::{ImagePipelineConfig, RawImage};
use crate::image_encoder::{encode_image, init_image_encoder, ImageEncoderConfig, ImageEncoderParams};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::text::{TokenizedReview, Vocabulary};
use crate::text_encoder::{encode_text, init_text_encoder, TextEncoderConfig, TextEncoderParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    TextOnly,
    ImageOnly,
    Fused,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Fused, Mode::TextOnly, Mode::ImageOnly];

    pub fn uses_text(self) -> bool {
        self != Mode::ImageOnly
    }

    pub fn uses_image(self) -> bool {
        self != Mode::TextOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::TextOnly => "text_only",
            Mode::ImageOnly => "image_only",
            Mode::Fused => "fused",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?} (text_only, image_only, fused)")))
    }
}

/// Architecture settings shared by all three modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub pipeline: ImagePipelineConfig,
    pub d_hidden: usize,
    pub head_dropout: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            text: TextEncoderConfig::default(),
            image: ImageEncoderConfig::default(),
            pipeline: ImagePipelineConfig::default(),
            d_hidden: 32,
            head_dropout: 0.3,
        }
    }
}

impl ModelSettings {
    pub fn paper_scale() -> Self {
        let head = FusionConfig::paper_scale();
        ModelSettings {
            text: TextEncoderConfig::paper_scale(),
            image: ImageEncoderConfig::paper_scale(),
            pipeline: ImagePipelineConfig::paper_scale(),
            d_hidden: head.d_hidden,
            head_dropout: head.dropout,
        }
    }

    pub fn config(&self, mode: Mode) -> ModelConfig {
        ModelConfig {
            mode,
            text: self.text.clone(),
            image: self.image.clone(),
            head: FusionConfig {
                d_text: if mode.uses_text() { self.text.d_model } else { 0 },
                d_img: if mode.uses_image() { self.image.d_out } else { 0 },
                d_hidden: self.d_hidden,
                dropout: self.head_dropout,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub mode: Mode,
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
    pub head: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_text() {
            self.text.validate()?;
        }
        if self.mode.uses_image() {
            self.image.validate()?;
        }
        self.head.validate()?;
        let d_text = if self.mode.uses_text() { self.text.d_model } else { 0 };
        let d_img = if self.mode.uses_image() { self.image.d_out } else { 0 };
        if (self.head.d_text, self.head.d_img) != (d_text, d_img) {
            return Err(Error::Config(format!(
                "{} head expects widths ({d_text}, {d_img}), got ({}, {})",
                self.mode, self.head.d_text, self.head.d_img
            )));
        }
        Ok(())
    }
}

/// Parameter tree. Encoders absent from the mode are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<P> {
    pub text: Option<TextEncoderParams<P>>,
    pub image: Option<ImageEncoderParams<P>>,
    pub head: FusionParams<P>,
}

impl<P> ModelParams<P> {
    pub fn map<'s, Q>(&'s self, f: &mut impl FnMut(String, &'s P) -> Q) -> ModelParams<Q> {
        ModelParams {
            text: self.text.as_ref().map(|t| t.map("text", f)),
            image: self.image.as_ref().map(|i| i.map("image", f)),
            head: self.head.map("head", f),
        }
    }

    pub fn visit<'s>(&'s self, f: &mut impl FnMut(String, &'s P)) {
        if let Some(t) = &self.text {
            t.visit("text", f);
        }
        if let Some(i) = &self.image {
            i.visit("image", f);
        }
        self.head.visit("head", f);
    }

    pub fn visit_mut<'s>(&'s mut self, f: &mut impl FnMut(String, &'s mut P)) {
        if let Some(t) = &mut self.text {
            t.visit_mut("text", f);
        }
        if let Some(i) = &mut self.image {
            i.visit_mut("image", f);
        }
        self.head.visit_mut("head", f);
    }

    /// Dotted names in visiting order.
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |n, _| names.push(n));
        names
    }
}

pub fn init_params<T: Scalar, R: Rng + ?Sized>(
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<Tensor<T>>> {
    cfg.validate()?;
    let text = if cfg.mode.uses_text() {
        Some(init_text_encoder(&cfg.text, rng)?)
    } else {
        None
    };
    let image = if cfg.mode.uses_image() {
        Some(init_image_encoder(&cfg.image, rng)?)
    } else {
        None
    };
    let head = init_fusion(&cfg.head, rng)?;
    Ok(ModelParams { text, image, head })
}

/// Preprocessed input for one review.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput<T> {
    pub review: Option<TokenizedReview>,
    /// `[3, S, S]` normalized image.
    pub image: Option<Tensor<T>>,
}

/// `[1, 2]` logits for one input.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let text = match (&params.text, &input.review) {
        (Some(p), Some(review)) => Some(encode_text(tape, p, &cfg.text, review, training, rng)?),
        (Some(_), None) => {
            return Err(Error::Contract(format!("{} model needs review text", cfg.mode)))
        }
        (None, _) => None,
    };
    let image = match (&params.image, &input.image) {
        (Some(p), Some(img)) => {
            let x = tape.constant(img.clone());
            Some(encode_image(tape, p, &cfg.image, x)?)
        }
        (Some(_), None) => {
            return Err(Error::Contract(format!("{} model needs an image", cfg.mode)))
        }
        (None, _) => None,
    };
    let head_in = match (text, image) {
        (Some(t), Some(i)) => fuse(tape, t, i, &cfg.head)?,
        (Some(v), None) | (None, Some(v)) => {
            let d = tape.value(v).numel();
            tape.reshape(v, &[1, d])?
        }
        (None, None) => unreachable!("every mode has at least one encoder"),
    };
    classify(tape, &params.head, &cfg.head, head_in, training, rng)
}

/// A trained (or freshly initialized) classifier with everything needed to
/// preprocess raw inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<f32>>,
    pub vocab: Vocabulary,
    pub pipeline: ImagePipelineConfig,
}

impl Model {
    /// Fresh model; the text encoder's vocabulary size follows `vocab`.
    pub fn init<R: Rng + ?Sized>(
        mode: Mode,
        settings: &ModelSettings,
        vocab: Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        let mut config = settings.config(mode);
        config.text.vocab_size = vocab.len();
        if mode.uses_image() && settings.pipeline.side != config.image.side {
            return Err(Error::Config(format!(
                "image pipeline side {} does not match encoder input side {}",
                settings.pipeline.side, config.image.side
            )));
        }
        let params = init_params(&config, rng)?;
        Ok(Model {
            config,
            params,
            vocab,
            pipeline: settings.pipeline.clone(),
        })
    }

    pub fn mode(&self) -> Mode {
        self.config.mode
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Tokenizes and loads what the mode needs. Inputs the mode does not use
    /// are ignored; missing required inputs are a contract error.
    pub fn prepare(&self, text: Option<&str>, image: Option<&RawImage>) -> Result<ModelInput<f32>> {
        let review = match (self.mode().uses_text(), text) {
            (true, Some(t)) => Some(self.vocab.tokenize(t, self.config.text.max_len)?),
            (true, None) => {
                return Err(Error::Contract(format!("{} model needs review text", self.mode())))
            }
            (false, _) => None,
        };
        let image = match (self.mode().uses_image(), image) {
            (true, Some(img)) => Some(self.pipeline.apply(img)?),
            (true, None) => {
                return Err(Error::Contract(format!("{} model needs an image", self.mode())))
            }
            (false, _) => None,
        };
        Ok(ModelInput { review, image })
    }

    /// Eval-mode logits.
    pub fn logits(&self, input: &ModelInput<f32>) -> Result<[f32; 2]> {
        let mut tape = Tape::new();
        let p = self.params.map(&mut |_, t| tape.param(t));
        // dropout is off in eval mode, so this generator is never drawn from
        let mut rng = crate::nn::derive_rng(0, &[]);
        let out = forward(&mut tape, &p, &self.config, input, false, &mut rng)?;
        let d = tape.value(out).data();
        Ok([d[0], d[1]])
    }

    /// Softmax of the eval-mode logits, computed in double precision.
    pub fn probabilities(&self, input: &ModelInput<f32>) -> Result<[f64; 2]> {
        Ok(softmax2(self.logits(input)?))
    }

    pub fn predict(&self, input: &ModelInput<f32>) -> Result<usize> {
        Ok(fusion::predict_label(&self.logits(input)?))
    }

    /// Sets every parameter to zero, which makes the model predict class 0
    /// for every input.
    pub fn zeroed(mut self) -> Self {
        self.params
            .visit_mut(&mut |_, t| t.data_mut().iter_mut().for_each(|v| *v = 0.0));
        self
    }
}

pub fn softmax2(logits: [f32; 2]) -> [f64; 2] {
    let (a, b) = (logits[0] as f64, logits[1] as f64);
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    [ea / (ea + eb), eb / (ea + eb)]
}
