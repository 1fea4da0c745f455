//! Small residual CNN: a 3x3 stem, stages of two-conv residual blocks with
//! per-channel normalization, and global average pooling down to one
//! `d_out` vector per image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_conv, join};
use crate::tensor::{Scalar, Tape, Tensor, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
}

impl StageSpec {
    pub const fn new(blocks: usize, channels: usize, stride: usize) -> Self {
        StageSpec {
            blocks,
            channels,
            stride,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageEncoderConfig {
    /// Input side length `S`; images are `[3, S, S]`.
    pub side: usize,
    pub stem_channels: usize,
    pub stages: Vec<StageSpec>,
    pub d_out: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        ImageEncoderConfig {
            side: 32,
            stem_channels: 16,
            stages: vec![
                StageSpec::new(2, 16, 1),
                StageSpec::new(2, 32, 2),
                StageSpec::new(2, 64, 2),
            ],
            d_out: 64,
        }
    }
}

impl ImageEncoderConfig {
    /// ResNet-50 stage widths and depths with basic blocks at 224 px.
    pub fn paper_scale() -> Self {
        ImageEncoderConfig {
            side: 224,
            stem_channels: 64,
            stages: vec![
                StageSpec::new(3, 256, 1),
                StageSpec::new(4, 512, 2),
                StageSpec::new(6, 1024, 2),
                StageSpec::new(3, 2048, 2),
            ],
            d_out: 2048,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.stem_channels == 0 {
            return Err(Error::Config(
                "image encoder side and stem channels must be positive".into(),
            ));
        }
        if self.stages.is_empty() {
            return Err(Error::Config("image encoder needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.blocks == 0 || s.channels == 0 || !(1..=2).contains(&s.stride) {
                return Err(Error::Config(format!(
                    "stage {i}: blocks and channels must be positive and stride 1 or 2, got {s:?}"
                )));
            }
        }
        let last = self.stages.last().expect("non-empty").channels;
        if last != self.d_out {
            return Err(Error::Config(format!(
                "final stage has {last} channels but d_out is {}",
                self.d_out
            )));
        }
        Ok(())
    }

    /// `(c_in, c_out, stride)` for every block in order.
    pub fn block_specs(&self) -> Vec<(usize, usize, usize)> {
        let mut specs = Vec::new();
        let mut c_in = self.stem_channels;
        for stage in &self.stages {
            for b in 0..stage.blocks {
                let stride = if b == 0 { stage.stride } else { 1 };
                specs.push((c_in, stage.channels, stride));
                c_in = stage.channels;
            }
        }
        specs
    }

    /// Feature-map shapes after the stem and after every block, without
    /// allocating anything. A stride-2 3x3 conv with padding 1 maps `n` to
    /// `ceil(n / 2)`.
    pub fn shape_trace(&self) -> Vec<[usize; 3]> {
        let mut side = self.side;
        let mut trace = vec![[self.stem_channels, side, side]];
        for (_, c_out, stride) in self.block_specs() {
            side = (side + 2 - 3) / stride + 1;
            trace.push([c_out, side, side]);
        }
        trace
    }
}

/// Basic residual block. `projection` is present when the block changes
/// stride or channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlockParams<P> {
    pub conv1: P,
    pub norm1_gamma: P,
    pub norm1_beta: P,
    pub conv2: P,
    pub norm2_gamma: P,
    pub norm2_beta: P,
    pub projection: Option<P>,
    pub stride: usize,
}

impl<P> ResidualBlockParams<P> {
    pub fn map<'s, Q>(
        &'s self,
        prefix: &str,
        f: &mut impl FnMut(String, &'s P) -> Q,
    ) -> ResidualBlockParams<Q> {
        ResidualBlockParams {
            conv1: f(join(prefix, "conv1"), &self.conv1),
            norm1_gamma: f(join(prefix, "norm1_gamma"), &self.norm1_gamma),
            norm1_beta: f(join(prefix, "norm1_beta"), &self.norm1_beta),
            conv2: f(join(prefix, "conv2"), &self.conv2),
            norm2_gamma: f(join(prefix, "norm2_gamma"), &self.norm2_gamma),
            norm2_beta: f(join(prefix, "norm2_beta"), &self.norm2_beta),
            projection: self
                .projection
                .as_ref()
                .map(|p| f(join(prefix, "projection"), p)),
            stride: self.stride,
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(join(prefix, "conv1"), &self.conv1);
        f(join(prefix, "norm1_gamma"), &self.norm1_gamma);
        f(join(prefix, "norm1_beta"), &self.norm1_beta);
        f(join(prefix, "conv2"), &self.conv2);
        f(join(prefix, "norm2_gamma"), &self.norm2_gamma);
        f(join(prefix, "norm2_beta"), &self.norm2_beta);
        if let Some(p) = &self.projection {
            f(join(prefix, "projection"), p);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut P)) {
        f(join(prefix, "conv1"), &mut self.conv1);
        f(join(prefix, "norm1_gamma"), &mut self.norm1_gamma);
        f(join(prefix, "norm1_beta"), &mut self.norm1_beta);
        f(join(prefix, "conv2"), &mut self.conv2);
        f(join(prefix, "norm2_gamma"), &mut self.norm2_gamma);
        f(join(prefix, "norm2_beta"), &mut self.norm2_beta);
        if let Some(p) = &mut self.projection {
            f(join(prefix, "projection"), p);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoderParams<P> {
    pub stem: P,
    pub blocks: Vec<ResidualBlockParams<P>>,
}

impl<P> ImageEncoderParams<P> {
    pub fn map<'s, Q>(
        &'s self,
        prefix: &str,
        f: &mut impl FnMut(String, &'s P) -> Q,
    ) -> ImageEncoderParams<Q> {
        ImageEncoderParams {
            stem: f(join(prefix, "stem"), &self.stem),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&join(prefix, &format!("block{i}")), f))
                .collect(),
        }
    }

    pub fn visit<'s>(&'s self, prefix: &str, f: &mut impl FnMut(String, &'s P)) {
        f(join(prefix, "stem"), &self.stem);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
    }

    pub fn visit_mut<'s>(&'s mut self, prefix: &str, f: &mut impl FnMut(String, &'s mut P)) {
        f(join(prefix, "stem"), &mut self.stem);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
    }
}

/// He-normal kernels, unit first-norm gains, zero biases and zero
/// second-norm gains, so every residual branch starts switched off.
pub fn init_image_encoder<T: Scalar, R: Rng + ?Sized>(
    cfg: &ImageEncoderConfig,
    rng: &mut R,
) -> Result<ImageEncoderParams<Tensor<T>>> {
    cfg.validate()?;
    let stem = he_conv(cfg.stem_channels, 3, 3, rng);
    let blocks = cfg
        .block_specs()
        .into_iter()
        .map(|(c_in, c_out, stride)| ResidualBlockParams {
            conv1: he_conv(c_out, c_in, 3, rng),
            norm1_gamma: Tensor::ones([c_out]),
            norm1_beta: Tensor::zeros([c_out]),
            conv2: he_conv(c_out, c_out, 3, rng),
            norm2_gamma: Tensor::zeros([c_out]),
            norm2_beta: Tensor::zeros([c_out]),
            projection: (stride != 1 || c_in != c_out).then(|| he_conv(c_out, c_in, 1, rng)),
            stride,
        })
        .collect();
    Ok(ImageEncoderParams { stem, blocks })
}

pub fn residual_block<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    block: &ResidualBlockParams<Var>,
) -> Result<Var> {
    let eps = T::from_f64_lossy(NORM_EPS);
    let h = tape.conv2d(x, block.conv1, block.stride, 1)?;
    let h = tape.channel_norm(h, block.norm1_gamma, block.norm1_beta, eps)?;
    let h = tape.relu(h)?;
    let h = tape.conv2d(h, block.conv2, 1, 1)?;
    let h = tape.channel_norm(h, block.norm2_gamma, block.norm2_beta, eps)?;
    let shortcut = match block.projection {
        Some(p) => tape.conv2d(x, p, block.stride, 0)?,
        None => x,
    };
    if tape.shape(shortcut) != tape.shape(h) {
        return Err(Error::Dimension(format!(
            "residual shortcut {:?} does not match branch {:?}",
            tape.shape(shortcut),
            tape.shape(h)
        )));
    }
    let sum = tape.add(shortcut, h)?;
    tape.relu(sum)
}

/// `[3, S, S]` image to a `d_out` feature vector.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<'_, T>,
    params: &ImageEncoderParams<Var>,
    cfg: &ImageEncoderConfig,
    image: Var,
) -> Result<Var> {
    let expected = [3, cfg.side, cfg.side];
    if tape.shape(image) != expected {
        return Err(Error::Dimension(format!(
            "image encoder expects {expected:?}, got {:?}",
            tape.shape(image)
        )));
    }
    let h = tape.conv2d(image, params.stem, 1, 1)?;
    let mut h = tape.relu(h)?;
    for block in &params.blocks {
        h = residual_block(tape, h, block)?;
    }
    tape.global_avg_pool(h)
}
