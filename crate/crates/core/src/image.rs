//! Binary PPM decoding plus the resize / center-crop / normalize transform
//! that turns a review photo into a `[3, S, S]` tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// 8-bit RGB image, row-major from the top-left, channels interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Dimension(format!(
                "image extents must be positive, got {width}x{height}"
            )));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::Dimension(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `P6\n<w> <h>\n255\n` followed by the raw RGB bytes.
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let mut cursor = HeaderCursor { bytes, pos: 0 };
        let magic = cursor.token()?;
        if magic != b"P6" {
            return Err(Error::Format("not a binary PPM: magic is not P6 at offset 0".into()));
        }
        let width = cursor.number()?;
        let height = cursor.number()?;
        let maxval = cursor.number()?;
        if maxval != 255 {
            return Err(Error::Format(format!(
                "unsupported PPM maxval {maxval} (only 255), header ends near offset {}",
                cursor.pos
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => {
                return Err(Error::Format(format!(
                    "PPM header not terminated by whitespace at offset {}",
                    cursor.pos
                )))
            }
        }
        let need = 3 * width * height;
        let body = &bytes[cursor.pos..];
        if body.len() < need {
            return Err(Error::Format(format!(
                "PPM body truncated: expected {need} bytes from offset {}, found {}",
                cursor.pos,
                body.len()
            )));
        }
        Self::new(width, height, body[..need].to_vec())
            .map_err(|e| Error::Format(format!("PPM header at offset 0: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

struct HeaderCursor<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> HeaderCursor<'b> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'b [u8]> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace())
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!(
                "PPM header ends unexpectedly at offset {start}"
            )));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let start = self.pos;
        let tok = self.token()?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PPM header field near offset {start}")))
    }
}

pub fn load_image(path: &Path) -> Result<RawImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    RawImage::from_ppm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Bilinear resize to `side x side` with half-pixel centers and edge
/// clamping; results are rounded to the nearest 8-bit value.
pub fn resize_bilinear(img: &RawImage, side: usize) -> Result<RawImage> {
    if side == 0 {
        return Err(Error::Parameter("resize side must be at least 1".into()));
    }
    let axis = |dst: usize, src_len: usize| -> (usize, usize, f64) {
        let scale = src_len as f64 / side as f64;
        let pos = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut out = Vec::with_capacity(3 * side * side);
    for y in 0..side {
        let (y0, y1, fy) = axis(y, img.height);
        for x in 0..side {
            let (x0, x1, fx) = axis(x, img.width);
            let (p00, p01) = (img.pixel(x0, y0), img.pixel(x1, y0));
            let (p10, p11) = (img.pixel(x0, y1), img.pixel(x1, y1));
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bottom = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                let v = top * (1.0 - fy) + bottom * fy;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RawImage::new(side, side, out)
}

/// Central `side x side` window, offset `floor((extent - side) / 2)` on each
/// axis.
pub fn center_crop(img: &RawImage, side: usize) -> Result<RawImage> {
    if side == 0 || side > img.width.min(img.height) {
        return Err(Error::Dimension(format!(
            "crop side {side} does not fit a {}x{} image",
            img.width, img.height
        )));
    }
    let ox = (img.width - side) / 2;
    let oy = (img.height - side) / 2;
    let mut out = Vec::with_capacity(3 * side * side);
    for y in oy..oy + side {
        let row = 3 * (y * img.width + ox);
        out.extend_from_slice(&img.pixels[row..row + 3 * side]);
    }
    RawImage::new(side, side, out)
}

/// `(pixel / 255 - mean[c]) / std[c]`, laid out channel-major `[3, H, W]`.
pub fn normalize_channels<T: Scalar>(
    img: &RawImage,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Tensor<T>> {
    if let Some(bad) = std.iter().find(|&&s| s <= 0.0 || !s.is_finite()) {
        return Err(Error::Parameter(format!(
            "channel std must be positive, got {bad}"
        )));
    }
    let hw = img.width * img.height;
    let mut out = vec![T::zero(); 3 * hw];
    for (i, px) in img.pixels.chunks_exact(3).enumerate() {
        for c in 0..3 {
            let v = (px[c] as f64 / 255.0 - mean[c]) / std[c];
            out[c * hw + i] = T::from_f64_lossy(v);
        }
    }
    Tensor::new([3, img.height, img.width], out)
}

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagePipelineConfig {
    /// Final (cropped) side length.
    pub side: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ImagePipelineConfig {
    fn default() -> Self {
        ImagePipelineConfig {
            side: 32,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl ImagePipelineConfig {
    pub fn paper_scale() -> Self {
        ImagePipelineConfig {
            side: 224,
            ..Self::default()
        }
    }

    /// Intermediate resize target, `round(side * 8 / 7)` (224 -> 256).
    pub fn resize_side(&self) -> usize {
        (self.side as f64 * 8.0 / 7.0).round() as usize
    }

    pub fn apply<T: Scalar>(&self, img: &RawImage) -> Result<Tensor<T>> {
        let resized = resize_bilinear(img, self.resize_side())?;
        let cropped = center_crop(&resized, self.side)?;
        normalize_channels(&cropped, self.mean, self.std)
    }

    pub fn load<T: Scalar>(&self, path: &Path) -> Result<Tensor<T>> {
        self.apply(&load_image(path)?)
    }
}
