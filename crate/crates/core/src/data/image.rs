use serde::{Deserialize, Serialize};

use super::DataError;
use crate::autograd::Tensor;

/// Grayscale image with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(height * width, pixels.len(), "pixel count");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn row(&self, y: usize) -> &[f64] {
        &self.pixels[y * self.width..(y + 1) * self.width]
    }

    pub fn sum(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Occlusion {
    None,
    /// Rows `[0, H/2)` zeroed; only the lower half is visible.
    UpperHalfHidden,
    /// Rows `[H/2, H)` zeroed; only the upper half is visible.
    LowerHalfHidden,
}

impl Occlusion {
    /// Half-open row range hidden by this mode for an image of `height` rows.
    pub fn hidden_rows(self, height: usize) -> std::ops::Range<usize> {
        match self {
            Occlusion::None => 0..0,
            Occlusion::UpperHalfHidden => 0..height / 2,
            Occlusion::LowerHalfHidden => height / 2..height,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    ClassId(usize),
    AgeLike(f64),
}

impl Target {
    pub fn class_id(&self) -> Option<usize> {
        match *self {
            Target::ClassId(k) => Some(k),
            Target::AgeLike(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Target::ClassId(k) => k as f64,
            Target::AgeLike(v) => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub pixels: GrayImage,
    pub target: Target,
    pub occlusion: Occlusion,
}

impl LabeledImage {
    pub fn new(pixels: GrayImage, target: Target) -> Self {
        Self {
            pixels,
            target,
            occlusion: Occlusion::None,
        }
    }
}

/// Copy of `image` with the half selected by `mode` set to exactly zero.
pub fn occlude(image: &LabeledImage, mode: Occlusion) -> Result<LabeledImage, DataError> {
    if image.occlusion != Occlusion::None {
        return Err(DataError::AlreadyOccluded(image.occlusion));
    }
    let h = image.pixels.height;
    if mode != Occlusion::None && h % 2 != 0 {
        return Err(DataError::OddHeight(h));
    }
    let mut out = image.clone();
    let w = out.pixels.width;
    for y in mode.hidden_rows(h) {
        out.pixels.pixels[y * w..(y + 1) * w].fill(0.0);
    }
    out.occlusion = mode;
    Ok(out)
}

/// Stack images into an `(n, 1, h, w)` tensor, applying `mode` on the fly.
///
/// Already-occluded images are taken as they are when `mode` is `None`.
pub fn to_batch(images: &[&LabeledImage], mode: Occlusion) -> Result<Tensor, DataError> {
    let first = images.first().ok_or(DataError::Empty)?;
    let (h, w) = (first.pixels.height, first.pixels.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    let hidden = mode.hidden_rows(h);
    for img in images {
        if img.pixels.height != h || img.pixels.width != w {
            return Err(DataError::SizeMismatch {
                expected: (h, w),
                got: (img.pixels.height, img.pixels.width),
            });
        }
        if mode != Occlusion::None && img.occlusion != Occlusion::None {
            return Err(DataError::AlreadyOccluded(img.occlusion));
        }
        let start = data.len();
        data.extend_from_slice(&img.pixels.pixels);
        data[start + hidden.start * w..start + hidden.end * w].fill(0.0);
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data).expect("batch shape"))
}
