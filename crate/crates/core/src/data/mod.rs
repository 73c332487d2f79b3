//! Bi-temporal samples and the in-memory data pipeline: patch extraction,
//! random splits, augmentation and the synthetic change generator.

mod augment;
mod patches;
mod split;
mod synth;

use alloc::format;
use alloc::vec::Vec;

pub use augment::{augment, draw_rescale_factor, hflip, reflect_index, vflip};
pub use patches::{crop_patches, stitch_patches};
pub use split::{split_random, DatasetSplit, SplitName};
pub use synth::{render_scene, synth_generate, synth_generate_with, synth_scene, ShapeKind, SynthConfig, SynthScene, SynthShape};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// RGB image, row-major `H × W × 3`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::invalid("image", format!("{} values do not form a {height}×{width}×3 image", data.len())));
        }
        Ok(Image { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Image { height, width, data: alloc::vec![value; height * width * 3] }
    }

    /// From 8-bit RGB, mapping `v` to `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8).collect()
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Image {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in top..top + height {
            let row = (y * self.width + left) * 3;
            data.extend_from_slice(&self.data[row..row + width * 3]);
        }
        Image { height, width, data }
    }
}

/// Binary change mask, row-major `H × W`, values in `{0, 1}` (1 = change).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return Err(Error::invalid("mask", format!("{} values do not form a {height}×{width} mask", data.len())));
        }
        if let Some(i) = data.iter().position(|&v| v > 1) {
            return Err(Error::invalid("mask", format!("value {} at pixel {i} is not binary", data[i])));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, data: alloc::vec![0; height * width] }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Mask {
        let mut data = Vec::with_capacity(height * width);
        for y in top..top + height {
            let row = y * self.width + left;
            data.extend_from_slice(&self.data[row..row + width]);
        }
        Mask { height, width, data }
    }

    pub fn count_changed(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }
}

/// A co-registered image pair and its change label.
#[derive(Clone, Debug, PartialEq)]
pub struct BiTemporalSample {
    pub pre: Image,
    pub post: Image,
    pub label: Mask,
}

impl BiTemporalSample {
    pub fn new(pre: Image, post: Image, label: Mask) -> Result<Self> {
        let dims = [(pre.height, pre.width), (post.height, post.width), (label.height, label.width)];
        if dims[1] != dims[0] || dims[2] != dims[0] {
            return Err(Error::invalid("sample", format!("pre/post/label sizes differ: {dims:?}")));
        }
        Ok(BiTemporalSample { pre, post, label })
    }

    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }
}

/// Stacks images into a `[N, H, W, 3]` tensor. All images must share a size.
pub fn stack_images<'a, T: Scalar>(images: impl IntoIterator<Item = &'a Image>) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut size = None;
    let mut n = 0;
    for img in images {
        match size {
            None => size = Some((img.height, img.width)),
            Some(s) if s != (img.height, img.width) => {
                return Err(Error::invalid("stack_images", format!("mixed sizes {s:?} and {:?}", (img.height, img.width))));
            }
            _ => {}
        }
        data.extend(img.data.iter().map(|&v| T::from_f64(v as f64)));
        n += 1;
    }
    let (h, w) = size.ok_or_else(|| Error::invalid("stack_images", "empty batch"))?;
    Tensor::from_vec([n, h, w, 3], data)
}

/// Image `index` of a `[N, H, W, 3]` tensor.
pub fn unstack_image<T: Scalar>(t: &Tensor<T>, index: usize) -> Result<Image> {
    let &[_, h, w, 3] = t.dims() else {
        return Err(Error::invalid("unstack_image", format!("expected [N, H, W, 3], got {}", t.shape())));
    };
    let chunk = h * w * 3;
    let data = t.data()[index * chunk..(index + 1) * chunk].iter().map(|v| v.as_f64() as f32).collect();
    Image::new(h, w, data)
}
