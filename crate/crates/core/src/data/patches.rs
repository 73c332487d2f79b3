use alloc::format;
#[cfg(test)]
use alloc::vec;
use alloc::vec::Vec;

use super::{BiTemporalSample, Image, Mask};
use crate::error::{Error, Result};

/// Non-overlapping `size × size` tiles in row-major grid order; pre, post
/// and label are cropped identically.
pub fn crop_patches(source: &BiTemporalSample, size: usize) -> Result<Vec<BiTemporalSample>> {
    let (h, w) = (source.height(), source.width());
    if size == 0 || h % size != 0 || w % size != 0 {
        return Err(Error::invalid("crop_patches", format!("source {h}×{w} is not divisible into {size}×{size} patches")));
    }
    let mut patches = Vec::with_capacity((h / size) * (w / size));
    for top in (0..h).step_by(size) {
        for left in (0..w).step_by(size) {
            patches.push(BiTemporalSample {
                pre: source.pre.crop(top, left, size, size),
                post: source.post.crop(top, left, size, size),
                label: source.label.crop(top, left, size, size),
            });
        }
    }
    Ok(patches)
}

/// Reassembles a row-major grid of equally sized patches.
pub fn stitch_patches(patches: &[BiTemporalSample], rows: usize, cols: usize) -> Result<BiTemporalSample> {
    if patches.len() != rows * cols || patches.is_empty() {
        return Err(Error::invalid("stitch_patches", format!("{} patches for a {rows}×{cols} grid", patches.len())));
    }
    let (ph, pw) = (patches[0].height(), patches[0].width());
    if patches.iter().any(|p| (p.height(), p.width()) != (ph, pw)) {
        return Err(Error::invalid("stitch_patches", "patches differ in size"));
    }
    let (h, w) = (rows * ph, cols * pw);
    let mut pre = Vec::with_capacity(h * w * 3);
    let mut post = Vec::with_capacity(h * w * 3);
    let mut label = Vec::with_capacity(h * w);
    for gy in 0..rows {
        for y in 0..ph {
            for gx in 0..cols {
                let p = &patches[gy * cols + gx];
                pre.extend_from_slice(&p.pre.data[y * pw * 3..(y + 1) * pw * 3]);
                post.extend_from_slice(&p.post.data[y * pw * 3..(y + 1) * pw * 3]);
                label.extend_from_slice(&p.label.data[y * pw..(y + 1) * pw]);
            }
        }
    }
    BiTemporalSample::new(Image::new(h, w, pre)?, Image::new(h, w, post)?, Mask::new(h, w, label)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn source(size: usize) -> BiTemporalSample {
        // Tile one generated pair to reach large sizes quickly.
        let tile = &synth_generate(1, 64, 1).unwrap()[0];
        let reps = size / 64;
        let tiles: Vec<BiTemporalSample> = (0..reps * reps).map(|_| tile.clone()).collect();
        stitch_patches(&tiles, reps, reps).unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(crop_patches(&source(1024), 256).unwrap().len(), 16);
        assert_eq!(crop_patches(&source(512), 256).unwrap().len(), 4);
        let one = source(256);
        assert_eq!(crop_patches(&one, 256).unwrap(), vec![one]);
    }

    #[test]
    fn stitching_restores_the_source_bitwise() {
        let src = source(1024);
        let patches = crop_patches(&src, 256).unwrap();
        let back = stitch_patches(&patches, 4, 4).unwrap();
        assert!(back.pre.data.iter().zip(&src.pre.data).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert_eq!(back, src);
        // Second patch of the first row starts 256 columns in.
        assert_eq!(patches[1].pre.at(0, 0, 0), src.pre.at(0, 256, 0));
        assert_eq!(patches[4].label.at(3, 5), src.label.at(259, 5));
    }

    #[test]
    fn non_divisible_source_is_rejected_with_its_size() {
        let err = crop_patches(&source(192), 256).unwrap_err();
        assert!(format!("{err}").contains("192×192"));
    }
}
