use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::{BiTemporalSample, Image, Mask};
use crate::config::AugmentConfig;
use crate::kernels::lerp_taps;

/// Mirror index for reflect padding (edge pixel not repeated).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize { m as usize } else { (period - m) as usize }
}

/// Random training augmentation. Geometric transforms move pre, post and
/// label together; photometric ones touch only the images, with separate
/// draws for pre and post. Output has the input's size.
pub fn augment<R: Rng + ?Sized>(sample: &BiTemporalSample, cfg: &AugmentConfig, rng: &mut R) -> BiTemporalSample {
    let mut s = sample.clone();
    if !cfg.enabled {
        return s;
    }
    if rng.random::<f64>() < cfg.hflip_prob {
        s = hflip(&s);
    }
    if rng.random::<f64>() < cfg.vflip_prob {
        s = vflip(&s);
    }
    if rng.random::<f64>() < cfg.rescale_prob {
        let factor = draw_rescale_factor(cfg, rng);
        s = rescale_and_fit(&s, factor, rng);
    }
    for img in [&mut s.pre, &mut s.post] {
        if rng.random::<f64>() < cfg.blur_prob {
            let sigma = cfg.blur_sigma_max * rng.random::<f64>();
            *img = gaussian_blur(img, sigma);
        }
        if rng.random::<f64>() < cfg.jitter_prob {
            let mut draw = || 1.0 + cfg.jitter_strength * (2.0 * rng.random::<f64>() - 1.0);
            let (b, c, sat) = (draw(), draw(), draw());
            color_jitter(img, b as f32, c as f32, sat as f32);
        }
    }
    s
}

/// Uniform in `[scale_min, scale_max]`.
pub fn draw_rescale_factor<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> f64 {
    cfg.scale_min + (cfg.scale_max - cfg.scale_min) * rng.random::<f64>()
}

/// Mirrors left-right.
pub fn hflip(s: &BiTemporalSample) -> BiTemporalSample {
    map_geometry(s, |y, x, _h, w| (y, w - 1 - x))
}

/// Mirrors top-bottom.
pub fn vflip(s: &BiTemporalSample) -> BiTemporalSample {
    map_geometry(s, |y, x, h, _w| (h - 1 - y, x))
}

/// Applies an exact pixel permutation (`dst -> src`) to all three rasters.
fn map_geometry(s: &BiTemporalSample, src: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> BiTemporalSample {
    let (h, w) = (s.height(), s.width());
    let mut pre = Vec::with_capacity(h * w * 3);
    let mut post = Vec::with_capacity(h * w * 3);
    let mut label = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x, h, w);
            for c in 0..3 {
                pre.push(s.pre.at(sy, sx, c));
                post.push(s.post.at(sy, sx, c));
            }
            label.push(s.label.at(sy, sx));
        }
    }
    BiTemporalSample {
        pre: Image { height: h, width: w, data: pre },
        post: Image { height: h, width: w, data: post },
        label: Mask { height: h, width: w, data: label },
    }
}

/// Rescales by `factor` (bilinear images, nearest label), then takes a random
/// crop when enlarged or reflect-pads at a random offset when shrunk.
fn rescale_and_fit<R: Rng + ?Sized>(s: &BiTemporalSample, factor: f64, rng: &mut R) -> BiTemporalSample {
    let (h, w) = (s.height(), s.width());
    let sh = (libm::round(h as f64 * factor) as usize).max(1);
    let sw = (libm::round(w as f64 * factor) as usize).max(1);
    let pre = resize_bilinear(&s.pre, sh, sw);
    let post = resize_bilinear(&s.post, sh, sw);
    let label = resize_nearest(&s.label, sh, sw);
    // Offset of the output window inside the scaled raster (may be negative).
    let mut offset = |scaled: usize, out: usize| -> isize {
        if scaled >= out {
            rng.random_range(0..=scaled - out) as isize
        } else {
            -(rng.random_range(0..=out - scaled) as isize)
        }
    };
    let (oy, ox) = (offset(sh, h), offset(sw, w));
    let scaled = BiTemporalSample { pre, post, label };
    let mut out = BiTemporalSample { pre: Image::filled(h, w, 0.0), post: Image::filled(h, w, 0.0), label: Mask::zeros(h, w) };
    for y in 0..h {
        let sy = reflect_index(y as isize + oy, sh);
        for x in 0..w {
            let sx = reflect_index(x as isize + ox, sw);
            for c in 0..3 {
                out.pre.data[(y * w + x) * 3 + c] = scaled.pre.at(sy, sx, c);
                out.post.data[(y * w + x) * 3 + c] = scaled.post.at(sy, sx, c);
            }
            out.label.data[y * w + x] = scaled.label.at(sy, sx);
        }
    }
    out
}

fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    let ty = lerp_taps::<f32>(img.height, oh);
    let tx = lerp_taps::<f32>(img.width, ow);
    let mut data = Vec::with_capacity(oh * ow * 3);
    for r in &ty {
        for q in &tx {
            for c in 0..3 {
                let top = q.w_lo * img.at(r.lo, q.lo, c) + q.w_hi * img.at(r.lo, q.hi, c);
                let bottom = q.w_lo * img.at(r.hi, q.lo, c) + q.w_hi * img.at(r.hi, q.hi, c);
                data.push(r.w_lo * top + r.w_hi * bottom);
            }
        }
    }
    Image { height: oh, width: ow, data }
}

fn resize_nearest(mask: &Mask, oh: usize, ow: usize) -> Mask {
    let pick = |o: usize, out: usize, inp: usize| (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1);
    let mut data = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, oh, mask.height);
        for x in 0..ow {
            data.push(mask.at(sy, pick(x, ow, mask.width)));
        }
    }
    Mask { height: oh, width: ow, data }
}

/// Separable Gaussian blur with reflect borders. Tiny sigmas are a no-op.
fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma < 1e-3 {
        return img.clone();
    }
    let radius = libm::ceil(3.0 * sigma) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma)) as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius, w);
                    acc += wt * img.at(y, sx, c);
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut data = vec![0.0f32; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius, h);
                    acc += wt * tmp[(sy * w + x) * 3 + c];
                }
                data[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    Image { height: h, width: w, data }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, then contrast about the mean luma, then saturation about the
/// per-pixel luma. Clamped to `[0, 1]`.
fn color_jitter(img: &mut Image, brightness: f32, contrast: f32, saturation: f32) {
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    img.data.iter_mut().for_each(|v| *v = clamp(*v * brightness));
    let pixels = img.data.len() / 3;
    let mean = img.data.chunks_exact(3).map(|p| luma(p[0], p[1], p[2])).sum::<f32>() / pixels as f32;
    img.data.iter_mut().for_each(|v| *v = clamp((*v - mean) * contrast + mean));
    for p in img.data.chunks_exact_mut(3) {
        let g = luma(p[0], p[1], p[2]);
        p.iter_mut().for_each(|v| *v = clamp((*v - g) * saturation + g));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn marker_sample(h: usize, w: usize, top: usize, left: usize, size: usize) -> BiTemporalSample {
        let mut pre = Image::filled(h, w, 0.2);
        let mut label = Mask::zeros(h, w);
        for y in top..top + size {
            for x in left..left + size {
                for c in 0..3 {
                    pre.data[(y * w + x) * 3 + c] = 0.9;
                }
                label.data[y * w + x] = 1;
            }
        }
        BiTemporalSample { post: pre.clone(), pre, label }
    }

    fn centroid(points: impl Iterator<Item = (usize, usize)>) -> (f64, f64) {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0.0);
        for (y, x) in points {
            sy += y as f64;
            sx += x as f64;
            n += 1.0;
        }
        (sy / n, sx / n)
    }

    #[test]
    fn reflect_mirrors_without_repeating_edges() {
        let got: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, [3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-5, 1), 0);
    }

    #[test]
    fn flips_move_marker_in_lockstep() {
        let s = marker_sample(8, 8, 1, 2, 1);
        let cfg = AugmentConfig { rescale_prob: 0.0, blur_prob: 0.0, jitter_prob: 0.0, hflip_prob: 1.0, vflip_prob: 1.0, ..Default::default() };
        let out = augment(&s, &cfg, &mut rng_for(1, &[]));
        assert_eq!(out.label.at(6, 5), 1);
        assert_eq!(out.label.count_changed(), 1);
        assert_eq!(out.pre.at(6, 5, 0), 0.9);
        assert_eq!(out.post.at(6, 5, 2), 0.9);
    }

    #[test]
    fn geometry_stays_aligned_under_random_augmentation() {
        let s = marker_sample(32, 32, 10, 14, 6);
        let cfg = AugmentConfig { hflip_prob: 0.5, vflip_prob: 0.5, rescale_prob: 1.0, blur_prob: 0.0, jitter_prob: 0.0, ..Default::default() };
        for seed in 0..20 {
            let out = augment(&s, &cfg, &mut rng_for(seed, &[]));
            assert_eq!((out.height(), out.width()), (32, 32));
            let lab = centroid((0..32 * 32).filter(|&i| out.label.data[i] == 1).map(|i| (i / 32, i % 32)));
            for img in [&out.pre, &out.post] {
                let bright = centroid((0..32 * 32).filter(|&i| img.data[i * 3] > 0.55).map(|i| (i / 32, i % 32)));
                assert!((lab.0 - bright.0).abs() <= 1.0 && (lab.1 - bright.1).abs() <= 1.0, "seed {seed}: {lab:?} vs {bright:?}");
            }
        }
    }

    #[test]
    fn photometric_changes_leave_label_untouched() {
        let s = marker_sample(16, 16, 4, 4, 4);
        let cfg = AugmentConfig { hflip_prob: 0.0, vflip_prob: 0.0, rescale_prob: 0.0, blur_prob: 1.0, jitter_prob: 1.0, ..Default::default() };
        let out = augment(&s, &cfg, &mut rng_for(3, &[]));
        assert_eq!(out.label, s.label);
        assert_ne!(out.pre, s.pre);
        assert!(out.pre.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn disabled_is_identity() {
        let s = marker_sample(8, 8, 0, 0, 3);
        let cfg = AugmentConfig { enabled: false, ..Default::default() };
        assert_eq!(augment(&s, &cfg, &mut rng_for(0, &[])), s);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let img = Image::filled(6, 5, 0.4);
        let out = gaussian_blur(&img, 1.5);
        assert!(out.data.iter().all(|v| (v - 0.4).abs() < 1e-6));
    }

    #[test]
    fn flips_are_involutions() {
        let s = marker_sample(7, 9, 2, 3, 2);
        assert_eq!(hflip(&hflip(&s)), s);
        assert_eq!(vflip(&vflip(&s)), s);
        assert_ne!(hflip(&s), s);
    }

    #[test]
    fn rescale_factor_stays_in_range() {
        let cfg = AugmentConfig::default();
        let mut rng = rng_for(11, &[]);
        let draws: Vec<f64> = (0..10_000).map(|_| draw_rescale_factor(&cfg, &mut rng)).collect();
        let lo = draws.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = draws.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo >= 0.8 && hi <= 1.2, "{lo} {hi}");
        assert!(lo < 0.81 && hi > 1.19, "range not explored: {lo} {hi}");
    }

    #[test]
    fn labels_stay_binary() {
        let s = marker_sample(32, 32, 5, 9, 7);
        for seed in 0..30 {
            let out = augment(&s, &AugmentConfig::default(), &mut rng_for(seed, &[1]));
            assert!(out.label.data.iter().all(|&v| v <= 1));
        }
    }
}
