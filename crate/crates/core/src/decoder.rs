//! Difference modules and the lightweight MLP decoder.
//!
//! Per level: `BN(ReLU(Conv3×3(Cat(pre, post))))` yields a learned difference
//! map. Each map is projected to `C_ebd` channels and bilinearly resized to
//! the level-1 grid (`H/4 × W/4`); the four are concatenated and fused by a
//! `Linear(4·C_ebd, C_ebd)`, upsampled to `H × W` by a transposed
//! convolution, and classified per pixel into change / no-change logits.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{DecoderConfig, ModelConfig};
use crate::encoder::FeaturePyramid;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv, Linear};
use crate::nn::ConvSpec;
use crate::params::{ParamRegistry, Session};
use crate::tape::Var;
use crate::tensor::{Scalar, Shape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DifferencePyramid {
    pub levels: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct DifferenceModule {
    pub conv: Conv,
    pub norm: BatchNorm,
}

impl DifferenceModule {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize) -> Self {
        DifferenceModule {
            conv: Conv::new(reg, &format!("{name}.conv"), ConvSpec::new(3, 1, 1, 2 * channels, channels)),
            norm: BatchNorm::new(reg, &format!("{name}.bn"), channels),
        }
    }

    /// Concatenates `pre` then `post` along channels; the order matters.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, pre: Var, post: Var) -> Result<Var> {
        if s.tape.shape(pre) != s.tape.shape(post) {
            return Err(Error::ShapeMismatch {
                op: "difference",
                lhs: s.tape.shape(pre).clone(),
                rhs: s.tape.shape(post).clone(),
            });
        }
        let cat = s.tape.concat(&[pre, post], 3)?;
        let y = self.conv.forward(s, cat)?;
        let y = s.tape.relu(y);
        self.norm.forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct MlpDecoder {
    pub config: DecoderConfig,
    pub differences: Vec<DifferenceModule>,
    pub unify: Vec<Linear>,
    pub fuse: Linear,
    pub upsample: Conv,
    pub classify: Linear,
}

impl MlpDecoder {
    pub fn new(reg: &mut ParamRegistry, config: &ModelConfig) -> Self {
        let d = &config.decoder;
        let e = d.embed_dim;
        let differences = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| DifferenceModule::new(reg, &format!("decoder.diff{}", i + 1), s.channels))
            .collect();
        let unify = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| Linear::new(reg, &format!("decoder.unify{}", i + 1), s.channels, e))
            .collect();
        let spec = ConvSpec::transposed(d.upsample_kernel, d.upsample_stride, d.upsample_padding, d.upsample_output_padding, e, e);
        MlpDecoder {
            config: d.clone(),
            differences,
            unify,
            fuse: Linear::new(reg, "decoder.fuse", 4 * e, e),
            upsample: Conv::transposed(reg, "decoder.upsample", spec),
            classify: Linear::new(reg, "decoder.classify", e, d.num_classes),
        }
    }

    pub fn difference<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        pre: &FeaturePyramid,
        post: &FeaturePyramid,
    ) -> Result<DifferencePyramid> {
        let mut levels = pre.levels;
        for (i, m) in self.differences.iter().enumerate() {
            levels[i] = m.forward(s, pre.levels[i], post.levels[i])?;
        }
        Ok(DifferencePyramid { levels })
    }

    /// `Linear(C_i, C_ebd)` then bilinear resize to `target`.
    pub fn unify_and_upsample<T: Scalar>(
        &self,
        s: &mut Session<'_, T>,
        level: usize,
        diff: Var,
        target: (usize, usize),
    ) -> Result<Var> {
        let y = self.unify[level].forward(s, diff)?;
        s.tape.bilinear_upsample(y, target.0, target.1)
    }

    /// Channel concat in level order, then `Linear(4·C_ebd, C_ebd)`.
    pub fn fuse<T: Scalar>(&self, s: &mut Session<'_, T>, levels: &[Var; 4]) -> Result<Var> {
        let first = s.tape.shape(levels[0]).clone();
        if let Some(bad) = levels.iter().find(|v| *s.tape.shape(**v) != first) {
            return Err(Error::ShapeMismatch { op: "fuse", lhs: first, rhs: s.tape.shape(*bad).clone() });
        }
        let cat = s.tape.concat(levels, 3)?;
        self.fuse.forward(s, cat)
    }

    /// Transposed convolution to full resolution, then per-pixel logits.
    pub fn upsample_and_classify<T: Scalar>(&self, s: &mut Session<'_, T>, fused: Var) -> Result<Var> {
        let y = self.upsample.forward(s, fused)?;
        self.classify.forward(s, y)
    }

    /// Full decoder: `[N, H, W, 2]` logits from the two pyramids.
    pub fn decode<T: Scalar>(&self, s: &mut Session<'_, T>, pre: &FeaturePyramid, post: &FeaturePyramid) -> Result<Var> {
        for (a, b) in pre.levels.iter().zip(&post.levels) {
            if s.tape.shape(*a) != s.tape.shape(*b) {
                return Err(Error::ShapeMismatch {
                    op: "decode",
                    lhs: s.tape.shape(*a).clone(),
                    rhs: s.tape.shape(*b).clone(),
                });
            }
        }
        let diffs = self.difference(s, pre, post)?;
        let target = level_size(s.tape.shape(diffs.levels[0]));
        let mut unified = diffs.levels;
        for (i, d) in diffs.levels.iter().enumerate() {
            unified[i] = self.unify_and_upsample(s, i, *d, target)?;
        }
        let fused = self.fuse(s, &unified)?;
        self.upsample_and_classify(s, fused)
    }
}

fn level_size(shape: &Shape) -> (usize, usize) {
    (shape.dims()[1], shape.dims()[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::testutil::randn;

    fn decoder(size: usize) -> (ModelConfig, MlpDecoder, ParamRegistry) {
        let cfg = ModelConfig::tiny().with_size(size, size);
        let mut reg = ParamRegistry::new();
        let dec = MlpDecoder::new(&mut reg, &cfg);
        (cfg, dec, reg)
    }

    fn noisy_store(reg: &ParamRegistry, seed: u64) -> ParamStore<f64> {
        let mut store = ParamStore::initialize(reg, 0, 0.1, 1e-5);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let dims = store.value(id).dims().to_vec();
            *store.value_mut(id) = randn::<f64>(&dims, seed * 100 + k as u64).map(|v| 0.3 * v);
        }
        store
    }

    fn pyramid(s: &mut Session<'_, f64>, cfg: &ModelConfig, size: usize, seed: u64) -> FeaturePyramid {
        let mut levels = [Var(0); 4];
        for (i, st) in cfg.stages.iter().enumerate() {
            let side = size >> (i + 2);
            levels[i] = s.input(randn(&[1, side, side, st.channels], seed + i as u64));
        }
        FeaturePyramid { levels }
    }

    #[test]
    fn difference_keeps_branch_shape_and_is_not_absolute_difference() {
        let (_, dec, reg) = decoder(256);
        let mut store = noisy_store(&reg, 1);
        let m = &dec.differences[0];
        let mut s = Session::eval(&mut store);
        let f = s.input(randn(&[1, 16, 16, 8], 3));
        let y = m.forward(&mut s, f, f).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 16, 16, 8]);
        // |f − f| = 0 everywhere, yet the learned metric responds.
        assert!(s.tape.value(y).data().iter().any(|v| v.abs() > 1e-3));
        let other = s.input(Tensor::zeros([1, 16, 16, 4]));
        assert!(m.forward(&mut s, f, other).is_err());
    }

    #[test]
    fn zeroed_difference_module_outputs_zero() {
        let (_, dec, reg) = decoder(256);
        let mut store = noisy_store(&reg, 2);
        let m = dec.differences[1].clone();
        for id in [m.conv.weight, m.conv.bias, m.norm.beta] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut s = Session::train(&mut store);
        let a = s.input(randn(&[2, 8, 8, 16], 4));
        let b = s.input(randn(&[2, 8, 8, 16], 5));
        let y = m.forward(&mut s, a, b).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unify_resizes_every_level_to_the_first() {
        let (_, dec, reg) = decoder(256);
        let mut store = noisy_store(&reg, 3);
        let mut s = Session::eval(&mut store);
        let l1 = s.input(randn(&[1, 64, 64, 8], 1));
        let y = dec.unify_and_upsample(&mut s, 0, l1, (64, 64)).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 64, 64, 32]);
        let l4 = s.input(Tensor::full([1, 8, 8, 64], 0.4));
        let y = dec.unify_and_upsample(&mut s, 3, l4, (64, 64)).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 64, 64, 32]);
        let out = s.tape.value(y).data();
        for px in out.chunks(32) {
            for (a, b) in px.iter().zip(&out[..32]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fuse_with_averaging_weights_is_the_mean() {
        let (_, dec, reg) = decoder(256);
        let mut store = noisy_store(&reg, 4);
        let e = 32;
        let mut w = Tensor::zeros([4 * e, e]);
        for block in 0..4 {
            for i in 0..e {
                w.data_mut()[(block * e + i) * e + i] = 0.25;
            }
        }
        *store.value_mut(dec.fuse.weight) = w;
        *store.value_mut(dec.fuse.bias.unwrap()) = Tensor::zeros([e]);
        let maps: Vec<Tensor<f64>> = (0..4).map(|i| randn(&[1, 4, 4, e], 10 + i)).collect();
        let mut s = Session::eval(&mut store);
        let levels = [0, 1, 2, 3].map(|i| s.input(maps[i].clone()));
        let y = dec.fuse(&mut s, &levels).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 4, 4, e]);
        for (j, v) in s.tape.value(y).data().iter().enumerate() {
            let mean = maps.iter().map(|m| m.data()[j]).sum::<f64>() / 4.0;
            assert!((v - mean).abs() < 1e-12);
        }
        let mut zero = ParamStore::<f64>::initialize(&reg, 0, 0.1, 1e-5);
        zero.value_mut(dec.fuse.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut s = Session::eval(&mut zero);
        let levels = [0, 1, 2, 3].map(|i| s.input(maps[i].clone()));
        let y = dec.fuse(&mut s, &levels).unwrap();
        assert!(s.tape.value(y).data().iter().all(|&v| v == 0.0));
        let odd = s.input(Tensor::zeros([1, 2, 2, e]));
        assert!(dec.fuse(&mut s, &[levels[0], levels[1], levels[2], odd]).is_err());
    }

    #[test]
    fn classifier_head_reaches_full_resolution() {
        let (_, dec, reg) = decoder(256);
        let mut store = ParamStore::<f32>::initialize(&reg, 0, 0.1, 1e-5);
        let mut s = Session::with_mode(&mut store, false, false);
        let x = s.input(Tensor::zeros([1, 64, 64, 32]));
        let y = dec.upsample_and_classify(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 256, 256, 2]);
    }

    #[test]
    fn decode_shapes_and_determinism() {
        for size in [64usize, 256] {
            let (cfg, dec, reg) = decoder(size);
            let mut store = noisy_store(&reg, 5);
            let mut s = Session::eval(&mut store);
            let a = pyramid(&mut s, &cfg, size, 20);
            let b = pyramid(&mut s, &cfg, size, 30);
            let y1 = dec.decode(&mut s, &a, &b).unwrap();
            let y2 = dec.decode(&mut s, &a, &b).unwrap();
            assert_eq!(s.tape.dims(y1), &[1, size, size, 2]);
            assert!(s.tape.value(y1).bit_eq(s.tape.value(y2)));
        }
    }

    #[test]
    fn decode_is_temporally_ordered() {
        let (cfg, dec, reg) = decoder(64);
        let mut store = noisy_store(&reg, 6);
        let mut s = Session::eval(&mut store);
        let a = pyramid(&mut s, &cfg, 64, 40);
        let b = pyramid(&mut s, &cfg, 64, 50);
        let ab = dec.decode(&mut s, &a, &b).unwrap();
        let ba = dec.decode(&mut s, &b, &a).unwrap();
        assert!(s.tape.value(ab).all_finite() && s.tape.value(ba).all_finite());
        assert_eq!(s.tape.dims(ab), s.tape.dims(ba));
        assert!(s.tape.value(ab).max_abs_diff(s.tape.value(ba)) > 1e-6);
    }

    #[test]
    fn four_independent_difference_modules() {
        let (cfg, dec, reg) = decoder(64);
        assert_eq!(dec.differences.len(), 4);
        for (i, st) in cfg.stages.iter().enumerate() {
            let c = st.channels;
            // conv weight + bias, BN scale + shift
            let expected = 9 * 2 * c * c + c + 2 * c;
            let count: usize = reg
                .params()
                .iter()
                .filter(|p| p.name.starts_with(&format!("decoder.diff{}.", i + 1)))
                .map(|p| p.shape.numel())
                .sum();
            assert_eq!(count, expected, "level {}", i + 1);
        }
        let names: Vec<&str> = reg.norms().iter().map(|n| n.name.as_str()).collect();
        assert_eq!(names.len(), 4);
    }
}
