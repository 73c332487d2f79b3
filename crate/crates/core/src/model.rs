//! The Siamese change detector: one encoder applied to both images with a
//! single weight set, followed by the difference/MLP decoder.

use alloc::vec::Vec;

use crate::config::ModelConfig;
use crate::decoder::MlpDecoder;
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::{Error, Result};
use crate::params::{ParamRegistry, ParamStore, Session};
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct ChangeFormer {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub decoder: MlpDecoder,
    registry: ParamRegistry,
}

impl ChangeFormer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut registry = ParamRegistry::new();
        let encoder = Encoder::new(&mut registry, &config);
        let decoder = MlpDecoder::new(&mut registry, &config);
        Ok(ChangeFormer { config, encoder, decoder, registry })
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    /// Deterministic random initialization: truncated-normal (std 0.02)
    /// linear and convolution weights, zero biases, unit norm scales.
    pub fn init_weights<T: Scalar>(&self, seed: u64) -> ParamStore<T> {
        ParamStore::initialize(&self.registry, seed, self.config.bn_momentum, self.config.bn_eps)
    }

    /// Logits `[N, H, W, 2]` for pre/post batches `[N, H, W, 3]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, pre: Var, post: Var) -> Result<Var> {
        self.check_pair(s, pre, post)?;
        let a = self.encoder.encode(s, pre)?;
        let b = self.encoder.encode(s, post)?;
        self.decoder.decode(s, &a, &b)
    }

    /// [`ChangeFormer::forward`] without the multiple-of-32 input check.
    pub fn forward_any_size<T: Scalar>(&self, s: &mut Session<'_, T>, pre: Var, post: Var) -> Result<Var> {
        self.check_pair(s, pre, post)?;
        let a = self.encoder.encode_any_size(s, pre)?;
        let b = self.encoder.encode_any_size(s, post)?;
        self.decoder.decode(s, &a, &b)
    }

    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var) -> Result<FeaturePyramid> {
        self.encoder.encode(s, images)
    }

    fn check_pair<T: Scalar>(&self, s: &Session<'_, T>, pre: Var, post: Var) -> Result<()> {
        if s.tape.shape(pre) != s.tape.shape(post) {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: s.tape.shape(pre).clone(),
                rhs: s.tape.shape(post).clone(),
            });
        }
        Ok(())
    }

    /// Eval-mode logits for one batch.
    pub fn predict<T: Scalar>(&self, store: &mut ParamStore<T>, pre: Tensor<T>, post: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::eval(store);
        let (a, b) = (s.input(pre), s.input(post));
        let logits = self.forward(&mut s, a, b)?;
        Ok(s.tape.value(logits).clone())
    }
}

/// Per-pixel argmax over the class axis of `[.., 2]` logits: 1 = change.
/// Ties go to no-change.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    logits.data().chunks_exact(2).map(|p| u8::from(p[1] > p[0])).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Encoder;
    use crate::testutil::randn;

    fn tiny() -> ChangeFormer {
        ChangeFormer::new(ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn full_resolution_logits() {
        let model = tiny();
        let mut store = model.init_weights::<f32>(0);
        for size in [64usize, 128, 256] {
            let x = Tensor::zeros([1, size, size, 3]);
            let logits = model.predict(&mut store, x.clone(), x).unwrap();
            assert_eq!(logits.dims(), &[1, size, size, 2]);
        }
        let bad = model.predict(&mut store, Tensor::zeros([1, 64, 64, 3]), Tensor::zeros([1, 32, 32, 3]));
        assert!(bad.is_err());
    }

    #[test]
    fn siamese_branches_share_one_encoder() {
        let model = tiny();
        let mut alone = ParamRegistry::new();
        Encoder::new(&mut alone, &model.config);
        let single: usize = alone.params().iter().map(|p| p.shape.numel()).sum();
        let in_model: usize =
            model.registry().params().iter().filter(|p| p.name.starts_with("encoder.")).map(|p| p.shape.numel()).sum();
        assert_eq!(single, in_model);
    }

    #[test]
    fn mutating_an_encoder_weight_changes_both_branches() {
        let model = tiny();
        let mut store = model.init_weights::<f64>(1);
        let pre = randn::<f64>(&[1, 64, 64, 3], 1);
        let post = randn::<f64>(&[1, 64, 64, 3], 2);
        let encode_both = |store: &mut ParamStore<f64>| {
            let mut s = Session::eval(store);
            let (a, b) = (s.input(pre.clone()), s.input(post.clone()));
            let pa = model.encode(&mut s, a).unwrap();
            let pb = model.encode(&mut s, b).unwrap();
            (s.tape.value(pa.levels[3]).clone(), s.tape.value(pb.levels[3]).clone())
        };
        let (a0, b0) = encode_both(&mut store);
        let id = store.id("encoder.stage1.embed.conv.weight").unwrap();
        store.value_mut(id).data_mut()[0] += 0.5;
        let (a1, b1) = encode_both(&mut store);
        assert!(!a0.bit_eq(&a1) && !b0.bit_eq(&b1));
    }

    /// Encoder-parameter gradients, optionally freezing one branch's pyramid.
    fn encoder_grads(model: &ChangeFormer, store: &mut ParamStore<f64>, frozen: Option<usize>) -> Vec<f64> {
        let pre = randn::<f64>(&[2, 64, 64, 3], 11);
        let post = randn::<f64>(&[2, 64, 64, 3], 12);
        store.zero_grad();
        {
            let mut s = Session::train(store);
            let mut pyramids = [pre, post].map(|img| {
                let x = s.input(img);
                model.encode(&mut s, x).unwrap()
            });
            if let Some(b) = frozen {
                for l in pyramids[b].levels.iter_mut() {
                    let value = s.tape.value(*l).clone();
                    *l = s.tape.constant(value);
                }
            }
            let logits = model.decoder.decode(&mut s, &pyramids[0], &pyramids[1]).unwrap();
            let labels: Vec<u8> = (0..2 * 64 * 64).map(|i| (i % 7 == 0) as u8).collect();
            let loss = s.tape.cross_entropy(logits, &labels).unwrap();
            s.backward(loss).unwrap();
        }
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("encoder.")).collect();
        ids.iter().flat_map(|&id| store.grad(id).data().to_vec()).collect()
    }

    #[test]
    fn branch_gradients_accumulate_into_shared_weights() {
        let model = tiny();
        let mut store = model.init_weights::<f64>(2);
        let both = encoder_grads(&model, &mut store, None);
        let pre_only = encoder_grads(&model, &mut store, Some(1));
        let post_only = encoder_grads(&model, &mut store, Some(0));
        let scale = both.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        assert!(scale > 0.0);
        let mut differs = false;
        for ((g, a), b) in both.iter().zip(&pre_only).zip(&post_only) {
            assert!((g - (a + b)).abs() <= 1e-9 * scale, "{g} vs {a} + {b}");
            differs |= (g - a).abs() > 1e-6 * scale;
        }
        assert!(differs, "the post branch contributed nothing");
    }

    #[test]
    fn initialization_scheme() {
        let model = ChangeFormer::new(ModelConfig::base()).unwrap();
        let a = model.init_weights::<f32>(7);
        assert!(a.bit_eq(&model.init_weights::<f32>(7)));
        assert!(!a.bit_eq(&model.init_weights::<f32>(8)));
        let mut checked = 0;
        for id in a.ids() {
            let name = a.name(id);
            let data = a.value(id).data();
            if name.ends_with(".bias") || name.ends_with(".beta") {
                assert!(data.iter().all(|&v| v == 0.0), "{name}");
            } else if name.ends_with(".gamma") {
                assert!(data.iter().all(|&v| v == 1.0), "{name}");
            } else if data.len() >= 10_000 {
                let n = data.len() as f64;
                let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
                let std = (data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
                assert!((std - 0.02).abs() <= 0.2 * 0.02, "{name}: std {std}");
                checked += 1;
            }
        }
        assert!(checked > 5);
    }

    #[test]
    fn argmax_ties_go_to_no_change() {
        let t = Tensor::from_vec([3, 2], alloc::vec![0.0f32, 0.0, 1.0, 2.0, 3.0, -1.0]).unwrap();
        assert_eq!(argmax_mask(&t), alloc::vec![0, 1, 0]);
    }
}
