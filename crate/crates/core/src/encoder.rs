//! Hierarchical transformer encoder.
//!
//! Four stages, each an overlapping patch embedding (strided convolution plus
//! layer norm) followed by transformer blocks. Blocks use pre-norm
//! sequence-reduction attention and a Mix-FFN whose depthwise 3×3
//! convolution is the only source of positional information, so the same
//! weights run at any input resolution. Stage `i` (1-based) outputs
//! `H/2^(i+1) × W/2^(i+1) × C_i`.

use alloc::format;
use alloc::vec::Vec;

use crate::config::{reduction_window, ModelConfig, StageConfig};
use crate::error::{Error, Result};
use crate::layers::{Conv, LayerNorm, Linear};
use crate::nn::ConvSpec;
use crate::params::{ParamRegistry, Session};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// The four per-stage feature maps of one batch of images, `[N, h_i, w_i, C_i]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Kernel, stride and padding of the patch embedding in front of stage
/// `stage` (1-based): a 7/4/3 convolution first, 3/2/1 afterwards.
pub fn patch_embed_geometry(stage: usize) -> (usize, usize, usize) {
    if stage == 1 {
        (7, 4, 3)
    } else {
        (3, 2, 1)
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub conv: Conv,
    pub norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new(reg: &mut ParamRegistry, name: &str, stage: usize, in_channels: usize, channels: usize) -> Self {
        let (k, s, p) = patch_embed_geometry(stage);
        PatchEmbed {
            conv: Conv::new(reg, &format!("{name}.conv"), ConvSpec::new(k, s, p, in_channels, channels)),
            norm: LayerNorm::new(reg, &format!("{name}.norm"), channels),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(s, x)?;
        self.norm.forward(s, y)
    }
}

/// Folds each non-overlapping `rows × cols` window of `x[N, H, W, C]` into
/// one token of width `rows·cols·C`, ordered (window row, window col,
/// channel). With `rows = 1` this is the plain row-major reshape of the
/// `(HW, C)` token matrix into `(HW/R, C·R)`.
pub fn fold_windows<T: Scalar>(tape: &mut Tape<T>, x: Var, rows: usize, cols: usize) -> Result<Var> {
    let &[n, h, w, c] = tape.dims(x) else {
        return Err(Error::invalid("sequence_reduce", format!("expected [N, H, W, C], got {}", tape.shape(x))));
    };
    if h % rows != 0 || w % cols != 0 {
        return Err(Error::invalid(
            "sequence_reduce",
            format!("{h}×{w} tokens are not divisible into {rows}×{cols} windows (R={})", rows * cols),
        ));
    }
    let split = tape.reshape(x, [n, h / rows, rows, w / cols, cols, c])?;
    let grouped = tape.permute(split, &[0, 1, 3, 2, 4, 5])?;
    tape.reshape(grouped, [n, (h / rows) * (w / cols), rows * cols * c])
}

/// Shortens a token sequence by `reduction`: window folding then a
/// `Linear(C·R, C)` projection.
#[derive(Clone, Debug)]
pub struct SequenceReduction {
    pub reduction: usize,
    pub proj: Linear,
}

impl SequenceReduction {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, reduction: usize) -> Self {
        SequenceReduction { reduction, proj: Linear::new(reg, name, channels * reduction, channels) }
    }

    /// `x[N, H, W, C]` to `[N, HW/R, C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (rows, cols) = reduction_window(self.reduction);
        let folded = fold_windows(&mut s.tape, x, rows, cols)?;
        self.proj.forward(s, folded)
    }
}

/// Output of [`attend`]: the attended values and the softmax weights.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

/// Scaled dot-product attention `softmax(Q·Kᵀ·scale)·V` over `[B, L, d]`
/// queries and `[B, L_kv, d]` keys/values.
pub fn attend<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, scale: T) -> Result<Attended> {
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, scale);
    let weights = tape.softmax(scores)?;
    let output = tape.matmul(weights, v)?;
    Ok(Attended { output, weights })
}

/// `[N, L, heads·d]` to `[N·heads, L, d]`.
pub fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let &[n, l, c] = tape.dims(x) else {
        return Err(Error::invalid("split_heads", format!("expected [N, L, C], got {}", tape.shape(x))));
    };
    let d = c / heads;
    let x = tape.reshape(x, [n, l, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, [n * heads, l, d])
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let &[nh, l, d] = tape.dims(x) else {
        return Err(Error::invalid("merge_heads", format!("expected [N·heads, L, d], got {}", tape.shape(x))));
    };
    let n = nh / heads;
    let x = tape.reshape(x, [n, heads, l, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, [n, l, heads * d])
}

/// Multi-head attention whose keys and values come from the
/// sequence-reduced input. Queries keep full length, so the output has the
/// input's shape. Stages with `R = 1` have no reduction layer at all.
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    pub heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub reduce: Option<SequenceReduction>,
    pub proj: Linear,
}

impl EfficientSelfAttention {
    pub fn new(reg: &mut ParamRegistry, name: &str, cfg: &StageConfig) -> Self {
        let c = cfg.channels;
        EfficientSelfAttention {
            heads: cfg.heads,
            q: Linear::new(reg, &format!("{name}.q"), c, c),
            // A key bias shifts every score in a row by the same amount,
            // which softmax cancels, so the key projection has none.
            k: Linear::without_bias(reg, &format!("{name}.k"), c, c),
            v: Linear::new(reg, &format!("{name}.v"), c, c),
            reduce: (cfg.reduction > 1).then(|| SequenceReduction::new(reg, &format!("{name}.sr"), c, cfg.reduction)),
            proj: Linear::new(reg, &format!("{name}.proj"), c, c),
        }
    }

    /// `x[N, H, W, C]` to `[N, H, W, C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        self.forward_with_weights(s, x).map(|(out, _)| out)
    }

    /// Also returns the `[N·heads, HW, HW/R]` attention weights.
    pub fn forward_with_weights<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var)> {
        self.forward_counted(s, x).map(|(out, weights, _)| (out, weights))
    }

    /// Forward pass that also reports multiply-accumulates by stage.
    pub fn forward_counted<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<(Var, Var, AttentionCost)> {
        let dims = s.tape.dims(x).to_vec();
        let &[n, h, w, c] = dims.as_slice() else {
            return Err(Error::invalid("attention", format!("expected [N, H, W, C], got {}", s.tape.shape(x))));
        };
        let mut cost = AttentionCost::default();
        let mut mark = s.tape.macs();
        let mut lap = |s: &Session<'_, T>| {
            let now = s.tape.macs();
            let d = now - mark;
            mark = now;
            d
        };
        let tokens = s.tape.reshape(x, [n, h * w, c])?;
        let kv_source = match &self.reduce {
            Some(r) => r.forward(s, x)?,
            None => tokens,
        };
        cost.reduction = lap(s);
        let q = self.q.forward(s, tokens)?;
        let k = self.k.forward(s, kv_source)?;
        let v = self.v.forward(s, kv_source)?;
        let q = split_heads(&mut s.tape, q, self.heads)?;
        let k = split_heads(&mut s.tape, k, self.heads)?;
        let v = split_heads(&mut s.tape, v, self.heads)?;
        cost.projections = lap(s);
        let head_dim = c / self.heads;
        let scale = T::one() / T::from_usize(head_dim).sqrt();
        let att = attend(&mut s.tape, q, k, v, scale)?;
        cost.attention = lap(s);
        let merged = merge_heads(&mut s.tape, att.output, self.heads)?;
        let out = self.proj.forward(s, merged)?;
        cost.projections += lap(s);
        Ok((s.tape.reshape(out, dims)?, att.weights, cost))
    }
}

/// Multiply-accumulate counts of one attention forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttentionCost {
    /// The sequence-reduction linear (zero when `R = 1`).
    pub reduction: u64,
    /// Query, key, value and output projections.
    pub projections: u64,
    /// Scores `Q·Kᵀ` plus the weighted sum over values.
    pub attention: u64,
}

/// Pre-norm Mix-FFN: `fc2(GELU(DWConv3×3(fc1(LN(x))))) + x`.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub norm: LayerNorm,
    pub fc1: Linear,
    pub dwconv: Conv,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new(reg: &mut ParamRegistry, name: &str, channels: usize, expansion: usize) -> Self {
        let hidden = channels * expansion;
        MixFfn {
            norm: LayerNorm::new(reg, &format!("{name}.norm"), channels),
            fc1: Linear::new(reg, &format!("{name}.fc1"), channels, hidden),
            dwconv: Conv::new(reg, &format!("{name}.dwconv"), ConvSpec::depthwise3x3(hidden)),
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, channels),
        }
    }

    /// `x[N, H, W, C]` to `[N, H, W, C]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.norm.forward(s, x)?;
        let y = self.fc1.forward(s, y)?;
        let y = self.dwconv.forward(s, y)?;
        let y = s.tape.gelu(y);
        let y = self.fc2.forward(s, y)?;
        s.tape.add(y, x)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub ffn: MixFfn,
}

impl TransformerBlock {
    pub fn new(reg: &mut ParamRegistry, name: &str, cfg: &StageConfig) -> Self {
        TransformerBlock {
            norm: LayerNorm::new(reg, &format!("{name}.norm"), cfg.channels),
            attn: EfficientSelfAttention::new(reg, &format!("{name}.attn"), cfg),
            ffn: MixFfn::new(reg, &format!("{name}.ffn"), cfg.channels, cfg.mlp_ratio),
        }
    }

    /// `x + attn(LN(x))`, then the Mix-FFN (which carries its own residual).
    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let normed = self.norm.forward(s, x)?;
        let attended = self.attn.forward(s, normed)?;
        let y = s.tape.add(x, attended)?;
        self.ffn.forward(s, y)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: PatchEmbed,
    pub blocks: Vec<TransformerBlock>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Stage>,
    config: ModelConfig,
}

impl Encoder {
    pub fn new(reg: &mut ParamRegistry, config: &ModelConfig) -> Self {
        let mut in_channels = config.in_channels;
        let stages = config
            .stages
            .iter()
            .enumerate()
            .map(|(i, cfg)| {
                let name = format!("encoder.stage{}", i + 1);
                let embed = PatchEmbed::new(reg, &format!("{name}.embed"), i + 1, in_channels, cfg.channels);
                let blocks = (0..cfg.depth)
                    .map(|b| TransformerBlock::new(reg, &format!("{name}.block{}", b + 1), cfg))
                    .collect();
                in_channels = cfg.channels;
                Stage { embed, blocks }
            })
            .collect();
        Encoder { stages, config: config.clone() }
    }

    /// Encodes a batch `[N, H, W, C_in]`. `H` and `W` must be multiples of 32
    /// whose stage maps are tiled by each reduction window; this is checked
    /// before any compute.
    pub fn encode<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var) -> Result<FeaturePyramid> {
        let &[_, h, w, _] = s.tape.dims(images) else {
            return Err(Error::invalid("encode", format!("expected [N, H, W, C], got {}", s.tape.shape(images))));
        };
        self.config.check_input(h, w)?;
        self.encode_any_size(s, images)
    }

    /// Like [`Encoder::encode`] without the multiple-of-32 precondition; any
    /// input for which every convolution and reduction window is valid is
    /// accepted. Used for small-input gradient checks.
    pub fn encode_any_size<T: Scalar>(&self, s: &mut Session<'_, T>, images: Var) -> Result<FeaturePyramid> {
        let mut x = images;
        let mut levels = [images; 4];
        for (i, stage) in self.stages.iter().enumerate() {
            x = stage.embed.forward(s, x)?;
            for block in &stage.blocks {
                x = block.forward(s, x)?;
            }
            levels[i] = x;
        }
        Ok(FeaturePyramid { levels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;
    use crate::testutil::{assert_close, randn};

    fn stage(channels: usize, heads: usize, reduction: usize) -> StageConfig {
        StageConfig { channels, depth: 1, heads, reduction, mlp_ratio: 2 }
    }

    /// Store for `reg` with every tensor filled with scaled Gaussian noise.
    fn random_store<T: Scalar>(reg: &ParamRegistry, seed: u64, amp: f64) -> ParamStore<T> {
        let mut store = ParamStore::initialize(reg, 0, 0.1, 1e-5);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let dims = store.value(id).dims().to_vec();
            *store.value_mut(id) = randn::<T>(&dims, seed * 1000 + k as u64).map(|v| v * T::from_f64(amp));
        }
        store
    }

    fn zero_params<T: Scalar>(store: &mut ParamStore<T>, prefix: &str) {
        let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
        for id in ids {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn rows<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<T>> {
        let c = *t.dims().last().unwrap();
        t.data().chunks(c).map(|r| r.to_vec()).collect()
    }

    fn dense_linear<T: Scalar>(x: &[Vec<T>], w: &Tensor<T>, b: Option<&Tensor<T>>) -> Vec<Vec<T>> {
        let (cin, cout) = (w.dims()[0], w.dims()[1]);
        x.iter()
            .map(|row| {
                (0..cout)
                    .map(|j| {
                        let mut acc = T::zero();
                        for p in 0..cin {
                            acc += row[p] * w.data()[p * cout + j];
                        }
                        b.map_or(acc, |b| acc + b.data()[j])
                    })
                    .collect()
            })
            .collect()
    }

    /// Textbook multi-head attention over the full token sequence.
    fn dense_attention<T: Scalar>(attn: &EfficientSelfAttention, store: &ParamStore<T>, x: &[Vec<T>]) -> Vec<Vec<T>> {
        let v = |id| store.value(id);
        let q = dense_linear(x, v(attn.q.weight), attn.q.bias.map(v));
        let k = dense_linear(x, v(attn.k.weight), attn.k.bias.map(v));
        let val = dense_linear(x, v(attn.v.weight), attn.v.bias.map(v));
        let c = x[0].len();
        let d = c / attn.heads;
        let scale = T::one() / T::from_usize(d).sqrt();
        let mut merged = vec![vec![T::zero(); c]; x.len()];
        for head in 0..attn.heads {
            let cols = head * d..(head + 1) * d;
            for (i, qi) in q.iter().enumerate() {
                let mut scores: Vec<T> = k
                    .iter()
                    .map(|kj| {
                        let mut acc = T::zero();
                        for t in cols.clone() {
                            acc += qi[t] * kj[t];
                        }
                        acc * scale
                    })
                    .collect();
                let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                scores.iter_mut().for_each(|s| *s /= sum);
                for t in cols.clone() {
                    let mut acc = T::zero();
                    for (j, vj) in val.iter().enumerate() {
                        acc += scores[j] * vj[t];
                    }
                    merged[i][t] = acc;
                }
            }
        }
        dense_linear(&merged, v(attn.proj.weight), attn.proj.bias.map(v))
    }

    fn attention_vs_dense<T: Scalar>(seed: u64) -> (Vec<T>, Vec<T>) {
        let mut reg = ParamRegistry::new();
        let attn = EfficientSelfAttention::new(&mut reg, "attn", &stage(16, 2, 1));
        assert!(attn.reduce.is_none());
        let mut store = random_store::<T>(&reg, seed, 0.3);
        let x = randn::<T>(&[1, 8, 8, 16], seed + 99);
        let expected = dense_attention(&attn, &store, &rows(&x));
        let mut s = Session::eval(&mut store);
        let xv = s.input(x);
        let y = attn.forward(&mut s, xv).unwrap();
        (s.tape.value(y).data().to_vec(), expected.concat())
    }

    #[test]
    fn unreduced_attention_is_bitwise_dense_in_f64() {
        for seed in 0..3 {
            let (got, want) = attention_vs_dense::<f64>(seed);
            assert!(got.iter().zip(&want).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn unreduced_attention_matches_dense_in_f32() {
        let (got, want) = attention_vs_dense::<f32>(5);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut reg = ParamRegistry::new();
        let attn = EfficientSelfAttention::new(&mut reg, "attn", &stage(4, 1, 1));
        let mut store = random_store::<f64>(&reg, 3, 0.5);
        let x = randn::<f64>(&[1, 1, 1, 4], 4);
        let xr = rows(&x);
        let v = dense_linear(&xr, store.value(attn.v.weight), attn.v.bias.map(|b| store.value(b)));
        let expected = dense_linear(&v, store.value(attn.proj.weight), attn.proj.bias.map(|b| store.value(b)));
        let mut s = Session::eval(&mut store);
        let xv = s.input(x);
        let (y, w) = attn.forward_with_weights(&mut s, xv).unwrap();
        assert_eq!(s.tape.value(w).data(), &[1.0]);
        assert_close(s.tape.value(y).data(), &expected[0], 1e-12);
    }

    #[test]
    fn reduced_attention_rows_are_distributions() {
        let mut reg = ParamRegistry::new();
        let attn = EfficientSelfAttention::new(&mut reg, "attn", &stage(16, 2, 4));
        let mut store = random_store::<f64>(&reg, 1, 0.5);
        let mut s = Session::eval(&mut store);
        let x = s.input(randn(&[1, 8, 8, 16], 2));
        let (y, w) = attn.forward_with_weights(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 8, 8, 16]);
        assert_eq!(s.tape.dims(w), &[2, 64, 16]);
        for row in s.tape.value(w).data().chunks(16) {
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn attention_cost_scales_inversely_with_reduction() {
        for side in [16usize, 32, 64] {
            let hw = (side * side) as u64;
            let cost = |r: usize| {
                let mut reg = ParamRegistry::new();
                let attn = EfficientSelfAttention::new(&mut reg, "attn", &stage(8, 1, r));
                let mut store = ParamStore::<f32>::initialize(&reg, 0, 0.1, 1e-5);
                let mut s = Session::with_mode(&mut store, false, false);
                let x = s.input(Tensor::zeros([1, side, side, 8]));
                attn.forward_counted(&mut s, x).unwrap().2
            };
            let dense = cost(1);
            assert_eq!(dense.attention, 2 * hw * hw * 8);
            assert_eq!(dense.reduction, 0);
            for r in [2usize, 4, 8, 16] {
                let c = cost(r);
                assert_eq!(c.attention * r as u64, dense.attention, "HW={hw}, R={r}");
                // The reduction linear maps HW/R tokens of width C·R to C.
                assert_eq!(c.reduction, hw / r as u64 * (8 * r as u64) * 8);
            }
        }
    }

    #[test]
    fn sequence_reduction_shapes_and_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[1, 8, 8, 4], 0));
        let folded = fold_windows(&mut tape, x, 2, 2).unwrap();
        assert_eq!(tape.dims(folded), &[1, 16, 16]);
        let big = tape.constant(Tensor::zeros([1, 64, 64, 32]));
        let (r, c) = reduction_window(8);
        let reduced = fold_windows(&mut tape, big, r, c).unwrap();
        assert_eq!(tape.dims(reduced), &[1, 512, 256]);
        assert!(fold_windows(&mut tape, x, 3, 1).is_err());
        // R = 1 is a plain reshape.
        let same = fold_windows(&mut tape, x, 1, 1).unwrap();
        assert_eq!(tape.value(same).data(), tape.value(x).data());

        let mut reg = ParamRegistry::new();
        let sr = SequenceReduction::new(&mut reg, "sr", 4, 4);
        let mut store = ParamStore::<f64>::initialize(&reg, 0, 0.1, 1e-5);
        let mut s = Session::eval(&mut store);
        let x = s.input(randn(&[1, 8, 8, 4], 1));
        let y = sr.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 16, 4]);

        let mut reg = ParamRegistry::new();
        let sr = SequenceReduction::new(&mut reg, "sr", 4, 1);
        let mut store = ParamStore::<f64>::initialize(&reg, 0, 0.1, 1e-5);
        let mut eye = Tensor::zeros([4, 4]);
        (0..4).for_each(|i| eye.data_mut()[i * 5] = 1.0);
        *store.value_mut(sr.proj.weight) = eye;
        let input = randn::<f64>(&[1, 2, 2, 4], 2);
        let mut s = Session::eval(&mut store);
        let x = s.input(input.clone());
        let y = sr.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).data(), input.data());
    }

    #[test]
    fn window_folding_keeps_spatial_neighbours_together() {
        // Token (window row, window col) must hold exactly its 2×2 block.
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = tape.constant(Tensor::from_vec([1, 4, 4, 1], vals).unwrap());
        let y = fold_windows(&mut tape, x, 2, 2).unwrap();
        assert_eq!(&tape.value(y).data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&tape.value(y).data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn mix_ffn_zero_branch_is_identity() {
        let mut reg = ParamRegistry::new();
        let ffn = MixFfn::new(&mut reg, "ffn", 8, 4);
        let mut store = random_store::<f64>(&reg, 2, 0.3);
        zero_params(&mut store, "ffn.fc2");
        let input = randn::<f64>(&[1, 4, 4, 8], 3);
        let mut s = Session::eval(&mut store);
        let x = s.input(input.clone());
        let y = ffn.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).data(), input.data());
    }

    #[test]
    fn mix_ffn_matches_composed_primitives() {
        let mut reg = ParamRegistry::new();
        let ffn = MixFfn::new(&mut reg, "ffn", 16, 2);
        let mut store = random_store::<f64>(&reg, 4, 0.3);
        let input = randn::<f64>(&[1, 8, 8, 16], 5);
        // Same pipeline spelled out op by op on a bare tape.
        let mut t = Tape::new();
        let p = |t: &mut Tape<f64>, id| t.constant(store.value(id).clone());
        let x = t.constant(input.clone());
        let (g, b) = (p(&mut t, ffn.norm.gamma), p(&mut t, ffn.norm.beta));
        let y = t.layernorm(x, g, b).unwrap();
        let (w, b) = (p(&mut t, ffn.fc1.weight), p(&mut t, ffn.fc1.bias.unwrap()));
        let y = t.linear(y, w, Some(b)).unwrap();
        let (w, b) = (p(&mut t, ffn.dwconv.weight), p(&mut t, ffn.dwconv.bias));
        let y = t.depthwise_conv2d(y, w, Some(b), &ConvSpec::depthwise3x3(32)).unwrap();
        let y = t.gelu(y);
        let (w, b) = (p(&mut t, ffn.fc2.weight), p(&mut t, ffn.fc2.bias.unwrap()));
        let y = t.linear(y, w, Some(b)).unwrap();
        let y = t.add(y, x).unwrap();
        let expected = t.value(y).data().to_vec();

        let mut s = Session::eval(&mut store);
        let xv = s.input(input);
        let out = ffn.forward(&mut s, xv).unwrap();
        assert_eq!(s.tape.value(out).data(), expected.as_slice());
    }

    #[test]
    fn block_with_zero_branches_is_identity() {
        let mut reg = ParamRegistry::new();
        let block = TransformerBlock::new(&mut reg, "b", &stage(16, 2, 4));
        let mut store = random_store::<f64>(&reg, 6, 0.3);
        zero_params(&mut store, "b.attn.proj");
        zero_params(&mut store, "b.ffn.fc2");
        let input = randn::<f64>(&[1, 8, 8, 16], 7);
        let mut s = Session::eval(&mut store);
        let x = s.input(input.clone());
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.value(y).data(), input.data());

        let mut s = Session::eval(&mut store);
        let x = s.input(Tensor::zeros([1, 64, 64, 16]));
        let y = block.forward(&mut s, x).unwrap();
        assert_eq!(s.tape.dims(y), &[1, 64, 64, 16]);
    }

    #[test]
    fn patch_embedding_resolutions() {
        let embed = |stage: usize, size: usize, cin: usize| {
            let (k, st, p) = patch_embed_geometry(stage);
            ConvSpec::new(k, st, p, cin, 1).output_size(size).unwrap()
        };
        assert_eq!(embed(1, 256, 3), 64);
        assert_eq!(embed(2, 64, 8), 32);
        assert_eq!(embed(4, 8, 32), 4);
    }

    fn pyramid_dims(config: &ModelConfig, size: usize) -> Vec<Vec<usize>> {
        let mut reg = ParamRegistry::new();
        let enc = Encoder::new(&mut reg, config);
        let mut store = ParamStore::<f32>::initialize(&reg, 0, 0.1, 1e-5);
        let mut s = Session::with_mode(&mut store, false, false);
        let x = s.input(Tensor::zeros([1, size, size, 3]));
        let p = enc.encode(&mut s, x).unwrap();
        p.levels.iter().map(|&l| s.tape.dims(l).to_vec()).collect()
    }

    #[test]
    fn pyramid_shape_law() {
        let cfg = ModelConfig::tiny();
        for size in [64usize, 128, 256] {
            let dims = pyramid_dims(&cfg, size);
            for (i, d) in dims.iter().enumerate() {
                let side = size >> (i + 2);
                assert_eq!(d, &[1, side, side, cfg.stages[i].channels], "H={size}, level {}", i + 1);
            }
        }
    }

    #[test]
    fn encoder_rejects_bad_sizes_before_compute() {
        let cfg = ModelConfig::tiny();
        let mut reg = ParamRegistry::new();
        let enc = Encoder::new(&mut reg, &cfg);
        let mut store = ParamStore::<f32>::initialize(&reg, 0, 0.1, 1e-5);
        let mut s = Session::eval(&mut store);
        let x = s.input(Tensor::zeros([1, 48, 64, 3]));
        let before = s.tape.len();
        assert!(enc.encode(&mut s, x).is_err());
        assert_eq!(s.tape.len(), before);
    }

    #[test]
    fn identical_images_give_identical_pyramids() {
        let cfg = ModelConfig::tiny();
        let mut reg = ParamRegistry::new();
        let enc = Encoder::new(&mut reg, &cfg);
        let mut store = ParamStore::<f64>::initialize(&reg, 1, 0.1, 1e-5);
        let img = randn::<f64>(&[1, 64, 64, 3], 8);
        let mut s = Session::eval(&mut store);
        let (a, b) = (s.input(img.clone()), s.input(img));
        let pa = enc.encode(&mut s, a).unwrap();
        let pb = enc.encode(&mut s, b).unwrap();
        for (x, y) in pa.levels.iter().zip(&pb.levels) {
            assert!(s.tape.value(*x).bit_eq(s.tape.value(*y)));
        }
    }
}
