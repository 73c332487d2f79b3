//! Finite-difference verification of reverse-mode gradients.
//!
//! Each check compares analytic gradients with central differences
//! `(f(x + ε) − f(x − ε)) / 2ε` coordinate by coordinate, scoring
//! `|a − n| / max(|a|, |n|, 1e-8)`. Non-scalar outputs are reduced with a
//! fixed random projection so every output element contributes. Coordinates
//! whose two probes land on different sides of a ReLU kink are skipped and
//! counted, since no derivative exists across the kink.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::config::{ModelConfig, StageConfig};
use crate::decoder::MlpDecoder;
use crate::encoder::{EfficientSelfAttention, FeaturePyramid, TransformerBlock};
use crate::error::Result;
use crate::model::ChangeFormer;
use crate::nn::{BatchNormState, ConvSpec};
use crate::params::{ParamRegistry, ParamStore, Session};
use crate::rng::{permutation, rng_for, standard_normal};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Probe at most this many coordinates per tensor (chosen at random).
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Test fixture: negate the backward pass of ops with this name.
    pub sign_flip: Option<&'static str>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions { epsilon: DEFAULT_EPSILON, tolerance: DEFAULT_TOLERANCE, max_coords: None, seed: 0, sign_flip: None }
    }
}

/// Location of one probed scalar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coordinate {
    pub tensor: String,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckRow {
    pub name: String,
    pub max_rel_error: f64,
    /// Analytic and numeric gradient at `worst`.
    pub worst_pair: (f64, f64),
    pub worst: Option<Coordinate>,
    /// First coordinate whose analytic or numeric gradient was not finite.
    pub non_finite: Option<Coordinate>,
    pub checked: usize,
    pub skipped_kinks: usize,
    /// Coordinates over tolerance, and the largest `max(|a|, |n|)` among them.
    pub over_tolerance: usize,
    pub largest_failing_gradient: f64,
    pub tolerance: f64,
}

impl GradcheckRow {
    pub fn passed(&self) -> bool {
        self.non_finite.is_none() && self.max_rel_error <= self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_tensor(dims: &[usize], seed: u64, tag: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[0x6c, tag]);
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| standard_normal(&mut rng)).collect()).expect("nonzero dims")
}

/// Scalar loss from `out`: itself when scalar, else `Σ out ⊙ P` for a
/// projection `P` fixed by the seed and output shape.
fn project(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let dims = tape.dims(out).to_vec();
    if dims.iter().product::<usize>() == 1 {
        return Ok(out);
    }
    let p = tape.constant(random_tensor(&dims, seed, 0x9e0));
    let weighted = tape.mul(out, p)?;
    Ok(tape.sum(weighted))
}

fn pick_coords(numel: usize, opts: &GradcheckOptions, tensor: usize) -> Vec<usize> {
    match opts.max_coords {
        Some(k) if k < numel => {
            let mut idx = permutation(&mut rng_for(opts.seed, &[0xc0, tensor as u64]), numel);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Shared comparison loop. `probe(t, i, delta)` evaluates the loss with
/// coordinate `i` of tensor `t` shifted by `delta` and returns it with the
/// kink fingerprint of that pass.
fn compare(
    name: &str,
    tensors: &[(String, Vec<f64>)],
    opts: &GradcheckOptions,
    mut probe: impl FnMut(usize, usize, f64) -> Result<(f64, u64)>,
) -> Result<GradcheckRow> {
    let mut row = GradcheckRow {
        name: name.to_string(),
        max_rel_error: 0.0,
        worst_pair: (0.0, 0.0),
        worst: None,
        non_finite: None,
        checked: 0,
        skipped_kinks: 0,
        over_tolerance: 0,
        largest_failing_gradient: 0.0,
        tolerance: opts.tolerance,
    };
    for (t, (tname, analytic)) in tensors.iter().enumerate() {
        for i in pick_coords(analytic.len(), opts, t) {
            let (plus, kp) = probe(t, i, opts.epsilon)?;
            let (minus, km) = probe(t, i, -opts.epsilon)?;
            let coord = || Coordinate { tensor: tname.clone(), index: i };
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            if !numeric.is_finite() || !analytic[i].is_finite() {
                row.non_finite.get_or_insert_with(coord);
                row.max_rel_error = f64::NAN;
                continue;
            }
            if kp != km {
                row.skipped_kinks += 1;
                continue;
            }
            row.checked += 1;
            let err = relative_error(analytic[i], numeric);
            if err > opts.tolerance {
                row.over_tolerance += 1;
                row.largest_failing_gradient = row.largest_failing_gradient.max(analytic[i].abs().max(numeric.abs()));
            }
            if !row.max_rel_error.is_nan() && (row.worst.is_none() || err > row.max_rel_error) {
                row.max_rel_error = err;
                row.worst_pair = (analytic[i], numeric);
                row.worst = Some(coord());
            }
        }
    }
    Ok(row)
}

/// Checks `f` over free-standing input tensors.
pub fn check_tape<F>(name: &str, inputs: &[Tensor<f64>], opts: &GradcheckOptions, f: F) -> Result<GradcheckRow>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(op) = opts.sign_flip {
        tape.inject_sign_flip(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out, opts.seed)?;
    tape.backward(loss)?;
    let analytic: Vec<(String, Vec<f64>)> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let g = tape.grad(v).map(Tensor::into_data).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
            (format!("input{i}"), g)
        })
        .collect();

    let mut values: Vec<Tensor<f64>> = inputs.to_vec();
    compare(name, &analytic, opts, |t, i, delta| {
        let orig = values[t].data()[i];
        values[t].data_mut()[i] = orig + delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|x| tape.constant(x.clone())).collect();
        let result = f(&mut tape, &vars).and_then(|out| project(&mut tape, out, opts.seed));
        values[t].data_mut()[i] = orig;
        let loss = result?;
        Ok((tape.value(loss).data()[0], tape.kink_fingerprint()))
    })
}

/// Single-input form: the maximum relative error of `f` at `x`.
pub fn gradcheck<F>(f: F, x: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradcheckRow>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let opts = GradcheckOptions { epsilon, tolerance, ..Default::default() };
    check_tape("f", core::slice::from_ref(x), &opts, |t, v| f(t, v[0]))
}

/// Checks a network built from `store` with respect to every parameter.
/// Batch norm runs in training mode.
pub fn check_session<F>(name: &str, store: &mut ParamStore<f64>, opts: &GradcheckOptions, build: F) -> Result<GradcheckRow>
where
    F: Fn(&mut Session<'_, f64>) -> Result<Var>,
{
    store.zero_grad();
    {
        let mut s = Session::train(store);
        if let Some(op) = opts.sign_flip {
            s.tape.inject_sign_flip(op);
        }
        let out = build(&mut s)?;
        let loss = project(&mut s.tape, out, opts.seed)?;
        s.backward(loss)?;
    }
    let ids: Vec<_> = store.ids().collect();
    let analytic: Vec<(String, Vec<f64>)> =
        ids.iter().map(|&id| (store.name(id).to_string(), store.grad(id).data().to_vec())).collect();
    compare(name, &analytic, opts, |t, i, delta| {
        let id = ids[t];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + delta;
        let result = {
            let mut s = Session::with_mode(store, true, false);
            build(&mut s)
                .and_then(|out| project(&mut s.tape, out, opts.seed))
                .map(|loss| (s.tape.value(loss).data()[0], s.tape.kink_fingerprint()))
        };
        store.value_mut(id).data_mut()[i] = orig;
        result
    })
}

/// Replaces the small initial weights with unit-scale random values so that
/// every parameter has a gradient well above round-off.
pub fn randomize_for_check(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let value = store.value(id);
        let dims = value.dims().to_vec();
        let mut rng = rng_for(seed, &[0x5ca1e, k as u64]);
        let data: Vec<f64> = if dims.len() >= 2 {
            let fan_in = value.numel() / dims[dims.len() - 1];
            let std = 1.0 / libm::sqrt(fan_in as f64);
            (0..value.numel()).map(|_| std * standard_normal(&mut rng)).collect()
        } else {
            value.data().iter().map(|&v| v + 0.2 * standard_normal(&mut rng)).collect()
        };
        *store.value_mut(id) = Tensor::from_vec(dims.as_slice(), data).expect("same shape");
    }
}

/// `preset` with stage-1 reduction 4 and no reduction afterwards, so that
/// an 8×8 input (stage maps 2×2 down to 1×1) is valid everywhere.
pub fn small_input_config(preset: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(preset)?;
    for (stage, r) in cfg.stages.iter_mut().zip([4, 1, 1, 1]) {
        stage.reduction = r;
    }
    Ok(cfg)
}

fn op_rows(opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    let s = opts.seed;
    let r = |dims: &[usize], tag: u64| random_tensor(dims, s, tag);
    let mut rows = Vec::new();
    let mut push = |row: Result<GradcheckRow>| -> Result<()> {
        rows.push(row?);
        Ok(())
    };

    push(check_tape("add", &[r(&[2, 3], 1), r(&[2, 3], 2)], opts, |t, v| t.add(v[0], v[1])))?;
    push(check_tape("sub", &[r(&[2, 3], 3), r(&[2, 3], 4)], opts, |t, v| t.sub(v[0], v[1])))?;
    push(check_tape("mul", &[r(&[2, 3], 5), r(&[2, 3], 6)], opts, |t, v| t.mul(v[0], v[1])))?;
    push(check_tape("scale", &[r(&[4], 7)], opts, |t, v| Ok(t.scale(v[0], -1.7))))?;
    push(check_tape("sum", &[r(&[2, 2, 3], 8)], opts, |t, v| Ok(t.sum(v[0]))))?;
    push(check_tape("mean", &[r(&[3, 5], 9)], opts, |t, v| Ok(t.mean(v[0]))))?;
    push(check_tape("matmul", &[r(&[2, 3, 4], 10), r(&[4, 5], 11)], opts, |t, v| t.matmul(v[0], v[1])))?;
    push(check_tape("matmul_batched", &[r(&[2, 3, 4], 12), r(&[2, 4, 5], 13)], opts, |t, v| t.matmul(v[0], v[1])))?;
    push(check_tape("matmul_nt", &[r(&[2, 3, 4], 14), r(&[2, 5, 4], 15)], opts, |t, v| t.matmul_nt(v[0], v[1])))?;
    push(check_tape("reshape", &[r(&[2, 6], 16)], opts, |t, v| t.reshape(v[0], [3, 4])))?;
    push(check_tape("permute", &[r(&[2, 3, 4], 17)], opts, |t, v| t.permute(v[0], &[2, 0, 1])))?;
    push(check_tape("concat", &[r(&[2, 3], 18), r(&[2, 2], 19)], opts, |t, v| t.concat(&[v[0], v[1]], 1)))?;
    push(check_tape("narrow", &[r(&[3, 5], 20)], opts, |t, v| t.narrow(v[0], 1, 1, 3)))?;
    push(check_tape("linear", &[r(&[2, 3, 4], 21), r(&[4, 5], 22), r(&[5], 23)], opts, |t, v| {
        t.linear(v[0], v[1], Some(v[2]))
    }))?;
    for (label, k, st, p, size) in [("conv2d_k3s1p1", 3, 1, 1, 5), ("conv2d_k3s2p1", 3, 2, 1, 6), ("conv2d_k7s4p3", 7, 4, 3, 8)] {
        let spec = ConvSpec::new(k, st, p, 3, 2);
        push(check_tape(label, &[r(&[2, size, size, 3], 24), r(&[k, k, 3, 2], 25), r(&[2], 26)], opts, |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), &spec)
        }))?;
    }
    let dw = ConvSpec::depthwise3x3(3);
    push(check_tape("depthwise_conv2d", &[r(&[2, 4, 5, 3], 27), r(&[3, 3, 3], 28), r(&[3], 29)], opts, |t, v| {
        t.conv2d(v[0], v[1], Some(v[2]), &dw)
    }))?;
    let up = ConvSpec::transposed(3, 4, 0, 1, 3, 2);
    push(check_tape("conv_transpose2d", &[r(&[1, 3, 2, 3], 30), r(&[3, 3, 2, 3], 31), r(&[2], 32)], opts, |t, v| {
        t.conv_transpose2d(v[0], v[1], Some(v[2]), &up)
    }))?;
    let bn_inputs = [r(&[2, 3, 3, 4], 33), r(&[4], 34), r(&[4], 35)];
    push(check_tape("batchnorm2d", &bn_inputs, opts, |t, v| {
        t.batchnorm2d(v[0], v[1], v[2], &mut BatchNormState::new(4), true)
    }))?;
    let frozen = BatchNormState { running_mean: vec![0.3, -0.2, 0.1, 0.0], running_var: vec![0.5, 1.5, 2.0, 0.8], ..BatchNormState::new(4) };
    push(check_tape("batchnorm2d_eval", &bn_inputs, opts, |t, v| {
        t.batchnorm2d(v[0], v[1], v[2], &mut frozen.clone(), false)
    }))?;
    push(check_tape("layernorm", &[r(&[2, 3, 6], 36), r(&[6], 37), r(&[6], 38)], opts, |t, v| t.layernorm(v[0], v[1], v[2])))?;
    push(check_tape("gelu", &[r(&[3, 4], 39)], opts, |t, v| Ok(t.gelu(v[0]))))?;
    push(check_tape("relu", &[r(&[3, 4], 40)], opts, |t, v| Ok(t.relu(v[0]))))?;
    push(check_tape("softmax", &[r(&[2, 3, 5], 41)], opts, |t, v| t.softmax(v[0])))?;
    push(check_tape("bilinear_upsample", &[r(&[1, 3, 4, 2], 42)], opts, |t, v| t.bilinear_upsample(v[0], 7, 9)))?;
    let labels: Vec<u8> = (0..18).map(|i| (i % 3 == 0) as u8).collect();
    push(check_tape("cross_entropy", &[r(&[2, 3, 3, 2], 43)], opts, |t, v| t.cross_entropy(v[0], &labels)))?;
    Ok(rows)
}

fn module_rows(opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    let s = opts.seed;
    let mut rows = Vec::new();

    for (label, reduction) in [("attention_r1", 1), ("attention_r4", 4)] {
        let cfg = StageConfig { channels: 8, depth: 1, heads: 2, reduction, mlp_ratio: 4 };
        let mut reg = ParamRegistry::new();
        let attn = EfficientSelfAttention::new(&mut reg, "attn", &cfg);
        let mut store = ParamStore::initialize(&reg, s, 0.1, 1e-5);
        randomize_for_check(&mut store, s);
        let x = random_tensor(&[1, 4, 4, 8], s, 50);
        rows.push(check_session(label, &mut store, opts, |sess| {
            let x = sess.input(x.clone());
            attn.forward(sess, x)
        })?);
    }

    let cfg = StageConfig { channels: 8, depth: 1, heads: 2, reduction: 4, mlp_ratio: 4 };
    let mut reg = ParamRegistry::new();
    let block = TransformerBlock::new(&mut reg, "block", &cfg);
    let mut store = ParamStore::initialize(&reg, s, 0.1, 1e-5);
    randomize_for_check(&mut store, s);
    let x = random_tensor(&[1, 4, 4, 8], s, 51);
    rows.push(check_session("transformer_block", &mut store, opts, |sess| {
        let x = sess.input(x.clone());
        block.forward(sess, x)
    })?);

    // Decoder over random pyramids shaped like an 8×8 tiny-model input.
    let mcfg = small_input_config("tiny")?;
    let mut reg = ParamRegistry::new();
    let decoder = MlpDecoder::new(&mut reg, &mcfg);
    let mut store = ParamStore::initialize(&reg, s, 0.1, 1e-5);
    randomize_for_check(&mut store, s);
    let level_dims = [[2, 2, 2, 8], [2, 1, 1, 16], [2, 1, 1, 32], [2, 1, 1, 64]];
    let pre: Vec<Tensor<f64>> = level_dims.iter().enumerate().map(|(i, d)| random_tensor(d, s, 60 + i as u64)).collect();
    let post: Vec<Tensor<f64>> = level_dims.iter().enumerate().map(|(i, d)| random_tensor(d, s, 70 + i as u64)).collect();
    rows.push(check_session("decoder", &mut store, opts, |sess| {
        let a = FeaturePyramid { levels: core::array::from_fn(|i| sess.input(pre[i].clone())) };
        let b = FeaturePyramid { levels: core::array::from_fn(|i| sess.input(post[i].clone())) };
        decoder.decode(sess, &a, &b)
    })?);
    Ok(rows)
}

/// End-to-end row: full model, both branches, all parameters.
pub fn model_row(name: &str, config: ModelConfig, size: usize, opts: &GradcheckOptions) -> Result<GradcheckRow> {
    let model = ChangeFormer::new(config)?;
    let mut store = model.init_weights::<f64>(opts.seed);
    randomize_for_check(&mut store, opts.seed);
    let pre = random_tensor(&[2, size, size, 3], opts.seed, 80);
    let post = random_tensor(&[2, size, size, 3], opts.seed, 81);
    let labels: Vec<u8> = (0..2 * size * size).map(|i| (i / size + i % size).is_multiple_of(3) as u8).collect();
    check_session(name, &mut store, opts, |sess| {
        let (a, b) = (sess.input(pre.clone()), sess.input(post.clone()));
        let logits = model.forward_any_size(sess, a, b)?;
        sess.tape.cross_entropy(logits, &labels)
    })
}

/// Every primitive op, the composite modules, and the end-to-end model
/// built from `preset` on an 8×8 input. Module and model rows probe a
/// random subset of coordinates per tensor.
pub fn suite_for_preset(preset: &str, opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    let model = small_input_config(preset)?;
    let mut rows = op_rows(opts)?;
    let sub = GradcheckOptions { max_coords: Some(opts.max_coords.unwrap_or(6)), ..opts.clone() };
    rows.extend(module_rows(&sub)?);
    rows.push(model_row(&format!("model_{preset}_8x8"), model, 8, &sub)?);
    Ok(rows)
}

/// [`suite_for_preset`] for the tiny preset.
pub fn suite(opts: &GradcheckOptions) -> Result<Vec<GradcheckRow>> {
    suite_for_preset("tiny", opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_passes_tightly() {
        let x = Tensor::from_vec([4], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let row = gradcheck(|t, v| { let y = t.mul(v, v)?; Ok(t.sum(y)) }, &x, 1e-5, 1e-6).unwrap();
        assert!(row.max_rel_error <= 1e-6, "{row:?}");
    }

    #[test]
    fn matmul_sum_passes_tightly() {
        let x = random_tensor(&[3, 4], 1, 1);
        let w = random_tensor(&[4, 2], 1, 2);
        let row = gradcheck(move |t, v| { let wv = t.constant(w.clone()); let y = t.matmul(v, wv)?; Ok(t.sum(y)) }, &x, 1e-5, 1e-6).unwrap();
        assert!(row.passed(), "{row:?}");
    }

    #[test]
    fn constant_function_scores_zero() {
        let x = random_tensor(&[3], 2, 0);
        let row = gradcheck(|t, _| Ok(t.constant(Tensor::scalar(4.0))), &x, 1e-5, 1e-4).unwrap();
        assert_eq!(row.max_rel_error, 0.0);
    }

    #[test]
    fn nan_is_reported_with_its_coordinate() {
        let x = Tensor::from_vec([3], vec![1.0, f64::NAN, 2.0]).unwrap();
        let row = gradcheck(|t, v| Ok(t.sum(v)), &x, 1e-5, 1e-4).unwrap();
        assert!(!row.passed());
        assert_eq!(row.non_finite, Some(Coordinate { tensor: "input0".into(), index: 0 }));
    }

    #[test]
    fn sign_flip_is_caught() {
        let opts = GradcheckOptions { sign_flip: Some("conv2d"), ..Default::default() };
        let rows = op_rows(&opts).unwrap();
        let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
        assert!(!failed.is_empty() && failed.iter().all(|n| n.starts_with("conv2d")), "{failed:?}");
    }
}
