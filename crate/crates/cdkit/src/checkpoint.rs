//! Binary checkpoint: magic, a length-prefixed TOML manifest, then every
//! parameter and batch-norm running statistic as little-endian floats in
//! manifest order, optionally followed by the optimizer moments (first then
//! second, per parameter). Saving and reloading is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use cdkit_core::config::ModelConfig;
use cdkit_core::model::ChangeFormer;
use cdkit_core::nn::BatchNormState;
use cdkit_core::optim::AdamW;
use cdkit_core::{DType, ParamStore, Scalar, Tensor};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"CDKITCK\x01";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Index of the last epoch that ran.
    pub epoch: usize,
    /// Number of epochs finished; resuming starts at this epoch index.
    #[serde(default)]
    pub completed_epochs: usize,
    pub step: usize,
    /// Selection metric at save time, if one was computed.
    pub f1: Option<f64>,
    pub note: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    meta: CheckpointMeta,
    model: ModelConfig,
    params: Vec<TensorEntry>,
    norms: Vec<NormEntry>,
    /// AdamW step counter; present when moments follow the weights.
    optimizer_step: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NormEntry {
    name: String,
    channels: usize,
    momentum: f64,
    eps: f64,
}

/// Weights in the precision they were trained in.
pub enum AnyStore {
    F32(ParamStore<f32>),
    F64(ParamStore<f64>),
}

pub enum AnyOptimizer {
    F32(AdamW<f32>),
    F64(AdamW<f64>),
}

pub struct Checkpoint {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub store: AnyStore,
    pub optimizer: Option<AnyOptimizer>,
}

impl Checkpoint {
    pub fn dtype(&self) -> DType {
        match self.store {
            AnyStore::F32(_) => DType::F32,
            AnyStore::F64(_) => DType::F64,
        }
    }

    /// Fails unless `expected` builds exactly the stored parameter set,
    /// naming the first parameter that differs.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let model = ChangeFormer::new(expected.clone())?;
        let reg = model.registry();
        let stored: Vec<(String, Vec<usize>)> = match &self.store {
            AnyStore::F32(s) => s.ids().map(|id| (s.name(id).to_string(), s.value(id).dims().to_vec())).collect(),
            AnyStore::F64(s) => s.ids().map(|id| (s.name(id).to_string(), s.value(id).dims().to_vec())).collect(),
        };
        for (i, spec) in reg.params().iter().enumerate() {
            match stored.get(i) {
                Some((name, shape)) if *name == spec.name && shape.as_slice() == spec.shape.dims() => {}
                Some((name, shape)) => bail!(
                    "checkpoint does not match the model config at parameter {}: expected shape {}, checkpoint has {name} {shape:?}",
                    spec.name,
                    spec.shape
                ),
                None => bail!("checkpoint does not match the model config: parameter {} is missing", spec.name),
            }
        }
        if let Some((name, _)) = stored.get(reg.params().len()) {
            bail!("checkpoint does not match the model config: unexpected parameter {name}");
        }
        Ok(())
    }
}

pub fn encode<T: Scalar>(
    model: &ModelConfig,
    store: &ParamStore<T>,
    optimizer: Option<&AdamW<T>>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let manifest = Manifest {
        dtype: T::DTYPE.name().to_string(),
        meta: meta.clone(),
        model: model.clone(),
        params: store
            .ids()
            .map(|id| TensorEntry { name: store.name(id).to_string(), shape: store.value(id).dims().to_vec() })
            .collect(),
        norms: store
            .norm_names()
            .iter()
            .zip(store.norms())
            .map(|(name, s)| NormEntry {
                name: name.clone(),
                channels: s.running_mean.len(),
                momentum: s.momentum.as_f64(),
                eps: s.eps.as_f64(),
            })
            .collect(),
        optimizer_step: optimizer.map(|o| o.step),
    };
    let text = toml::to_string(&manifest).context("serializing checkpoint manifest")?;
    let mut out = Vec::with_capacity(16 + text.len() + store.scalar_count() * T::DTYPE.size_in_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    for id in store.ids() {
        store.value(id).data().iter().for_each(|v| v.write_le(&mut out));
    }
    for s in store.norms() {
        s.running_mean.iter().chain(&s.running_var).for_each(|v| v.write_le(&mut out));
    }
    if let Some(o) = optimizer {
        ensure!(o.first_moment.len() == store.len(), "optimizer state does not match the parameter store");
        for m in o.first_moment.iter().chain(&o.second_moment) {
            m.iter().for_each(|v| v.write_le(&mut out));
        }
    }
    Ok(out)
}

pub fn save<T: Scalar>(
    path: &Path,
    model: &ModelConfig,
    store: &ParamStore<T>,
    optimizer: Option<&AdamW<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = encode(model, store, optimizer, meta)?;
    let mut f = fs::File::create(path).with_context(|| format!("creating checkpoint {}", path.display()))?;
    f.write_all(&bytes).with_context(|| format!("writing checkpoint {}", path.display()))?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        ensure!(self.pos + n <= self.bytes.len(), "checkpoint is truncated");
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn floats<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let w = T::DTYPE.size_in_bytes();
        Ok(self.take(n * w)?.chunks_exact(w).map(T::read_le).collect())
    }
}

fn decode_store<T: Scalar>(manifest: &Manifest, reader: &mut Reader<'_>) -> Result<(ParamStore<T>, Option<AdamW<T>>)> {
    let mut params = Vec::with_capacity(manifest.params.len());
    for e in &manifest.params {
        let n = e.shape.iter().product();
        params.push((e.name.clone(), Tensor::from_vec(e.shape.as_slice(), reader.floats::<T>(n)?)?));
    }
    let mut norms = Vec::with_capacity(manifest.norms.len());
    for e in &manifest.norms {
        let state = BatchNormState {
            running_mean: reader.floats(e.channels)?,
            running_var: reader.floats(e.channels)?,
            momentum: T::from_f64(e.momentum),
            eps: T::from_f64(e.eps),
        };
        norms.push((e.name.clone(), state));
    }
    let optimizer = match manifest.optimizer_step {
        Some(step) => {
            let mut moments = Vec::with_capacity(2 * manifest.params.len());
            for _ in 0..2 {
                for e in &manifest.params {
                    moments.push(reader.floats::<T>(e.shape.iter().product())?);
                }
            }
            let second_moment = moments.split_off(manifest.params.len());
            Some(AdamW { first_moment: moments, second_moment, step })
        }
        None => None,
    };
    ensure!(reader.pos == reader.bytes.len(), "checkpoint has {} trailing bytes", reader.bytes.len() - reader.pos);
    let model = ChangeFormer::new(manifest.model.clone())?;
    Ok((ParamStore::from_tensors(model.registry(), params, norms)?, optimizer))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(MAGIC.len()).ok() == Some(MAGIC.as_slice()), "not a cdkit checkpoint (bad magic)");
    let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
    let text = std::str::from_utf8(r.take(len)?).context("checkpoint manifest is not UTF-8")?;
    let manifest: Manifest = toml::from_str(text).context("parsing checkpoint manifest")?;
    let (store, optimizer) = match DType::parse(&manifest.dtype) {
        Some(DType::F32) => {
            let (s, o) = decode_store(&manifest, &mut r)?;
            (AnyStore::F32(s), o.map(AnyOptimizer::F32))
        }
        Some(DType::F64) => {
            let (s, o) = decode_store(&manifest, &mut r)?;
            (AnyStore::F64(s), o.map(AnyOptimizer::F64))
        }
        None => bail!("checkpoint has unknown dtype {}", manifest.dtype),
    };
    Ok(Checkpoint { model: manifest.model, meta: manifest.meta, store, optimizer })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let model = ChangeFormer::new(cfg.clone()).unwrap();
        let mut store = model.init_weights::<f64>(3);
        store.value_mut(store.ids().next().unwrap()).data_mut()[0] = -0.0;
        let mut opt = AdamW::new(&store);
        opt.step = 7;
        opt.first_moment[1][0] = 0.25;
        opt.second_moment[2][3] = f64::MIN_POSITIVE;
        let meta = CheckpointMeta { epoch: 2, completed_epochs: 3, step: 5, f1: Some(0.5), note: "last".into() };
        let bytes = encode(&cfg, &store, Some(&opt), &meta).unwrap();
        let ck = decode(&bytes).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(ck.model, cfg);
        let Some(AnyOptimizer::F64(loaded_opt)) = ck.optimizer else { panic!("optimizer state lost") };
        assert_eq!(loaded_opt, opt);
        let AnyStore::F64(loaded) = ck.store else { panic!("dtype changed") };
        assert!(loaded.bit_eq(&store));
        assert_eq!(encode(&cfg, &loaded, Some(&loaded_opt), &meta).unwrap(), bytes);
    }

    #[test]
    fn weights_only_checkpoint_has_no_optimizer() {
        let cfg = ModelConfig::tiny();
        let store = ChangeFormer::new(cfg.clone()).unwrap().init_weights::<f32>(1);
        let ck = decode(&encode(&cfg, &store, None, &CheckpointMeta::default()).unwrap()).unwrap();
        assert!(ck.optimizer.is_none());
        assert_eq!(ck.dtype(), DType::F32);
    }

    #[test]
    fn mismatched_config_names_first_parameter() {
        let cfg = ModelConfig::tiny();
        let store = ChangeFormer::new(cfg.clone()).unwrap().init_weights::<f32>(0);
        let ck = decode(&encode(&cfg, &store, None, &CheckpointMeta::default()).unwrap()).unwrap();
        ck.check_compatible(&cfg).unwrap();
        let mut wider = cfg.clone();
        wider.stages[0].channels = 12;
        let msg = format!("{:#}", ck.check_compatible(&wider).unwrap_err());
        assert!(msg.contains("encoder.stage1.embed.conv.weight"), "{msg}");
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode(b"nope").is_err());
        let cfg = ModelConfig::tiny();
        let store = ChangeFormer::new(cfg.clone()).unwrap().init_weights::<f32>(0);
        let bytes = encode(&cfg, &store, None, &CheckpointMeta::default()).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
    }
}
