//! Mini-batch training and pooled evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::data::{augment, stack_images, BiTemporalSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::model::{argmax_mask, ChangeFormer};
use crate::optim::{lr_at, AdamW};
use crate::params::{ParamStore, Session};
use crate::rng::{permutation, rng_for};
use crate::tensor::{Scalar, Tensor};

/// Indexed access to samples, so that sources may load lazily.
pub trait SampleSource {
    fn len(&self) -> usize;

    fn sample(&self, index: usize) -> Result<BiTemporalSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [BiTemporalSample] {
    fn len(&self) -> usize {
        <[BiTemporalSample]>::len(self)
    }

    fn sample(&self, index: usize) -> Result<BiTemporalSample> {
        self.get(index).cloned().ok_or_else(|| Error::invalid("sample", format!("index {index} out of range")))
    }
}

impl SampleSource for Vec<BiTemporalSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn sample(&self, index: usize) -> Result<BiTemporalSample> {
        self.as_slice().sample(index)
    }
}

/// Input tensors and flattened labels for one batch.
pub struct Batch<T> {
    pub pre: Tensor<T>,
    pub post: Tensor<T>,
    pub labels: Vec<u8>,
}

pub fn collate<T: Scalar>(samples: &[BiTemporalSample]) -> Result<Batch<T>> {
    Ok(Batch {
        pre: stack_images(samples.iter().map(|s| &s.pre))?,
        post: stack_images(samples.iter().map(|s| &s.post))?,
        labels: samples.iter().flat_map(|s| s.label.data.iter().copied()).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: Vec<StepRecord>,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Owns the weights and optimizer state for one run.
pub struct Trainer<'m, T> {
    pub model: &'m ChangeFormer,
    pub store: ParamStore<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    step: usize,
    total_steps: usize,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    /// `train_len` fixes the schedule length: `epochs · ⌈train_len / batch⌉` steps.
    pub fn new(model: &'m ChangeFormer, store: ParamStore<T>, config: TrainConfig, train_len: usize) -> Result<Self> {
        config.validate()?;
        let total_steps = config.epochs * steps_per_epoch(train_len, config.batch_size);
        let optimizer = AdamW::new(&store);
        Ok(Trainer { model, store, optimizer, config, step: 0, total_steps })
    }

    /// Continues a run from saved weights and optimizer state. `step` is the
    /// number of optimizer steps already taken.
    pub fn resume(
        model: &'m ChangeFormer,
        store: ParamStore<T>,
        optimizer: AdamW<T>,
        config: TrainConfig,
        train_len: usize,
        step: usize,
    ) -> Result<Self> {
        let mut t = Self::new(model, store, config, train_len)?;
        if step > t.total_steps {
            return Err(Error::Config(format!("resume step {step} is past the schedule end {}", t.total_steps)));
        }
        let sizes_match = optimizer.first_moment.len() == t.store.len()
            && optimizer.second_moment.len() == t.store.len()
            && t.store.ids().zip(&optimizer.first_moment).all(|(id, m)| m.len() == t.store.value(id).numel());
        if !sizes_match {
            return Err(Error::Config("optimizer state does not match the parameters".into()));
        }
        t.optimizer = optimizer;
        t.step = step;
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    /// One pass in an order shuffled by `(seed, epoch)`. Every sample gets its
    /// own augmentation stream derived from `(seed, epoch, index)`.
    pub fn train_epoch(&mut self, data: &(impl SampleSource + ?Sized), epoch: usize) -> Result<EpochSummary> {
        if data.is_empty() {
            return Err(Error::invalid("train_epoch", "training set is empty"));
        }
        let seed = self.config.seed;
        let order = permutation(&mut rng_for(seed, &[0x0e90c, epoch as u64]), data.len());
        let mut steps = Vec::new();
        for (batch, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let samples = chunk
                .iter()
                .map(|&i| {
                    let s = data.sample(i)?;
                    Ok(augment(&s, &self.config.augment, &mut rng_for(seed, &[0xa06, epoch as u64, i as u64])))
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = lr_at(self.step, self.total_steps.max(self.step), self.config.initial_lr)?;
            let loss = self.train_step(&collate(&samples)?, lr).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at epoch {epoch}, step {} (batch {batch})", self.step)),
                other => other,
            })?;
            steps.push(StepRecord { epoch, step: self.step, lr, loss });
            self.step += 1;
        }
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len() as f64;
        Ok(EpochSummary { epoch, mean_loss, steps })
    }

    /// Forward, backward and one AdamW update. Returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch<T>, lr: f64) -> Result<f64> {
        self.store.zero_grad();
        let mut s = Session::train(&mut self.store);
        let (pre, post) = (s.input(batch.pre.clone()), s.input(batch.post.clone()));
        let logits = self.model.forward(&mut s, pre, post)?;
        let loss = s.tape.cross_entropy(logits, &batch.labels)?;
        let value = s.tape.value(loss).data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        s.backward(loss)?;
        self.optimizer.step(&mut self.store, lr, &self.config)?;
        Ok(value)
    }
}

/// Eval-mode predictions for `data`, pooled into one confusion matrix.
pub fn evaluate<T: Scalar>(
    model: &ChangeFormer,
    store: &mut ParamStore<T>,
    data: &(impl SampleSource + ?Sized),
    batch_size: usize,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::default();
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
        let batch = collate::<T>(&samples)?;
        let logits = model.predict(store, batch.pre, batch.post)?;
        cm.accumulate(&argmax_mask(&logits), &batch.labels)?;
    }
    Ok(cm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::synth_generate;

    fn data(n: usize) -> Vec<BiTemporalSample> {
        synth_generate(n, 64, 3).unwrap()
    }

    fn config(batch_size: usize) -> TrainConfig {
        TrainConfig { epochs: 2, batch_size, initial_lr: 1e-3, ..TrainConfig::default() }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_alone() {
        let model = ChangeFormer::new(ModelConfig::tiny()).unwrap();
        let init = model.init_weights::<f64>(0);
        let cfg = TrainConfig { initial_lr: 0.0, epochs: 1, ..TrainConfig::default() };
        let mut t = Trainer::new(&model, init.clone(), cfg, 1).unwrap();
        let summary = t.train_epoch(&data(1), 0).unwrap();
        assert_eq!(summary.steps.len(), 1);
        assert!(t.store.ids().all(|id| t.store.value(id).bit_eq(init.value(id))));
    }

    #[test]
    fn epochs_are_reproducible_and_resumable() {
        let model = ChangeFormer::new(ModelConfig::tiny()).unwrap();
        let train = data(3);
        let run = || {
            let mut t = Trainer::new(&model, model.init_weights::<f64>(4), config(2), train.len()).unwrap();
            t.train_epoch(&train, 0).unwrap();
            t
        };
        let (mut a, b) = (run(), run());
        assert!(a.store.bit_eq(&b.store));
        assert_eq!(a.step(), 2);
        assert_eq!(a.total_steps(), 4);

        // Stop after epoch 0, restart from the saved state, compare with an
        // uninterrupted second epoch.
        let mut resumed =
            Trainer::resume(&model, b.store.clone(), b.optimizer.clone(), config(2), train.len(), b.step()).unwrap();
        resumed.train_epoch(&train, 1).unwrap();
        a.train_epoch(&train, 1).unwrap();
        assert!(a.store.bit_eq(&resumed.store));
        assert_eq!(a.optimizer, resumed.optimizer);
        assert!(Trainer::resume(&model, b.store.clone(), b.optimizer.clone(), config(2), train.len(), 5).is_err());
    }

    #[test]
    fn last_partial_batch_is_used() {
        let model = ChangeFormer::new(ModelConfig::tiny()).unwrap();
        let mut t = Trainer::new(&model, model.init_weights::<f32>(0), config(2), 3).unwrap();
        let summary = t.train_epoch(&data(3), 0).unwrap();
        assert_eq!(summary.steps.len(), 2);
        assert_eq!(summary.steps[0].lr, 1e-3);
        assert_eq!(summary.steps[1].lr, 1e-3 * 0.75);
    }

    #[test]
    fn non_finite_loss_names_epoch_and_batch() {
        let model = ChangeFormer::new(ModelConfig::tiny()).unwrap();
        let mut store = model.init_weights::<f32>(0);
        let id = store.id("decoder.classify.bias").unwrap();
        store.value_mut(id).data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(&model, store, config(1), 2).unwrap();
        let err = t.train_epoch(&data(2), 0).unwrap_err();
        let msg = format!("{err}");
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(msg.contains("epoch 0") && msg.contains("batch 0"), "{msg}");
    }

    #[test]
    fn evaluate_pools_every_pixel() {
        let model = ChangeFormer::new(ModelConfig::tiny()).unwrap();
        let mut store = model.init_weights::<f32>(0);
        let d = data(3);
        let cm = evaluate(&model, &mut store, &d, 2).unwrap();
        assert_eq!(cm.total(), 3 * 64 * 64);
        let positives: u64 = d.iter().map(|s| s.label.count_changed() as u64).sum();
        assert_eq!(cm.tp + cm.fn_, positives);
    }
}
