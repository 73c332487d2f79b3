//! AdamW with decoupled weight decay and the linear learning-rate decay.

use alloc::format;
use alloc::vec::Vec;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// First and second moment estimates per parameter plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.ids().map(|id| alloc::vec![T::zero(); store.value(id).numel()]).collect();
        AdamW { first_moment: zeros(), second_moment: zeros(), step: 0 }
    }

    /// One update from the gradients accumulated in `store`:
    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)` with bias-corrected moments.
    /// Nothing is modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| !store.grad(id).all_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {}", store.name(id))));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let bc1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
        let bc2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));
        let (lr, wd, eps) = (T::from_f64(lr), T::from_f64(cfg.weight_decay), T::from_f64(cfg.adam_eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (values, grads) = store.values_and_grads();
        for (i, (theta, grad)) in values.iter_mut().zip(grads).enumerate() {
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for (j, (p, &g)) in theta.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
        Ok(())
    }
}

/// `initial_lr · (1 − step/total_steps)`.
pub fn lr_at(step: usize, total_steps: usize, initial_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::Config(format!("step {step} is past the schedule end {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(initial_lr);
    }
    Ok(initial_lr * (1.0 - step as f64 / total_steps as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamRegistry};
    use crate::tensor::Tensor;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut reg = ParamRegistry::new();
        reg.param("theta", &[1], Init::Zeros);
        let mut store = ParamStore::initialize(&reg, 0, 0.1, 1e-5);
        store.value_mut(crate::ParamId(0)).data_mut()[0] = theta;
        store
    }

    fn set_grad(store: &mut ParamStore<f64>, g: f64) {
        store.zero_grad();
        let mut s = crate::Session::train(store);
        let p = s.param(crate::ParamId(0));
        let c = s.input(Tensor::from_f64_slice([1], &[g]).unwrap());
        let y = s.tape.mul(p, c).unwrap();
        let loss = s.tape.sum(y);
        s.backward(loss).unwrap();
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(&store);
        set_grad(&mut store, 1.0);
        opt.step(&mut store, 1e-4, &TrainConfig::default()).unwrap();
        let theta = store.value(crate::ParamId(0)).data()[0];
        assert!((theta + 1e-4).abs() < 1e-11, "{theta}");
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut store = scalar_store(1.0);
        let mut opt = AdamW::new(&store);
        let cfg = TrainConfig::default();
        for k in 1..=5 {
            opt.step(&mut store, 1e-4, &cfg).unwrap();
            let theta = store.value(crate::ParamId(0)).data()[0];
            assert!((theta - (1.0 - 1e-6f64).powi(k)).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_decay_matches_scalar_adam() {
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let grads = [0.3, -1.2, 0.5, 2.0, -0.1, 0.0, 0.7, -0.4, 1.1, 0.25];
        let mut store = scalar_store(0.5);
        let mut opt = AdamW::new(&store);

        // Textbook Adam on a scalar.
        let (mut theta, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for (t, &g) in grads.iter().enumerate() {
            let t = t as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= 1e-3 * m_hat / (v_hat.sqrt() + 1e-8);

            set_grad(&mut store, g);
            opt.step(&mut store, 1e-3, &cfg).unwrap();
        }
        let got = store.value(crate::ParamId(0)).data()[0];
        assert!((got - theta).abs() <= 1e-12, "{got} vs {theta}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let mut opt = AdamW::new(&store);
        set_grad(&mut store, f64::NAN);
        let err = opt.step(&mut store, 1e-4, &TrainConfig::default()).unwrap_err();
        assert!(alloc::format!("{err}").contains("theta"));
        assert_eq!(store.value(crate::ParamId(0)).data()[0], 0.0);
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_at(0, 200, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_at(200, 200, 1e-4).unwrap(), 0.0);
        assert!((lr_at(100, 200, 1e-4).unwrap() - 5e-5).abs() < 1e-20);
        assert!(lr_at(201, 200, 1e-4).is_err());
    }

    #[test]
    fn schedule_integral() {
        let total = 200;
        let sum: f64 = (0..total).map(|s| lr_at(s, total, 1e-4).unwrap()).sum();
        let expected = 1e-4 * total as f64 / 2.0;
        // Within one step's worth of learning rate.
        assert!((sum - expected).abs() <= 1e-4, "{sum}");
    }
}
