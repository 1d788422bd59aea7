use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::OptimizerState;
use crate::nn::{ParameterStore, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..1.0).contains(&v);
        if !unit(self.beta1) || !unit(self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("adam: betas must be in [0, 1) and eps > 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Adam with bias-corrected moments. Moments are kept for every parameter
/// in store order; buffers and frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParameterStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![T::zero(); p.value.len()]).collect();
        Adam {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from the gradient buffers of `store`.
    pub fn step(&mut self, store: &mut ParameterStore<T>, lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = T::of(1.0 - beta1.powi(t));
        let c2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }

    pub fn state(&self) -> OptimizerState {
        let pack = |moments: &[Vec<T>]| {
            moments
                .iter()
                .map(|m| Tensor::new(&[m.len()], m.iter().map(|&x| x.as_f64() as f32).collect()))
                .collect()
        };
        OptimizerState {
            step: self.step,
            m: pack(&self.m),
            v: pack(&self.v),
        }
    }

    /// Restores moments saved by [`Adam::state`] for the same parameter layout.
    pub fn restore(&mut self, state: &OptimizerState) -> Result<()> {
        let fits = |saved: &[Tensor<f32>], ours: &[Vec<T>]| {
            saved.len() == ours.len() && saved.iter().zip(ours).all(|(s, o)| s.len() == o.len())
        };
        if !fits(&state.m, &self.m) || !fits(&state.v, &self.v) {
            return Err(Error::Validation("optimizer state does not match the parameter layout".into()));
        }
        let unpack = |saved: &[Tensor<f32>]| {
            saved
                .iter()
                .map(|s| s.data().iter().map(|&x| T::of(x as f64)).collect())
                .collect()
        };
        self.step = state.step;
        self.m = unpack(&state.m);
        self.v = unpack(&state.v);
        Ok(())
    }
}

/// Divides the learning rate by `factor` whenever the monitored loss has
/// not improved for `patience` consecutive epochs; the wait counter then
/// restarts.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    pub initial_lr: f64,
    pub factor: f64,
    pub patience: usize,
    best: f64,
    wait: usize,
    reductions: u32,
}

impl PlateauScheduler {
    pub fn new(initial_lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            initial_lr,
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
            reductions: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.initial_lr / self.factor.powi(self.reductions as i32)
    }

    pub fn reductions(&self) -> u32 {
        self.reductions
    }

    /// Records one epoch's loss and returns the learning rate for the next.
    pub fn observe(&mut self, loss: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.reductions += 1;
                self.wait = 0;
            }
        }
        self.lr()
    }
}

/// Running minimum of the validation loss; ties keep the earlier epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BestTracker {
    best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns true when `loss` is a new strict minimum.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        match self.best {
            Some((_, b)) if loss >= b => false,
            _ => {
                self.best = Some((epoch, loss));
                true
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.map(|(_, l)| l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_counts_reductions() {
        let mut s = PlateauScheduler::new(1e-4, 10.0, 2);
        assert_eq!(s.observe(1.0), 1e-4);
        assert_eq!(s.observe(1.0), 1e-4);
        assert_eq!(s.observe(1.0), 1e-4 / 10.0);
        assert_eq!(s.observe(0.5), 1e-4 / 10.0);
        s.observe(0.6);
        assert_eq!(s.observe(0.7), 1e-4 / 100.0);
        assert_eq!(s.reductions(), 2);
    }

    #[test]
    fn best_tracker_keeps_first_minimum() {
        let mut b = BestTracker::default();
        for (e, l) in [(1, 0.5), (2, 0.4), (3, 0.4)] {
            b.observe(e, l);
        }
        assert_eq!(b.best_epoch(), Some(2));
    }
}
