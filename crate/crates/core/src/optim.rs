//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{DqError, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::NdTensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Option<NdTensor>>,
    second: Vec<Option<NdTensor>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are untouched.
    /// A non-finite gradient aborts the step before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, NdTensor)]) -> Result<()> {
        for (id, g) in grads {
            if let Some(i) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(DqError::Divergence {
                    what: "gradient".into(),
                    detail: format!("{} at element {i} is {}", store.name(*id), g.data()[i]),
                });
            }
        }
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (id, g) in grads {
            let shape = g.shape();
            let m = self.first[id.0].get_or_insert_with(|| NdTensor::zeros(shape));
            let v = self.second[id.0].get_or_insert_with(|| NdTensor::zeros(shape));
            let w = store.get_mut(*id);
            if w.shape() != shape {
                return Err(DqError::ShapeMismatch {
                    expected: w.shape().to_vec(),
                    actual: shape.to_vec(),
                });
            }
            for (((wi, mi), vi), gi) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= c.lr * (c.weight_decay * *wi + mhat / (vhat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&mut store, &[(id, NdTensor::zeros(&[3]))]).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn one_step_on_square_shrinks_the_weight() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdTensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            ..AdamWConfig::default()
        });
        let grad = 2.0 * store.get(id).data()[0];
        opt.step(&mut store, &[(id, NdTensor::scalar(grad))]).unwrap();
        let w = store.get(id).data()[0];
        assert!(w.abs() < 1.0);
        // first bias-corrected step moves by lr * g / |g|
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled_from_the_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", NdTensor::scalar(2.0));
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        });
        opt.step(&mut store, &[(id, NdTensor::scalar(0.0))]).unwrap();
        assert!((store.get(id).data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_is_a_divergence_and_leaves_weights() {
        let mut store = ParamStore::new();
        let id = store.add("enc.weight", NdTensor::scalar(1.0));
        let mut opt = AdamW::new(AdamWConfig::default());
        let bad = NdTensor::from_parts(vec![1], vec![f64::NAN]).unwrap();
        let err = opt.step(&mut store, &[(id, bad)]).unwrap_err();
        assert!(matches!(err, DqError::Divergence { .. }));
        assert!(err.to_string().contains("enc.weight"));
        assert_eq!(store.get(id).data(), &[1.0]);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn identical_sequences_give_identical_weights() {
        let run = || {
            let mut store = ParamStore::new();
            let id = store.add("w", NdTensor::new(vec![2], vec![0.3, -0.7]).unwrap());
            let mut opt = AdamW::new(AdamWConfig {
                lr: 0.05,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            });
            for _ in 0..50 {
                let g: Vec<f64> = store.get(id).data().iter().map(|w| 2.0 * w - 0.1).collect();
                opt.step(&mut store, &[(id, NdTensor::new(vec![2], g).unwrap())])
                    .unwrap();
            }
            store.get(id).data().to_vec()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }
}
