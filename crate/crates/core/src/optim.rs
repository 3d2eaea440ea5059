//! Adam with bias-corrected moments.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::graph::Gradients;
use crate::nets::{Bound, ModelParams};
use crate::tensor::{Real, Tensor};

pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

/// Optimizer state for one network.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: IndexMap<String, Tensor<T>>,
    pub second: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &ModelParams<T>) -> Self {
        let zeros: IndexMap<String, Tensor<T>> = params
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update. Parameters without a gradient are treated as having a
    /// zero gradient (their moments still decay).
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &IndexMap<String, Tensor<T>>) {
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let corr1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let corr2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.learning_rate);
        let eps = T::lit(c.epsilon);
        for (name, p) in params.tensors.iter_mut() {
            let m = self.first.get_mut(name).expect("moment for every parameter");
            let v = self.second.get_mut(name).expect("moment for every parameter");
            let g = grads.get(name);
            for i in 0..p.len() {
                let gi = g.map_or(T::zero(), |g| g.data()[i]);
                let mi = b1 * m.data()[i] + one_b1 * gi;
                let vi = b2 * v.data()[i] + one_b2 * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Pulls the gradients of a bound network out of a backward pass.
pub fn collect<T: Real>(grads: &mut Gradients<T>, bound: &Bound) -> IndexMap<String, Tensor<T>> {
    bound
        .vars
        .iter()
        .filter_map(|(k, &v)| grads.take(v).map(|g| (k.clone(), g)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ArchDescriptor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let arch = ArchDescriptor::TranslatorResblocks {
            channels: 1,
            hidden: 1,
            blocks: 1,
        };
        let mut p = ModelParams::<f64>::init(arch, 0).unwrap();
        let before = p.clone();
        let cfg = AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: ADAM_EPSILON,
        };
        let mut opt = Adam::new(cfg, &p);
        let grads: IndexMap<_, _> = p
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), Tensor::full(t.shape(), 3.0)))
            .collect();
        opt.update(&mut p, &grads);
        for (k, t) in &p.tensors {
            for (a, b) in t.data().iter().zip(before.tensors[k].data()) {
                // Bias-corrected first step is lr * g / (|g| + eps).
                assert!((b - a - 1e-4 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
            }
        }
    }
}
