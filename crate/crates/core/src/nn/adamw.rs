use serde::{Deserialize, Serialize};

use super::{Param, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW with decoupled weight decay. Moment buffers exist only for the
/// parameters that are actually stepped, so frozen tensors are never touched.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    cfg: AdamWConfig,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
    step: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        AdamW { cfg, moments: vec![None; n_params], step: 0 }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter whose `trainable` flag is set.
    pub fn step(&mut self, params: &mut [&mut Param<T>], trainable: &[bool], lr: f64) {
        assert_eq!(params.len(), self.moments.len());
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let decay = T::lit(1.0 - lr * c.weight_decay);
        let step_size = T::lit(lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let eps = T::lit(c.eps);
        for ((p, &on), slot) in params.iter_mut().zip(trainable).zip(self.moments.iter_mut()) {
            if !on {
                continue;
            }
            let (m, v) = slot.get_or_insert_with(|| (vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p.value[i] = p.value[i] * decay - step_size * m[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Group;

    #[test]
    fn frozen_parameters_are_untouched() {
        let mut a = Param::<f32>::filled("a", Group::ConvBackbone, &[3], 1.0);
        let mut b = Param::<f32>::filled("b", Group::DecoderRest, &[3], 1.0);
        a.grad = vec![1.0, -1.0, 0.5];
        b.grad = vec![1.0, 1.0, 1.0];
        let mut opt = AdamW::new(AdamWConfig::default(), 2);
        opt.step(&mut [&mut a, &mut b], &[true, false], 1e-2);
        assert_eq!(b.value, vec![1.0; 3]);
        assert!(a.value[0] < 1.0 && a.value[1] > 1.0 - 1e-2 * 0.01);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Param::<f64>::zeros("p", Group::EncoderRest, &[1]);
        p.grad = vec![3.0];
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() }, 1);
        opt.step(&mut [&mut p], &[true], 0.1);
        assert!((p.value[0] + 0.1).abs() < 1e-6);
    }
}
