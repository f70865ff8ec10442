//! AdamW with decoupled weight decay and a linear warmup / linear decay
//! learning-rate schedule, with separate rates for extractor and head.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{arg_err, Error, Result};
use crate::model::{ParamGroup, SegModel};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr_extractor: f64,
    pub lr_head: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    /// Schedule length; `0` keeps the base rate constant.
    pub total_steps: u64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_extractor: 1e-3,
            lr_head: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            total_steps: 0,
        }
    }
}

impl AdamWConfig {
    /// Warmup over the first 5% of `steps`, then linear decay to zero.
    pub fn scheduled(mut self, steps: u64) -> Self {
        self.total_steps = steps;
        self.warmup_steps = steps / 20;
        self
    }

    /// Multiplier on the base learning rate at 0-based step `step`.
    pub fn lr_factor(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return 1.0;
        }
        if step < self.warmup_steps {
            return (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        (self.total_steps.saturating_sub(step)) as f64 / span as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl OptimizerState {
    pub fn new(model: &SegModel, config: AdamWConfig) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        Self { config, first: zeros(), second: zeros(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.first[index], &self.second[index])
    }

    /// Applies one AdamW update to `model` from `grads` (model order).
    pub fn step(&mut self, model: &mut SegModel, grads: &[Tensor]) -> Result<()> {
        if grads.len() != model.params().len() {
            return Err(arg_err!("expected {} gradients, got {}", model.params().len(), grads.len()));
        }
        for (p, g) in model.params().iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(arg_err!("gradient for {} has shape {:?}", p.name, g.shape()));
            }
            if !g.is_finite() {
                return Err(Error::Training(alloc::format!("non-finite gradient for {}", p.name)));
            }
        }
        let cfg = &self.config;
        let factor = cfg.lr_factor(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
        for (i, (p, g)) in model.params_mut().iter_mut().zip(grads).enumerate() {
            let lr = factor
                * match p.group {
                    ParamGroup::Extractor => cfg.lr_extractor,
                    ParamGroup::Head => cfg.lr_head,
                };
            let decay = 1.0 - lr * cfg.weight_decay;
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
                let update = (*mi / bc1) / (libm::sqrt(*vi / bc2) + cfg.eps);
                *w = *w * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`OptimizerState::step`].
pub fn optimizer_step(model: &mut SegModel, state: &mut OptimizerState, grads: &[Tensor]) -> Result<()> {
    state.step(model, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use crate::rng::DetRng;

    fn model() -> SegModel {
        SegModel::init(Arch::toy(3, 3), &mut DetRng::new(4)).unwrap()
    }

    fn zero_grads(m: &SegModel) -> Vec<Tensor> {
        m.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect()
    }

    #[test]
    fn zero_grads_no_decay_is_identity() {
        let mut m = model();
        let before = m.clone();
        let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
        let mut st = OptimizerState::new(&m, cfg);
        for _ in 0..5 {
            st.step(&mut m, &zero_grads(&before)).unwrap();
        }
        assert_eq!(m, before);
        assert_eq!(st.step_count(), 5);
    }

    #[test]
    fn zero_grads_decay_scales_params() {
        let mut m = model();
        let before = m.clone();
        let cfg = AdamWConfig { weight_decay: 0.1, lr_extractor: 0.01, lr_head: 0.05, ..AdamWConfig::default() };
        let mut st = OptimizerState::new(&m, cfg);
        let steps = 3;
        for _ in 0..steps {
            st.step(&mut m, &zero_grads(&before)).unwrap();
        }
        for (p, q) in m.params().iter().zip(before.params()) {
            let lr = if p.group == ParamGroup::Head { 0.05 } else { 0.01 };
            let f = libm::pow(1.0 - lr * 0.1, steps as f64);
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                assert!((a - b * f).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_step_closed_form() {
        // First step: m = (1-b1) g, v = (1-b2) g^2, bias-corrected ratio = g/|g|.
        let mut m = model();
        let cfg = AdamWConfig { weight_decay: 0.01, lr_extractor: 0.002, lr_head: 0.02, ..AdamWConfig::default() };
        let before = m.clone();
        let mut grads = zero_grads(&m);
        grads[0].data_mut()[0] = -0.37;
        let mut st = OptimizerState::new(&m, cfg.clone());
        st.step(&mut m, &grads).unwrap();
        let p0 = before.params()[0].value.data()[0];
        let g: f64 = -0.37;
        let expected = p0 * (1.0 - 0.002 * 0.01) - 0.002 * (g / (libm::sqrt(g * g) + cfg.eps));
        assert!((m.params()[0].value.data()[0] - expected).abs() < 1e-15);
        let (m1, v1) = st.moments(0);
        assert!((m1[0] - 0.1 * g).abs() < 1e-16);
        assert!((v1[0] - 0.001 * g * g).abs() < 1e-18);
    }

    #[test]
    fn nan_gradient_is_training_error() {
        let mut m = model();
        let mut grads = zero_grads(&m);
        grads[3].data_mut()[1] = f64::NAN;
        let mut st = OptimizerState::new(&m, AdamWConfig::default());
        assert!(matches!(st.step(&mut m, &grads), Err(Error::Training(_))));
    }

    #[test]
    fn schedule_warmup_then_decay() {
        let cfg = AdamWConfig::default().scheduled(100);
        assert_eq!(cfg.warmup_steps, 5);
        assert!((cfg.lr_factor(0) - 0.2).abs() < 1e-15);
        assert!((cfg.lr_factor(4) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_factor(5) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_factor(99) - 1.0 / 95.0).abs() < 1e-15);
        assert!(cfg.lr_factor(100) == 0.0);
    }
}
