use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        Adam {
            cfg,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update; `grads[i]` pairs with the i-th parameter of `params`.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) -> Result<()> {
        if !(self.cfg.lr > 0.0) {
            return Err(Error::Argument(format!("learning rate must be > 0, got {}", self.cfg.lr)));
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Contract(format!(
                "adam state tracks {} tensors, params {}, grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else {
                return Err(Error::Contract(format!("missing gradient for `{}`", params.names()[i])));
            };
            if g.shape() != params.values()[i].shape() || self.m[i].shape() != g.shape() {
                return Err(Error::Contract(format!("gradient shape mismatch for `{}`", params.names()[i])));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].as_ref().expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = beta1 * *mj + (1.0 - beta1) * gj;
                *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(x: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::new([1], vec![x]).unwrap());
        p
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut p = single(1.5);
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &[Some(Tensor::new([1], vec![2.0]).unwrap())]).unwrap();
        let after_one = p.values()[0].item();
        let m1 = opt.first_moments()[0].item();
        for _ in 0..5 {
            opt.step(&mut p, &[Some(Tensor::zeros([1]))]).unwrap();
        }
        let m6 = opt.first_moments()[0].item();
        assert!(m6.abs() < m1.abs());
        // a pure zero-gradient history never moves the parameter
        let mut q = single(1.5);
        let mut opt2 = Adam::new(&q, AdamConfig::default());
        for _ in 0..10 {
            opt2.step(&mut q, &[Some(Tensor::zeros([1]))]).unwrap();
        }
        assert_eq!(q.values()[0].item(), 1.5);
        assert!(after_one < 1.5);
    }

    #[test]
    fn constant_grad_steps_approach_lr() {
        let mut p = single(0.0);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        let mut opt = Adam::new(&p, cfg);
        let mut last = 0.0;
        for _ in 0..2000 {
            let before = p.values()[0].item();
            opt.step(&mut p, &[Some(Tensor::new([1], vec![0.3]).unwrap())]).unwrap();
            last = before - p.values()[0].item();
        }
        assert!((last - 0.01).abs() < 1e-6, "{last}");
    }

    #[test]
    fn quadratic_converges() {
        let mut p = single(0.0);
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut opt = Adam::new(&p, cfg);
        for _ in 0..500 {
            let x = p.values()[0].item();
            opt.step(&mut p, &[Some(Tensor::new([1], vec![2.0 * (x - 3.0)]).unwrap())]).unwrap();
        }
        assert!((p.values()[0].item() - 3.0).abs() < 1e-3);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut p = single(0.0);
        let mut opt = Adam::new(&p, AdamConfig::default());
        assert!(matches!(opt.step(&mut p, &[None]), Err(Error::Contract(_))));
    }
}
