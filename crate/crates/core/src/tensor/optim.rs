//! First-order optimizers over named parameter sets.

use std::collections::BTreeMap;

use super::{check_same_shape, Tensor};
use crate::error::Result;

/// Named parameters (or gradients) in a fixed, sorted order.
pub type ParamSet = BTreeMap<String, Tensor>;

pub trait Optimizer {
    /// Update every parameter that has an entry in `grads`; parameters
    /// without one are left untouched.
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()>;

    fn learning_rate(&self) -> f32;

    fn set_learning_rate(&mut self, lr: f32);
}

/// `v = momentum·v + g; p -= lr·v`. With zero momentum this is `p -= lr·g`.
pub fn sgd_update(param: &mut [f32], grad: &[f32], velocity: &mut [f32], lr: f32, momentum: f32) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_update(param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], t: u32, h: AdamHyper) {
    let c1 = 1.0 - h.beta1.powi(t as i32);
    let c2 = 1.0 - h.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(lr: f32, momentum: f32) -> Self {
        Sgd { lr, momentum, velocity: BTreeMap::new() }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            check_same_shape("sgd_step", p, g)?;
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            sgd_update(p.data_mut(), g.data(), v, self.lr, self.momentum);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f32 {
        self.lr
    }

    fn set_learning_rate(&mut self, lr: f32) {
        self.lr = lr;
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    t: u32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(hyper: AdamHyper) -> Self {
        Adam { hyper, t: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.t += 1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            check_same_shape("adam_step", p, g)?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            adam_update(p.data_mut(), g.data(), m, v, self.t, self.hyper);
        }
        Ok(())
    }

    fn learning_rate(&self) -> f32 {
        self.hyper.lr
    }

    fn set_learning_rate(&mut self, lr: f32) {
        self.hyper.lr = lr;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(name: &str, data: &[f32]) -> ParamSet {
        let mut s = ParamSet::new();
        s.insert(name.into(), Tensor::new(vec![data.len()], data.to_vec()).unwrap());
        s
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = set("w", &[1.0, -2.0]);
        let g = set("w", &[0.5, 0.25]);
        Sgd::new(0.1, 0.0).step(&mut p, &g).unwrap();
        assert_eq!(p["w"].data(), &[1.0 - 0.05, -2.0 - 0.025]);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = set("w", &[1.0, -2.0]);
        let g = set("w", &[0.0, 0.0]);
        Sgd::new(0.1, 0.9).step(&mut p, &g).unwrap();
        Adam::new(AdamHyper::default()).step(&mut p, &g).unwrap();
        assert_eq!(p["w"].data(), &[1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_by_hand() {
        // t = 1: m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2,
        // so the step is lr * g / (|g| + eps).
        let h = AdamHyper { lr: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let mut p = set("w", &[0.5, -0.3]);
        let g = set("w", &[0.2, -4.0]);
        Adam::new(h).step(&mut p, &g).unwrap();
        let expect = [0.5 - 0.01 * 0.2 / (0.2 + 1e-8), -0.3 - 0.01 * -4.0 / (4.0 + 1e-8)];
        for (a, b) in p["w"].data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn params_without_grads_are_frozen() {
        let mut p = set("w", &[1.0]);
        p.insert("frozen".into(), Tensor::scalar(3.0));
        let g = set("w", &[1.0]);
        Sgd::new(1.0, 0.0).step(&mut p, &g).unwrap();
        assert_eq!(p["frozen"].item(), 3.0);
        assert_eq!(p["w"].data(), &[0.0]);
    }
}
