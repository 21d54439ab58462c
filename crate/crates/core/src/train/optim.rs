use std::collections::BTreeMap;

use crate::model::ModelParams;
use crate::numkern::Tensor;

/// `lr(e) = lr_min + (lr0 - lr_min)(1 + cos(pi e / E)) / 2`
pub fn cosine_lr(epoch: usize, epochs: usize, lr0: f64, lr_min: f64) -> f64 {
    if epoch == 0 {
        return lr0;
    }
    if epoch >= epochs {
        return lr_min;
    }
    let phase = std::f64::consts::PI * epoch as f64 / epochs as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

pub fn global_norm(grads: &BTreeMap<String, Tensor>) -> f64 {
    grads.values().map(Tensor::norm_sqr).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            g.scale(scale);
        }
    }
    norm
}

/// First and second moment estimates keyed by parameter path.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: OptimizerState::default(),
        }
    }

    /// One update of the listed parameters with decoupled weight decay.
    /// Parameters without a gradient entry are left untouched; `decay`
    /// selects which of them are decayed.
    pub fn step(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f64,
        decay: impl Fn(&str) -> bool,
    ) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (path, g) in grads {
            let p = params.get_mut(path);
            let mut pv = p.components();
            let gv = g.components();
            let m = self
                .state
                .m
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            let mut mv = m.components();
            let v = self
                .state
                .v
                .entry(path.clone())
                .or_insert_with(|| Tensor::zeros_like(g));
            let mut vv = v.components();
            let wd = if decay(path) { self.weight_decay } else { 0.0 };
            for i in 0..pv.len() {
                pv[i] -= lr * wd * pv[i];
                mv[i] = self.beta1 * mv[i] + (1.0 - self.beta1) * gv[i];
                vv[i] = self.beta2 * vv[i] + (1.0 - self.beta2) * gv[i] * gv[i];
                let mhat = mv[i] / bc1;
                let vhat = vv[i] / bc2;
                pv[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
            let rebuild = |like: &Tensor, data| Tensor::from_components(like.shape(), like.dtype(), data).expect("same size");
            *self.state.m.get_mut(path).expect("inserted") = rebuild(g, mv);
            *self.state.v.get_mut(path).expect("inserted") = rebuild(g, vv);
            *p = rebuild(g, pv);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_exact() {
        assert_eq!(cosine_lr(0, 500, 1e-3, 0.0), 1e-3);
        assert_eq!(cosine_lr(500, 500, 1e-3, 0.0), 0.0);
        assert_eq!(cosine_lr(500, 500, 1e-3, 1e-5), 1e-5);
        assert!((cosine_lr(250, 500, 1e-3, 0.0) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = BTreeMap::new();
        g.insert("a".to_string(), Tensor::from_real(&[2], vec![3.0, 4.0]).unwrap());
        g.insert("b".to_string(), Tensor::from_real(&[1], vec![12.0]).unwrap());
        let before = clip_global_norm(&mut g, 1.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 1.0 + 1e-12);
        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Tensor::from_real(&[1], vec![0.5]).unwrap());
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small["a"].re()[0], 0.5);
    }
}
