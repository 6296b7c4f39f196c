use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::adapternet::{AdapterNet, DomainId, ParamId};
use crate::engine::{Scalar, Tensor};

/// Multiply the learning rate by `factor` from epoch `round(at · epochs)` on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub at: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub lr_drops: Vec<LrDrop>,
    pub momentum: f64,
    pub default_decay: f64,
    pub per_domain_decay: BTreeMap<DomainId, f64>,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            base_lr: 0.1,
            lr_drops: vec![LrDrop { at: 0.6, factor: 0.1 }, LrDrop { at: 0.8, factor: 0.1 }],
            momentum: 0.9,
            default_decay: 0.0005,
            per_domain_decay: BTreeMap::new(),
            epochs: 80,
            batch_size: 64,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Optim(m));
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base learning rate {} must be positive", self.base_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        let mut last = 0.0;
        for d in &self.lr_drops {
            if !(d.factor > 0.0 && d.factor <= 1.0) || !(d.at > 0.0 && d.at <= 1.0) || d.at < last {
                return bad(format!("learning rate drop {d:?} must have factor in (0, 1] and ordered fraction in (0, 1]"));
            }
            last = d.at;
        }
        let decays = std::iter::once(&self.default_decay).chain(self.per_domain_decay.values());
        if decays.into_iter().any(|&d| !(d >= 0.0) || !d.is_finite()) {
            return bad("weight decay must be non-negative".into());
        }
        Ok(())
    }

    pub fn decay_for(&self, domain: DomainId) -> f64 {
        self.per_domain_decay.get(&domain).copied().unwrap_or(self.default_decay)
    }

    /// First epoch at which each drop applies.
    pub fn drop_epochs(&self) -> Vec<usize> {
        self.lr_drops.iter().map(|d| (d.at * self.epochs as f64).round() as usize).collect()
    }
}

/// Piecewise-constant learning rate for `epoch`.
pub fn lr_at(optim: &OptimSpec, epoch: usize) -> f64 {
    optim
        .lr_drops
        .iter()
        .zip(optim.drop_epochs())
        .filter(|(_, e)| epoch >= *e)
        .fold(optim.base_lr, |lr, (d, _)| lr * d.factor)
}

/// One momentum step on a flat parameter:
/// `v ← μ·v + g + λ·p`, then `p ← p − lr·v`.
pub fn sgd_update<T: Scalar>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, momentum: f64, decay: f64) {
    let (lr, mu, wd) = (T::cast_f64(lr), T::cast_f64(momentum), T::cast_f64(decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p = *p - lr * *v;
    }
}

/// Momentum buffers for every parameter of a network.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(num_params: usize) -> Self {
        Self { velocity: vec![None; num_params] }
    }

    /// Applies one step to every parameter in `grads`. Decay is applied only
    /// to decay-eligible groups. A non-finite gradient aborts before any
    /// parameter is touched.
    pub fn step(
        &mut self,
        net: &mut AdapterNet<T>,
        grads: &[(ParamId, Tensor<T>)],
        lr: f64,
        momentum: f64,
        decay: f64,
    ) -> Result<(), TrainError> {
        if let Some((id, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(TrainError::Divergent(format!("non-finite gradient for {}", net.params()[*id].name())));
        }
        for (id, g) in grads {
            let group_decay = if net.params()[*id].decay_eligible() { decay } else { 0.0 };
            let v = self.velocity[*id].get_or_insert_with(|| vec![T::zero(); g.numel()]);
            sgd_update(net.tensor_mut(*id).data_mut(), g.data(), v, lr, momentum, group_decay);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_defaults() {
        let o = OptimSpec::default();
        assert_eq!(o.drop_epochs(), vec![48, 64]);
        assert_eq!(lr_at(&o, 0), 0.1);
        assert_eq!(lr_at(&o, 47), 0.1);
        assert!((lr_at(&o, 48) - 0.01).abs() < 1e-15);
        assert!((lr_at(&o, 79) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut p = [1.0f64, -2.0];
        let mut v = [0.3, 0.1];
        sgd_update(&mut p, &[5.0, 7.0], &mut v, 0.0, 0.9, 0.1);
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn vanilla_step() {
        let mut p = [1.5f64];
        let mut v = [0.0];
        sgd_update(&mut p, &[0.5], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(p, [1.5 - 0.1 * 0.5]);
    }

    #[test]
    fn quadratic_bowl_matches_closed_form() {
        let (lr, mut p, mut v) = (0.1, [3.0f64], [0.0]);
        let mut last = p[0].abs();
        for k in 1..=50 {
            let g = [p[0]];
            sgd_update(&mut p, &g, &mut v, lr, 0.0, 0.0);
            assert!(p[0].abs() < last);
            last = p[0].abs();
            assert!((p[0] - 3.0 * (1.0f64 - lr).powi(k)).abs() < 1e-12);
        }
    }

    #[test]
    fn validation() {
        assert!(OptimSpec::default().validate().is_ok());
        let mut o = OptimSpec::default();
        o.lr_drops[0].factor = 2.0;
        assert!(o.validate().is_err());
        let mut o = OptimSpec::default();
        o.default_decay = -1.0;
        assert!(o.validate().is_err());
        let mut o = OptimSpec::default();
        o.lr_drops.reverse();
        assert!(o.validate().is_err());
    }
}
