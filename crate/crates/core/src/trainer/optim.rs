use std::f64::consts::PI;

use super::model::{Model, Slot};
use crate::error::{Error, Result};
use crate::quadneuron::is_second_order;
use crate::tensor::Tensor;

/// Cosine-annealed learning rate; epochs past `t_max` clamp to `eta_min`.
pub fn cosine_lr(epoch: usize, lr0: f64, t_max: usize, eta_min: f64) -> f64 {
    if epoch > t_max {
        log::warn!("epoch {epoch} is past the schedule length {t_max}; using eta_min");
        return eta_min;
    }
    if t_max == 0 {
        return lr0;
    }
    eta_min + 0.5 * (lr0 - eta_min) * (1.0 + (PI * epoch as f64 / t_max as f64).cos())
}

/// One momentum update: `v ← m·v + g + wd·p; p ← p − lr·v`.
pub fn sgd_update(p: &Tensor, g: &Tensor, v: &Tensor, lr: f64, momentum: f64, weight_decay: f64) -> (Tensor, Tensor) {
    let mut pv = p.to_vec();
    let mut vv = v.to_vec();
    for ((p, v), g) in pv.iter_mut().zip(vv.iter_mut()).zip(g.data()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    let shape = p.shape().to_vec();
    (Tensor::from_parts(shape.clone(), pv), Tensor::from_parts(shape, vv))
}

/// SGD with momentum and weight decay.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    /// Per unit, in slot order; mirrors the parameter shapes.
    pub velocity: Vec<Vec<Tensor>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr0: f64,
    pub t_max: usize,
    pub eta_min: f64,
    /// Learning-rate multiplier for parameters of second-order terms.
    pub quadratic_lr_scale: f64,
}

impl OptimizerState {
    pub fn new(model: &Model, lr0: f64, t_max: usize) -> Self {
        let velocity = (0..model.units())
            .map(|i| {
                model
                    .unit(i)
                    .values()
                    .iter()
                    .map(|t| Tensor::zeros(t.shape()))
                    .collect()
            })
            .collect();
        Self {
            velocity,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr0,
            t_max,
            eta_min: 0.0,
            quadratic_lr_scale: 1.0,
        }
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.lr0, self.t_max, self.eta_min)
    }

    /// Applies `grads` (per unit, slot order) at learning rate `lr`. Nothing
    /// is updated if any gradient or updated value is non-finite.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != model.units() {
            return Err(Error::Input(format!(
                "{} gradient sets for {} units",
                grads.len(),
                model.units()
            )));
        }
        for (i, unit_grads) in grads.iter().enumerate() {
            let unit = model.unit(i);
            for (slot, g) in unit.slots().iter().zip(unit_grads) {
                if !g.is_finite() {
                    return Err(Error::Numeric {
                        layer: unit_label(model, i, *slot),
                        msg: "non-finite gradient; step aborted".into(),
                    });
                }
            }
        }
        let mut updates = Vec::with_capacity(grads.len());
        for (i, unit_grads) in grads.iter().enumerate() {
            let unit = model.unit(i);
            let family = unit.spec.family;
            let slots = unit.slots();
            let mut new_values = Vec::with_capacity(slots.len());
            let mut new_velocity = Vec::with_capacity(slots.len());
            for (k, ((slot, p), g)) in slots.iter().zip(unit.values()).zip(unit_grads).enumerate() {
                let scale = match slot {
                    Slot::Param(r) if is_second_order(family, *r) => self.quadratic_lr_scale,
                    _ => 1.0,
                };
                let (p, v) = sgd_update(
                    &p,
                    g,
                    &self.velocity[i][k],
                    lr * scale,
                    self.momentum,
                    self.weight_decay,
                );
                if !p.is_finite() || !v.is_finite() {
                    return Err(Error::Numeric {
                        layer: unit_label(model, i, *slot),
                        msg: "update overflowed; step aborted".into(),
                    });
                }
                new_values.push(p);
                new_velocity.push(v);
            }
            updates.push((new_values, new_velocity));
        }
        for (i, (values, velocity)) in updates.into_iter().enumerate() {
            model.unit_mut(i).set_values(values);
            self.velocity[i] = velocity;
        }
        Ok(())
    }
}

/// `"layer 3 (wa)"` or `"head (w)"`.
pub fn unit_label(model: &Model, unit: usize, slot: Slot) -> String {
    if unit == model.layers.len() {
        format!("head ({})", slot.name())
    } else {
        format!("layer {unit} ({})", slot.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 0.1, 10, 0.0), 0.1);
        assert!(cosine_lr(10, 0.1, 10, 0.0).abs() < 1e-18);
        assert!((cosine_lr(5, 0.1, 10, 0.0) - 0.05).abs() < 1e-15);
        assert_eq!(cosine_lr(11, 0.1, 10, 0.001), 0.001);
    }

    #[test]
    fn scalar_update() {
        let p = Tensor::scalar(1.0);
        let (p, v) = sgd_update(&p, &Tensor::scalar(2.0), &Tensor::scalar(0.0), 0.1, 0.0, 0.0);
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert_eq!(v.data(), &[2.0]);
    }
}
