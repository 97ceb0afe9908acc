//! SGD with momentum and cosine learning-rate decay.

use ndarray::ArrayD;

use super::layers::ParamStore;

/// Cosine decay over a fixed horizon: `lr(t) = base * cos(7*pi*t / (16*T))`.
///
/// The schedule never reaches zero; at `t = T` the factor is `cos(7*pi/16)`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64;
        let total = self.total_steps.max(1) as f64;
        self.base_lr * (7.0 * std::f64::consts::PI * t / (16.0 * total)).cos()
    }
}

/// Momentum SGD with coupled weight decay.
///
/// Parameters with a `None` gradient still receive their weight-decay
/// update, so an all-zero loss leaves weights unchanged only when decay
/// is zero.
pub struct SgdMomentum {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl SgdMomentum {
    pub fn new(params: &ParamStore, momentum: f64, weight_decay: f64) -> Self {
        let velocity = params.iter().map(|(_, _, a)| ArrayD::zeros(a.raw_dim())).collect();
        SgdMomentum { momentum, weight_decay, velocity }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<ArrayD<f64>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient list length mismatch");
        assert_eq!(self.velocity.len(), params.len(), "optimizer built for another store");
        for i in 0..params.len() {
            let id = super::layers::ParamId(i);
            let v = &mut self.velocity[i];
            v.mapv_inplace(|x| x * self.momentum);
            if let Some(grad) = &grads[i] {
                *v += grad;
            }
            if self.weight_decay != 0.0 {
                let arr = params.array(id).clone();
                v.scaled_add(self.weight_decay, &arr);
            }
            params.array_mut(id).scaled_add(-lr, &self.velocity[i]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn cosine_schedule_endpoints() {
        let s = CosineSchedule { base_lr: 0.03, total_steps: 100 };
        assert!((s.lr_at(0) - 0.03).abs() < 1e-15);
        let end = s.lr_at(100);
        let expected = 0.03 * (7.0 * std::f64::consts::PI / 16.0).cos();
        assert!((end - expected).abs() < 1e-15);
        assert!(end > 0.0);
    }

    #[test]
    fn zero_grads_without_decay_leave_params_fixed() {
        let mut ps = ParamStore::new();
        let id = ps.alloc("w", arr1(&[1.0, -2.0]).into_dyn());
        let mut opt = SgdMomentum::new(&ps, 0.9, 0.0);
        opt.step(&mut ps, &[None], 0.1);
        assert_eq!(ps.array(id), &arr1(&[1.0, -2.0]).into_dyn());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut ps = ParamStore::new();
        let id = ps.alloc("w", arr1(&[0.0]).into_dyn());
        let mut opt = SgdMomentum::new(&ps, 0.5, 0.0);
        let g = Some(arr1(&[1.0]).into_dyn());
        opt.step(&mut ps, std::slice::from_ref(&g), 1.0);
        assert!((ps.array(id)[[0]] - -1.0).abs() < 1e-12);
        opt.step(&mut ps, &[g], 1.0);
        assert!((ps.array(id)[[0]] - -2.5).abs() < 1e-12);
    }
}
