use crate::config::TrainConfig;
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Cosine annealing from `lr_init` at step 0 to `min_lr` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_init: f64, min_lr: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total {
        return Err(Error::Config(format!("step {step} beyond schedule length {total}")));
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    Ok(min_lr + 0.5 * (lr_init - min_lr) * (1.0 + c))
}

/// L2 norm over all present gradients.
pub fn global_norm(grads: &[Option<Vec<f32>>]) -> f64 {
    grads.iter().flatten().flat_map(|g| g.iter()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let n = global_norm(grads);
    if max_norm > 0.0 && n > max_norm {
        let s = (max_norm / (n + 1e-12)) as f32;
        grads.iter_mut().flatten().for_each(|g| g.iter_mut().for_each(|v| *v *= s));
    }
    n
}

/// Adam with decoupled weight decay, applied only to parameters flagged
/// for decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(ps: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f32>> = ps.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamW { beta1: cfg.beta1, beta2: cfg.beta2, eps: cfg.adam_eps, weight_decay: cfg.weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[Option<Vec<f32>>], lr: f64) -> Result<()> {
        if grads.len() != ps.len() || self.m.len() != ps.len() {
            return Err(Error::Shape(format!("optimizer tracks {} parameters, store has {}", self.m.len(), ps.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let (sbc2, eps) = (bc2.sqrt() as f32, self.eps as f32);
        let decay = (lr * self.weight_decay) as f32;
        for (i, p) in ps.params_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.len() != p.value.len() {
                return Err(Error::Shape(format!("gradient for {} has {} values, expected {}", p.name, g.len(), p.value.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let d = if p.decay { decay } else { 0.0 };
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                let upd = step * m[k] / (v[k].sqrt() / sbc2 + eps);
                p.value[k] = p.value[k] - d * p.value[k] - upd;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 2.5e-4, 0.0).unwrap(), 2.5e-4);
        assert!(cosine_lr(100, 100, 2.5e-4, 1e-6).unwrap() - 1e-6 < 1e-18);
        assert!((cosine_lr(50, 100, 2.5e-4, 1e-5).unwrap() - (2.5e-4 + 1e-5) / 2.0).abs() < 1e-15);
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
        assert!(cosine_lr(5, 4, 1.0, 0.0).is_err());
    }

    fn store() -> ParamStore {
        let mut ps = ParamStore::new(1);
        ps.register("w", &[3, 2], Init::Uniform(1.0));
        ps.register("b", &[2], Init::Const(0.5));
        ps
    }

    #[test]
    fn zero_lr_and_decay_leave_params_bitwise() {
        let mut ps = store();
        let before = ps.flat();
        let cfg = TrainConfig { weight_decay: 0.0, ..TrainConfig::default() };
        let mut opt = AdamW::new(&ps, &cfg);
        opt.step(&mut ps, &[Some(vec![1.0; 6]), Some(vec![-2.0; 2])], 0.0).unwrap();
        assert_eq!(ps.flat(), before);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut ps = store();
        let before = ps.flat();
        let mut opt = AdamW::new(&ps, &TrainConfig { weight_decay: 0.1, ..TrainConfig::default() });
        opt.step(&mut ps, &[Some(vec![0.0; 6]), Some(vec![0.0; 2])], 0.5).unwrap();
        let after = ps.flat();
        for k in 0..6 {
            assert_eq!(after[k], before[k] - 0.05 * before[k]);
        }
        // biases are exempt
        assert_eq!(&after[6..], &before[6..]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut ps = store();
        let before = ps.flat();
        let mut opt = AdamW::new(&ps, &TrainConfig { weight_decay: 0.0, ..TrainConfig::default() });
        opt.step(&mut ps, &[Some(vec![3.0; 6]), None], 1e-2).unwrap();
        let after = ps.flat();
        for k in 0..6 {
            assert!((before[k] - after[k] - 1e-2).abs() < 1e-6);
        }
        assert_eq!(&after[6..], &before[6..]);
        assert_eq!(opt.t, 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(vec![3.0f32, 4.0]), None];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-6);
        assert_eq!(clip_grad_norm(&mut g, 0.0), global_norm(&g));
    }
}
