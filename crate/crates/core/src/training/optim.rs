use crate::error::{Error, Result};
use crate::nn::{ParamGroup, ParamStore};

/// Learning rate after `epoch` full epochs of multiplicative decay.
pub fn decay_lr(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction and one learning rate per [`ParamGroup`].
///
/// Moments are stored in the same order as the parameter store the
/// optimizer was created for.
#[derive(Debug, Clone)]
pub struct Adam {
    pub hyper: AdamHyper,
    pub lr_visual: f64,
    pub lr_rest: f64,
    pub step: u64,
    pub names: Vec<String>,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore, lr_visual: f64, lr_rest: f64, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            lr_visual,
            lr_rest,
            step: 0,
            names: params.iter().map(|p| p.name.clone()).collect(),
            m: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Visual => self.lr_visual,
            ParamGroup::Rest => self.lr_rest,
        }
    }

    /// One update from the parameters' accumulated gradients, each scaled by
    /// `grad_scale` (clipping) and every learning rate by `lr_scale`
    /// (warmup). Missing gradients count as zero.
    pub fn step(&mut self, params: &ParamStore, grad_scale: f64, lr_scale: f64) -> Result<()> {
        if params.len() != self.names.len() || params.iter().zip(&self.names).any(|(p, n)| &p.name != n) {
            return Err(Error::contract("optimizer state does not match the parameter store"));
        }
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.tensor.grad()).collect();
        for (p, g) in params.iter().zip(&grads) {
            if let Some(g) = g {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} is non-finite at index {i}", p.name)));
                }
            }
        }
        self.step += 1;
        let AdamHyper {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.hyper;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            let lr = self.lr(p.group) * lr_scale;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            p.tensor.update_data(|theta| {
                for i in 0..theta.len() {
                    let mut gi = g.as_ref().map_or(0.0, |g| g[i] * grad_scale);
                    if weight_decay != 0.0 {
                        gi += weight_decay * theta[i];
                    }
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// L2 norm of all accumulated gradients.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter_map(|p| p.tensor.grad())
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Factor that brings `norm` down to `max_norm`; 1 when clipping is off
/// (`max_norm == 0`) or not needed.
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / norm
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamBuilder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ParamBuilder::new(&mut s, &mut rng, 1.0);
        b.scope("vision").with_group(ParamGroup::Visual).normal("w", &[2]);
        b.normal("x", &[1]);
        s
    }

    #[test]
    fn decay_examples() {
        assert_eq!(decay_lr(5e-4, 0.8, 0), 5e-4);
        assert!((decay_lr(5e-4, 0.8, 2) - 3.2e-4).abs() < 1e-18);
        assert!((decay_lr(1e-4, 0.8, 2) - 6.4e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let s = store();
        let before: Vec<f64> = s.iter().flat_map(|p| p.tensor.to_vec()).collect();
        for p in s.iter() {
            p.tensor.scale(0.0).sum().backward().unwrap();
        }
        let mut adam = Adam::new(&s, 1e-4, 5e-4, AdamHyper::default());
        adam.step(&s, 1.0, 1.0).unwrap();
        let after: Vec<f64> = s.iter().flat_map(|p| p.tensor.to_vec()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let s = store();
        let x = s.get("x").unwrap().clone();
        let x0 = x.item();
        x.scale(3.0).sum().backward().unwrap(); // g = 3
        let mut adam = Adam::new(&s, 1e-4, 5e-4, AdamHyper::default());
        adam.step(&s, 1.0, 1.0).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let expected = x0 - 5e-4 * 3.0 / (3.0 + 1e-8);
        assert!((x.item() - expected).abs() < 1e-15);
    }

    #[test]
    fn groups_use_their_own_rates() {
        let s = store();
        let adam = Adam::new(&s, 1e-4, 5e-4, AdamHyper::default());
        let groups: Vec<_> = s.iter().map(|p| adam.lr(p.group)).collect();
        assert_eq!(groups, [1e-4, 5e-4]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let s = store();
        let x = s.get("x").unwrap();
        x.scale(f64::INFINITY).sum().backward().unwrap();
        let mut adam = Adam::new(&s, 1e-4, 5e-4, AdamHyper::default());
        assert!(matches!(adam.step(&s, 1.0, 1.0), Err(Error::NonFinite(_))));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn clipping() {
        assert_eq!(clip_scale(10.0, 5.0), 0.5);
        assert_eq!(clip_scale(1.0, 5.0), 1.0);
        assert_eq!(clip_scale(10.0, 0.0), 1.0);
    }
}
