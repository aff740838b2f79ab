use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Adam with bias correction. Moments are kept per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<R> {
    pub config: AdamConfig,
    m: Vec<Vec<R>>,
    v: Vec<Vec<R>>,
    t: u64,
}

impl<R: Real> Adam<R> {
    pub fn new(config: AdamConfig, params: &[Tensor<R>]) -> Self {
        Adam {
            config,
            m: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![R::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn from_state(config: AdamConfig, m: Vec<Vec<R>>, v: Vec<Vec<R>>, t: u64) -> Self {
        Adam { config, m, v, t }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn moments(&self) -> (&[Vec<R>], &[Vec<R>]) {
        (&self.m, &self.v)
    }

    /// One update of every parameter from explicit gradients. `None`
    /// gradients count as zero.
    pub fn step_with(&mut self, params: &mut [Tensor<R>], grads: &[Option<&[R]>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::dim(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let n = p.numel();
            if self.m[i].len() != n || g.is_some_and(|g| g.len() != n) {
                return Err(Error::dim(format!("adam: shape mismatch on parameter {i}")));
            }
        }
        self.t += 1;
        let c = self.config;
        let (b1, b2) = (R::of(c.beta1), R::of(c.beta2));
        let bc1 = R::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = R::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr, eps) = (R::of(lr), R::of(c.eps));
        let one = R::one();
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = grads[i].map_or(R::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Update using the gradients stored on the parameter tensors.
    pub fn step(&mut self, params: &mut [Tensor<R>]) -> Result<()> {
        self.step_lr(params, self.config.lr)
    }

    pub fn step_lr(&mut self, params: &mut [Tensor<R>], lr: f64) -> Result<()> {
        let grads: Vec<Option<Vec<R>>> = params.iter().map(|p| p.grad().map(<[R]>::to_vec)).collect();
        let refs: Vec<Option<&[R]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.step_with(params, &refs, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        let mut adam = Adam::new(AdamConfig::default(), &p);
        for _ in 0..3 {
            adam.step_with(&mut p, &[Some(&[0.0, 0.0, 0.0])], 0.1).unwrap();
        }
        assert_eq!(p[0].data(), before[0].data());
        assert_eq!(adam.steps(), 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; bias-corrected both become 1 -> step = lr / (1 + eps).
        let mut p = vec![Tensor::<f64>::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &p);
        adam.step_with(&mut p, &[Some(&[1.0])], 0.1).unwrap();
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p[0].item() - want).abs() < 1e-15);
    }

    #[test]
    fn identical_inputs_stay_identical() {
        let init = Tensor::<f32>::from_f64(&[4], &[0.3, -0.1, 0.7, 2.0]).unwrap();
        let mut a = vec![init.clone()];
        let mut b = vec![init];
        let mut oa = Adam::new(AdamConfig::default(), &a);
        let mut ob = Adam::new(AdamConfig::default(), &b);
        for k in 0..10 {
            let g = [k as f32 * 0.1, -0.2, 0.05, 1.0];
            oa.step_with(&mut a, &[Some(&g)], 1e-2).unwrap();
            ob.step_with(&mut b, &[Some(&g)], 1e-2).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(&[2])];
        let mut adam = Adam::new(AdamConfig::default(), &p);
        assert!(matches!(
            adam.step_with(&mut p, &[Some(&[1.0, 2.0, 3.0])], 0.1),
            Err(Error::Dimension(_))
        ));
        assert_eq!(adam.steps(), 0);
    }
}
