use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    first: Vec<Tensor<f32>>,
    second: Vec<Tensor<f32>>,
    step: u64,
}

impl OptimState {
    pub fn new(config: AdamConfig, params: &[&Tensor<f32>]) -> Self {
        let zeros = |p: &&Tensor<f32>| Tensor::zeros(p.shape());
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `lr` overrides the configured step
    /// size so schedules can live outside the optimizer.
    pub fn adam_step(
        &mut self,
        params: &mut [&mut Tensor<f32>],
        grads: &[Tensor<f32>],
        lr: f32,
    ) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "adam: {} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                self.first.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::Shape(format!(
                    "adam slot {i}: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &gr), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *m = beta1 * *m + (1.0 - beta1) * gr;
                *v = beta2 * *v + (1.0 - beta2) * gr * gr;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor<f32> {
        Tensor::scalar(v)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let mut st = OptimState::new(AdamConfig::default(), &[&p]);
        st.adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_step_size() {
        let mut p = scalar(1.0);
        let mut st = OptimState::new(AdamConfig::default(), &[&p]);
        st.adam_step(&mut [&mut p], &[scalar(1.0)], 0.1).unwrap();
        // m̂ = v̂ = 1 after bias correction
        assert!((p.item() - 0.9).abs() < 1e-6, "{}", p.item());
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut x = scalar(0.0);
        let mut st = OptimState::new(AdamConfig::default(), &[&x]);
        for _ in 0..500 {
            let g = scalar(2.0 * (x.item() - 3.0));
            st.adam_step(&mut [&mut x], &[g], 0.05).unwrap();
        }
        assert!((x.item() - 3.0).abs() < 0.05, "x = {}", x.item());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        let mut st = OptimState::new(AdamConfig::default(), &[&p]);
        let err = st.adam_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert_eq!(st.step_count(), 0);
    }
}
