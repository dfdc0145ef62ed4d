//! Adaptive-moment gradient descent with decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay coefficient applied directly to the parameters.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        OptimizerState { config, m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update over all parameters. `params[i]` and `grads[i]` must stay
    /// shape-congruent with the tensors used at construction.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam_step: expected {} parameter/gradient pairs, got {}/{}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if !p.same_shape(g) || !p.same_shape(m) {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left_rows: p.rows(),
                    left_cols: p.cols(),
                    right_rows: g.rows(),
                    right_cols: g.cols(),
                });
            }
            let pv = p.values_mut();
            let gv = g.values();
            let mv = m.values_mut();
            let vv = v.values_mut();
            for i in 0..pv.len() {
                mv[i] = c.beta1 * mv[i] + (1.0 - c.beta1) * gv[i];
                vv[i] = c.beta2 * vv[i] + (1.0 - c.beta2) * gv[i] * gv[i];
                let m_hat = mv[i] / bc1;
                let v_hat = vv[i] / bc2;
                pv[i] -= c.learning_rate * (m_hat / (v_hat.sqrt() + c.epsilon));
                pv[i] -= c.learning_rate * c.weight_decay * pv[i];
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_fixed_point() {
        let mut p = Tensor::from_rows(&[vec![1.0, -2.0, 3.0]]).unwrap();
        let g = Tensor::zeros(1, 3);
        let before = p.clone();
        let mut opt = OptimizerState::new(AdamConfig::default(), &[&p]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn single_step_descends_quadratic() {
        // f(x) = x^2 from x = 1, lr = 0.1: |x| must decrease
        let mut x = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&x]);
        let g = Tensor::from_rows(&[vec![2.0]]).unwrap();
        opt.step(&mut [&mut x], &[&g]).unwrap();
        assert!(x.values()[0].abs() < 1.0);
    }

    #[test]
    fn converges_on_least_squares() {
        // min ||A x - b||^2 for a fixed 3x3 system; 2000 steps reach < 1e-6
        let a = Tensor::from_rows(&[
            vec![2.0, 0.5, -0.3],
            vec![0.1, 1.5, 0.4],
            vec![-0.2, 0.3, 1.1],
        ])
        .unwrap();
        let b = Tensor::from_rows(&[vec![1.0], vec![-0.5], vec![0.25]]).unwrap();
        let mut x = Tensor::zeros(3, 1);
        let cfg = AdamConfig { learning_rate: 0.05, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&x]);
        let mut loss = 0.0;
        for _ in 0..2000 {
            let r = a.matmul(&x).unwrap().sub(&b).unwrap();
            loss = r.values().iter().map(|v| v * v).sum();
            let grad = a.transpose().matmul(&r).unwrap().scale(2.0);
            opt.step(&mut [&mut x], &[&grad]).unwrap();
        }
        assert!(loss < 1e-6, "final loss {loss}");
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut p = Tensor::from_rows(&[vec![1.0]]).unwrap();
        let g = Tensor::zeros(1, 1);
        let cfg = AdamConfig { learning_rate: 0.01, weight_decay: 0.1, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&p]);
        opt.step(&mut [&mut p], &[&g]).unwrap();
        assert!((p.values()[0] - (1.0 - 0.01 * 0.1)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::zeros(2, 2);
        let g = Tensor::zeros(1, 4);
        let mut opt = OptimizerState::new(AdamConfig::default(), &[&p]);
        assert!(opt.step(&mut [&mut p], &[&g]).is_err());
    }
}
