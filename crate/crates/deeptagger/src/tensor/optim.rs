//! First-order optimizers over flat parameter lists.
//!
//! Parameters are an ordered slice of tensors; gradients arrive as an
//! aligned slice of options. A `None` gradient means the parameter was not
//! touched this step (for example the MLM head during supervised stages)
//! and its state is left alone.

use super::Tensor;
use crate::{Error, Result};

/// Plain SGD: `w -= lr * g`.
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        Sgd { lr }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        check_aligned(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= self.lr * gv;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied before the Adam update.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Adam with bias correction and optional decoupled weight decay.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) -> Result<()> {
        check_aligned(params, grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps, weight_decay } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gv), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
            {
                if weight_decay > 0.0 {
                    *w -= lr * weight_decay * *w;
                }
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn check_aligned(params: &[Tensor], grads: &[Option<Tensor>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Config(format!(
            "optimizer got {} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        let Some(g) = g else { continue };
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "optimizer_step",
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "optimizer_step" });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_matches_hand_value() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Some(Tensor::scalar(2.0))];
        let mut sgd = Sgd::new(0.1);
        sgd.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_roughly_lr_against_the_gradient() {
        // With bias correction, step one is lr * g / (|g| + eps') regardless
        // of gradient magnitude, i.e. close to lr in the gradient direction.
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Some(Tensor::scalar(17.0))];
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..AdamConfig::default() });
        adam.step(&mut params, &grads).unwrap();
        assert!((params[0].data()[0] + 0.01).abs() < 1e-6, "{}", params[0].data()[0]);
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize (w - 3)^2; gradient is 2 (w - 3).
        let mut params = vec![Tensor::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
        for _ in 0..200 {
            let w = params[0].data()[0];
            let grads = vec![Some(Tensor::scalar(2.0 * (w - 3.0)))];
            adam.step(&mut params, &grads).unwrap();
        }
        let w = params[0].data()[0];
        assert!((w - 3.0).abs() < 0.1, "ended at {w}");
    }

    #[test]
    fn missing_gradient_leaves_parameter_untouched() {
        let mut params = vec![Tensor::scalar(5.0), Tensor::scalar(7.0)];
        let grads = vec![None, Some(Tensor::scalar(1.0))];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params[0].data()[0], 5.0);
        assert!(params[1].data()[0] < 7.0);
    }

    #[test]
    fn non_finite_gradient_aborts_the_step() {
        let mut params = vec![Tensor::scalar(1.0)];
        let grads = vec![Some(Tensor::scalar(f64::NAN))];
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "optimizer_step" }));
        assert_eq!(params[0].data()[0], 1.0);
    }

    #[test]
    fn gradient_shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::zeros(vec![2, 2])];
        let grads = vec![Some(Tensor::zeros(vec![2, 3]))];
        let mut sgd = Sgd::new(0.1);
        assert!(matches!(
            sgd.step(&mut params, &grads),
            Err(Error::ShapeMismatch { op: "optimizer_step", .. })
        ));
    }
}
