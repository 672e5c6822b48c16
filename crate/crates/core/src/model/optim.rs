use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Maximum global gradient norm; `None` disables clipping.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

/// Adam with bias-corrected moments and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
    step: u64,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let shapes: Vec<Vec<usize>> = params.into_iter().map(|p| p.shape().to_vec()).collect();
        let zeros = |s: &Vec<usize>| vec![0.0; s.iter().product()];
        Self {
            cfg,
            first: shapes.iter().map(zeros).collect(),
            second: shapes.iter().map(zeros).collect(),
            shapes,
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.second
    }

    /// Clip `grads` then apply one update to `params`. Returns the global
    /// gradient norm measured before clipping.
    pub fn step(&mut self, params: &mut [&mut Tensor], mut grads: Vec<Tensor>) -> Result<f64> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, shape) in self.shapes.iter().enumerate() {
            if params[i].shape() != shape.as_slice() || grads[i].shape() != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "tensor {i}: expected {shape:?}, got param {:?} and grad {:?}",
                    params[i].shape(),
                    grads[i].shape()
                )));
            }
        }
        let norm = match self.cfg.clip {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(&grads)
            .zip(self.first.iter_mut().zip(self.second.iter_mut()))
        {
            for (((p, &g), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * g;
                *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
}

/// Rescale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before rescaling.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let mut p = scalar(0.7);
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], vec![scalar(0.0)]).unwrap();
        assert_eq!(p.data(), &[0.7]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = 1, v̂ = 1 after bias correction, so Δ = lr / (1 + eps).
        let mut p = scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        adam.step(&mut [&mut p], vec![scalar(1.0)]).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-18);
    }

    #[test]
    fn clips_to_unit_norm() {
        let mut grads = vec![
            Tensor::vector(vec![6.0, 0.0]).unwrap(),
            Tensor::vector(vec![0.0, 8.0]).unwrap(),
        ];
        let before = clip_global_norm(&mut grads, 1.0);
        assert_eq!(before, 10.0);
        let after = global_norm(&grads);
        assert!(after <= 1.0 + 1e-12 && after > 1.0 - 1e-12);
        assert!((grads[0].data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(grads[0].data()[1], 0.0);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Tensor::vector(vec![0.0, 0.0]).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [&p]);
        let err = adam.step(&mut [&mut p], vec![scalar(1.0)]);
        assert!(matches!(err, Err(Error::Shape(_))));
        assert_eq!(adam.step_count(), 0);
    }
}
