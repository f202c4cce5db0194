//! NAdam (Adam with Nesterov momentum).
//!
//! Update for step `t` (1-based) with gradient `g`:
//!
//! ```text
//! m = b1 m + (1 - b1) g
//! v = b2 v + (1 - b2) g^2
//! m_hat = m / (1 - b1^t)
//! v_hat = v / (1 - b2^t)
//! theta -= lr (b1 m_hat + (1 - b1) g / (1 - b1^t)) / (sqrt(v_hat) + eps)
//! ```
//!
//! This is the variant without the momentum-decay schedule.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NadamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for NadamConfig {
    fn default() -> Self {
        NadamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Nadam {
    config: NadamConfig,
    step: u64,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
}

impl Nadam {
    pub fn new(config: NadamConfig) -> Result<Self> {
        validate_lr(config.learning_rate)?;
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Parameter("betas must lie in [0, 1)".into()));
        }
        if !(config.epsilon > 0.0) {
            return Err(Error::Parameter("epsilon must be positive".into()));
        }
        Ok(Nadam {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    /// Changes the learning rate for subsequent steps; moments are kept.
    pub fn set_learning_rate(&mut self, lr: f64) -> Result<()> {
        validate_lr(lr)?;
        self.config.learning_rate = lr;
        Ok(())
    }

    pub fn config(&self) -> NadamConfig {
        self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Second-moment estimate of parameter `index`, if that slot exists.
    pub fn second_moment(&self, index: usize) -> Option<&[f32]> {
        self.second_moment.get(index).map(Vec::as_slice)
    }

    /// Applies one update in place, in slice order. Non-finite gradients
    /// reject the whole step and leave parameters and state untouched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(shape_err!(
                    "parameter {i}: shape {:?} but gradient {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {i} contains NaN or Inf; step rejected"
                )));
            }
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.len() != p.len())
        {
            return Err(shape_err!("parameter set changed between optimizer steps"));
        }

        self.step += 1;
        let NadamConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            epsilon: eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);

        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.first_moment.iter_mut().zip(self.second_moment.iter_mut()))
        {
            for (((theta, &g), m), v) in param
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g as f64;
                let m_new = b1 * *m as f64 + (1.0 - b1) * g;
                let v_new = b2 * *v as f64 + (1.0 - b2) * g * g;
                let m_hat = m_new / c1;
                let v_hat = v_new / c2;
                let update = lr * (b1 * m_hat + (1.0 - b1) * g / c1) / (v_hat.sqrt() + eps);
                *m = m_new as f32;
                *v = v_new as f32;
                *theta = (*theta as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

fn validate_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(Error::Parameter(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    Ok(())
}
