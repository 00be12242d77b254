use crate::error::{AutodiffError, Result};
use crate::params::{GradSet, ParameterSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Exponential learning-rate decay from `start` to `end` over `horizon` steps,
/// constant afterwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            start: lr,
            end: lr,
            horizon: 1,
        }
    }

    pub fn lr(&self, step: u64) -> f64 {
        let frac = step.min(self.horizon) as f64 / self.horizon.max(1) as f64;
        self.start * (self.end / self.start).powf(frac)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: LrSchedule,
}

impl AdamConfig {
    pub fn new(schedule: LrSchedule) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule,
        }
    }
}

/// First/second moment estimates for one [`ParameterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParameterSet<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape().to_vec()))
                .collect()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Applies one bias-corrected Adam update and returns the learning rate used.
    pub fn step(
        &mut self,
        config: &AdamConfig,
        params: &mut ParameterSet<T>,
        grads: &GradSet<T>,
    ) -> Result<f64> {
        if grads.grads.len() != params.len() || self.m.len() != params.len() {
            return Err(AutodiffError::ParameterCount {
                expected: params.len(),
                got: grads.grads.len(),
            });
        }
        for (p, g) in params.iter().zip(&grads.grads) {
            match g {
                None => return Err(AutodiffError::MissingGradient(p.name.clone())),
                Some(g) if g.shape() != p.value.shape() => {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "adam_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    })
                }
                Some(_) => {}
            }
        }
        let lr = config.schedule.lr(self.step);
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - config.beta1.powi(t);
        let bc2 = 1.0 - config.beta2.powi(t);
        let (b1, b2) = (T::c(config.beta1), T::c(config.beta2));
        let (one, eps) = (T::one(), T::c(config.eps));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let g = g.as_ref().expect("checked above").data();
            let (pd, md, vd) = (p.value.data_mut(), m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                md[j] = b1 * md[j] + (one - b1) * g[j];
                vd[j] = b2 * vd[j] + (one - b2) * g[j] * g[j];
                pd[j] = pd[j] - step_size * md[j] / ((vd[j] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(lr)
    }
}
