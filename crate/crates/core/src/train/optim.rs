//! Adam optimizer over a model's named parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::Slot;
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and epsilon be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one pair per parameter, in the
/// model's visit order.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub config: AdamConfig,
    /// Number of steps taken.
    pub t: u64,
    pub moments: Vec<Moments<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T: Real> {
    pub name: String,
    pub m: Tensor4<T>,
    pub v: Tensor4<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            t: 0,
            moments: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients. Parameters
    /// without a gradient buffer are treated as having a zero gradient.
    pub fn step(&mut self, model: &mut Model<T>) -> Result<()> {
        if self.moments.is_empty() {
            model.visit_ref(&mut |name, p, slot| {
                if slot == Slot::Param {
                    self.moments.push(Moments {
                        name: name.to_string(),
                        m: Tensor4::zeros(p.shape()),
                        v: Tensor4::zeros(p.shape()),
                    });
                }
            });
        }
        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut index = 0;
        let mut mismatch = None;
        let moments = &mut self.moments;
        model.visit(&mut |name, p, slot| {
            if slot != Slot::Param || mismatch.is_some() {
                return;
            }
            let Some(mo) = moments.get_mut(index) else {
                mismatch = Some(name.to_string());
                return;
            };
            index += 1;
            if mo.name != name || mo.m.shape() != p.shape() {
                mismatch = Some(name.to_string());
                return;
            }
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                // zero gradient: decay the moments, parameter moves only by
                // whatever momentum it already carries
                for (m, v) in mo.m.data_mut().iter_mut().zip(mo.v.data_mut()) {
                    *m = T::from_f64_lossy(c.beta1 * m.as_f64());
                    *v = T::from_f64_lossy(c.beta2 * v.as_f64());
                }
                apply(p.data_mut(), mo, c, bc1, bc2);
                return;
            };
            for ((m, v), &g) in mo.m.data_mut().iter_mut().zip(mo.v.data_mut()).zip(&grad) {
                let g = g.as_f64();
                *m = T::from_f64_lossy(c.beta1 * m.as_f64() + (1.0 - c.beta1) * g);
                *v = T::from_f64_lossy(c.beta2 * v.as_f64() + (1.0 - c.beta2) * g * g);
            }
            apply(p.data_mut(), mo, c, bc1, bc2);
        });
        if let Some(name) = mismatch.or_else(|| (index != moments.len()).then(|| "<end>".to_string())) {
            return Err(Error::invalid(format!(
                "optimizer state does not match the model at parameter {name}"
            )));
        }
        Ok(())
    }
}

fn apply<T: Real>(params: &mut [T], mo: &Moments<T>, c: AdamConfig, bc1: f64, bc2: f64) {
    for ((p, m), v) in params.iter_mut().zip(mo.m.data()).zip(mo.v.data()) {
        let m_hat = m.as_f64() / bc1;
        let v_hat = v.as_f64() / bc2;
        let update = c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        *p = T::from_f64_lossy(p.as_f64() - update);
    }
}
