//! Adam optimiser with bias correction, plus the halving learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::layers::ParamList;
use crate::tensor::{Element, Tape};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimiser state: first/second moment estimates per parameter and the
/// shared step count. Regularisation reaches the parameters through the
/// loss gradient, not as decoupled decay.
pub struct Adam<E: Element> {
    cfg: AdamConfig,
    step: u64,
    moments: Vec<(Vec<E>, Vec<E>)>,
}

impl<E: Element> Adam<E> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over `params` with the given learning rate, consuming the
    /// gradients currently accumulated on the tape. A parameter without a
    /// gradient is treated as having a zero one. Non-finite gradients abort
    /// with a diagnostic naming the parameter.
    pub fn step(&mut self, tape: &mut Tape<E>, params: &ParamList, lr: f64) -> Result<()> {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(_, v)| {
                    let n = tape.value(*v).numel();
                    (vec![E::ZERO; n], vec![E::ZERO; n])
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(Error::Train(format!(
                "optimiser state built for {} parameters, got {}",
                self.moments.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let (b1, b2) = (E::from_f64(self.cfg.beta1), E::from_f64(self.cfg.beta2));
        let (ob1, ob2) = (
            E::from_f64(1.0 - self.cfg.beta1),
            E::from_f64(1.0 - self.cfg.beta2),
        );
        let eps = E::from_f64(self.cfg.eps);
        let scale = E::from_f64(lr / bc1);
        let inv_bc2 = E::from_f64(1.0 / bc2);
        for (i, (name, var)) in params.iter().enumerate() {
            if let Some(g) = tape.grad(*var) {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of parameter `{name}` is {bad}"
                    )));
                }
            }
            let (m, v) = &mut self.moments[i];
            // Split borrow: gradient is read before the value is mutated.
            let grad: Option<Vec<E>> = tape.grad(*var).map(|g| g.to_vec());
            let data = tape.value_mut(*var).data_mut();
            match grad {
                Some(g) => {
                    for k in 0..data.len() {
                        m[k] = b1 * m[k] + ob1 * g[k];
                        v[k] = b2 * v[k] + ob2 * g[k] * g[k];
                        let vhat = v[k] * inv_bc2;
                        data[k] -= scale * m[k] / (vhat.sqrt() + eps);
                    }
                }
                None => {
                    for k in 0..data.len() {
                        m[k] = b1 * m[k];
                        v[k] = b2 * v[k];
                        let vhat = v[k] * inv_bc2;
                        data[k] -= scale * m[k] / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// The halving schedule: `lr(epoch) = max(initial · 2^(−⌊epoch/period⌋), floor)`.
pub fn scheduled_lr(initial: f64, epoch: usize, halving_period: usize, floor: f64) -> f64 {
    let halvings = (epoch / halving_period.max(1)) as i32;
    (initial * 0.5f64.powi(halvings)).max(floor)
}
