//! Adam optimizer over named parameter maps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Adam with bias correction. Moment state is keyed by parameter name and
/// persists for the lifetime of the optimizer instance; adaptation lanes that
/// need independent trajectories own one instance each.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step_count
    }

    /// Apply one update to every parameter present in `grads`. Parameters are
    /// replaced by fresh tensors; missing gradient entries are an error.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor>,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get(name).ok_or_else(|| {
                Error::InvalidArgument(format!("gradient for unknown parameter {name}"))
            })?;
            if grad.len() != param.len() {
                return Err(Error::DataLength {
                    shape: param.shape().to_vec(),
                    len: grad.len(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let mut next = param.to_vec();
            for i in 0..grad.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            params.insert(name.clone(), Tensor::new(param.shape().to_vec(), next)?);
        }
        Ok(())
    }
}
