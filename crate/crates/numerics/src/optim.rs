use crate::{Gradients, NumericsError, ParamStore, Result, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
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

/// Adaptive-moment optimiser with bias correction.
///
/// Moment buffers are aligned with the registration order of the
/// [`ParamStore`] the optimiser was created for.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update. Every gradient is checked before any parameter moves, so
    /// a non-finite gradient leaves the store untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(NumericsError::InvalidArgument {
                op: "adam_step",
                msg: format!(
                    "optimizer tracks {} tensors but store has {}",
                    self.m.len(),
                    params.len()
                ),
            });
        }
        for id in params.ids() {
            if let Some(g) = grads.get(id) {
                if g.shape() != params.get(id).shape() {
                    return Err(NumericsError::ShapeMismatch {
                        op: "adam_step",
                        lhs: params.get(id).shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                if !g.is_finite() {
                    return Err(NumericsError::NonFiniteGradient(params.name(id).to_string()));
                }
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in params.ids() {
            let Some(g) = grads.get(id) else {
                // No gradient: moments still decay.
                for x in self.m[id.0].data_mut() {
                    *x *= beta1;
                }
                for x in self.v[id.0].data_mut() {
                    *x *= beta2;
                }
                apply(params.get_mut(id), &self.m[id.0], &self.v[id.0], lr, bc1, bc2, eps);
                continue;
            };
            let m = self.m[id.0].data_mut();
            for (m, g) in m.iter_mut().zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
            }
            let v = self.v[id.0].data_mut();
            for (v, g) in v.iter_mut().zip(g.data()) {
                *v = beta2 * *v + (1.0 - beta2) * g * g;
            }
            apply(params.get_mut(id), &self.m[id.0], &self.v[id.0], lr, bc1, bc2, eps);
        }
        Ok(())
    }
}

fn apply(p: &mut Tensor, m: &Tensor, v: &Tensor, lr: f64, bc1: f64, bc2: f64, eps: f64) {
    for ((p, m), v) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}
