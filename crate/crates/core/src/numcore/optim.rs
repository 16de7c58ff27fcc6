use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a flat list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, shapes: &[&[usize]]) -> Self {
        Self {
            lr,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Entries with `trainable[i] == false` are
    /// left untouched, moments included.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        trainable: &[bool],
    ) -> Result<()> {
        if params.len() != self.m.len()
            || grads.len() != self.m.len()
            || trainable.len() != self.m.len()
        {
            return Err(Error::Alignment(format!(
                "adam tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            if !trainable[i] {
                continue;
            }
            if params[i].shape() != grads[i].shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: params[i].shape().to_vec(),
                    rhs: grads[i].shape().to_vec(),
                });
            }
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, &g) in grads[i].data().iter().enumerate() {
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}
