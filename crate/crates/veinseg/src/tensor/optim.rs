//! Parameter update rules: plain SGD for deterministic unit tests, Adam as
//! the training default.

use super::{Element, Gradients, ParamSet, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    step: u64,
    beta1: T,
    beta2: T,
    eps: T,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Element> Optimizer<T> {
    pub fn new(kind: OptimizerKind, params: &ParamSet<T>) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => {
                let zeros: Vec<Tensor<T>> = params
                    .iter()
                    .map(|(_, e)| Tensor::zeros(e.value.shape().to_vec()))
                    .collect();
                (zeros.clone(), zeros)
            }
        };
        Optimizer {
            kind,
            step: 0,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            m,
            v,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update. Non-trainable entries (running statistics) are
    /// skipped. Gradients must line up with the parameter set.
    pub fn step(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &Gradients<T>,
        learning_rate: T,
    ) -> Result<()> {
        if learning_rate <= T::zero() {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if grads.by_param.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "gradient count {} does not match parameter count {}",
                grads.by_param.len(),
                params.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (i, entry) in params.entries_mut().enumerate() {
                    if !entry.trainable {
                        continue;
                    }
                    let g = &grads.by_param[i];
                    entry.value.require_same_shape(g, &entry.name)?;
                    entry.value.axpy(-learning_rate, g)?;
                }
            }
            OptimizerKind::Adam => {
                let b1 = self.beta1;
                let b2 = self.beta2;
                let eps = self.eps;
                let t = self.step as i32;
                let bc1 = T::one() - b1.powi(t);
                let bc2 = T::one() - b2.powi(t);
                for (i, entry) in params.entries_mut().enumerate() {
                    if !entry.trainable {
                        continue;
                    }
                    let g = &grads.by_param[i];
                    entry.value.require_same_shape(g, &entry.name)?;
                    let m = self.m[i].data_mut();
                    let v = self.v[i].data_mut();
                    let p = entry.value.data_mut();
                    for j in 0..p.len() {
                        let gj = g.data()[j];
                        m[j] = b1 * m[j] + (T::one() - b1) * gj;
                        v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] -= learning_rate * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
